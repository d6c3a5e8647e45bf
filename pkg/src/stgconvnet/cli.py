"""Command-line interface: ``stgconvnet <command> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numerical failure (a NaN or infinity showed up).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import gradcheck, learner, mrf, recovery, sampler, tensor

log = logging.getLogger("stgconvnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- run manifest --------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Config snapshot, seed, version, input digests, diagnostics and outputs of one run."""

    def __init__(self, command: str, config: dict, seed: int | None, inputs=()):
        self.data = {"command": command, "version": __version__, "config": config, "seed": seed,
                     "inputs": {str(p): sha256(p) for p in inputs},
                     "diagnostics": [], "outputs": []}

    def add_row(self, row: dict) -> None:
        rows = self.data["diagnostics"]
        if rows and row["iteration"] <= rows[-1]["iteration"]:
            raise ValueError("diagnostic rows must increase in iteration")
        rows.append({k: (float(v) if isinstance(v, np.floating) else v) for k, v in row.items()})

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def write(self, path) -> None:
        tensor._atomic_write(Path(path), json.dumps(self.data, indent=1).encode())


# -- helpers -----------------------------------------------------------------------

def set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("STG_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    import numba
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def load_config(args) -> tuple[learner.TrainConfig, object]:
    if args.config is None:
        raise UsageError("a config file is required (see --emit-template)")
    cfg, net_ref = cfgmod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        cfg = replace(cfg, iterations=args.iterations)
    return cfg, net_ref


def export_u8(video: np.ndarray, path: Path) -> int:
    """Write ``video`` as u8 STV1 after clamping; returns the number of clamped values."""
    u8, clamped = tensor.to_u8(video)
    tensor.write_stv(u8, path, dtype="u8")
    if clamped:
        log.info("%s: clamped %d values to [0, 255]", path, clamped)
    return clamped


def write_table(rows, path: Path | None) -> str:
    """Error table with columns name, ours, mrf_l1, mrf_l2 and an average row."""
    avg = ["Avg"] + [float(np.mean([r[i] for r in rows])) for i in (1, 2, 3)]
    text = io.StringIO()
    text.write(f"{'name':<24}{'ours':>10}{'mrf_l1':>10}{'mrf_l2':>10}\n")
    for r in [*rows, avg]:
        text.write(f"{r[0]:<24}{r[1]:>10.2f}{r[2]:>10.2f}{r[3]:>10.2f}\n")
    if path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "ours", "mrf_l1", "mrf_l2"])
        for r in [*rows, avg]:
            w.writerow([r[0], *(f"{x:.6f}" for x in r[1:])])
        tensor._atomic_write(path, buf.getvalue().encode())
    return text.getvalue()


def _progress(manifest: RunManifest, every: int = 10):
    def cb(_state, row):
        manifest.add_row(row)
        if row["iteration"] % every == 0:
            log.info("iter %d  layers %d  |grad| %.4g  V %.4g", row["iteration"],
                     row["active_layers"], row["grad_norm"], row["value"])
    return cb


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.emit_template:
        sys.stdout.write(cfgmod.template(args.emit_template))
        return EXIT_OK
    cfg, net_ref = load_config(args)
    if not args.videos:
        raise UsageError("train needs at least one input video")
    videos = [tensor.read_stv(p) for p in args.videos]
    spec = cfgmod.resolve_net(net_ref, videos[0].shape[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", learner.config_to_dict(cfg), cfg.seed, args.videos)
    state = learner.train(spec, videos, cfg, checkpoint_dir=out / "checkpoint",
                          callback=_progress(manifest))
    learner.save_checkpoint(state, out / "checkpoint")
    manifest.add_output(out / "checkpoint")
    for m, chain in enumerate(state.chains.chains):
        path = out / f"synth_{m:02d}.stv"
        export_u8(state.stats.inverse(chain), path)
        manifest.add_output(path)
    manifest.write(out / "manifest.json")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    state = learner.load_checkpoint(args.checkpoint)
    cfg = state.config
    shape = state.chains.chains.shape[1:]
    seed = cfg.seed if args.seed is None else args.seed
    eps = state.chains.step_size
    chains = sampler.init_chains(shape, args.count, args.init, seed, cfg.sigma, eps)
    sampler.advance(state.spec, state.params, cfg.model, chains, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("synthesize", {"checkpoint": str(args.checkpoint), "count": args.count,
                                          "steps": args.steps, "init": args.init}, seed,
                           [Path(args.checkpoint) / "params.stp"])
    for m, chain in enumerate(chains.chains):
        raw, u8 = out / f"synth_{m:02d}_pre.stv", out / f"synth_{m:02d}.stv"
        tensor.write_stv(chain, raw)
        export_u8(state.stats.inverse(chain), u8)
        manifest.add_output(raw)
        manifest.add_output(u8)
    manifest.write(out / "manifest.json")
    return EXIT_OK


def _masks_for(args, videos) -> list[np.ndarray]:
    if args.mask and args.occlusion:
        raise UsageError("give either --mask or --occlusion, not both")
    if args.mask:
        if len(args.mask) != len(videos):
            raise UsageError("need one --mask per video")
        return [tensor.as_mask(tensor.read_mask(p), v) for p, v in zip(args.mask, videos)]
    if args.occlusion:
        occ = recovery.OcclusionSpec.parse(args.occlusion)
        rng = np.random.default_rng((args.seed or 0, 4))
        return [recovery.make_mask(v.shape[1:], occ, rng) for v in videos]
    raise UsageError("recover needs --mask or --occlusion")


def cmd_recover(args) -> int:
    cfg, net_ref = load_config(args)
    videos = [tensor.read_stv(p) for p in args.videos]
    truth = [tensor.read_stv(p) for p in args.truth] if args.truth else None
    if truth is not None and len(truth) != len(videos):
        raise UsageError("need one --truth video per input video")
    masks = _masks_for(args, videos)
    # when masks are generated the inputs are clean videos; occlude them here
    occluded = [np.where(m.astype(bool), v, 0.0) for v, m in zip(videos, masks)]
    spec = cfgmod.resolve_net(net_ref, videos[0].shape[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("recover", learner.config_to_dict(cfg), cfg.seed,
                           [*args.videos, *(args.mask or []), *(args.truth or [])])
    state = recovery.train_with_recovery(spec, occluded, masks, cfg, callback=_progress(manifest))
    recovered = state.recovered_raw()
    for m, (rec, mask) in enumerate(zip(recovered, masks)):
        path, mpath = out / f"recovered_{m:02d}.stv", out / f"mask_{m:02d}.stv"
        export_u8(rec, path)
        tensor.write_mask(mask, mpath)
        manifest.add_output(path)
        manifest.add_output(mpath)
    if truth is not None or args.occlusion:
        # generated masks mean the inputs themselves are the ground truth
        refs = truth if truth is not None else videos
        rows = []
        for m, (ref, rec, mask) in enumerate(zip(refs, recovered, masks)):
            rng = np.random.default_rng((cfg.seed, 5, m))
            base = [mrf.mrf_recover(occluded[m], mask, mrf.MrfConfig(potential=p), rng)
                    for p in ("l1", "l2")]
            name = Path(args.videos[m]).stem
            rows.append([name, recovery.recovery_error(ref, rec, mask),
                         *(recovery.recovery_error(ref, b, mask) for b in base)])
        table = write_table(rows, out / "errors.csv")
        sys.stdout.write(table)
        manifest.add_output(out / "errors.csv")
    manifest.write(out / "manifest.json")
    return EXIT_OK


def cmd_inpaint(args) -> int:
    cfg, net_ref = load_config(args)
    video = tensor.read_stv(args.video)
    mask = tensor.as_mask(tensor.read_mask(args.mask), video)
    spec = cfgmod.resolve_net(net_ref, video.shape[0])
    result = recovery.inpaint_background(spec, video, mask, cfg)
    out = Path(args.out)
    manifest = RunManifest("inpaint", learner.config_to_dict(cfg), cfg.seed, [args.video, args.mask])
    export_u8(result, out)
    manifest.add_output(out)
    manifest.write(out.with_suffix(".json"))
    return EXIT_OK


def cmd_baseline(args) -> int:
    video = tensor.read_stv(args.video)
    mask = tensor.as_mask(tensor.read_mask(args.mask), video)
    mcfg = mrf.MrfConfig(potential=args.potential, weight=args.weight, sweeps=args.sweeps,
                         estimate=args.estimate, n=min(args.n, args.sweeps))
    result = mrf.mrf_recover(video, mask, mcfg, np.random.default_rng(args.seed))
    out = Path(args.out)
    export_u8(result, out)
    if args.truth:
        err = recovery.recovery_error(tensor.read_stv(args.truth), result, mask)
        print(f"recovery error ({args.potential}): {err:.4f}")
    manifest = RunManifest("baseline", {"mrf": asdict(mcfg)}, args.seed,
                           [p for p in (args.video, args.mask, args.truth) if p])
    manifest.add_output(out)
    manifest.write(out.with_suffix(".json"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = gradcheck.run_suite(args.nets, args.seed, layers=args.layers, h=args.step,
                              margin=args.margin)
    failed = False
    for op in res.max_rel_error:
        err = res.max_rel_error[op]
        ok = err <= args.tol and res.compared[op] > 0
        failed |= not ok
        print(f"{op:<12} max_rel_error {err:.3e}  compared {res.compared[op]:>6}  "
              f"skipped {res.skipped[op]:>5}  {'ok' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_convert(args) -> int:
    src, dst = Path(args.src), Path(args.dst)
    if src.is_dir():
        tensor.write_stv(tensor.import_frames(src), dst, dtype=args.dtype)
    else:
        video = tensor.read_stv(src)
        tensor.export_frames(video, dst)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stgconvnet",
                                description="Spatial-temporal generative ConvNet for dynamic textures")
    p.add_argument("--threads", type=int, default=None, help="cap worker threads (env STG_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="learn a model and synthesize from it")
    t.add_argument("videos", nargs="*")
    t.add_argument("-c", "--config")
    t.add_argument("-o", "--out", default="run")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--emit-template", metavar="PRESET", help="print a config template and exit")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="sample fresh sequences from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("-o", "--out", default="synth")
    s.add_argument("--count", type=int, default=sampler.DEFAULT_NUM_CHAINS)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--init", choices=("noise", "zeros"), default="noise")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synthesize)

    r = sub.add_parser("recover", help="learn from occluded videos and recover them")
    r.add_argument("videos", nargs="+")
    r.add_argument("-c", "--config")
    r.add_argument("-o", "--out", default="recover")
    r.add_argument("--mask", nargs="+")
    r.add_argument("--occlusion", help="e.g. salt_pepper:0.5:7x7, single_region:60x60, "
                                       "missing_frames:0.5, custom:mask.stv")
    r.add_argument("--truth", nargs="+", help="ground-truth videos for the error table")
    r.add_argument("--seed", type=int)
    r.add_argument("--iterations", type=int)
    r.set_defaults(func=cmd_recover)

    i = sub.add_parser("inpaint", help="fill the mask=0 region of a video")
    i.add_argument("video")
    i.add_argument("--mask", required=True)
    i.add_argument("-c", "--config")
    i.add_argument("-o", "--out", default="inpainted.stv")
    i.add_argument("--seed", type=int)
    i.add_argument("--iterations", type=int)
    i.set_defaults(func=cmd_inpaint)

    b = sub.add_parser("baseline", help="MRF Gibbs recovery")
    b.add_argument("video")
    b.add_argument("--mask", required=True)
    b.add_argument("--truth")
    b.add_argument("-o", "--out", default="baseline.stv")
    b.add_argument("--potential", choices=("l1", "l2"), default="l1")
    b.add_argument("--weight", type=float, default=1.0)
    b.add_argument("--sweeps", type=int, default=100)
    b.add_argument("--estimate", choices=("mean_of_last_n", "last_sample"), default="mean_of_last_n")
    b.add_argument("--n", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_baseline)

    g = sub.add_parser("gradcheck", help="finite-difference check on random tiny nets")
    g.add_argument("--nets", type=int, default=50)
    g.add_argument("--layers", type=int, choices=(1, 2, 3))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--margin", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    cv = sub.add_parser("convert", help="STV1 to a frame directory or back")
    cv.add_argument("src")
    cv.add_argument("dst")
    cv.add_argument("--dtype", choices=("u8", "f32"), default="u8")
    cv.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    t0 = time.time()
    try:
        set_threads(args.threads)
        code = args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (tensor.FormatError, tensor.ShapeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("done in %.1fs", time.time() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
