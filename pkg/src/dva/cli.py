"""``dva`` command line: train / predict / eval / gradcheck / synth.

Exit codes: 0 success, 2 input or configuration error, 3 corrupt or
mismatched weight/data file, 4 numerical failure (non-finite loss, failed
gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DvaError, InputError, IntegrityError, NumericalError

log = logging.getLogger("dva")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")
CHECKPOINT_ITER = "meta.iteration"
VELOCITY_PREFIX = "vel."


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split("-")) if "-" in text else (int(text),) * 2
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO-HI, got {text!r}") from None
    return lo, hi


def _emd_res(text: str):
    return None if text.lower() == "native" else _dims(text)


@contextlib.contextmanager
def _thread_limit(n: int | None):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _file_logging(path: Path) -> logging.Handler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("dva").addHandler(handler)
    return handler


# ---------------------------------------------------------------------------
# train


def _checkpoint_entries(state, velocity, iteration: int) -> dict:
    entries = dict(state.params)
    entries.update({VELOCITY_PREFIX + k: v for k, v in velocity.items()})
    entries[CHECKPOINT_ITER] = np.array([float(iteration)])
    return entries


def _load_checkpoint(path, spec):
    from . import network as net
    from . import weights as wfile

    entries = wfile.read_entries(path)
    if CHECKPOINT_ITER not in entries:
        raise IntegrityError(f"{path}: not a checkpoint (no {CHECKPOINT_ITER} entry)")
    iteration = int(entries.pop(CHECKPOINT_ITER)[0])
    velocity = {k[len(VELOCITY_PREFIX):]: v for k, v in entries.items() if k.startswith(VELOCITY_PREFIX)}
    params = {k: v for k, v in entries.items() if not k.startswith(VELOCITY_PREFIX)}
    net.check_entries(spec, params)
    return net.NetworkState(spec, params), velocity, iteration


def _truncate_curve(path: Path, start_iter: int) -> None:
    """Drop rows at or beyond ``start_iter`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if ln.split(",", 1)[0].strip().isdigit()
                        and int(ln.split(",", 1)[0]) < start_iter]
    path.write_text("".join(kept))


def cmd_train(args, overrides) -> int:
    from . import data
    from . import network as net
    from . import objective as obj
    from . import weights as wfile
    from .config import RunConfig

    cfg = RunConfig.load(args.config, overrides)
    if args.out:
        cfg.set("out", args.out)
    if not cfg["data.manifest"]:
        raise ConfigError("data.manifest is not set (use --data.manifest=PATH)")
    spec = cfg.net_spec()
    tcfg = cfg.train_config()
    pcfg = cfg.prepare_config()

    run = Path(cfg["out"])
    for sub in ("weights", "maps", "logs"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    handler = _file_logging(run / "logs" / "train.log")
    try:
        cfg.write(run / "resolved.config")
        manifest = data.load_manifest(cfg["data.manifest"])
        train_records = manifest.split(cfg["data.train_split"])
        if not train_records:
            raise InputError(f"{manifest.path}: no records in split {cfg['data.train_split']!r}")
        samples = [data.prepare(r, pcfg) for r in train_records]
        val_records = manifest.split(cfg["data.val_split"]) if cfg["data.val_split"] else []
        validation = [data.prepare(r, pcfg) for r in val_records] or None
        log.info("training on %d images (%d validation), backend %s", len(samples), len(val_records),
                 __import__("dva.kernels", fromlist=["BACKEND"]).BACKEND)

        state = velocity = None
        start_iter = 0
        if args.resume:
            state, velocity, start_iter = _load_checkpoint(args.resume, spec)
            log.info("resuming from %s at iteration %d", args.resume, start_iter)
        loss_csv = run / "loss.csv"
        if start_iter:
            _truncate_curve(loss_csv, start_iter)
        elif loss_csv.exists():
            loss_csv.unlink()
        writer = obj.CurveWriter(loss_csv, spec.M)

        def on_checkpoint(it, st, vel):
            path = run / "weights" / f"ckpt_{it:06d}.dvaw"
            wfile.write_entries(path, _checkpoint_entries(st, vel, it))
            log.info("checkpoint %s", path)

        pretrained = cfg["net.pretrained"] or None
        with _thread_limit(args.threads):
            result = obj.train(spec, samples, tcfg, state=state, velocity=velocity, start_iter=start_iter,
                               validation=validation, pretrained=pretrained, on_row=writer,
                               on_checkpoint=on_checkpoint, checkpoint_every=cfg["train.checkpoint_every"])
        on_checkpoint(tcfg.max_iters, result.state, result.velocity)
        final = run / "weights" / "final.dvaw"
        net.save_weights(result.state, final)
        curve = result.loss_curve
        if curve:
            print(f"iterations {curve[0]['iter']}..{curve[-1]['iter']}: combined loss "
                  f"{curve[0]['combined']:.6g} -> {curve[-1]['combined']:.6g}")
        print(f"weights: {final} (checksum {wfile.checksum_of_file(final):016x})")
        return 0
    finally:
        logging.getLogger("dva").removeHandler(handler)
        handler.close()


# ---------------------------------------------------------------------------
# predict


def _predict_config(args, weights: Path):
    from .config import RunConfig

    path = args.config
    if path is None:
        for candidate in (weights.parent / "resolved.config", weights.parent.parent / "resolved.config"):
            if candidate.exists():
                path = candidate
                break
    return RunConfig.load(path, [])


def _input_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            raise InputError(f"{path}: no images found")
        return found
    raise InputError(f"{path}: no such file or directory")


def cmd_predict(args, overrides) -> int:
    from . import data
    from . import network as net

    if overrides:
        raise ConfigError(f"unrecognised arguments: {' '.join(overrides)}")
    weights = Path(args.weights)
    cfg = _predict_config(args, weights)
    state = net.load_weights(weights, fusion=cfg["net.fusion"], fusion_activation=cfg["net.fusion_activation"],
                             deep_supervision=cfg["net.deep_supervision"])
    pcfg = cfg.prepare_config()
    if args.max_side:
        pcfg.max_side = args.max_side
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = _input_images(Path(args.input))
    with _thread_limit(args.threads):
        for path in images:
            x, dims = data.prepare_image(path, pcfg)
            trace = net.forward(state, x)
            fused = np.clip(data.resize_map(trace.fused_map[0, 0], dims), 0.0, 1.0)
            data.write_saliency(fused, out / f"{path.stem}_sal.png")
            if args.emit_branches:
                for m, s in enumerate(trace.branch_maps, start=1):
                    branch = np.clip(data.resize_map(s[0, 0], dims), 0.0, 1.0)
                    data.write_saliency(branch, out / f"{path.stem}_branch{m}.png")
    print(f"wrote {len(images)} prediction(s) to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, overrides) -> int:
    from . import data
    from . import metrics as mt

    if overrides:
        raise ConfigError(f"unrecognised arguments: {' '.join(overrides)}")
    if args.metrics:
        try:
            names = tuple(mt.metric_name(n) for n in args.metrics.split(",") if n.strip())
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not names:
            raise ConfigError("empty metric list")
    else:
        names = mt.METRICS
    options = mt.EvalOptions(metrics=names, emd_res=args.emd_res, borji_splits=args.borji_splits,
                             sauc_splits=args.sauc_splits, seed=args.seed)
    pred = Path(args.pred)
    if not pred.is_dir():
        raise InputError(f"{pred}: prediction directory not found")
    manifest = data.load_manifest(args.manifest)
    out = Path(args.out) if args.out else pred.parent / "metrics.csv"
    with _thread_limit(args.threads):
        result = mt.evaluate_dataset(pred, manifest, options, args.split, csv_path=out)
    if not result.per_image:
        raise InputError(f"{pred}: no predictions match the manifest")
    for name in names:
        print(f"{name:10s} {result.aggregate[name]:.6g}")
    if result.missing:
        print(f"warning: {len(result.missing)} image(s) without prediction skipped", file=sys.stderr)
    print(f"per-image metrics: {out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, overrides) -> int:
    from . import gradcheck as gc

    if overrides:
        raise ConfigError(f"unrecognised arguments: {' '.join(overrides)}")
    if args.profile != "tiny":
        raise ConfigError("finite differences over the full profile are infeasible; use --profile tiny")
    try:
        results, seconds = gc.run_all(args.seed, args.perturb, variants=not args.no_variants)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    failed = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.component:20s} max_rel_error={r.max_rel_error:.3e} coords={r.coords:5d} "
              f"skipped={r.skipped:3d} {status}")
        if not r.ok:
            failed.append(r.component)
    print(f"tolerance {gc.TOLERANCE:g}; {len(results)} checks in {seconds:.1f} s")
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, overrides) -> int:
    from . import data

    if overrides:
        raise ConfigError(f"unrecognised arguments: {' '.join(overrides)}")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if not 0 <= args.val < args.n:
        raise ConfigError("--val must lie in [0, n)")
    manifest = data.synth_dataset(args.out, args.n, args.dims, args.blobs, args.seed, args.sigma, args.val)
    print(f"wrote {len(manifest)} images; manifest {manifest.path}")
    return 0


# ---------------------------------------------------------------------------


def _config_epilog() -> str:
    from .config import FIELDS, format_value

    lines = ["Any config key can be overridden as --key=value, e.g. --train.max_iters=500.", "", "config keys:"]
    for key, f in FIELDS.items():
        lines.append(f"  {key:24s} {f.help} [{format_value(f.default)}]")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dva", description="Multi-level saliency network: train, predict, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a run config", epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", help="run directory (overrides the 'out' key)")
    t.add_argument("--resume", help="checkpoint file from weights/ to continue from")
    t.add_argument("--threads", type=int, help="cap on BLAS threads")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write fused (and optionally per-branch) saliency maps")
    pr.add_argument("--weights", required=True, help="weight file")
    pr.add_argument("--input", required=True, help="image file or directory of images")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--config", help="run config (default: resolved.config next to the weights)")
    pr.add_argument("--emit-branches", action="store_true", help="also write the per-branch maps")
    pr.add_argument("--max-side", type=int, help="override data.max_side")
    pr.add_argument("--threads", type=int, help="cap on BLAS threads")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a directory of predictions against a manifest")
    e.add_argument("--pred", required=True, help="directory holding <id>_sal.png files")
    e.add_argument("--manifest", required=True, help="dataset manifest")
    e.add_argument("--metrics", help="comma-separated subset, e.g. nss,cc (default: all seven)")
    e.add_argument("--emd-res", type=_emd_res, default=(32, 32), help="EMD working grid HxW or 'native'")
    e.add_argument("--sauc-splits", type=int, default=100, help="negative draws for shuffled AUC")
    e.add_argument("--borji-splits", type=int, default=100, help="negative draws for AUC-Borji")
    e.add_argument("--seed", type=int, default=0, help="seed for sampled negatives")
    e.add_argument("--split", help="evaluate only this manifest split")
    e.add_argument("--out", help="CSV path (default: metrics.csv beside the prediction directory)")
    e.add_argument("--threads", type=int, help="cap on BLAS threads")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--profile", default="tiny", choices=("tiny", "full"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-variants", action="store_true", help="skip the ablation-variant network checks")
    g.add_argument("--perturb", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic blob dataset with manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8, help="number of images")
    s.add_argument("--dims", type=_dims, default=(64, 64), help="HxW, multiples of 16")
    s.add_argument("--blobs", type=_range, default=(1, 3), help="blob count range LO-HI")
    s.add_argument("--sigma", type=float, help="ground-truth blur in pixels (default max(h,w)/32)")
    s.add_argument("--val", type=int, default=0, help="how many of the images form the val split")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logger = logging.getLogger("dva")
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setLevel(logging.INFO if args.verbose else logging.WARNING)
    stderr.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    saved = logger.level, logger.propagate
    logger.setLevel(logging.INFO)
    logger.propagate = False
    logger.addHandler(stderr)
    try:
        return args.func(args, extra)
    except DvaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        logger.removeHandler(stderr)
        logger.setLevel(saved[0])
        logger.propagate = saved[1]


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
