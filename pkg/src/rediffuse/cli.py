"""Command line: ``rediffuse {gen-data,train,fuse,verify,metrics}``.

Exit codes: 0 success, 2 usage or I/O error, 3 training diverged,
4 checkpoint missing or mismatched, 5 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, dataio, metrics
from .diffusion import make_schedule, sample
from .train import (TrainConfig, TrainingDiverged, config_from_header, state_from_checkpoint,
                    state_to_checkpoint, train)
from .unet import Denoiser, UNetConfig, check_input_size
from .workers import ordered_map

log = logging.getLogger("rediffuse")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_VERIFY = 0, 2, 3, 4, 5
MANIFEST = "manifest.jsonl"


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _jsonl(records) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8")


_NOT_ECHOED = {"func", "verbose", "out", "overwrite", "report", "log"}


def _config_record(command: str, args: argparse.Namespace) -> dict:
    # output locations are left out so identical runs into different places match byte for byte
    cfg = {k: v for k, v in vars(args).items() if k not in _NOT_ECHOED}
    return {"type": "config", "command": command, "version": __version__,
            **{k: str(v) if isinstance(v, Path) else v for k, v in cfg.items()}}


def _pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    if args.size % 2:
        raise CliError(f"--size must be even, got {args.size}")
    if args.count < 1:
        raise CliError("--count must be positive")
    if args.blur_sigma <= 0:
        raise CliError("--blur-sigma must be positive")
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not args.overwrite:
        raise CliError(f"{out} exists and is not an empty directory (use --overwrite)")
    parent = out.absolute().parent
    if not parent.is_dir():
        raise CliError(f"parent directory {parent} does not exist")
    config = _config_record("gen-data", args)
    comment = "rediffuse " + json.dumps(config, sort_keys=True)

    def make(i):
        seed = _pair_seed(args.seed, i)
        return seed, dataio.gen_pair(seed, args.size, args.texture, args.blur_sigma)

    pairs = ordered_map(make, range(args.count))
    try:
        tmp = Path(tempfile.mkdtemp(dir=parent, prefix=f".{out.name}."))
    except OSError as exc:
        raise CliError(f"cannot write to {parent}: {exc}") from None
    try:
        records = [config]
        for i, (seed, p) in enumerate(pairs):
            files = {}
            for key, img in (("gt", p.ground_truth), ("a", p.source_a), ("b", p.source_b), ("mask", p.mask)):
                name = f"{key}_{i}.pgm"
                (tmp / name).write_bytes(dataio.encode_pgm(img, 65535, [comment]))
                files[key] = name
            records.append({"type": "pair", "index": i, "seed": seed, "size": args.size, **files})
        (tmp / MANIFEST).write_bytes(_jsonl(records))
        os.chmod(tmp, 0o755)
        if out.exists():
            old = Path(tempfile.mkdtemp(dir=parent, prefix=f".{out.name}.old."))
            os.replace(out, old / "x")
            os.replace(tmp, out)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, out)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise CliError(f"writing {out} failed: {exc}") from None
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d pairs to %s", args.count, out)
    return EXIT_OK


def load_dataset(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read dataset manifest: {exc}") from None
    try:
        records = [json.loads(x) for x in lines if x.strip()]
        pairs = [r for r in records if r.get("type") == "pair"]
        arrays = {key: np.stack([dataio.read_pgm(directory / r[key]) for r in pairs])[..., None].astype(np.float32)
                  for key in ("gt", "a", "b")}
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"bad dataset in {directory}: {exc}") from None
    if not pairs:
        raise CliError(f"dataset {directory} holds no pairs")
    return arrays["gt"], arrays["a"], arrays["b"]


# ---------------------------------------------------------------------------
# train

def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        if r.get("type") == "epoch" and r["epoch"] <= upto:
            out.append(r)
    return out


def cmd_train(args) -> int:
    gt, a, b = load_dataset(args.data)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".loss.jsonl")
    tcfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed)
    if args.epochs < 0 or args.batch < 1:
        raise CliError("--epochs must be >= 0 and --batch >= 1")
    state = None
    if args.resume:
        try:
            header, tensors = dataio.load_checkpoint(args.resume)
            state, cfg, sched = state_from_checkpoint(header, tensors)
        except OSError as exc:
            raise CliError(f"cannot read checkpoint: {exc}", EXIT_CHECKPOINT) from None
        except dataio.CheckpointError as exc:
            raise CliError(str(exc), EXIT_CHECKPOINT) from None
        previous = _read_log(log_path, state.epoch)
    else:
        try:
            cfg = UNetConfig(base_channels=args.base_ch, m=args.m, depth=args.depth, gn_groups=args.gn_groups,
                             T=args.T, equivariant=not args.plain, head_order=args.head_order,
                             skip_mode=args.skip_mode, dc_anchor=not args.no_dc_anchor)
            sched = make_schedule(args.T, args.beta_start, args.beta_end)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        previous = []
    try:
        check_input_size(gt.shape[1], gt.shape[2], cfg.depth)
    except ValueError as exc:
        raise CliError(str(exc)) from None

    config = _config_record("train", args)
    config["model"] = cfg.to_dict()
    config["schedule"] = sched.params()
    records = [config] + previous

    def save(st):
        header, tensors = state_to_checkpoint(st, cfg, sched, tcfg)
        header["image_size"] = [int(gt.shape[1]), int(gt.shape[2])]
        header["seed"] = args.seed
        dataio.save_checkpoint(out, header, tensors)

    def on_epoch(rec, st):
        records.append({"type": "epoch", "epoch": rec.epoch, "loss": rec.loss, "lr": rec.lr})

    try:
        state = train((gt, a, b), cfg, tcfg, sched, state, on_epoch)
    except TrainingDiverged as exc:
        # parameters in exc.state are from the last completed epoch; moments are not
        exc.state.adam.m.clear()
        exc.state.adam.v.clear()
        save(exc.state)
        dataio.atomic_write_bytes(log_path, _jsonl(records))
        log.error("training diverged: %s; last good checkpoint (epoch %d) kept in %s",
                  exc, exc.state.epoch, out)
        return EXIT_DIVERGED
    except OSError as exc:
        raise CliError(f"writing {out} failed: {exc}") from None
    if state is None:
        raise CliError("nothing to train")
    save(state)
    dataio.atomic_write_bytes(log_path, _jsonl(records))
    log.info("saved %s after %d epochs", out, state.epoch)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse

def _load_model(path):
    try:
        header, tensors = dataio.load_checkpoint(path)
        state, cfg, sched = state_from_checkpoint(header, tensors)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found", EXIT_CHECKPOINT) from None
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None
    except dataio.CheckpointError as exc:
        raise CliError(f"checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None
    return header, state, cfg, sched


def _read_image(path):
    try:
        return dataio.read_pgm(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    except dataio.PGMError as exc:
        raise CliError(f"{path}: {exc}") from None


def center_crop(img, multiple):
    h, w = img.shape
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise CliError(f"image {h}x{w} is smaller than the minimum size {multiple}x{multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top:top + nh, left:left + nw]


def cmd_fuse(args) -> int:
    header, state, cfg, sched = _load_model(args.ckpt)
    a = _read_image(args.a)
    b = _read_image(args.b)
    if a.shape != b.shape:
        raise CliError(f"source sizes differ: {a.shape} vs {b.shape}")
    multiple = 2 ** cfg.depth
    if a.shape[0] % multiple or a.shape[1] % multiple:
        log.warning("input %dx%d is not a multiple of %d; center-cropping", a.shape[0], a.shape[1], multiple)
        a, b = center_crop(a, multiple), center_crop(b, multiple)
    if a.shape[0] != a.shape[1] and cfg.m != 4:
        log.warning("non-square input: rotations other than quarter turns are undefined for this grid")
    model = Denoiser(state.params, cfg, sched)
    A = a[None, :, :, None].astype(np.float32)
    B = b[None, :, :, None].astype(np.float32)
    rng = np.random.default_rng(args.seed)
    fused = sample(model, A, B, sched, rng)[0, :, :, 0]
    config = _config_record("fuse", args)
    comment = "rediffuse " + json.dumps(config, sort_keys=True)
    out = Path(args.out)
    outputs = [(out, fused, [comment])]
    if args.diff:
        for key, src in (("a", a), ("b", b)):
            d = np.abs(fused.astype(np.float64) - src)
            mx = float(d.max())
            scaled = d / mx if mx > 0 else d
            name = out.with_name(f"{out.stem}_diff_{key}{out.suffix or '.pgm'}")
            outputs.append((name, scaled, [comment, f"max={mx:.9g}"]))
    try:
        # encode everything before the first write so a failure leaves nothing behind
        blobs = [(p, dataio.encode_pgm(img, 65535, c)) for p, img, c in outputs]
        written = []
        for p, blob in blobs:
            dataio.atomic_write_bytes(p, blob)
            written.append(p)
    except OSError as exc:
        for p in written:
            p.unlink(missing_ok=True)
        raise CliError(f"writing output failed: {exc}") from None
    log.info("fused image written to %s", out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify

def cmd_verify(args) -> int:
    from . import suites

    if args.suite == "ops":
        recs = suites.suite_ops(args.m, args.delta, args.seed)
    elif args.suite == "network":
        recs = suites.suite_network(args.m, args.seed)
    else:
        recs = suites.suite_scaling(args.m, args.delta, args.seed)
    config = _config_record("verify", args)
    lines = [config] + [{"type": "report", **r.to_dict()} for r in recs]
    failed = [r for r in recs if not r.passed]
    lines.append({"type": "summary", "records": len(recs), "failed": len(failed), "passed": not failed})
    if args.report:
        try:
            dataio.atomic_write_bytes(args.report, _jsonl(lines))
        except OSError as exc:
            raise CliError(f"cannot write report: {exc}") from None
    for r in recs:
        flag = "ok  " if r.passed else "FAIL"
        bound = "" if r.bound is None else f" bound={r.bound:.6g}"
        print(f"{flag} {r.op} m={r.m} k={r.k} error={r.error:.6g}{bound}")
    if failed:
        log.error("%d of %d records violate their bound", len(failed), len(recs))
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics

METRIC_ORDER = ("ms_ssim", "qmi", "qabf")


def compute_metrics(fused, a, b, gt=None) -> list[tuple[str, float]]:
    out = [("ms_ssim", metrics.fusion_ms_ssim(fused, a, b)),
           ("qmi", metrics.qmi(fused, a, b)),
           ("qabf", metrics.qabf(fused, a, b, normalize=True))]
    if gt is not None:
        out.append(("ms_ssim_gt", metrics.ms_ssim(fused, gt)))
    return out


def cmd_metrics(args) -> int:
    f = _read_image(args.fused)
    a = _read_image(args.a)
    b = _read_image(args.b)
    g = _read_image(args.gt) if args.gt else None
    shapes = {f.shape, a.shape, b.shape} | ({g.shape} if g is not None else set())
    if len(shapes) != 1:
        raise CliError(f"image sizes differ: {sorted(shapes)}")
    try:
        values = compute_metrics(f, a, b, g)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    text = "".join(f"{name}={value:.6f}\n" for name, value in values)
    if args.out:
        try:
            dataio.atomic_write_bytes(args.out, text.encode("ascii"))
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}") from None
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rediffuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"rediffuse {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    # -v also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic multi-focus pairs as PGM files")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blur-sigma", type=float, default=2.0)
    g.add_argument("--texture", choices=("shapes", "gradients", "mixed"), default="shapes")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train the denoiser on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--T", type=int, default=100)
    t.add_argument("--beta-start", type=float, default=1e-4)
    t.add_argument("--beta-end", type=float, default=0.05)
    t.add_argument("--m", type=int, default=4)
    t.add_argument("--base-ch", type=int, default=32)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--gn-groups", type=int, default=8)
    t.add_argument("--plain", action="store_true", help="unshared plain kernels (ablation)")
    t.add_argument("--no-dc-anchor", action="store_true",
                   help="leave the mean of the noise prediction to the network (ablation)")
    t.add_argument("--head-order", choices=("conv_first", "norm_first"), default="conv_first")
    t.add_argument("--skip-mode", choices=("pre_pool", "post_pool"), default="pre_pool")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="loss log path (default: <out>.loss.jsonl)")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", parents=[common], help="fuse two sources with a trained checkpoint")
    f.add_argument("--a", required=True)
    f.add_argument("--b", required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--diff", action="store_true", help="also write |fused - a| and |fused - b|")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fuse)

    v = sub.add_parser("verify", parents=[common], help="run an equivariance verification suite")
    v.add_argument("--suite", choices=("ops", "network", "scaling"), default="ops")
    v.add_argument("--m", type=int, default=4)
    v.add_argument("--delta", type=float, default=0.1)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report")
    v.set_defaults(func=cmd_verify)

    mt = sub.add_parser("metrics", parents=[common], help="fusion quality metrics as name=value lines")
    mt.add_argument("--fused", required=True)
    mt.add_argument("--a", required=True)
    mt.add_argument("--b", required=True)
    mt.add_argument("--gt")
    mt.add_argument("--out")
    mt.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except ValueError as exc:  # e.g. a bad REDIFFUSE_THREADS
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
