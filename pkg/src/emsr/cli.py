"""Command-line entry points.

Every failure is reported on stderr as a single ``EMSR-ERR: <kind>: <message>``
line with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io as eio
from .atw import atw_decompose
from .degradation import DegradationConfig, degrade_eq2, derive_seed, gaussian_kernel, synthetic_pair
from .metrics import SsimParams, evaluate
from .net import EmsrConfig, EmsrModel, forward
from .phantom import PhantomConfig, generate_phantom
from .theory import (
    condition_check,
    default_scenario,
    l1_bound_I_check,
    l1_bound_II_check,
    l2_identity_check,
    random_scenario,
)
from .training import LossWeights, TrainConfig, train_loop

log = logging.getLogger("emsr")

ERR_PREFIX = "EMSR-ERR:"
VARIANTS = {"eq2": "eq2", "syn1": "synthetic_I", "syn2": "synthetic_II"}


class CliError(Exception):
    """User-facing failure with a short category tag."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------- config files


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise CliError("config", f"line {n}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise CliError("config", f"line {n}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def _coerce(value: str, kind, key: str):
    kind = {"int": int, "float": float, "bool": bool}.get(kind, kind)
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return low in ("1", "true", "yes")
        if kind in (int, float):
            return kind(value)
        # ranges are written "lo,hi"
        lo, hi = (float(v) for v in value.split(","))
        return (lo, hi)
    except ValueError:
        raise CliError("config", f"{key}={value!r} is not a valid value") from None


@dataclasses.dataclass
class RunConfig:
    model: EmsrConfig
    train: TrainConfig
    variant: str = "synthetic_II"
    degrade_seed: int = 0
    init_seed: int = 0


def load_run_config(text: str) -> RunConfig:
    """Flat key=value file mixing model, training, loss and data keys.

    ``preset=tiny`` starts from the tiny model instead of the full-size one.
    """
    kv = parse_kv(text)
    preset = kv.pop("preset", "full")
    if preset not in ("full", "tiny"):
        raise CliError("config", f"preset must be 'full' or 'tiny', got {preset!r}")
    extras = {"variant": "synthetic_II", "degrade_seed": 0, "init_seed": 0}
    groups = {
        "model": {f.name: f.type for f in dataclasses.fields(EmsrConfig)},
        "loss": {f.name: f.type for f in dataclasses.fields(LossWeights)},
        "train": {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "loss"},
    }
    values: dict[str, dict] = {g: {} for g in groups}
    for key, val in kv.items():
        if key == "variant":
            if val not in VARIANTS.values() or val == "eq2":
                raise CliError("config", f"variant must be synthetic_I or synthetic_II, got {val!r}")
            extras["variant"] = val
            continue
        if key in ("degrade_seed", "init_seed"):
            extras[key] = _coerce(val, int, key)
            continue
        for group, kinds in groups.items():
            if key in kinds:
                values[group][key] = _coerce(val, kinds[key], key)
                break
        else:
            raise CliError("config", f"unknown config key {key!r}")
    try:
        base = EmsrConfig.tiny() if preset == "tiny" else EmsrConfig()
        model = dataclasses.replace(base, **values["model"])
        train = TrainConfig(**values["train"], loss=LossWeights(**values["loss"]))
        train.validate_for(model)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None
    return RunConfig(model=model, train=train, **extras)


# ---------------------------------------------------------------- helpers


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = eio.list_images(path)
        if not files:
            raise CliError("io", f"no .pgm or .emf images in {path}")
        return files
    if not path.exists():
        raise CliError("io", f"{path} does not exist")
    return [path]


def _output_for(src: Path, out: Path, many: bool, suffix: str | None = None) -> Path:
    if many or out.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        return out / (src.stem + (suffix or src.suffix))
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _write_sidecar(path: Path, params: dict) -> None:
    Path(str(path) + ".txt").write_text("".join(f"{k}={params[k]!r}\n" for k in sorted(params)))


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


# ---------------------------------------------------------------- subcommands


def cmd_phantom(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = derive_seed(args.seed, i)
        cfg = PhantomConfig(size=args.size, num_structures=args.structures, seed=seed)
        eio.save_image(out / f"phantom_{i:03d}.{args.format}", generate_phantom(cfg))
    print(f"wrote {args.count} phantoms to {out}")


def cmd_degrade(args) -> None:
    files = _inputs(Path(args.inp))
    variant = VARIANTS[args.variant]
    many = len(files) > 1
    for i, src in enumerate(files):
        hr = eio.load_image(src)
        seed = derive_seed(args.seed, i)
        if variant == "eq2":
            lr = degrade_eq2(hr, gaussian_kernel(args.blur_sigma), args.scale, args.noise_sigma, seed)
            params = {"variant": "eq2", "seed": seed, "scale": args.scale,
                      "blur_sigma": args.blur_sigma, "noise_sigma": args.noise_sigma}
        else:
            pair = synthetic_pair(hr, DegradationConfig(variant=variant, scale_s=args.scale, seed=seed))
            lr, params = pair.lr, pair.provenance
        params["source"] = src.name
        dst = _output_for(src, Path(args.out), many)
        eio.save_image(dst, lr)
        _write_sidecar(dst, params)
    print(f"degraded {len(files)} image(s) with {variant}")


def cmd_edges(args) -> None:
    img = eio.load_image(_inputs(Path(args.inp))[0])
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    pyr = atw_decompose(img, args.scales)
    stem = Path(args.inp).stem
    for j, w in enumerate(pyr.details, 1):
        # detail layers are signed; PGM output is shifted to mid-grey
        eio.save_image(out / f"{stem}_w{j}.{args.format}", w if args.format == "emf" else 0.5 + w)
    eio.save_image(out / f"{stem}_c{args.scales}.{args.format}", pyr.smoothings[-1])
    print(f"wrote {args.scales} detail layers to {out}")


def _training_pairs(data: Path, run: RunConfig) -> list:
    from .degradation import PairedSample

    lr_dir, hr_dir = data / "lr", data / "hr"
    if lr_dir.is_dir() and hr_dir.is_dir():
        pairs = []
        for hr_path in eio.list_images(hr_dir):
            lr_path = next((p for p in eio.list_images(lr_dir) if p.stem == hr_path.stem), None)
            if lr_path is None:
                raise CliError("io", f"no LR image matching {hr_path.name} in {lr_dir}")
            pairs.append(PairedSample(lr=eio.load_image(lr_path), hr=eio.load_image(hr_path),
                                      provenance={"source": hr_path.name}))
        if not pairs:
            raise CliError("io", f"no images in {hr_dir}")
        return pairs
    cfg = lambda i: DegradationConfig(variant=run.variant, scale_s=run.model.tau,  # noqa: E731
                                      seed=derive_seed(run.degrade_seed, i))
    return [synthetic_pair(eio.load_image(p), cfg(i)) for i, p in enumerate(_inputs(data))]


def cmd_train(args) -> None:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise CliError("io", f"config file {cfg_path} not found")
    run = load_run_config(cfg_path.read_text())
    adam = None
    if args.resume:
        model, adam = eio.load_checkpoint(args.resume)
        if model.config != run.model:
            raise CliError("config", "checkpoint model config differs from the config file")
        if adam is None:
            raise CliError("config", f"{args.resume} holds no optimizer state to resume from")
    else:
        model = EmsrModel(run.model, seed=run.init_seed)
    pairs = _training_pairs(Path(args.data), run)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    result = train_loop(model, pairs, run.train, adam=adam, checkpoint_path=out, log_path=log_path)
    last = result.log_rows[-1]["loss"] if result.log_rows else float("nan")
    print(f"trained to step {result.adam.t}; final loss {last:.6g}; checkpoint {out}; log {log_path}")


def cmd_sr(args) -> None:
    model, _ = eio.load_checkpoint(args.ckpt)
    files = _inputs(Path(args.inp))
    many = len(files) > 1
    for src in files:
        sr = forward(eio.load_image(src), model).data[0, 0]
        eio.save_image(_output_for(src, Path(args.out), many), sr)
    print(f"super-resolved {len(files)} image(s) x{model.config.tau}")


def cmd_eval(args) -> None:
    refs = {p.stem: p for p in _inputs(Path(args.ref_dir))}
    tests = {p.stem: p for p in _inputs(Path(args.test_dir))}
    names = sorted(refs)
    missing = [n for n in names if n not in tests]
    if missing:
        raise CliError("io", f"no test image for {', '.join(missing)}")
    params = SsimParams(mode=args.ssim_mode, window=args.ssim_window)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frc_dir = Path(args.frc_dir) if args.frc_dir else out.parent / (out.stem + "_frc")
    frc_dir.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "ssim", "psnr", "mean_frc"])
        for name in names:
            rep = evaluate(eio.load_image(refs[name]), eio.load_image(tests[name]), args.rings, params)
            w.writerow([name, _fmt(rep.ssim), _fmt(rep.psnr), _fmt(rep.mean_frc)])
            with (frc_dir / f"{name}.csv").open("w", newline="") as fc:
                cw = csv.writer(fc, lineterminator="\n")
                cw.writerow(["ring", "mean_radius", "correlation"])
                for i, r, c in zip(rep.frc.ring_index, rep.frc.mean_radius, rep.frc.correlation):
                    cw.writerow([int(i), _fmt(r), _fmt(c)])
    print(f"evaluated {len(names)} pair(s) -> {out}")


def cmd_verify_theory(args) -> None:
    if args.check == "cond":
        if args.noisy or args.clean:
            if not (args.noisy and args.clean):
                raise CliError("usage", "--noisy and --clean must be given together")
            noisy, clean = eio.load_image(args.noisy), eio.load_image(args.clean)
        else:
            clean = generate_phantom(PhantomConfig(seed=args.seed))
            noisy = clean + np.random.default_rng(args.seed).normal(0.0, args.noise_sigma / 255.0, clean.shape)
        print(condition_check(noisy, clean).summary())
        return
    if args.trials < 10_000:
        raise CliError("usage", f"--trials must be >= 10000, got {args.trials}")
    f, x, noise = default_scenario(args.seed) if args.scenario == "default" else random_scenario(args.seed)
    check = {"l2": l2_identity_check, "l1a": l1_bound_I_check, "l1b": l1_bound_II_check}[args.check]
    rep = check(f, x, noise, args.trials, args.seed)
    for k, v in rep.as_row().items():
        print(f"{k}={v}")


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emsr", description="Edge-attention super-resolution for EM images (numpy).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate phantom images")
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--structures", type=int, default=10)
    s.add_argument("--format", choices=("emf", "pgm"), default="emf")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("degrade", help="synthesize LR images from HR images")
    s.add_argument("--variant", choices=tuple(VARIANTS), required=True)
    s.add_argument("--scale", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--blur-sigma", type=float, default=1.0, help="eq2 only")
    s.add_argument("--noise-sigma", type=float, default=10.0, help="eq2 only, 8-bit units")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("edges", help="dump ATW detail layers")
    s.add_argument("--scales", type=int, default=3)
    s.add_argument("--format", choices=("emf", "pgm"), default="emf")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_edges)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sr", help="super-resolve images with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("eval", help="SSIM / PSNR / FRC of test images against references")
    s.add_argument("--ref-dir", required=True)
    s.add_argument("--test-dir", required=True)
    s.add_argument("--rings", type=int)
    s.add_argument("--ssim-mode", choices=("global", "windowed"), default="global")
    s.add_argument("--ssim-window", type=int, default=8)
    s.add_argument("--frc-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify-theory", help="Monte Carlo checks of noisy-reference training")
    s.add_argument("--check", choices=("l2", "l1a", "l1b", "cond"), required=True)
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenario", choices=("default", "random"), default="default")
    s.add_argument("--noisy")
    s.add_argument("--clean")
    s.add_argument("--noise-sigma", type=float, default=5.0)
    s.set_defaults(func=cmd_verify_theory)
    return p


def _thread_limit():
    raw = os.environ.get("EMSR_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("config", f"EMSR_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            args.func(args)
        return 0
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except eio.FormatError as exc:
        kind, msg = "format", str(exc)
    except OSError as exc:
        kind, msg = "io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)
    except (ValueError, RuntimeError) as exc:
        kind, msg = type(exc).__name__, str(exc)
    print(f"{ERR_PREFIX} {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
