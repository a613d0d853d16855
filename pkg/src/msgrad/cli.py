"""Command-line entry point: ``msgrad {train,verify,experiment}``.

Configuration comes from an optional ``key = value`` file (``--config``)
overridden by flags. Every run writes ``effective_config`` to its output
directory; feeding that file back reproduces the run.

Exit codes: 0 success, 1 failed verification or runtime error, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import experiments, io, tasks
from .models import ModelConfig, build, default_config, save_checkpoint
from .trainer import TrainConfig, train
from .verify import SUITES, run_suites

__all__ = ["main", "KEYS", "ConfigError", "load_config", "parse_config_text"]


class ConfigError(ValueError):
    """Bad configuration key or value; maps to exit code 2."""


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    choices: tuple = ()


KEYS = {
    "run.seed": Key(int, 0),
    "run.out": Key(str, ""),
    "train.strategy": Key(str, "multiscale", ("single", "multiscale", "full_multiscale")),
    "train.iters": Key(int, 2000),
    "train.schedule": Key(_ints, (2000, 1000, 500, 250)),
    "train.optimizer": Key(str, "adam", ("sgd", "adam")),
    "train.lr": Key(float, 5e-4),
    "train.lr_schedule": Key(str, "cosine", ("constant", "cosine")),
    "train.eval_every": Key(int, 100),
    "train.metric": Key(str, "mse", ("mse", "ssim")),
    "train.reset_optimizer": Key(_bool, True),
    "train.monitor_size": Key(int, 64),
    "train.dry_run": Key(_bool, False),
    "mge.levels": Key(int, 4),
    "mge.n1": Key(int, 16),
    "mge.workers": Key(int, 1),
    "task.kind": Key(str, "denoise", ("denoise", "deblur")),
    "task.size": Key(int, 32),
    "task.n_train": Key(int, 256),
    "task.n_eval": Key(int, 64),
    "task.sigma": Key(float, 3.0),
    "task.eps": Key(float, 0.01),
    "task.images": Key(str, ""),
    "model.kind": Key(str, "convstack", ("convstack", "resnet", "unet")),
    "model.hidden": Key(_ints, ()),
    "model.depth": Key(int, 2),
    "experiment.sigmas": Key(_floats, (0.0, 0.1, 0.5, 1.0)),
    "experiment.levels": Key(int, 5),
    "experiment.signal_length": Key(int, 1024),
    "experiment.samples": Key(int, 8),
    "experiment.sizes": Key(_ints, (128, 64, 32)),
    "experiment.crop_fraction": Key(float, 0.25),
    "experiment.repeats": Key(int, 32),
    "experiment.batch": Key(int, 4),
    "verify.suite": Key(str, ""),
}


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)  # shortest string that parses back to the same float
    return str(v)


def _set(cfg: dict, key: str, raw: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    spec = KEYS[key]
    try:
        value = spec.parse(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"bad value for {key}: {value!r} not in {list(spec.choices)}")
    cfg[key] = value


def parse_config_text(text: str, cfg: dict | None = None, source: str = "<config>") -> dict:
    """Apply ``key = value`` lines (``#`` starts a comment) on top of ``cfg``."""
    cfg = {k: s.default for k, s in KEYS.items()} if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            _set(cfg, key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path: str | None, overrides: dict[str, str]) -> dict:
    cfg = {k: s.default for k, s in KEYS.items()}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        parse_config_text(text, cfg, path)
    for key, raw in overrides.items():
        _set(cfg, key, raw)
    return cfg


def write_effective_config(cfg: dict, path: Path) -> None:
    lines = [f"{k} = {_format(cfg[k])}" for k in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n")


# flag -> config key, per subcommand
_COMMON_FLAGS = {"--seed": "run.seed", "--out": "run.out"}
_TRAIN_FLAGS = {
    "--strategy": "train.strategy", "--iters": "train.iters", "--schedule": "train.schedule",
    "--optimizer": "train.optimizer", "--lr": "train.lr", "--lr-schedule": "train.lr_schedule",
    "--eval-every": "train.eval_every", "--levels": "mge.levels", "--n1": "mge.n1",
    "--workers": "mge.workers", "--task": "task.kind", "--size": "task.size",
    "--n-train": "task.n_train", "--n-eval": "task.n_eval", "--images": "task.images",
    "--model": "model.kind",
}
_EXPERIMENT_FLAGS = {
    "--sigmas": "experiment.sigmas", "--levels": "experiment.levels", "--sizes": "experiment.sizes",
    "--repeats": "experiment.repeats", "--n": "experiment.samples",
    "--crop-fraction": "experiment.crop_fraction",
}
_VERIFY_FLAGS = {"--suite": "verify.suite"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msgrad", description="Multiscale gradient estimation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, flags):
        sp.add_argument("--config", metavar="PATH", help="key = value file, applied before flags")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        for flag, key in {**_COMMON_FLAGS, **flags}.items():
            sp.add_argument(flag, dest=flag.lstrip("-").replace("-", "_"), metavar="VALUE", help=f"sets {key}")
        return sp

    tr = common(sub.add_parser("train", help="train a model"), _TRAIN_FLAGS)
    tr.add_argument("--dry-run", action="store_true", help="charge the work-unit ledger without computing")
    common(sub.add_parser("verify", help="run the invariant suites"), _VERIFY_FLAGS)
    ex = common(sub.add_parser("experiment", help="run a numerical experiment"), _EXPERIMENT_FLAGS)
    ex.add_argument("name", help="example1, coarsen_crop or variance")
    return p


def _overrides(args, flags) -> dict[str, str]:
    out = {}
    for flag, key in {**_COMMON_FLAGS, **flags}.items():
        v = getattr(args, flag.lstrip("-").replace("-", "_"))
        if v is not None:
            out[key] = v
    if getattr(args, "dry_run", False):
        out["train.dry_run"] = "true"
    return out


def _out_dir(cfg: dict, command: str, force: bool) -> Path:
    out = Path(cfg["run.out"]) if cfg["run.out"] else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_images(directory: str) -> np.ndarray:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not paths:
        raise ConfigError(f"no .pgm/.ppm files in {directory}")
    imgs = [io.load_raster(p) for p in paths]
    if len({im.shape for im in imgs}) != 1:
        raise ValueError(f"images in {directory} differ in shape")
    return np.stack(imgs)


def build_task(cfg: dict, rng: np.random.Generator) -> tasks.Task:
    kind, size, seed = cfg["task.kind"], cfg["task.size"], cfg["run.seed"]
    if cfg["task.images"]:
        imgs = _load_images(cfg["task.images"])
        n_eval = min(cfg["task.n_eval"], len(imgs) - 1)
        return tasks.task_from_images(kind, imgs[n_eval:], imgs[:n_eval], rng, cfg["task.sigma"],
                                      cfg["task.eps"], seed)
    if kind == "denoise":
        return tasks.gen_denoise(cfg["task.n_train"], size, rng, cfg["task.n_eval"], seed)
    return tasks.gen_deblur(cfg["task.n_train"], size, cfg["task.sigma"], rng, cfg["task.n_eval"],
                            cfg["task.eps"], seed)


def model_config(cfg: dict, c_in: int, c_out: int) -> ModelConfig:
    kind = cfg["model.kind"]
    if not cfg["model.hidden"]:
        return default_config(kind, c_in, c_out)
    return ModelConfig(kind, (c_in, *cfg["model.hidden"], c_out), depth=cfg["model.depth"])


def train_config(cfg: dict) -> TrainConfig:
    strategy = cfg["train.strategy"]
    iters = cfg["train.schedule"] if strategy == "full_multiscale" else (cfg["train.iters"],)
    return TrainConfig(strategy=strategy, L=cfg["mge.levels"], N1=cfg["mge.n1"], iters_per_level=iters,
                       optimizer=cfg["train.optimizer"], lr=cfg["train.lr"],
                       lr_schedule=cfg["train.lr_schedule"], seed=cfg["run.seed"], task=cfg["task.kind"],
                       eval_every=cfg["train.eval_every"], metric=cfg["train.metric"],
                       reset_optimizer=cfg["train.reset_optimizer"], monitor_size=cfg["train.monitor_size"],
                       workers=cfg["mge.workers"], dry_run=cfg["train.dry_run"])


def cmd_train(cfg: dict, out: Path) -> int:
    try:
        tcfg = train_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if tcfg.dry_run:
        hist = train(tcfg, None, None)
        model = params = None
    else:
        seed = cfg["run.seed"]
        task = build_task(cfg, np.random.default_rng([seed, 0]))
        model, params = build(model_config(cfg, task.in_channels, task.out_channels),
                              np.random.default_rng([seed, 1]))
        hist = train(tcfg, task, model, params)
    io.emit_csv(hist.rows(), io.SCHEMAS["history"], out / "history.csv")
    hist.ledger.dump_csv(out / "ledger.csv")
    if model is not None:
        save_checkpoint(out / "checkpoint.npz", model, hist.params)
    final = hist.final().metric if hist.records else float("nan")
    print(f"total_wu = {io.format_value(hist.total_wu)}")
    print(f"final_{tcfg.metric} = {io.format_value(final)}")
    print(f"outputs in {out}")
    return 0


def cmd_verify(cfg: dict) -> int:
    names = [cfg["verify.suite"]] if cfg["verify.suite"] else list(SUITES)
    if any(n not in SUITES for n in names):
        raise ConfigError(f"unknown suite {cfg['verify.suite']!r}; expected one of {list(SUITES)}")
    failed = []
    for name in names:
        checks = run_suites([name])
        bad = [c for c in checks if not c.ok]
        print(f"{name}: {'PASS' if not bad else 'FAIL'} ({len(checks) - len(bad)}/{len(checks)})")
        failed.extend(bad)
    for c in failed:
        print(f"  failed {c.suite}/{c.name}: {c.detail}")
    return 1 if failed else 0


def cmd_experiment(name: str, cfg: dict, out: Path) -> int:
    seed = cfg["run.seed"]
    rng = np.random.default_rng(seed)
    if name == "example1":
        rows = experiments.example1(cfg["experiment.signal_length"], cfg["experiment.sigmas"],
                                    cfg["experiment.levels"], rng)
        io.emit_csv([vars(r) for r in rows], io.SCHEMAS["example1"], out / "example1.csv")
    elif name == "coarsen_crop":
        rows = experiments.coarsen_vs_crop(cfg["experiment.samples"], cfg["experiment.sizes"],
                                           cfg["experiment.crop_fraction"], rng)
        io.emit_csv([vars(r) for r in rows], io.SCHEMAS["coarsen_crop"], out / "coarsen_crop.csv")
    elif name == "variance":
        records = experiments.variance_records(seed, cfg["experiment.samples"], cfg["task.size"],
                                               cfg["experiment.batch"], cfg["experiment.repeats"])
        io.emit_csv(records, io.SCHEMAS["variance"], out / "variance.csv")
    else:
        raise ConfigError(f"unknown experiment {name!r}; expected example1, coarsen_crop or variance")
    print(f"outputs in {out}")
    return 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    flags = {"train": _TRAIN_FLAGS, "verify": _VERIFY_FLAGS, "experiment": _EXPERIMENT_FLAGS}[args.command]
    try:
        cfg = load_config(args.config, _overrides(args, flags))
        if args.command == "experiment" and args.name not in ("example1", "coarsen_crop", "variance"):
            raise ConfigError(f"unknown experiment {args.name!r}; expected example1, coarsen_crop or variance")
        if args.command == "verify":
            return cmd_verify(cfg)
        out = _out_dir(cfg, args.command, args.force)
        write_effective_config(cfg, out / "effective_config")
        if args.command == "train":
            return cmd_train(cfg, out)
        return cmd_experiment(args.name, cfg, out)
    except ConfigError as e:
        print(f"msgrad: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure becomes exit 1
        print(f"msgrad: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
