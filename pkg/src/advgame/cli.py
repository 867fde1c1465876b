"""Experiment runner: flat key=value configs, subcommands, artifact I/O.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
The ``ADVGAME_OUTPUT_DIR`` environment variable overrides ``output_dir``.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import attack as A
from . import data as D
from . import evaluation as E
from . import model as M
from . import tensor as T
from . import train as TR
from .attack import PatchAttackConfig, PgdConfig, UniversalAttackConfig
from .tensor import NonFiniteError

OUTPUT_DIR_ENV = "ADVGAME_OUTPUT_DIR"


class ConfigError(ValueError):
    """Bad experiment configuration (unknown key, unparsable value, ...)."""


@dataclass
class ExperimentConfig:
    """Every experiment knob as a flat key-value record.

    Defaults are the ``desk`` profile (tiny model on synthetic data, minutes
    of CPU); ``profile = cifar10`` switches the published full-scale numbers.
    """
    profile: str = "desk"
    # data
    data: str = "synthetic"            # synthetic | cifar10
    data_path: str = ""
    classes: int = 10
    per_class: int = 100
    image_side: int = 16
    channels: int = 3
    # model
    model: str = "tiny"                # tiny | paper-vgg
    precision: str = "float64"         # float64 | float32
    # training loop
    outer_iterations: int = 8
    inner_steps: int = 300
    batch_size: int = 64
    learning_rate: float = 0.05
    lr_decay: float = 0.1
    lr_milestones: str = ""            # comma-separated global step indices
    momentum: float = 0.9
    weight_decay: float = 0.0002
    weighting: str = "literal"         # literal | uniform
    fp_mode: str = "approximate"       # approximate | exact
    # perturbation loop
    attack_kind: str = "universal"     # universal | patch
    epsilon_pixels: float = 16.0       # max-norm budget in [0,255] pixel units
    attack_alpha: float = 0.002
    attack_iterations: int = 1000
    attack_batch_size: int = 64
    eval_attack_iterations: int = 2000
    patch_chi: float = 0.4
    patch_theta_max_deg: float = 20.0
    patch_placements: int = 4
    patch_lambda: float = 0.0
    patch_target_class: int = -1       # -1 means untargeted
    # adversarial-training baseline
    pgd_steps: int = 7
    pgd_step_size: float = -1.0        # -1 means epsilon / 4
    pgd_random_init: bool = True
    # evaluation and bookkeeping
    eval_sample_size: int = 2000
    seed: int = 0
    output_dir: str = "runs/experiment"
    csv_timing: str = "zero"           # zero | real

    @property
    def epsilon(self) -> float:
        return self.epsilon_pixels / 255.0

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


# Table of full-scale hyperparameters (first dataset column).
PROFILES = {
    "desk": {},
    "cifar10": {
        "data": "cifar10",
        "model": "paper-vgg",
        "classes": 10,
        "image_side": 32,
        "outer_iterations": 50,
        "inner_steps": 10_000,
        "batch_size": 256,
        "learning_rate": 0.01,
        "lr_decay": 0.1,
        "lr_milestones": "150000,300000,450000",
        "weight_decay": 0.0002,
        "epsilon_pixels": 16.0,
        "attack_alpha": 2e-5,
        "attack_iterations": 20_000,
        "attack_batch_size": 100,
        "eval_attack_iterations": 20_000,
        "eval_sample_size": 10_000,
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from exc


def read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve a config: profile preset, then file values, then flag overrides."""
    file_values = read_config_file(path) if path else {}
    overrides = dict(overrides or {})
    profile = overrides.get("profile", file_values.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choices: {sorted(PROFILES)}")
    cfg = ExperimentConfig(profile=profile, **PROFILES[profile])
    for source in (file_values, overrides):
        for key, value in source.items():
            if key == "profile":
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    if env_dir := os.environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = env_dir
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.data not in ("synthetic", "cifar10"):
        raise ConfigError(f"unknown data source {cfg.data!r}")
    if cfg.data == "cifar10" and not cfg.data_path:
        raise ConfigError("missing required key data_path for data = cifar10")
    if cfg.model not in ("tiny", "paper-vgg"):
        raise ConfigError(f"unknown model {cfg.model!r}")
    if cfg.precision not in ("float64", "float32"):
        raise ConfigError("precision must be float64 or float32")
    if cfg.attack_kind not in ("universal", "patch"):
        raise ConfigError(f"unknown attack kind {cfg.attack_kind!r}")
    if cfg.csv_timing not in ("zero", "real"):
        raise ConfigError("csv_timing must be 'zero' or 'real'")
    if cfg.lr_milestones:
        try:
            steps = [int(s) for s in cfg.lr_milestones.split(",")]
        except ValueError as exc:
            raise ConfigError(f"cannot parse lr_milestones = {cfg.lr_milestones!r}") from exc
        if steps != sorted(set(steps)):
            raise ConfigError("lr_milestones must be strictly increasing")


def echo_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    (out_dir / "config.txt").write_text(cfg.to_text())


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------

def load_splits(cfg: ExperimentConfig) -> dict[str, D.Dataset]:
    if cfg.data == "synthetic":
        return D.synthetic_splits(cfg.classes, cfg.per_class, cfg.image_side, cfg.seed, cfg.channels)
    path = Path(cfg.data_path)
    if path.is_dir():
        train_parts = sorted(path.glob("data_batch_*.bin"))
        if not train_parts:
            raise FileNotFoundError(f"no data_batch_*.bin under {path}")
        loaded = [D.load_cifar10(p, "train") for p in train_parts]
        images = np.concatenate([d.images for d in loaded])
        labels = np.concatenate([d.labels for d in loaded])
        cut = max(1, len(images) - 5000)
        splits = {
            "train": D.Dataset(images[:cut], labels[:cut], D.CIFAR_CLASSES, "train"),
            "valid": D.Dataset(images[cut:], labels[cut:], D.CIFAR_CLASSES, "valid"),
        }
        test_path = path / "test_batch.bin"
        if test_path.exists():
            splits["test"] = D.load_cifar10(test_path, "test")
        return splits
    ds = D.load_cifar10(path, "train")
    return {"train": ds,
            "valid": D.Dataset(ds.images, ds.labels, ds.num_classes, "valid"),
            "test": D.Dataset(ds.images, ds.labels, ds.num_classes, "test")}


def build_model_config(cfg: ExperimentConfig) -> M.ModelConfig:
    if cfg.model == "tiny":
        return M.tiny_config(side=cfg.image_side, channels=cfg.channels, num_classes=cfg.classes)
    return M.paper_vgg_config(num_classes=cfg.classes)


def build_attack_config(cfg: ExperimentConfig, iterations: int | None = None):
    iters = cfg.attack_iterations if iterations is None else iterations
    if cfg.attack_kind == "universal":
        return UniversalAttackConfig(
            epsilon=cfg.epsilon,
            alpha=cfg.attack_alpha,
            iterations=iters,
            batch_size=cfg.attack_batch_size,
            target="pool" if cfg.fp_mode == "exact" else "single",
        )
    return PatchAttackConfig(
        patch_side=cfg.image_side,
        chi=cfg.patch_chi,
        theta_max=float(np.deg2rad(cfg.patch_theta_max_deg)),
        alpha=cfg.attack_alpha,
        iterations=iters,
        placements_per_step=cfg.patch_placements,
        batch_size=cfg.attack_batch_size,
        target_class=None if cfg.patch_target_class < 0 else cfg.patch_target_class,
        lam=cfg.patch_lambda,
    )


def build_pgd_config(cfg: ExperimentConfig) -> PgdConfig:
    step = cfg.pgd_step_size if cfg.pgd_step_size > 0 else cfg.epsilon / 4.0
    return PgdConfig(cfg.epsilon, step, cfg.pgd_steps, cfg.pgd_random_init)


def build_train_config(cfg: ExperimentConfig) -> TR.TrainConfig:
    milestones = tuple(int(s) for s in cfg.lr_milestones.split(",")) if cfg.lr_milestones else ()
    return TR.TrainConfig(
        outer_iterations=cfg.outer_iterations,
        inner_steps=cfg.inner_steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        lr_decay=cfg.lr_decay,
        lr_milestones=milestones,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        attack=build_attack_config(cfg),
        pgd=build_pgd_config(cfg),
        weighting=cfg.weighting,
        eval_attack_iterations=cfg.eval_attack_iterations,
        eval_sample_size=cfg.eval_sample_size,
        seed=cfg.seed,
    )


def _prepare_run(cfg: ExperimentConfig):
    T.set_default_dtype(np.float32 if cfg.precision == "float32" else np.float64)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    return out_dir


def run_training(cfg: ExperimentConfig, algorithm: str) -> int:
    out_dir = _prepare_run(cfg)
    splits = load_splits(cfg)
    train_ds = splits["train"]
    model_cfg = build_model_config(cfg)
    tcfg = build_train_config(cfg)

    def on_outer(n, params, row):
        M.save_checkpoint(out_dir / f"checkpoint_{n:04d}.ckpt", model_cfg, params)
        print(f"iter {n}: clean {row.clean_acc:.3f} adv {row.adv_acc:.3f}")

    if algorithm == "fp":
        state, report = TR.fp_train(model_cfg, train_ds, tcfg, mode=cfg.fp_mode, on_outer=on_outer)
        for i, spec in enumerate(state.perturbation_pool, start=1):
            A.save_perturbation(out_dir / f"perturbation_{i:04d}.pert", spec)
    elif algorithm == "at":
        _, report = TR.at_train(model_cfg, train_ds, tcfg, on_outer=on_outer)
    elif algorithm == "sgd":
        _, report = TR.sgd_train(model_cfg, train_ds, tcfg, on_outer=on_outer)
    else:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    E.write_csv(out_dir / "metrics.csv", report, timing=cfg.csv_timing)
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def run_attack(cfg: ExperimentConfig, checkpoint: str, out_path: str | None) -> int:
    out_dir = _prepare_run(cfg)
    model_cfg, params = M.load_checkpoint(checkpoint)
    splits = load_splits(cfg)
    train_ds = splits["train"]
    rng = np.random.default_rng((cfg.seed, 8))
    attack_cfg = build_attack_config(cfg)
    spec = E.craft_attack((model_cfg, params), train_ds, attack_cfg, rng)
    dest = Path(out_path) if out_path else out_dir / f"attack_{cfg.attack_kind}.pert"
    A.save_perturbation(dest, spec)
    eval_ds = splits.get("test", train_ds)
    adv = E.perturbed_accuracy((model_cfg, params), eval_ds, spec, cfg.eval_sample_size,
                               np.random.default_rng((cfg.seed, 9)), placement_seed=1)
    clean = E.accuracy((model_cfg, params), eval_ds, cfg.eval_sample_size, np.random.default_rng((cfg.seed, 9)))
    print(f"clean accuracy {clean:.4f}")
    print(f"adv accuracy {adv:.4f}")
    if cfg.attack_kind == "patch" and cfg.patch_target_class >= 0 and cfg.patch_lambda > 0:
        rate = E.target_class_rate((model_cfg, params), eval_ds, spec, cfg.patch_target_class,
                                   cfg.eval_sample_size, np.random.default_rng((cfg.seed, 10)), placement_seed=2)
        print(f"target-class hit rate {rate:.4f}")
    print(f"wrote {dest}")
    return 0


def run_eval(cfg: ExperimentConfig, checkpoint_dir: str | None) -> int:
    out_dir = _prepare_run(cfg)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else out_dir
    splits = load_splits(cfg)
    attack_cfg = build_attack_config(cfg, iterations=cfg.eval_attack_iterations)
    rows = E.evaluate_checkpoint_series(ckpt_dir, splits, attack_cfg, seed=cfg.seed,
                                        sample_size=cfg.eval_sample_size)
    dest = out_dir / "eval.csv"
    E.write_csv(dest, rows, timing=cfg.csv_timing)
    for row in rows:
        print(f"iter {row.iteration} {row.split}: clean {row.clean_acc:.3f} adv {row.adv_acc:.3f}")
    print(f"wrote {dest}")
    return 0


def run_export_ppm(in_path: str, out_path: str) -> int:
    spec = A.load_perturbation(in_path)
    D.export_ppm(spec, out_path)
    print(f"wrote {out_path}")
    return 0


def run_matrix_demo(game_name: str, iterations: int) -> int:
    games = {"rps": TR.ROCK_PAPER_SCISSORS, "pennies": TR.MATCHING_PENNIES}
    if game_name not in games:
        raise ConfigError(f"unknown game {game_name!r}; choices: {sorted(games)}")
    game = games[game_name]
    p, q, trace = TR.fp_matrix_game(game, iterations)
    print("row strategy:", " ".join(f"{v:.4f}" for v in p))
    print("col strategy:", " ".join(f"{v:.4f}" for v in q))
    print(f"empirical value: {TR.game_value(game, p, q):.4f}")
    print(f"final exploitability: {trace[-1]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar=f.type.upper())


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for f in fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            overrides[f.name] = _parse_value(f.name, str(raw))
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advgame",
                                     description="Game-theoretic training against universal perturbations")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, descr in (
        ("train-fp", "alternating best-response training"),
        ("train-at", "adversarial-training baseline"),
        ("train-sgd", "plain SGD baseline"),
    ):
        p = sub.add_parser(name, help=descr)
        _add_config_arguments(p)

    p = sub.add_parser("attack", help="craft a perturbation against a checkpoint")
    _add_config_arguments(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", dest="attack_kind", default=None)
    p.add_argument("--target-class", dest="patch_target_class", default=None)
    p.add_argument("--lambda", dest="patch_lambda", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint series with fresh attacks")
    _add_config_arguments(p)
    p.add_argument("--checkpoint-dir", default=None)

    p = sub.add_parser("export-ppm", help="convert a perturbation container to PPM")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)

    p = sub.add_parser("matrix-demo", help="fictitious play on a built-in matrix game")
    p.add_argument("--game", default="rps")
    p.add_argument("--iters", type=int, default=50_000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-ppm":
            return run_export_ppm(args.in_path, args.out_path)
        if args.command == "matrix-demo":
            return run_matrix_demo(args.game, args.iters)
        cfg = parse_config(args.config, _collect_overrides(args))
        if args.command == "train-fp":
            return run_training(cfg, "fp")
        if args.command == "train-at":
            return run_training(cfg, "at")
        if args.command == "train-sgd":
            return run_training(cfg, "sgd")
        if args.command == "attack":
            return run_attack(cfg, args.checkpoint, args.out)
        if args.command == "eval":
            return run_eval(cfg, args.checkpoint_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except TR.TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
