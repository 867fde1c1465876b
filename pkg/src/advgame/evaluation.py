"""Accuracy and adversarial accuracy with held-out, freshly crafted attacks.

Adversarial accuracy never reuses a training-time perturbation: each call
crafts a new one against the classifier under evaluation from an
independent RNG stream, so the number reported is robustness to an unseen
attack.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack as A
from . import data as D
from . import model as M
from .attack import PatchAttackConfig, UniversalAttackConfig
from .data import Dataset, PerturbationSpec, PerturbedView
from .model import ClassifierPool, load_checkpoint

CSV_HEADER = "iter,split,clean_acc,adv_acc,attack,seconds"
SPLIT_ORDER = ("train", "valid", "test")

_PREDICT_CHUNK = 256


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    split: str
    clean_acc: float
    adv_acc: float
    attack: str
    seconds: float

    def __post_init__(self):
        if not (0.0 <= self.clean_acc <= 1.0 and 0.0 <= self.adv_acc <= 1.0):
            raise ValueError("accuracies must lie in [0, 1]")


def format_rows(rows, timing: str = "zero") -> str:
    """Render metrics as CSV text; ``timing='zero'`` keeps the bytes reproducible."""
    if timing not in ("zero", "real"):
        raise ValueError("timing must be 'zero' or 'real'")
    lines = [CSV_HEADER]
    for r in rows:
        seconds = r.seconds if timing == "real" else 0.0
        lines.append(f"{r.iteration},{r.split},{r.clean_acc:.6f},{r.adv_acc:.6f},{r.attack},{seconds:.6f}")
    return "\n".join(lines) + "\n"


def write_csv(path, rows, timing: str = "zero") -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_rows(rows, timing))


def predictions(target, images: np.ndarray) -> np.ndarray:
    """Predicted class ids, chunked to bound peak memory."""
    out = []
    for start in range(0, len(images), _PREDICT_CHUNK):
        chunk = images[start : start + _PREDICT_CHUNK]
        if isinstance(target, ClassifierPool):
            out.append(M.pool_predict(target, chunk))
        else:
            config, params = (target.config, target.params) if isinstance(target, M.ClassifierSnapshot) else target
            logits = M.forward(config, params, chunk, "infer").data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def _subset(dataset: Dataset, sample_size, rng) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if sample_size is None or sample_size >= len(dataset) or rng is None:
        return np.arange(len(dataset))
    return rng.choice(len(dataset), size=sample_size, replace=False)


def accuracy(target, dataset: Dataset, sample_size: int | None = None, rng=None) -> float:
    """Fraction of correct predictions over a sampled subset (or the full split)."""
    idx = _subset(dataset, sample_size, rng)
    return float(np.mean(predictions(target, dataset.images[idx]) == dataset.labels[idx]))


def perturbed_accuracy(
    target,
    dataset: Dataset,
    spec: PerturbationSpec,
    sample_size: int | None = None,
    rng=None,
    placement_seed: int = 0,
) -> float:
    """Accuracy after applying a given perturbation to the evaluation split."""
    idx = _subset(dataset, sample_size, rng)
    view = PerturbedView(dataset, spec, seed=placement_seed)
    images = view.materialize(idx)
    return float(np.mean(predictions(target, images) == dataset.labels[idx]))


def target_class_rate(
    target,
    dataset: Dataset,
    spec: PerturbationSpec,
    target_class: int,
    sample_size: int | None = None,
    rng=None,
    placement_seed: int = 0,
) -> float:
    """Fraction of perturbed inputs predicted as the attack's fixed class."""
    idx = _subset(dataset, sample_size, rng)
    view = PerturbedView(dataset, spec, seed=placement_seed)
    images = view.materialize(idx)
    return float(np.mean(predictions(target, images) == target_class))


def craft_attack(target, dataset: Dataset, attack_config, rng) -> PerturbationSpec:
    if isinstance(attack_config, UniversalAttackConfig):
        return A.learn_universal(target, dataset, attack_config, rng)
    if isinstance(attack_config, PatchAttackConfig):
        return A.learn_patch(target, dataset, attack_config, rng)
    raise TypeError(f"unsupported attack config {type(attack_config).__name__}")


def adv_accuracy(
    target,
    dataset: Dataset,
    attack_config,
    rng: np.random.Generator,
    sample_size: int | None = None,
) -> tuple[float, PerturbationSpec]:
    """Accuracy under a FRESH perturbation crafted against this classifier.

    The crafted spec is returned so callers can check it against (and keep it
    out of) any training-time pool.
    """
    spec = craft_attack(target, dataset, attack_config, rng)
    seed = int(rng.integers(0, 2**31 - 1))
    acc = perturbed_accuracy(target, dataset, spec, sample_size, rng, placement_seed=seed)
    return acc, spec


def checkpoint_files(checkpoint_dir) -> list[Path]:
    files = sorted(Path(checkpoint_dir).glob("checkpoint_*.ckpt"))
    if not files:
        raise FileNotFoundError(f"no checkpoint_*.ckpt files in {checkpoint_dir}")
    return files


def evaluate_checkpoint_series(
    checkpoint_dir,
    splits: dict[str, Dataset],
    attack_config,
    seed: int = 0,
    sample_size: int | None = 2000,
) -> list[MetricsRow]:
    """One row per checkpoint per split; a fresh perturbation is crafted per

    checkpoint on the train split and applied to every split."""
    rows = []
    kind = "universal" if isinstance(attack_config, UniversalAttackConfig) else "patch"
    for path in checkpoint_files(checkpoint_dir):
        iteration = int(path.stem.split("_")[-1])
        config, params = load_checkpoint(path)
        target = (config, params)
        rng = np.random.default_rng((seed, 5, iteration))
        t0 = time.perf_counter()
        spec = craft_attack(target, splits["train"], attack_config, rng)
        for split in SPLIT_ORDER:
            if split not in splits:
                continue
            ds = splits[split]
            sub_rng = np.random.default_rng((seed, 6, iteration, SPLIT_ORDER.index(split)))
            clean = accuracy(target, ds, sample_size, sub_rng)
            adv = perturbed_accuracy(target, ds, spec, sample_size, sub_rng, placement_seed=iteration)
            rows.append(MetricsRow(iteration, split, clean, adv, kind, time.perf_counter() - t0))
    return rows
