"""The three training procedures and a matrix-game best-response harness.

The game-theoretic loop alternates two best responses: the classifier runs
K optimizer steps against the weighted mixture of all previously perturbed
dataset views, then the perturbation player crafts a new perturbation
against the classifier (approximate mode) or against the uniform pool of
its past snapshots (exact mode) and appends it to the mixture.  Plain SGD
and per-sample adversarial training share the same inner-step machinery so
their reduction identities hold bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attack as A
from . import data as D
from . import evaluation as E
from . import model as M
from . import tensor as T
from .attack import PatchAttackConfig, PgdConfig, UniversalAttackConfig
from .data import BatchSampler, Dataset, PerturbedView, clean_view
from .evaluation import MetricsRow
from .model import ClassifierPool, ClassifierSnapshot, ModelConfig
from .tensor import Tensor


class TrainingError(RuntimeError):
    """A training run aborted; the message names the failing outer iteration."""


@dataclass(frozen=True)
class TrainConfig:
    outer_iterations: int                   # N
    inner_steps: int                        # K
    batch_size: int
    learning_rate: float
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] = ()     # global step indices
    momentum: float = 0.9
    weight_decay: float = 0.0002
    attack: UniversalAttackConfig | PatchAttackConfig | None = None
    pgd: PgdConfig | None = None
    weighting: str = "literal"
    eval_attack_iterations: int | None = None   # None: same as attack.iterations
    eval_sample_size: int | None = 2000
    seed: int = 0

    def __post_init__(self):
        if self.outer_iterations < 1 or self.inner_steps < 0 or self.batch_size < 1:
            raise ValueError("invalid train config")
        if self.learning_rate < 0 or not (0.0 <= self.momentum < 1.0):
            raise ValueError("invalid train config")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)):
            raise ValueError("lr milestones must be strictly increasing")
        if self.weighting not in ("literal", "uniform"):
            raise ValueError("weighting must be 'literal' or 'uniform'")

    def eval_attack(self):
        if self.attack is None:
            return None
        iters = self.eval_attack_iterations
        if iters is None:
            return self.attack
        return replace(self.attack, iterations=iters)


@dataclass
class FPState:
    """Growing state of the game: current classifier plus opponent history."""
    config: ModelConfig
    params: dict[str, Tensor]
    views: list[PerturbedView]              # views[0] is the clean dataset
    classifier_pool: ClassifierPool | None = None
    iteration: int = 0
    weighting: str = "literal"

    @property
    def perturbation_pool(self) -> list[D.PerturbationSpec]:
        return [v.spec for v in self.views[1:]]


def dataset_weights(n: int, mode: str = "literal") -> np.ndarray:
    """Per-dataset weights for the mixture loss over datasets 0..n-1.

    Literal mode expands the nested average of historical losses, where the
    i-th historical loss averages the first i datasets (the 0th is the clean
    dataset alone): dataset j's aggregate weight collects a 1/i share from
    every later historical term.  Uniform mode weights the datasets equally.
    n=0 (no perturbations yet) puts weight 1 on the clean dataset.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    count = max(n, 1)
    if mode == "uniform":
        return np.full(count, 1.0 / count)
    if mode != "literal":
        raise ValueError("mode must be 'literal' or 'uniform'")
    if n <= 1:
        return np.ones(1)
    harmonic = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, n + 1))])  # H_0..H_n
    weights = np.empty(n)
    weights[0] = 1.0 + harmonic[n]
    for j in range(1, n):
        weights[j] = harmonic[n] - harmonic[j]
    return weights / (n + 1)


def classifier_pool_loss(state: FPState, indices: np.ndarray, draw: int = 0, mode: str = "train") -> Tensor:
    """Weighted loss of the current classifier over every pooled dataset view.

    One index batch is materialized under each view and the per-view
    cross-entropies are combined with :func:`dataset_weights`.
    """
    weights = dataset_weights(len(state.views), state.weighting)
    labels = state.views[0].labels[indices]
    total = None
    for view, w in zip(state.views, weights):
        batch = view.materialize(indices, draw=draw)
        ce = T.softmax_cross_entropy(M.forward(state.config, state.params, batch, mode), labels)
        term = T.mul(ce, float(w))
        total = term if total is None else T.add(total, term)
    return total


def _lr_at(cfg: TrainConfig, step: int) -> float:
    passed = sum(1 for m in cfg.lr_milestones if m <= step)
    return cfg.learning_rate * cfg.lr_decay**passed


def _optimizer_step(state: FPState, loss: Tensor, velocity: dict, cfg: TrainConfig, step: int) -> None:
    names = M.trainable_names(state.params)
    grads = T.backward(loss, wrt={n: state.params[n] for n in names})
    T.sgd_momentum_step(state.params, grads, velocity, _lr_at(cfg, step), cfg.momentum, cfg.weight_decay)


def _metrics_row(
    state: FPState,
    dataset: Dataset,
    cfg: TrainConfig,
    n: int,
    spec: D.PerturbationSpec | None,
    seconds: float,
) -> MetricsRow:
    target = (state.config, state.params)
    rng = np.random.default_rng((cfg.seed, 3, n))
    clean = E.accuracy(target, dataset, cfg.eval_sample_size, rng)
    if spec is None:
        adv, kind = clean, "none"
    else:
        adv = E.perturbed_accuracy(target, dataset, spec, cfg.eval_sample_size, rng, placement_seed=n)
        kind = spec.kind
    return MetricsRow(n, dataset.split, clean, adv, kind, seconds)


def _view_seed(cfg: TrainConfig, n: int) -> int:
    return int(np.random.SeedSequence((cfg.seed, 4, n)).generate_state(1)[0])


def _craft(target, dataset: Dataset, attack_cfg, rng) -> D.PerturbationSpec:
    if isinstance(attack_cfg, UniversalAttackConfig):
        return A.learn_universal(target, dataset, attack_cfg, rng)
    if isinstance(attack_cfg, PatchAttackConfig):
        return A.learn_patch(target, dataset, attack_cfg, rng)
    raise TypeError(f"unsupported attack config {type(attack_cfg).__name__}")


def fp_train(
    model_config: ModelConfig,
    dataset: Dataset,
    cfg: TrainConfig,
    mode: str = "approximate",
    on_step=None,
    on_outer=None,
) -> tuple[FPState, list[MetricsRow]]:
    """Alternating best responses between the classifier and the perturbation player.

    Each outer iteration runs K steps of SGD on the weighted mixture of all
    pooled dataset views, then crafts the next perturbation against the
    current classifier (approximate mode) or the uniform pool of snapshots
    (exact mode, which also snapshots the classifier each iteration).  The
    reported adversarial accuracy uses the freshly crafted perturbation,
    which has not yet been trained on.
    """
    if mode not in ("approximate", "exact"):
        raise ValueError("mode must be 'approximate' or 'exact'")
    if cfg.attack is None:
        raise ValueError("fp_train needs an attack config")
    params = M.build_model(model_config, cfg.seed)
    state = FPState(model_config, params, [clean_view(dataset)], weighting=cfg.weighting)
    if mode == "exact":
        state.classifier_pool = ClassifierPool()
        state.classifier_pool.add(ClassifierSnapshot.freeze(0, model_config, params, note="initial"))
    sampler = BatchSampler(len(dataset), np.random.default_rng((cfg.seed, 1)))
    attack_rng = np.random.default_rng((cfg.seed, 2))
    velocity: dict = {}
    report: list[MetricsRow] = []
    step = 0
    for n in range(1, cfg.outer_iterations + 1):
        t0 = time.perf_counter()
        try:
            for _ in range(cfg.inner_steps):
                idx = sampler.next_indices(cfg.batch_size)
                loss = classifier_pool_loss(state, idx, draw=step, mode="train")
                _optimizer_step(state, loss, velocity, cfg, step)
                step += 1
                if on_step is not None:
                    on_step(step, state.params)
            if mode == "exact":
                state.classifier_pool.add(ClassifierSnapshot.freeze(n, model_config, params, note=f"outer {n}"))
                target = state.classifier_pool
            else:
                target = (model_config, params)
            spec = _craft(target, dataset, cfg.attack, attack_rng)
        except (ValueError, FloatingPointError) as exc:
            raise TrainingError(f"outer iteration {n}: {exc}") from exc
        state.views.append(PerturbedView(dataset, spec, seed=_view_seed(cfg, n)))
        state.iteration = n
        row = _metrics_row(state, dataset, cfg, n, spec, time.perf_counter() - t0)
        report.append(row)
        if on_outer is not None:
            on_outer(n, state.params, row)
    return state, report


def sgd_train(
    model_config: ModelConfig,
    dataset: Dataset,
    cfg: TrainConfig,
    on_step=None,
    on_outer=None,
) -> tuple[dict[str, Tensor], list[MetricsRow]]:
    """Plain stochastic gradient descent on the clean dataset, N*K steps."""
    params = M.build_model(model_config, cfg.seed)
    state = FPState(model_config, params, [clean_view(dataset)], weighting=cfg.weighting)
    sampler = BatchSampler(len(dataset), np.random.default_rng((cfg.seed, 1)))
    eval_rng = np.random.default_rng((cfg.seed, 2))
    velocity: dict = {}
    report: list[MetricsRow] = []
    step = 0
    for n in range(1, cfg.outer_iterations + 1):
        t0 = time.perf_counter()
        try:
            for _ in range(cfg.inner_steps):
                idx = sampler.next_indices(cfg.batch_size)
                loss = classifier_pool_loss(state, idx, draw=step, mode="train")
                _optimizer_step(state, loss, velocity, cfg, step)
                step += 1
                if on_step is not None:
                    on_step(step, state.params)
            eval_cfg = cfg.eval_attack()
            spec = _craft((model_config, params), dataset, eval_cfg, eval_rng) if eval_cfg else None
        except (ValueError, FloatingPointError) as exc:
            raise TrainingError(f"outer iteration {n}: {exc}") from exc
        row = _metrics_row(state, dataset, cfg, n, spec, time.perf_counter() - t0)
        report.append(row)
        if on_outer is not None:
            on_outer(n, params, row)
    return params, report


def at_train(
    model_config: ModelConfig,
    dataset: Dataset,
    cfg: TrainConfig,
    on_step=None,
    on_outer=None,
    margin_log: list | None = None,
) -> tuple[dict[str, Tensor], list[MetricsRow]]:
    """Adversarial training: per-batch PGD examples against the current
    classifier, descending on the half clean, half adversarial loss.

    ``margin_log``, when given, records per step whether the adversarial
    loss term was at least the clean term.
    """
    if cfg.pgd is None:
        raise ValueError("at_train needs a pgd config")
    params = M.build_model(model_config, cfg.seed)
    state = FPState(model_config, params, [clean_view(dataset)], weighting=cfg.weighting)
    sampler = BatchSampler(len(dataset), np.random.default_rng((cfg.seed, 1)))
    pgd_rng = np.random.default_rng((cfg.seed, 2))
    eval_rng = np.random.default_rng((cfg.seed, 7))
    velocity: dict = {}
    report: list[MetricsRow] = []
    step = 0
    for n in range(1, cfg.outer_iterations + 1):
        t0 = time.perf_counter()
        try:
            for _ in range(cfg.inner_steps):
                idx = sampler.next_indices(cfg.batch_size)
                x, y = dataset.images[idx], dataset.labels[idx]
                adv = A.pgd_per_sample((model_config, params), x, y, cfg.pgd, pgd_rng)
                ce_clean = T.softmax_cross_entropy(M.forward(model_config, params, x, "train"), y)
                ce_adv = T.softmax_cross_entropy(M.forward(model_config, params, adv, "train"), y)
                if margin_log is not None:
                    margin_log.append(ce_adv.item() >= ce_clean.item())
                loss = T.add(T.mul(ce_clean, 0.5), T.mul(ce_adv, 0.5))
                _optimizer_step(state, loss, velocity, cfg, step)
                step += 1
                if on_step is not None:
                    on_step(step, params)
            eval_cfg = cfg.eval_attack()
            spec = _craft((model_config, params), dataset, eval_cfg, eval_rng) if eval_cfg else None
        except (ValueError, FloatingPointError) as exc:
            raise TrainingError(f"outer iteration {n}: {exc}") from exc
        row = _metrics_row(state, dataset, cfg, n, spec, time.perf_counter() - t0)
        report.append(row)
        if on_outer is not None:
            on_outer(n, params, row)
    return params, report


# ---------------------------------------------------------------------------
# matrix-game fictitious play
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixGame:
    """Zero-sum game given by the row player's payoff matrix."""
    payoff: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.payoff, dtype=np.float64)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValueError("payoff must be a finite 2-d matrix")
        object.__setattr__(self, "payoff", arr)


ROCK_PAPER_SCISSORS = MatrixGame(np.array([
    [0.0, -1.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 1.0, 0.0],
]))

MATCHING_PENNIES = MatrixGame(np.array([
    [1.0, -1.0],
    [-1.0, 1.0],
]))


def fp_matrix_game(game: MatrixGame, iterations: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Classic discrete fictitious play on a zero-sum matrix game.

    Each player best-responds to the opponent's empirical mixture so far
    (ties toward the lowest action index).  Returns the empirical strategies
    and the per-iteration exploitability: the row best-response value against
    the column mixture minus the column best-response value against the row
    mixture, which shrinks to zero at equilibrium.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    payoff = game.payoff
    m, n = payoff.shape
    row_counts = np.zeros(m)
    col_counts = np.zeros(n)
    row_cum = np.zeros(m)   # payoff of each row action against column history
    col_cum = np.zeros(n)   # payoff of each column action against row history
    exploitability = np.empty(iterations)
    for t in range(1, iterations + 1):
        r = int(np.argmax(row_cum))
        c = int(np.argmin(col_cum))
        row_counts[r] += 1
        col_counts[c] += 1
        row_cum += payoff[:, c]
        col_cum += payoff[r, :]
        p = row_counts / t
        q = col_counts / t
        exploitability[t - 1] = float((payoff @ q).max() - (p @ payoff).min())
    return row_counts / iterations, col_counts / iterations, exploitability


def game_value(game: MatrixGame, p: np.ndarray, q: np.ndarray) -> float:
    return float(p @ game.payoff @ q)
