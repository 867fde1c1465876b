import hashlib

import numpy as np
import pytest

from advgame import data as D
from advgame import model as M
from advgame import tensor as T
from advgame import train as TR
from advgame.attack import PgdConfig, UniversalAttackConfig
from advgame.model import build_model, forward, tiny_config
from advgame.tensor import softmax_cross_entropy
from advgame.train import (
    MATCHING_PENNIES,
    ROCK_PAPER_SCISSORS,
    FPState,
    MatrixGame,
    TrainConfig,
    TrainingError,
    at_train,
    classifier_pool_loss,
    dataset_weights,
    fp_matrix_game,
    fp_train,
    game_value,
    sgd_train,
)


def weights_oracle(n):
    """Direct expansion of the nested historical-loss recursion."""
    if n == 0:
        return np.array([1.0])
    acc = np.zeros(n)
    acc[0] += 1.0  # the 0th historical loss is the clean-dataset loss alone
    for i in range(1, n + 1):
        for j in range(i):
            acc[j] += 1.0 / i
    return acc / (n + 1)


def small_dataset(seed=0, classes=4, per_class=8, side=8):
    return D.make_synthetic(classes, per_class, side, seed=seed)


def desk_cfg(**kw):
    base = dict(
        outer_iterations=1,
        inner_steps=5,
        batch_size=8,
        learning_rate=0.05,
        attack=UniversalAttackConfig(16 / 255, 0.01, 0, batch_size=8),
        eval_sample_size=16,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def param_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        if params[name].requires_grad:
            h.update(params[name].data.tobytes())
    return h.hexdigest()


class TestDatasetWeights:
    def test_n0_clean_only(self):
        assert np.array_equal(dataset_weights(0, "literal"), [1.0])

    def test_n1(self):
        assert np.array_equal(dataset_weights(1, "literal"), [1.0])

    def test_n2_literal_hand_expansion(self):
        w = dataset_weights(2, "literal")
        assert np.allclose(w, [5 / 6, 1 / 6], rtol=0, atol=1e-15)

    def test_matches_expansion_oracle_up_to_100(self):
        for n in range(0, 101):
            w = dataset_weights(n, "literal")
            assert np.allclose(w, weights_oracle(n), rtol=0, atol=1e-12)
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w >= 0)

    def test_uniform_equal_and_normalized(self):
        for n in range(0, 20):
            w = dataset_weights(n, "uniform")
            assert np.allclose(w, w[0]) and abs(w.sum() - 1.0) < 1e-12

    def test_clean_weight_non_increasing(self):
        prev = 1.0
        for n in range(1, 60):
            w0 = dataset_weights(n, "literal")[0]
            assert w0 <= prev + 1e-15
            prev = w0


class TestClassifierPoolLoss:
    def _state(self, dataset, views_extra=()):
        cfg = tiny_config(side=8, num_classes=dataset.num_classes)
        params = build_model(cfg, 0)
        views = [D.clean_view(dataset)] + list(views_extra)
        return FPState(cfg, params, views)

    def test_empty_pool_is_clean_loss(self):
        ds = small_dataset()
        state = self._state(ds)
        idx = np.arange(6)
        got = classifier_pool_loss(state, idx, mode="infer").item()
        want = softmax_cross_entropy(
            forward(state.config, state.params, ds.images[idx], "infer"), ds.labels[idx]
        ).item()
        assert got == want

    def test_zero_perturbation_pool_equals_clean(self):
        ds = small_dataset()
        zero = D.PerturbedView(ds, D.zero_universal(ds.image_shape, 0.1))
        state = self._state(ds, [zero])
        idx = np.arange(6)
        got = classifier_pool_loss(state, idx, mode="infer").item()
        want = softmax_cross_entropy(
            forward(state.config, state.params, ds.images[idx], "infer"), ds.labels[idx]
        ).item()
        assert abs(got - want) < 1e-12

    def test_weighted_sum_term_by_term(self):
        ds = small_dataset()
        rng = np.random.default_rng(1)
        eps = 0.1
        spec1 = D.PerturbationSpec("universal", rng.uniform(-eps, eps, ds.image_shape), epsilon=eps)
        spec2 = D.PerturbationSpec("universal", rng.uniform(-eps, eps, ds.image_shape), epsilon=eps)
        v1, v2 = D.PerturbedView(ds, spec1), D.PerturbedView(ds, spec2)
        state = self._state(ds, [v1, v2])
        idx = np.arange(8)
        weights = dataset_weights(3, "literal")
        terms = []
        for view in state.views:
            x = view.materialize(idx, draw=0)
            terms.append(
                softmax_cross_entropy(forward(state.config, state.params, x, "infer"), ds.labels[idx]).item()
            )
        want = sum(w * t for w, t in zip(weights, terms))
        got = classifier_pool_loss(state, idx, mode="infer").item()
        assert abs(got - want) < 1e-12


class TestReductionIdentities:
    def test_fp_with_zero_attack_equals_sgd_bitwise(self):
        ds = small_dataset()
        mc = tiny_config(side=8, num_classes=ds.num_classes)
        cfg = desk_cfg(inner_steps=25)
        fp_digests, sgd_digests = [], []
        fp_train(mc, ds, cfg, mode="approximate", on_step=lambda s, p: fp_digests.append(param_digest(p)))
        sgd_train(mc, ds, cfg, on_step=lambda s, p: sgd_digests.append(param_digest(p)))
        assert fp_digests == sgd_digests and len(fp_digests) == 25

    def test_at_with_zero_pgd_equals_sgd_bitwise(self):
        ds = small_dataset()
        mc = tiny_config(side=8, num_classes=ds.num_classes)
        cfg = desk_cfg(inner_steps=25, pgd=PgdConfig(16 / 255, 0.01, 0, random_init=False))
        at_digests, sgd_digests = [], []
        at_train(mc, ds, cfg, on_step=lambda s, p: at_digests.append(param_digest(p)))
        sgd_train(mc, ds, cfg, on_step=lambda s, p: sgd_digests.append(param_digest(p)))
        assert at_digests == sgd_digests and len(at_digests) == 25


class TestFpTrain:
    def test_k0_returns_initial_classifier_and_one_perturbation(self):
        ds = small_dataset()
        mc = tiny_config(side=8, num_classes=ds.num_classes)
        cfg = desk_cfg(inner_steps=0, attack=UniversalAttackConfig(16 / 255, 0.01, 3, batch_size=8))
        state, report = fp_train(mc, ds, cfg)
        init = build_model(mc, cfg.seed)
        for name in init:
            assert np.array_equal(state.params[name].data, init[name].data)
        assert len(state.perturbation_pool) == 1 and len(report) == 1

    def test_pool_length_equals_outer_iterations(self):
        ds = small_dataset()
        mc = tiny_config(side=8, num_classes=ds.num_classes)
        cfg = desk_cfg(outer_iterations=3, inner_steps=2,
                       attack=UniversalAttackConfig(16 / 255, 0.01, 2, batch_size=8))
        state, report = fp_train(mc, ds, cfg)
        assert len(state.perturbation_pool) == 3 and len(report) == 3
        for spec in state.perturbation_pool:
            assert np.abs(spec.xi).max() <= 16 / 255

    def test_pool_memory_is_per_image_not_per_dataset(self):
        small = small_dataset(per_class=4)
        big = small_dataset(per_class=64)
        mc = tiny_config(side=8, num_classes=small.num_classes)
        cfg = desk_cfg(outer_iterations=2, inner_steps=1,
                       attack=UniversalAttackConfig(16 / 255, 0.01, 1, batch_size=8))
        state_small, _ = fp_train(mc, small, cfg)
        state_big, _ = fp_train(mc, big, cfg)
        bytes_small = sum(v.storage_bytes() for v in state_small.views)
        bytes_big = sum(v.storage_bytes() for v in state_big.views)
        assert bytes_small == bytes_big
        assert bytes_small == 2 * small.images[0].nbytes

    def test_exact_mode_snapshots(self):
        ds = small_dataset()
        mc = tiny_config(side=8, num_classes=ds.num_classes)
        cfg = desk_cfg(outer_iterations=2, inner_steps=2,
                       attack=UniversalAttackConfig(16 / 255, 0.01, 1, batch_size=8, target="pool"))
        state, _ = fp_train(mc, ds, cfg, mode="exact")
        assert state.classifier_pool is not None and len(state.classifier_pool) == 3
        iters = [s.iteration for s in state.classifier_pool]
        assert iters == [0, 1, 2]

    def test_error_names_outer_iteration(self):
        ds = small_dataset()
        mc = tiny_config(side=16, num_classes=ds.num_classes)  # wrong side for 8x8 data
        cfg = desk_cfg(inner_steps=1)
        with pytest.raises(TrainingError, match="outer iteration 1"):
            fp_train(mc, ds, cfg)


class TestSgdTrain:
    def test_zero_lr_leaves_params(self):
        ds = small_dataset()
        mc = tiny_config(side=8, num_classes=ds.num_classes)
        cfg = desk_cfg(inner_steps=5, learning_rate=0.0)
        params, _ = sgd_train(mc, ds, cfg)
        init = build_model(mc, cfg.seed)
        for name in init:
            assert np.array_equal(params[name].data, init[name].data)

    def test_lr_schedule_decays_at_milestones(self):
        cfg = desk_cfg(lr_milestones=(10, 20), learning_rate=0.5)
        assert TR._lr_at(cfg, 9) == 0.5
        assert TR._lr_at(cfg, 10) == 0.5 * 0.1
        assert abs(TR._lr_at(cfg, 25) - 0.5 * 0.01) < 1e-15

    def test_reaches_high_train_accuracy(self):
        ds = D.make_synthetic(10, 20, 8, seed=3)
        mc = tiny_config(side=8, num_classes=10)
        cfg = desk_cfg(outer_iterations=1, inner_steps=600, batch_size=32,
                       learning_rate=0.05, eval_sample_size=None,
                       attack=UniversalAttackConfig(16 / 255, 0.01, 0, batch_size=8))
        params, report = sgd_train(mc, ds, cfg)
        assert report[-1].clean_acc >= 0.95

    def test_milestones_must_increase(self):
        with pytest.raises(ValueError):
            desk_cfg(lr_milestones=(20, 10))


class TestAtTrain:
    def test_margin_log_mostly_adversarial(self):
        ds = D.make_synthetic(4, 16, 8, seed=4)
        mc = tiny_config(side=8, num_classes=4)
        eps = 16 / 255
        cfg = desk_cfg(inner_steps=150, batch_size=16,
                       pgd=PgdConfig(eps, eps / 4, 5, random_init=True),
                       attack=UniversalAttackConfig(eps, 0.01, 0, batch_size=8))
        log = []
        at_train(mc, ds, cfg, margin_log=log)
        warm = log[50:]
        assert np.mean(warm) >= 0.95


class TestMatrixGame:
    def test_rps_converges_to_uniform(self):
        p, q, _ = fp_matrix_game(ROCK_PAPER_SCISSORS, 50_000)
        third = np.full(3, 1 / 3)
        assert np.abs(p - third).max() < 0.05
        assert np.abs(q - third).max() < 0.05

    def test_matching_pennies_value_near_zero(self):
        p, q, _ = fp_matrix_game(MATCHING_PENNIES, 50_000)
        assert abs(game_value(MATCHING_PENNIES, p, q)) < 0.02

    def test_saddle_point_lock_in(self):
        # row action 1 strictly dominates; column action 0 strictly dominates
        game = MatrixGame(np.array([[0.0, 2.0], [1.0, 3.0]]))
        iters = 200
        p, q, _ = fp_matrix_game(game, iters)
        assert p[1] >= (iters - 1) / iters
        assert q[0] == 1.0

    def test_exploitability_bounded_and_running_min_monotone(self):
        _, _, trace = fp_matrix_game(ROCK_PAPER_SCISSORS, 2_000)
        assert np.all(trace >= -1e-12) and np.all(trace <= 2.0)
        running_min = np.minimum.accumulate(trace)
        assert np.all(np.diff(running_min) <= 0 + 1e-15)

    def test_invalid_game(self):
        with pytest.raises(ValueError):
            MatrixGame(np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            fp_matrix_game(MATCHING_PENNIES, 0)
