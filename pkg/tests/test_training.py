import numpy as np
import pytest

from foresight.errors import ParameterError
from foresight.features import FeatureSequence
from foresight.model import ForecasterConfig, forward, init_weights, named_params
from foresight.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    effective_lr,
    gradient_check,
    loss_and_grads,
    make_mask_plan,
    mfm_loss,
    run_training,
    smooth_l1,
)

from conftest import TINY, randomized_weights


def rand_seq(rng, cfg):
    shape = (cfg.seq_frames, cfg.grid_h, cfg.grid_w, cfg.d_in)
    return FeatureSequence(rng.standard_normal(shape), tuple(range(cfg.seq_frames)))


class TestSmoothL1:
    def test_branch_values(self):
        # beta 0.1: quadratic below the seam, linear above, exact at both
        beta = 0.1
        cases = {0.05: 0.0125, 0.2: 0.15, 0.1: 0.05}
        for diff, expected in cases.items():
            got = float(smooth_l1(np.array([diff]), np.array([0.0]), beta))
            assert got == pytest.approx(expected, abs=1e-15)

    def test_symmetry_and_sum(self):
        pred = np.array([0.05, -0.2, 0.1])
        got = float(smooth_l1(pred, np.zeros(3), 0.1))
        assert got == pytest.approx(0.0125 + 0.15 + 0.05, abs=1e-15)

    def test_continuous_at_seam(self):
        beta = 0.1
        below = float(smooth_l1(np.array([beta - 1e-9]), np.array([0.0]), beta))
        at = float(smooth_l1(np.array([beta]), np.array([0.0]), beta))
        assert abs(below - at) < 1e-8

    def test_rejects_bad_beta(self):
        with pytest.raises(ParameterError):
            smooth_l1(np.zeros(2), np.zeros(2), 0.0)


class TestMaskPlan:
    def test_full_masks_exactly_the_future(self):
        plan = make_mask_plan(TINY, "full")
        assert not plan.mask[: TINY.context_frames].any()
        assert plan.mask[TINY.context_frames :].all()

    def test_random_never_masks_context(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            plan = make_mask_plan(TINY, "random", rng)
            assert not plan.mask[: TINY.context_frames].any()
            assert plan.mask.any()

    def test_random_ratio_draw_range(self):
        rng = np.random.default_rng(1)
        ratios = [make_mask_plan(TINY, "random", rng).ratio for _ in range(100)]
        assert all(0.5 <= r < 1.0 for r in ratios)

    def test_explicit_ratio_respected_statistically(self):
        rng = np.random.default_rng(2)
        cfg = ForecasterConfig(1, 8, 2, 4, 3, 2, 8, 8)
        hits = sum(
            make_mask_plan(cfg, "random", rng, ratio=0.25).mask[2:].sum()
            for _ in range(200)
        )
        frac = hits / (200 * 64)
        assert 0.2 < frac < 0.3

    def test_tiny_grid_resamples_empty_draw(self):
        cfg = ForecasterConfig(1, 8, 2, 4, 2, 1, 1, 1)
        rng = np.random.default_rng(3)
        for _ in range(100):
            plan = make_mask_plan(cfg, "random", rng, ratio=0.05)
            assert plan.mask.any()


class TestMfmLoss:
    def test_unmasked_positions_cannot_move_the_loss(self, tiny_config, tiny_weights):
        rng = np.random.default_rng(10)
        f = rand_seq(rng, tiny_config)
        target = rand_seq(rng, tiny_config)
        plan = make_mask_plan(tiny_config, "full")
        pred, _ = forward(f, plan, tiny_weights)
        base = mfm_loss(pred, target, plan)
        tampered = pred.data.copy()
        tampered[~plan.mask] += rng.standard_normal((int((~plan.mask).sum()), 4)) * 1e3
        after = mfm_loss(
            FeatureSequence(tampered, pred.frame_ids), target, plan
        )
        assert base == after

    def test_masked_perturbation_moves_the_loss(self, tiny_config, tiny_weights):
        rng = np.random.default_rng(11)
        f = rand_seq(rng, tiny_config)
        target = rand_seq(rng, tiny_config)
        plan = make_mask_plan(tiny_config, "full")
        pred, _ = forward(f, plan, tiny_weights)
        base = mfm_loss(pred, target, plan)
        tampered = pred.data.copy()
        tampered[plan.mask] += 0.5
        after = mfm_loss(FeatureSequence(tampered, pred.frame_ids), target, plan)
        assert after != base

    def test_perfect_prediction_zero_loss(self, tiny_config):
        rng = np.random.default_rng(12)
        target = rand_seq(rng, tiny_config)
        plan = make_mask_plan(tiny_config, "full")
        for variant in ("smooth_l1", "l1", "mse"):
            assert mfm_loss(target, target, plan, variant=variant) == 0.0
        # cosine of a vector with itself is 1, so the extra term is 0 too
        assert mfm_loss(target, target, plan, variant="smooth_l1_plus_cos") == pytest.approx(0.0, abs=1e-12)

    def test_mean_over_masked_tokens(self, tiny_config):
        # constant per-token loss: total equals that constant
        cfg = tiny_config
        shape = (cfg.seq_frames, cfg.grid_h, cfg.grid_w, cfg.d_in)
        pred = FeatureSequence(np.zeros(shape), (0, 1, 2))
        target = FeatureSequence(np.full(shape, 0.2), (0, 1, 2))
        plan = make_mask_plan(cfg, "full")
        # per dim: |0.2| - 0.05 = 0.15, times 4 dims
        assert mfm_loss(pred, target, plan) == pytest.approx(0.6, rel=1e-12)

    def test_unknown_variant_rejected(self, tiny_config):
        rng = np.random.default_rng(13)
        t = rand_seq(rng, tiny_config)
        plan = make_mask_plan(tiny_config, "full")
        with pytest.raises(ParameterError):
            mfm_loss(t, t, plan, variant="huber")


class TestGradients:
    def test_gradcheck_smooth_l1_full(self, tiny_config):
        report = gradient_check(tiny_config, eps=1e-3, tol=1e-4, seed=0)
        assert report.passed, f"max rel err {report.max_rel_err} at {report.worst_param}"

    @pytest.mark.parametrize("variant", ["l1", "mse", "smooth_l1_plus_cos"])
    def test_gradcheck_other_variants(self, variant, tiny_config):
        report = gradient_check(
            tiny_config, eps=1e-4, tol=1e-4, seed=1, variant=variant, strategy="random"
        )
        assert report.passed, f"{variant}: {report.max_rel_err} at {report.worst_param}"

    def test_grads_cover_every_parameter(self, tiny_config, tiny_weights):
        rng = np.random.default_rng(14)
        f = rand_seq(rng, tiny_config)
        target = rand_seq(rng, tiny_config)
        plan = make_mask_plan(tiny_config, "full")
        _, grads = loss_and_grads(f, target, plan, tiny_weights)
        names = {name for name, _ in named_params(tiny_weights)}
        assert set(grads) == names
        for name, arr in named_params(tiny_weights):
            assert grads[name].shape == arr.shape


class TestSchedule:
    def test_warmup_then_cosine_to_zero(self):
        lr = 0.1
        assert effective_lr(lr, 10, 100, 1) == pytest.approx(0.01)
        assert effective_lr(lr, 10, 100, 10) == pytest.approx(lr)
        assert effective_lr(lr, 10, 100, 100) == 0.0
        mid = effective_lr(lr, 10, 100, 55)
        assert 0.4 * lr < mid < 0.6 * lr

    def test_zero_warmup(self):
        assert effective_lr(0.1, 0, 50, 50) == 0.0
        assert effective_lr(0.1, 0, 50, 1) < 0.1

    def test_monotone_decay_after_warmup(self):
        vals = [effective_lr(1.0, 5, 60, s) for s in range(6, 61)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


class TestAdam:
    def test_zero_gradients_leave_weights_unchanged(self, tiny_config):
        w = randomized_weights(tiny_config, seed=20, dtype=np.float32)
        grads = {name: np.zeros_like(arr) for name, arr in named_params(w)}
        tc = TrainConfig(total_steps=10, batch_size=1, lr=0.1)
        w2, _ = adam_step(w, grads, OptimizerState(), tc, step=1)
        for (_, a), (_, b) in zip(named_params(w), named_params(w2)):
            assert np.array_equal(a, b)

    def test_step_at_schedule_end_is_noop(self, tiny_config):
        w = randomized_weights(tiny_config, seed=21, dtype=np.float32)
        rng = np.random.default_rng(21)
        grads = {name: rng.standard_normal(arr.shape).astype(np.float32)
                 for name, arr in named_params(w)}
        tc = TrainConfig(total_steps=10, batch_size=1, lr=0.1)
        w2, _ = adam_step(w, grads, OptimizerState(), tc, step=10)
        for (_, a), (_, b) in zip(named_params(w), named_params(w2)):
            assert np.array_equal(a, b)

    def test_first_step_magnitude(self, tiny_config):
        # bias correction makes the first update lr * g / (|g| + eps)
        w = randomized_weights(tiny_config, seed=22, dtype=np.float64)
        grads = {name: np.full(arr.shape, 2.0) for name, arr in named_params(w)}
        tc = TrainConfig(total_steps=100, batch_size=1, lr=0.05, adam_eps=0.0)
        w2, _ = adam_step(w, grads, OptimizerState(), tc, step=1)
        lr1 = effective_lr(0.05, 0, 100, 1)
        for (_, a), (_, b) in zip(named_params(w), named_params(w2)):
            assert np.abs((a - b) - lr1).max() < 1e-12

    def test_rejects_zero_based_step(self, tiny_config):
        w = randomized_weights(tiny_config, seed=23)
        grads = {name: np.zeros_like(arr) for name, arr in named_params(w)}
        with pytest.raises(ParameterError):
            adam_step(w, grads, OptimizerState(), TrainConfig(total_steps=5, batch_size=1), step=0)


def tiny_corpus(cfg, n=4, frames=5, seed=30):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        data = rng.standard_normal(
            (frames, cfg.grid_h, cfg.grid_w, cfg.d_in)
        ).astype(np.float32)
        out.append(FeatureSequence(data, tuple(range(frames))))
    return out


class TestRunTraining:
    def test_deterministic(self, tiny_config):
        corpus = tiny_corpus(tiny_config)
        tc = TrainConfig(total_steps=8, batch_size=2, lr=1e-3, seed=5)
        w0 = init_weights(tiny_config, seed=1)
        r1 = run_training(corpus, tc, w0)
        r2 = run_training(corpus, tc, w0)
        assert [row.loss for row in r1.curve] == [row.loss for row in r2.curve]
        for (_, a), (_, b) in zip(named_params(r1.weights), named_params(r2.weights)):
            assert np.array_equal(a, b)

    def test_curve_rows_complete(self, tiny_config):
        corpus = tiny_corpus(tiny_config)
        tc = TrainConfig(total_steps=6, batch_size=2, lr=1e-3, warmup_steps=2, seed=6)
        res = run_training(corpus, tc, init_weights(tiny_config, seed=2))
        assert [r.step for r in res.curve] == list(range(1, 7))
        assert all(r.phase == 1 for r in res.curve)
        assert res.curve[-1].lr == 0.0
        assert all(np.isfinite(r.loss) for r in res.curve)

    def test_loss_decreases_on_fixed_data(self, tiny_config):
        # constant sequences are trivially learnable
        data = np.ones((5, 2, 2, 4), dtype=np.float32) * 0.7
        corpus = [FeatureSequence(data, tuple(range(5)))] * 2
        tc = TrainConfig(total_steps=60, batch_size=2, lr=5e-3, seed=7)
        res = run_training(corpus, tc, init_weights(tiny_config, seed=3))
        first = np.mean([r.loss for r in res.curve[:5]])
        last = np.mean([r.loss for r in res.curve[-5:]])
        assert last < first * 0.2

    def test_resume_is_bit_identical(self, tiny_config, tmp_path):
        corpus = tiny_corpus(tiny_config)
        tc = TrainConfig(total_steps=12, batch_size=2, lr=1e-3, seed=8)
        w0 = init_weights(tiny_config, seed=4)
        full = run_training(corpus, tc, w0)

        # every-7 leaves the checkpoint at step 7, so resume covers steps 8..12
        ckpt = tmp_path / "mid.ckpt"
        run_training(corpus, tc, w0, checkpoint_path=str(ckpt), checkpoint_every=7)
        resumed = run_training(corpus, tc, w0, resume_from=str(ckpt))
        assert [r.loss for r in resumed.curve] == [r.loss for r in full.curve]
        for (_, a), (_, b) in zip(named_params(full.weights), named_params(resumed.weights)):
            assert np.array_equal(a, b)

    def test_frame_stride_needs_enough_frames(self, tiny_config):
        corpus = tiny_corpus(tiny_config, frames=4)
        tc = TrainConfig(total_steps=2, batch_size=1, frame_stride=2, seed=9)
        # window span (3-1)*2+1 = 5 > 4 frames
        with pytest.raises(ParameterError):
            run_training(corpus, tc, init_weights(tiny_config, seed=5))

    def test_rejects_empty_corpus(self, tiny_config):
        tc = TrainConfig(total_steps=2, batch_size=1)
        with pytest.raises(ParameterError):
            run_training([], tc, init_weights(tiny_config, seed=6))

    def test_two_phase_switches_grid_and_resets_schedule(self, tiny_config):
        from foresight.training import Phase2Config

        corpus = tiny_corpus(tiny_config)
        cfg2_h, cfg2_w = 4, 4
        rng = np.random.default_rng(31)
        phase2 = [
            FeatureSequence(
                rng.standard_normal((5, cfg2_h, cfg2_w, tiny_config.d_in)).astype(np.float32),
                tuple(range(5)),
            )
            for _ in range(3)
        ]
        tc = TrainConfig(
            total_steps=5, batch_size=2, lr=1e-3, seed=10,
            phase2=Phase2Config(grid_h=cfg2_h, grid_w=cfg2_w, total_steps=4),
        )
        res = run_training(corpus, tc, init_weights(tiny_config, seed=7), phase2_corpus=phase2)
        assert res.weights.config.grid_h == cfg2_h
        assert res.weights.config.grid_w == cfg2_w
        phases = [r.phase for r in res.curve]
        assert phases == [1] * 5 + [2] * 4
        # fresh cosine schedule in phase 2: its first lr is near the peak again
        lr_p2 = [r.lr for r in res.curve if r.phase == 2]
        assert lr_p2[0] > res.curve[4].lr
        assert lr_p2[-1] == 0.0
