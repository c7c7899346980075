from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_alignment_config, small_encoder_config
from umind.alignment.gradcheck import (
    check_alignment,
    check_all,
    gradient_check,
    random_alignment_batch,
    reference_encoder_config,
    relative_error,
)
from umind.alignment.losses import (
    alignment_objective,
    clip_text_loss,
    contrastive_loss,
    mse_loss_text,
    mse_loss_visual,
    overall_loss,
)
from umind.alignment.training import (
    AlignmentConfig,
    compute_targets,
    load_train_state,
    new_train_state,
    save_train_state,
    split_validation,
    train,
)
from umind.encoders import EmbeddingBatch, init_params, model_fingerprint
from umind.errors import ConfigError, DegenerateInputError, FormatError, NumericalAbort

ORTHO = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
ORTHO_LOSS = math.log(1 + math.exp(-1))


def _rand(b, d, seed):
    return torch.randn(b, d, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


class TestContrastive:
    def test_single_pair_is_zero(self):
        assert float(contrastive_loss(_rand(1, 4, 0), _rand(1, 4, 1), 0.07)) == 0.0

    def test_orthonormal_pair(self):
        assert math.isclose(float(contrastive_loss(ORTHO, ORTHO, 1.0)), ORTHO_LOSS, rel_tol=1e-12)
        assert abs(ORTHO_LOSS - 0.31326) < 1e-5

    @pytest.mark.parametrize("b", [2, 3, 7, 16])
    def test_identical_targets_give_log_b(self, b):
        targets = _rand(1, 5, 9).repeat(b, 1)
        assert math.isclose(float(contrastive_loss(_rand(b, 5, b), targets, 0.3)), math.log(b), rel_tol=1e-12)

    def test_accepts_embedding_batches(self):
        a = EmbeddingBatch(ORTHO, "neural_visual", [0, 1])
        t = EmbeddingBatch(ORTHO, "image", [0, 1])
        assert math.isclose(float(contrastive_loss(a, t, 1.0)), ORTHO_LOSS, rel_tol=1e-12)

    def test_one_directional(self):
        a, t = _rand(4, 3, 1), _rand(4, 3, 2)
        forward = float(contrastive_loss(a, t, 0.5))
        manual = -np.mean(np.diag(torch.log_softmax(
            torch.nn.functional.normalize(a) @ torch.nn.functional.normalize(t).T / 0.5, dim=1).numpy()))
        assert math.isclose(forward, manual, rel_tol=1e-12)
        assert not math.isclose(forward, float(contrastive_loss(t, a, 0.5)), rel_tol=1e-6)

    def test_zero_norm_row(self):
        with pytest.raises(DegenerateInputError):
            contrastive_loss(torch.zeros(2, 3), _rand(2, 3, 0), 1.0)

    @pytest.mark.parametrize("tau", [0.0, -0.1])
    def test_nonpositive_tau(self, tau):
        with pytest.raises(ConfigError):
            contrastive_loss(ORTHO, ORTHO, tau)

    def test_shape_mismatch(self):
        with pytest.raises(FormatError):
            contrastive_loss(_rand(2, 3, 0), _rand(3, 3, 0), 1.0)

    def test_positive_when_off_diagonal_ties(self):
        t = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        assert float(contrastive_loss(t, t, 1.0)) > 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 10_000), st.integers(-6, 6))
    def test_nonnegative_and_row_scale_invariant(self, b, d, seed, exponent):
        a, t = _rand(b, d, seed), _rand(b, d, seed + 1)
        base = contrastive_loss(a, t, 0.2)
        assert float(base) >= 0
        scaled = a.clone()
        scaled[seed % b] *= 2.0 ** exponent
        assert float(contrastive_loss(scaled, t, 0.2)) == float(base)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_invariance_arbitrary_factor_to_rounding(self, b, seed, factor):
        a, t = _rand(b, 4, seed), _rand(b, 4, seed + 1)
        scaled = t * factor
        assert math.isclose(float(contrastive_loss(a, scaled, 0.1)), float(contrastive_loss(a, t, 0.1)),
                            rel_tol=1e-12, abs_tol=1e-12)


class TestTextAndMSE:
    def test_equal_text_targets(self):
        zs, z = _rand(3, 4, 0), _rand(3, 4, 1)
        t1, t2, mean = clip_text_loss(zs, z, z, 0.1)
        assert float(t1) == float(t2) == float(mean)

    def test_single_pair_all_zero(self):
        assert all(float(v) == 0.0 for v in clip_text_loss(_rand(1, 3, 0), _rand(1, 3, 1), _rand(1, 3, 2), 0.1))

    def test_orthonormal_case(self):
        assert math.isclose(float(clip_text_loss(ORTHO, ORTHO, ORTHO, 1.0)[2]), ORTHO_LOSS, rel_tol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_mean_of_parts(self, b, seed):
        t1, t2, mean = clip_text_loss(_rand(b, 3, seed), _rand(b, 3, seed + 1), _rand(b, 3, seed + 2), 0.3)
        assert float(mean) == float((t1 + t2) / 2)

    def test_mse_identical_is_zero(self):
        z = _rand(4, 3, 0)
        assert float(mse_loss_visual(z, z)) == 0.0
        assert float(mse_loss_text(z, z, z)) == 0.0

    def test_mse_hand_value(self):
        assert float(mse_loss_visual(torch.tensor([[0.0, 0.0]]), torch.tensor([[1.0, 0.0]]))) == 0.5

    def test_mse_on_raw_vectors(self):
        # Scaling matters: no normalisation before the regression term.
        z = _rand(2, 3, 0)
        assert float(mse_loss_visual(z, 2 * z)) == pytest.approx(float((z ** 2).mean()))

    def test_mse_text_averages_both_targets(self):
        p = torch.zeros(1, 2)
        assert float(mse_loss_text(p, torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 0.0]]))) == 0.25


class TestOverall:
    def test_all_ones(self):
        assert overall_loss(1.0, 1.0, 1.0, 1.0, 0.5, 2.0) == 3.0

    def test_alpha_one_drops_text(self):
        assert overall_loss(0.4, 0.3, 123.0, 456.0, 1.0, 2.0) == 0.4 + 2.0 * 0.3

    def test_beta_zero(self):
        assert overall_loss(0.4, 9.0, 0.8, 9.0, 0.25, 0.0) == 0.25 * 0.4 + 0.75 * 0.8

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 5))
    def test_linear_probe_coefficients(self, alpha, beta):
        probes = np.eye(4)
        coeffs = [overall_loss(*row, alpha, beta) for row in probes]
        np.testing.assert_allclose(coeffs, [alpha, alpha * beta, 1 - alpha, (1 - alpha) * beta], rtol=1e-12, atol=1e-15)
        assert overall_loss(0, 0, 0, 0, alpha, beta) == 0

    def test_breakdown_recomputes_total(self):
        zv_hat, zs_hat, zv, zc, zt = (_rand(4, 6, s) for s in range(5))
        total, parts = alignment_objective(zv_hat, zs_hat, zv, zc, zt, torch.tensor(0.07), 0.5, 2.0)
        assert parts.clip_t == (parts.clip_t1 + parts.clip_t2) / 2 or \
            math.isclose(parts.clip_t, (parts.clip_t1 + parts.clip_t2) / 2, rel_tol=1e-15)
        assert math.isclose(parts.total, overall_loss(parts.clip_v, parts.mse_v, parts.clip_t, parts.mse_t, 0.5, 2.0),
                            rel_tol=1e-12)
        assert float(total) == parts.total


class TestAlignmentConfig:
    def test_defaults(self):
        cfg = AlignmentConfig()
        assert (cfg.alpha, cfg.beta, cfg.lr, cfg.epochs, cfg.batch_size, cfg.tau_init, cfg.val_size) == \
            (0.5, 2.0, 2e-4, 100, 256, 0.07, 740)

    @pytest.mark.parametrize("kw", [{"alpha": 1.5}, {"beta": -1}, {"lr": -1}, {"epochs": 0}, {"tau_init": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AlignmentConfig(**kw)


def _short_run(data, epochs=3, **cfg_kw):
    train_ts, test_ts, oracle = data
    img, txt, _ = oracle.providers(train_ts.catalog + test_ts.catalog)
    cfg = small_alignment_config(epochs=epochs, **cfg_kw)
    tr, val = split_validation(train_ts, cfg.val_size, cfg.seed)
    state = new_train_state(small_encoder_config(), cfg)
    return state, tr, val, img, txt, cfg


class TestTraining:
    def test_zero_noise_reaches_full_validation_accuracy(self, trained_zero_noise):
        state = trained_zero_noise[0]
        assert state.best_validation_metric == 1.0

    def test_validation_split_by_sample(self, zero_noise_data):
        train_ts = zero_noise_data[0]
        tr, val = split_validation(train_ts, 10, 0)
        assert len(val.trials) == 10 and len(tr.trials) == len(train_ts.trials) - 10
        assert {t.image_id for t in val.trials}.isdisjoint(t.image_id for t in tr.trials)
        assert [t.image_id for t in split_validation(train_ts, 10, 0)[1].trials] == [t.image_id for t in val.trials]
        with pytest.raises(ConfigError):
            split_validation(train_ts, len(train_ts.trials), 0)

    def test_lr_zero_leaves_parameters_unchanged(self, zero_noise_data):
        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=2, lr=0.0)
        before = {k: v.detach().clone() for k, v in state.model.named_parameters()}
        train(state, tr, val, img, txt, cfg)
        for k, v in state.model.named_parameters():
            assert torch.equal(v, before[k]), k

    def test_fixed_seed_bit_identical_history(self, zero_noise_data):
        runs = []
        for _ in range(2):
            state, tr, val, img, txt, cfg = _short_run(zero_noise_data)
            runs.append(train(state, tr, val, img, txt, cfg))
        assert runs[0].history == runs[1].history
        assert model_fingerprint(runs[0].model) == model_fingerprint(runs[1].model)

    def test_training_does_not_disturb_global_rng(self, zero_noise_data):
        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=1)
        torch.manual_seed(0)
        expected = torch.rand(1)
        torch.manual_seed(0)
        train(state, tr, val, img, txt, cfg)
        assert torch.equal(torch.rand(1), expected)

    def test_resume_is_bit_exact(self, zero_noise_data, tmp_path):
        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=4)
        full = train(state, tr, val, img, txt, cfg)

        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=4)
        train(state, tr, val, img, txt, small_alignment_config(epochs=2))
        save_train_state(tmp_path / "mid.umt", state)
        resumed = load_train_state(tmp_path / "mid.umt")
        assert resumed.epoch == 2
        resumed = train(resumed, tr, val, img, txt, cfg)
        assert resumed.history == full.history
        assert model_fingerprint(resumed.model) == model_fingerprint(full.model)
        assert resumed.best_epoch == full.best_epoch
        assert model_fingerprint(resumed.best_model()) == model_fingerprint(full.best_model())

    def test_log_records_every_step_and_epoch(self, zero_noise_data, tmp_path):
        import json

        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=2)
        train(state, tr, val, img, txt, cfg, log_path=tmp_path / "log.jsonl")
        rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        steps = [r for r in rows if "total" in r]
        epochs = [r for r in rows if "val_top1" in r]
        assert len(epochs) == 2
        assert len(steps) == 2 * math.ceil(len(tr.trials) / cfg.batch_size)
        assert {"clip_v", "clip_t1", "clip_t2", "clip_t", "mse_v", "mse_t", "total", "tau"} <= set(steps[0])

    def test_empty_validation(self, zero_noise_data):
        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=1)
        with pytest.raises(ConfigError):
            train(state, tr, val.with_trials([]), img, txt, cfg)

    def test_non_finite_loss_aborts_with_snapshot(self, zero_noise_data):
        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=1)

        class Exploding:
            def embed_images(self, records):
                return np.full((len(records), 16), np.inf, dtype=np.float32)

            def fingerprint(self):
                return "inf"

        with pytest.raises(NumericalAbort) as info:
            train(state, tr, val, Exploding(), txt, cfg)
        assert info.value.exit_code == 4

    def test_drifting_provider_is_detected(self, zero_noise_data):
        state, tr, val, img, txt, cfg = _short_run(zero_noise_data, epochs=1)

        class Drifting:
            calls = 0

            def embed_images(self, records):
                Drifting.calls += 1
                return img.embed_images(records) * (1 + Drifting.calls)

            def fingerprint(self):
                return "drift"

        with pytest.raises(NumericalAbort):
            train(state, tr, val, Drifting(), txt, cfg)

    def test_targets_cover_catalog(self, zero_noise_data):
        train_ts, test_ts, oracle = zero_noise_data
        img, txt, _ = oracle.providers(train_ts.catalog)
        targets = compute_targets(train_ts.catalog, img, txt)
        assert set(targets.image) == {r.image_id for r in train_ts.catalog}


class TestGradCheck:
    @pytest.mark.parametrize("variant", ["attention", "tsconv"])
    def test_reference_configuration(self, variant):
        report = check_alignment(0, variant)
        assert report.max_rel_error < 1e-4
        assert "log_tau" in report.per_tensor

    def test_deterministic(self):
        assert check_alignment(3).per_tensor == check_alignment(3).per_tensor

    def test_all_models(self):
        reports = check_all(0)
        assert set(reports) == {"alignment[attention]", "alignment[tsconv]", "qformer", "prior[mlp_direct]",
                                "prior[denoising]"}
        assert max(r.max_rel_error for r in reports.values()) < 1e-4

    def test_zero_loss_region_has_zero_gradient(self):
        cfg = reference_encoder_config()
        model = init_params(cfg).double()
        x = random_alignment_batch(cfg)[0]
        with torch.no_grad():
            zv, zs = model(x)

        def mse_only():
            zv_hat, zs_hat = model(x)
            return 2.0 * (mse_loss_visual(zv_hat, zv) + mse_loss_text(zs_hat, zs, zs))

        mse_only().backward()
        for name, p in model.named_parameters():
            if p.grad is not None:
                assert p.grad.abs().max() < 1e-12, name

    def test_relative_error_floor(self):
        assert relative_error(1e-9, 0.0) == pytest.approx(1e-6)
        assert relative_error(2.0, 1.0) == 0.5

    def test_detects_wrong_gradient(self):
        w = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(2, dtype=torch.float64)

        assert gradient_check(lambda: Wrong.apply(w), {"w": w}).max_rel_error > 0.1
