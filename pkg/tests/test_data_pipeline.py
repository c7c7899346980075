from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_trialset
from umind.data.io import (
    MONTAGE_63,
    load_channel_groups,
    load_trialset,
    parse_key_values,
    save_trialset,
)
from umind.data.preprocess import (
    average_repetitions,
    baseline_correct,
    crop_time_window,
    downsample,
    inverse_sqrt,
    noise_normalize,
    preprocess,
    residual_covariance,
    resolve_baseline,
    select_channels,
)
from umind.data.synthetic import generate_synthetic
from umind.data.types import (
    REGIONS,
    ChannelGroupMap,
    NeuralTrial,
    PreprocessConfig,
    StimulusRecord,
    SyntheticSpec,
    TrialSet,
)
from umind.errors import (
    BoundsError,
    ConfigError,
    EmptySelectionError,
    FormatError,
    LoadError,
    UnsupportedRateError,
    ZeroShotViolation,
)


def _trial(signal, rate=250.0, tmin=0.0, image_id=0, category_id=0, rep=0, subject="sub-01"):
    return NeuralTrial(np.asarray(signal, dtype=np.float32), subject, category_id, image_id, rep, rate, tmin)


def _montage_set(n_trials=2, seed=0):
    rng = np.random.default_rng(seed)
    ts = make_trialset([rng.standard_normal((63, 20)) for _ in range(n_trials)], list(range(n_trials)),
                       list(range(n_trials)))
    return ts.with_trials(ts.trials, list(MONTAGE_63))


class TestTypes:
    def test_stimulus_record_rejects_empty_texts(self):
        with pytest.raises(FormatError):
            StimulusRecord(0, 0, "ref", "", "fine")
        with pytest.raises(FormatError):
            StimulusRecord(0, 0, "ref", "coarse", "")

    def test_trialset_rejects_duplicate_image_ids(self):
        ts = make_trialset([np.zeros((2, 3))], [0], [0])
        with pytest.raises(FormatError):
            TrialSet(ts.trials, ts.catalog + ts.catalog, "train", ts.channel_names)

    def test_trialset_rejects_channel_name_mismatch(self):
        ts = make_trialset([np.zeros((2, 3))], [0], [0])
        with pytest.raises(FormatError):
            TrialSet(ts.trials, ts.catalog, "train", ["only-one"])

    def test_trialset_rejects_ragged_trials(self):
        ts = make_trialset([np.zeros((2, 3))], [0], [0])
        with pytest.raises(FormatError):
            ts.with_trials([ts.trials[0], ts.trials[0].with_signal(np.zeros((2, 4), np.float32))])

    def test_non_finite_signal_rejected_by_preprocess(self):
        train = make_trialset([[[np.nan, 0.0, 0.0, 0.0]]], [0], [0])
        test = make_trialset([[[0.0, 0.0, 0.0, 0.0]]], [1], [1], split="test")
        with pytest.raises(FormatError):
            preprocess(train, test, PreprocessConfig(window_end_ms=16.0, noise_normalize=False))

    def test_preprocess_config_window_order(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(window_start_ms=100, window_end_ms=100)

    @pytest.mark.parametrize("field", ["n_categories", "images_per_category", "repetitions", "channels",
                                       "samples", "embed_dim"])
    def test_synthetic_spec_counts_positive(self, field):
        with pytest.raises(ConfigError):
            SyntheticSpec(**{field: 0})

    def test_synthetic_spec_noise_nonnegative(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(noise_sigma=-1.0)

    def test_overlapping_groups_need_declaration(self):
        with pytest.raises(ConfigError):
            ChannelGroupMap({"a": ["x"], "b": ["x"]})
        ChannelGroupMap({"a": ["x"], "b": ["x"]}, allow_overlap=True)


class TestTrialSetIO:
    def test_small_directory_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ts = make_trialset([rng.standard_normal((3, 5)) for _ in range(4)], [0, 0, 1, 1], [5, 5, 6, 6],
                           repetitions=[0, 1, 0, 1])
        save_trialset(ts, tmp_path / "train")
        back = load_trialset(tmp_path / "train", "train")
        assert len(back.trials) == 4
        assert len(back.catalog) == 2

    def test_synthetic_round_trip_is_lossless(self, tmp_path):
        train, test, _ = generate_synthetic(SyntheticSpec(noise_sigma=0.3, seed=4))
        save_trialset(train, tmp_path / "train")
        save_trialset(test, tmp_path / "test")
        back_train = load_trialset(tmp_path / "train", "train")
        back_test = load_trialset(tmp_path / "test", "test", against=back_train)
        for orig, back in ((train, back_train), (test, back_test)):
            assert back.catalog == orig.catalog
            assert back.channel_names == orig.channel_names
            assert len(back.trials) == len(orig.trials)
            for a, b in zip(orig.trials, back.trials):
                assert (a.subject_id, a.image_id, a.category_id, a.repetition) == \
                    (b.subject_id, b.image_id, b.category_id, b.repetition)
                assert a.sample_rate_hz == b.sample_rate_hz
                np.testing.assert_array_equal(a.signal, b.signal)

    def test_shared_category_is_a_zero_shot_violation(self, tmp_path):
        train = make_trialset([np.zeros((2, 4))] * 2, [0, 1], [3, 7])
        test = make_trialset([np.zeros((2, 4))], [2], [7], split="test")
        save_trialset(train, tmp_path / "train")
        save_trialset(test, tmp_path / "test")
        with pytest.raises(ZeroShotViolation):
            load_trialset(tmp_path / "test", "test", against=load_trialset(tmp_path / "train", "train"))

    def test_missing_directory_is_load_error(self, tmp_path):
        with pytest.raises(LoadError):
            load_trialset(tmp_path / "nope", "train")

    def test_wrong_split_is_format_error(self, tmp_path):
        save_trialset(make_trialset([np.zeros((2, 4))], [0], [0]), tmp_path / "d")
        with pytest.raises(FormatError):
            load_trialset(tmp_path / "d", "test")

    def test_dimension_mismatch_across_subjects(self, tmp_path):
        a = make_trialset([np.zeros((2, 4))], [0], [0], subject="s1")
        save_trialset(a, tmp_path / "d")
        b = make_trialset([np.zeros((2, 5))], [0], [0], subject="s2")
        save_trialset(b, tmp_path / "other")
        (tmp_path / "other" / "s2.umt").rename(tmp_path / "d" / "s2.umt")
        meta = (tmp_path / "d" / "meta.txt").read_text().replace("subjects = s1", "subjects = s1,s2")
        (tmp_path / "d" / "meta.txt").write_text(meta)
        with pytest.raises(FormatError):
            load_trialset(tmp_path / "d", "train")

    def test_key_value_parser(self):
        assert parse_key_values("# c\n a = 1 \nb=x=y\n") == {"a": "1", "b": "x=y"}
        with pytest.raises(FormatError):
            parse_key_values("novalue")


class TestAverageRepetitions:
    def test_constant_signals_average(self):
        ts = make_trialset([np.full((2, 4), 1.0), np.full((2, 4), 3.0)], [0, 0], [0, 0], repetitions=[0, 1])
        out = average_repetitions(ts)
        assert len(out.trials) == 1
        np.testing.assert_array_equal(out.trials[0].signal, np.full((2, 4), 2.0, np.float32))
        assert out.trials[0].repetition == 0

    def test_single_repetition_is_identity(self):
        rng = np.random.default_rng(1)
        ts = make_trialset([rng.standard_normal((3, 6))], [4], [1], repetitions=[2])
        out = average_repetitions(ts)
        np.testing.assert_array_equal(out.trials[0].signal, ts.trials[0].signal)

    def test_groups_by_subject_and_image(self):
        ts = make_trialset([np.zeros((1, 2))] * 2, [0, 0], [0, 0], repetitions=[0, 1])
        other = ts.trials[1].with_signal(ts.trials[1].signal, subject_id="sub-02")
        out = average_repetitions(ts.with_trials([ts.trials[0], other]))
        assert len(out.trials) == 2

    def test_variance_of_four_noise_repetitions(self):
        ratios = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            sigs = [rng.standard_normal((63, 250)) for _ in range(4)]
            ts = make_trialset(sigs, [0] * 4, [0] * 4, repetitions=[0, 1, 2, 3])
            avg = average_repetitions(ts).trials[0].signal
            ratios.append(avg.var() / np.mean([s.var() for s in sigs]))
        assert abs(np.mean(ratios) - 0.25) < 0.25 * 0.2

    def test_commutes_with_channel_selection_and_cropping(self):
        rng = np.random.default_rng(2)
        n = 6
        ts = _montage_set(n, seed=2).with_trials(
            [t.with_signal(rng.standard_normal((63, 20)).astype(np.float32), image_id=i // 3, repetition=i % 3,
                           category_id=i // 3)
             for i, t in enumerate(_montage_set(n, seed=2).trials)])
        ts = TrialSet(ts.trials, [r for r in ts.catalog if r.image_id < 2], "train", ts.channel_names)
        cmap = load_channel_groups()
        a = average_repetitions(select_channels(ts, ["occipital"], cmap))
        b = select_channels(average_repetitions(ts), ["occipital"], cmap)
        for x, y in zip(a.trials, b.trials):
            np.testing.assert_array_equal(x.signal, y.signal)
        c = average_repetitions(ts.with_trials([crop_time_window(t, 8, 40) for t in ts.trials]))
        d = average_repetitions(ts)
        for x, y in zip(c.trials, d.trials):
            np.testing.assert_array_equal(x.signal, crop_time_window(y, 8, 40).signal)

    def test_ragged_group_is_format_error(self):
        t0 = _trial(np.zeros((2, 4)))
        t1 = _trial(np.zeros((2, 5)), rep=1)
        ts = TrialSet.__new__(TrialSet)
        ts.trials, ts.catalog, ts.split, ts.channel_names = [t0, t1], [], "train", ["a", "b"]
        with pytest.raises(FormatError):
            average_repetitions(ts)


class TestDownsample:
    def test_1000_to_250(self):
        out = downsample(_trial(np.random.default_rng(0).standard_normal((3, 1000)), rate=1000.0), 250.0)
        assert out.signal.shape == (3, 250)
        assert out.sample_rate_hz == 250.0

    def test_same_rate_is_identity(self):
        sig = np.random.default_rng(0).standard_normal((3, 40))
        out = downsample(_trial(sig), 250.0)
        np.testing.assert_array_equal(out.signal, _trial(sig).signal)

    def test_dc_preserved(self):
        out = downsample(_trial(np.full((2, 1000), 5.0), rate=1000.0), 250.0)
        np.testing.assert_allclose(out.signal, 5.0, rtol=1e-6)

    @pytest.mark.parametrize("source,target,n_in,n_out", [(1200.0, 200.0, 1200, 200), (1000.0, 250.0, 999, 249),
                                                           (1000.0, 500.0, 7, 3)])
    def test_floor_sample_count(self, source, target, n_in, n_out):
        out = downsample(_trial(np.ones((1, n_in)), rate=source), target)
        assert out.signal.shape[1] == n_out

    @pytest.mark.parametrize("target", [300.0, 2000.0, 0.0])
    def test_non_integer_factor_rejected(self, target):
        with pytest.raises(UnsupportedRateError):
            downsample(_trial(np.ones((1, 100)), rate=1000.0), target)

    def test_removes_content_above_cutoff(self):
        t = np.arange(2000) / 1000.0
        sig = np.sin(2 * np.pi * 10 * t) + np.sin(2 * np.pi * 200 * t)
        out = downsample(_trial(sig[None], rate=1000.0), 250.0).signal[0]
        ref = np.sin(2 * np.pi * 10 * t[::4])
        assert np.abs(out - ref)[50:-50].max() < 0.05


class TestCropTimeWindow:
    def test_full_window(self):
        assert crop_time_window(_trial(np.zeros((2, 250))), 0, 1000).signal.shape == (2, 250)

    def test_100ms_at_250hz(self):
        out = crop_time_window(_trial(np.zeros((2, 250))), 400, 500)
        assert out.signal.shape == (2, 25)
        assert out.tmin_ms == 400.0

    def test_partition(self):
        sig = np.random.default_rng(0).standard_normal((4, 250))
        tr = _trial(sig)
        joined = np.concatenate([crop_time_window(tr, 0, 500).signal, crop_time_window(tr, 500, 1000).signal], axis=1)
        np.testing.assert_array_equal(joined, tr.signal)

    @pytest.mark.parametrize("start,end", [(-4, 100), (0, 1004), (500, 500), (600, 400)])
    def test_out_of_range(self, start, end):
        with pytest.raises(BoundsError):
            crop_time_window(_trial(np.zeros((1, 250))), start, end)

    def test_relative_to_tmin(self):
        tr = _trial(np.arange(300, dtype=float)[None], tmin=-200.0)
        out = crop_time_window(tr, 0, 1000)
        assert out.signal[0, 0] == 50.0
        assert out.signal.shape == (1, 250)


class TestBaseline:
    def test_subtracts_prestimulus_mean(self):
        sig = np.concatenate([np.full((2, 25), 3.0), np.full((2, 50), 7.0)], axis=1)
        out = baseline_correct(_trial(sig, tmin=-100.0), (-100.0, 0.0))
        np.testing.assert_allclose(out.signal[:, :25], 0.0)
        np.testing.assert_allclose(out.signal[:, 25:], 4.0)

    def test_auto_needs_prestimulus_data(self):
        assert resolve_baseline("auto", _trial(np.zeros((1, 10)), tmin=-200.0)) == (-100.0, 0.0)
        assert resolve_baseline("auto", _trial(np.zeros((1, 10)), tmin=0.0)) is None
        assert resolve_baseline(None, _trial(np.zeros((1, 10)), tmin=-200.0)) is None

    def test_bad_setting_rejected(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(baseline_ms="sometimes")


class TestSelectChannels:
    def test_default_map_is_a_partition_of_the_montage(self):
        cmap = load_channel_groups()
        assert set(cmap.groups) == set(REGIONS)
        flat = [c for chans in cmap.groups.values() for c in chans]
        assert sorted(flat) == sorted(MONTAGE_63)

    def test_occipital_has_17_channels(self):
        out = select_channels(_montage_set(), ["occipital"], load_channel_groups())
        assert out.shape[0] == 17

    def test_all_regions_is_identity(self):
        ts = _montage_set()
        out = select_channels(ts, list(REGIONS), load_channel_groups())
        assert out.channel_names == ts.channel_names
        for a, b in zip(ts.trials, out.trials):
            np.testing.assert_array_equal(a.signal, b.signal)

    def test_order_follows_montage(self):
        ts = _montage_set()
        out = select_channels(ts, ["frontal", "occipital"], load_channel_groups())
        assert out.channel_names == [c for c in ts.channel_names if c in set(out.channel_names)]

    def test_unknown_region(self):
        with pytest.raises(ConfigError):
            select_channels(_montage_set(), ["limbic"], load_channel_groups())

    def test_empty_union(self):
        ts = _montage_set()
        cmap = ChannelGroupMap({"occipital": [], "frontal": ["Fp1"]})
        with pytest.raises(EmptySelectionError):
            select_channels(ts, ["occipital"], cmap)

    def test_custom_map_file(self, tmp_path):
        p = tmp_path / "groups.txt"
        p.write_text("left = Fp1,AF7\nright = Fp2\n")
        out = select_channels(_montage_set(), ["left"], load_channel_groups(p))
        assert out.channel_names == ["Fp1", "AF7"]


def _noise_set(cov, n_images=200, reps=4, t=10, seed=0):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov)
    c = len(cov)
    sigs, ids, reps_ = [], [], []
    for i in range(n_images):
        base = rng.standard_normal((c, t))
        for r in range(reps):
            sigs.append(base + chol @ rng.standard_normal((c, t)))
            ids.append(i)
            reps_.append(r)
    return make_trialset(sigs, ids, ids, repetitions=reps_)


class TestNoiseNormalize:
    def test_white_noise_gives_near_identity(self):
        _, w = noise_normalize(_noise_set(np.eye(4)))
        m = w.matrices["sub-01"]
        assert np.linalg.norm(m - np.eye(4)) / np.linalg.norm(np.eye(4)) < 0.1

    def test_diag_4_1_scales_first_channel_by_half(self):
        _, w = noise_normalize(_noise_set(np.diag([4.0, 1.0]), n_images=400))
        m = w.matrices["sub-01"]
        assert abs(m[0, 0] - 0.5) < 0.05
        assert abs(m[1, 1] - 1.0) < 0.1
        assert abs(m[0, 1]) < 0.05

    def test_analytic_inverse_sqrt(self):
        np.testing.assert_allclose(inverse_sqrt(np.diag([4.0, 1.0])), np.diag([0.5, 1.0]), atol=1e-12)

    def test_whitened_residual_covariance_near_identity(self):
        cov = np.array([[2.0, 0.8, 0.0], [0.8, 1.0, 0.3], [0.0, 0.3, 0.5]])
        white, _ = noise_normalize(_noise_set(cov, n_images=300), shrinkage=0.0)
        res = residual_covariance(white.trials)
        assert np.linalg.norm(res - np.eye(3)) / np.sqrt(3) < 0.1

    def test_not_idempotent(self):
        ts = _noise_set(np.diag([4.0, 1.0]), n_images=50)
        once, w = noise_normalize(ts)
        twice = w.apply(once)
        assert not np.allclose(once.trials[0].signal, twice.trials[0].signal)

    def test_singular_covariance_is_regularised_with_warning(self, caplog):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        w = inverse_sqrt(cov, shrinkage=0.0)
        assert np.isfinite(w).all()
        assert "singular" in caplog.text

    def test_needs_repetitions(self):
        with pytest.raises(ConfigError):
            noise_normalize(make_trialset([np.ones((2, 3))], [0], [0]))

    def test_unfitted_subject_rejected(self):
        _, w = noise_normalize(_noise_set(np.eye(2), n_images=5))
        other = make_trialset([np.ones((2, 10))], [0], [0], subject="sub-99")
        with pytest.raises(ConfigError):
            w.apply(other)


class TestPreprocess:
    def test_pipeline_shapes_and_zero_shot(self):
        rng = np.random.default_rng(0)
        train = make_trialset([rng.standard_normal((4, 1000)) for _ in range(6)], [0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2],
                              repetitions=[0, 1] * 3, rate=1000.0)
        test = make_trialset([rng.standard_normal((4, 1000)) for _ in range(2)], [9, 9], [9, 9], split="test",
                             repetitions=[0, 1], rate=1000.0)
        cfg = PreprocessConfig(target_rate_hz=250.0, window_start_ms=0.0, window_end_ms=800.0)
        tr, te, w = preprocess(train, test, cfg)
        assert tr.shape == (4, 200)
        assert len(tr.trials) == 3 and len(te.trials) == 1
        assert w is not None
        bad = make_trialset([rng.standard_normal((4, 1000))], [7], [0], split="test", rate=1000.0)
        with pytest.raises(ZeroShotViolation):
            preprocess(train, bad, cfg)


class TestSynthetic:
    def test_zero_noise_repetitions_bit_identical(self):
        train, _, _ = generate_synthetic(SyntheticSpec(images_per_category=1, repetitions=3))
        by_image = {}
        for t in train.trials:
            by_image.setdefault(t.image_id, []).append(t.signal)
        for sigs in by_image.values():
            for s in sigs[1:]:
                np.testing.assert_array_equal(s, sigs[0])

    def test_seed_determinism(self):
        a, b = generate_synthetic(SyntheticSpec(noise_sigma=1.0, seed=3)), generate_synthetic(SyntheticSpec(noise_sigma=1.0, seed=3))
        for x, y in zip(a[0].trials + a[1].trials, b[0].trials + b[1].trials):
            np.testing.assert_array_equal(x.signal, y.signal)

    def test_split_categories_disjoint(self):
        train, test, _ = generate_synthetic(SyntheticSpec(n_categories=10, n_test_categories=5))
        assert train.category_ids().isdisjoint(test.category_ids())
        assert len(train.category_ids()) == 10 and len(test.category_ids()) == 5

    def test_perfect_linear_decoder_recovers_latents(self):
        train, _, oracle = generate_synthetic(SyntheticSpec())
        for t in train.trials[:10]:
            np.testing.assert_allclose(oracle.decode(t.signal), oracle.latents[t.image_id], atol=1e-5)

    def test_onset_masks_early_samples(self):
        train, _, _ = generate_synthetic(SyntheticSpec(info_onset_ms=40.0))
        for t in train.trials:
            assert np.all(t.signal[:, :10] == 0)
            assert np.any(t.signal[:, 10:] != 0)

    def test_informative_channels_mask(self):
        spec = SyntheticSpec(channels=63, informative_channels=("O1", "Oz", "O2"))
        train, _, _ = generate_synthetic(spec)
        idx = [MONTAGE_63.index(c) for c in ("O1", "Oz", "O2")]
        mask = np.ones(63, bool)
        mask[idx] = False
        assert np.all(train.trials[0].signal[mask] == 0)
        assert np.any(train.trials[0].signal[idx] != 0)

    def test_unknown_informative_channel(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec(informative_channels=("Cz",)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_reproducible_for_any_seed(self, seed):
        spec = SyntheticSpec(n_categories=2, images_per_category=1, n_test_categories=1, samples=8, noise_sigma=0.5,
                             seed=seed)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        np.testing.assert_array_equal(a[0].stacked(), b[0].stacked())
