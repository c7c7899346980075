from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml

from umind.alignment.training import AlignmentConfig
from umind.data.synthetic import generate_synthetic
from umind.data.types import NeuralTrial, StimulusRecord, SyntheticSpec, TrialSet
from umind.encoders import EncoderConfig

REPO = Path(__file__).resolve().parents[1]
SYNTHETIC_CONFIG = REPO / "configs" / "synthetic.yaml"


def write_run_config(directory: Path, name: str = "run.yaml", **sections) -> Path:
    """Copy of the desk-scale synthetic config with ``out`` inside ``directory``.

    Keyword arguments replace top-level scalars or update sections key by key.
    """
    cfg = yaml.safe_load(SYNTHETIC_CONFIG.read_text())
    cfg["out"] = str(directory / "out")
    for key, value in sections.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = directory / name
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


def small_encoder_config(**overrides) -> EncoderConfig:
    base = dict(channels=8, samples=50, temporal_kernel=5, temporal_filters=8, spatial_filters=8,
                feature_dim=64, embed_dim=16, dropout_rate=0.0, pool_kernel=5, attention_heads=2, seed=0)
    base.update(overrides)
    return EncoderConfig(**base)


def small_alignment_config(**overrides) -> AlignmentConfig:
    base = dict(lr=3e-3, epochs=60, batch_size=16, val_size=10, seed=0)
    base.update(overrides)
    return AlignmentConfig(**base)


def make_record(image_id: int, category_id: int) -> StimulusRecord:
    return StimulusRecord(image_id, category_id, f"img://{image_id}", f"class {category_id}",
                          f"a picture of class {category_id} number {image_id}")


def make_trialset(signals, image_ids, category_ids, split="train", repetitions=None, rate=250.0,
                  subject="sub-01", tmin_ms=0.0) -> TrialSet:
    signals = [np.asarray(s, dtype=np.float32) for s in signals]
    reps = repetitions if repetitions is not None else [0] * len(signals)
    trials = [NeuralTrial(s, subject, c, i, r, rate, tmin_ms)
              for s, i, c, r in zip(signals, image_ids, category_ids, reps)]
    catalog = [make_record(i, c) for i, c in sorted(set(zip(image_ids, category_ids)))]
    names = [f"ch{k:02d}" for k in range(signals[0].shape[0])]
    return TrialSet(trials, catalog, split, names)


@pytest.fixture(scope="session")
def zero_noise_data():
    """(train, test, oracle) of the default zero-noise synthetic spec, repetitions averaged."""
    from umind.data.preprocess import average_repetitions

    train, test, oracle = generate_synthetic(SyntheticSpec(seed=1))
    return average_repetitions(train), average_repetitions(test), oracle


@pytest.fixture(scope="session")
def trained_zero_noise(zero_noise_data):
    """Alignment model trained on the zero-noise synthetic oracle."""
    from umind.alignment.training import new_train_state, split_validation, train

    train_ts, test_ts, oracle = zero_noise_data
    img, txt, _ = oracle.providers(train_ts.catalog + test_ts.catalog)
    cfg = small_alignment_config()
    tr, val = split_validation(train_ts, cfg.val_size, cfg.seed)
    state = train(new_train_state(small_encoder_config(), cfg), tr, val, img, txt, cfg)
    return state, tr, val, test_ts, img, txt


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
