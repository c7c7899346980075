"""Experiment configuration: YAML file, environment overrides, schema checks.

The file is a two-level mapping. Top-level scalars are ``seed`` and ``out``;
every other top-level key is a section whose allowed keys are listed in
:data:`SCHEMA`. Unknown keys anywhere are rejected before any work starts.

Leaf keys can be overridden from the environment as
``UMIND__<SECTION>__<KEY>=<yaml value>`` (``UMIND__SEED=3`` for top-level
keys). Precedence: defaults < file < environment < command-line flags.

There is a single ``seed``. It seeds dataset synthesis, weight
initialisation, training order and the bridge models, so sections do not
carry their own seed keys.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..alignment.training import AlignmentConfig
from ..bridge.prior import PriorConfig
from ..bridge.qformer import FitConfig, QFormerConfig
from ..data.types import PreprocessConfig, SyntheticSpec
from ..encoders import EncoderConfig
from ..errors import ConfigError

ENV_PREFIX = "UMIND__"

# Keys resolved from the data when left null.
INFERRED = {
    "model": ("channels", "samples", "embed_dim"),
    "qformer": ("embed_dim", "d_prompt", "d_pool"),
    "prior": ("embed_dim", "out_dim"),
}


def _fields(cls, drop=("seed",), infer=()) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in drop:
            continue
        out[f.name] = None if f.name in infer else (
            f.default if f.default is not dataclasses.MISSING else f.default_factory()
        )
    return out


def _schema() -> dict[str, Any]:
    preprocess = {"enabled": True, **_fields(PreprocessConfig, drop=())}
    return {
        "seed": 0,
        "out": "runs/umind",
        "dataset": {"path": None, "image_embeddings": None, "text_embeddings": None, "prompt_embeddings": None},
        "synthetic": _fields(SyntheticSpec),
        "preprocess": preprocess,
        "model": _fields(EncoderConfig, infer=INFERRED["model"]),
        "training": _fields(AlignmentConfig),
        "eval": {"top_k": 5, "one_image_per_category": True},
        "ablation": {
            "modes": ["expanding", "sliding", "decreasing", "spatial"],
            "step_ms": 100.0, "width_ms": 100.0, "retrain": True,
            "regions": [["occipital"], ["parietal"], ["temporal"], ["central"], ["frontal"]],
            "channel_groups": None,
        },
        "qformer": _fields(QFormerConfig, infer=INFERRED["qformer"]),
        "prior": _fields(PriorConfig, infer=INFERRED["prior"]),
        "bridge_fit": _fields(FitConfig),
        "metrics": {
            "generated": None, "reference": None,
            "extractors": ["alexnet-2", "alexnet-5", "inception", "clip", "efficientnet", "swav"],
            "n_candidates": 10, "rank_by": "clip",
        },
    }


SCHEMA = _schema()


def defaults() -> dict[str, Any]:
    return copy.deepcopy(SCHEMA)


# Keys whose value may take several shapes; the section dataclass validates them.
FREEFORM = {("preprocess", "baseline_ms")}


def _check_type(where: str, default: Any, value: Any) -> Any:
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        value = list(value)
    return value


def merge(base: dict, override: Mapping, origin: str) -> dict:
    """Overlay ``override`` on ``base`` in place, rejecting keys outside the schema."""
    if not isinstance(override, Mapping):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for key, value in override.items():
        if key not in SCHEMA:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        if isinstance(SCHEMA[key], dict):
            if value is None:
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"{origin}: section {key!r} must be a mapping")
            for sub, v in value.items():
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"{origin}: unknown key {key}.{sub}")
                if (key, sub) in FREEFORM:
                    base[key][sub] = v
                else:
                    base[key][sub] = _check_type(f"{origin}: {key}.{sub}", SCHEMA[key][sub], v)
        else:
            base[key] = _check_type(f"{origin}: {key}", SCHEMA[key], value)
    return base


def env_overrides(environ: Mapping[str, str]) -> dict:
    out: dict[str, Any] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"environment {name}: {exc}") from exc
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"environment {name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
    return out


def load_config(path: str | os.PathLike | None = None, environ: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> "ExperimentConfig":
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
        merge(cfg, data or {}, str(p))
    merge(cfg, env_overrides(os.environ if environ is None else environ), "environment")
    if overrides:
        merge(cfg, overrides, "command line")
    exp = ExperimentConfig(cfg)
    exp.validate()
    return exp


@dataclass
class ExperimentConfig:
    """Resolved configuration plus typed views of each section."""

    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def dataset_path(self) -> Path:
        p = self.raw["dataset"]["path"]
        return Path(p) if p is not None else self.out / "dataset"

    def dataset_file(self, key: str, default_name: str) -> Path:
        p = self.raw["dataset"][key]
        return Path(p) if p is not None else self.dataset_path / default_name

    def synthetic(self) -> SyntheticSpec:
        return SyntheticSpec(**self.raw["synthetic"], seed=self.seed)

    def preprocess(self) -> PreprocessConfig | None:
        sec = dict(self.raw["preprocess"])
        return PreprocessConfig(**sec) if sec.pop("enabled") else None

    def encoder(self, channels: int, samples: int, embed_dim: int) -> EncoderConfig:
        sec = dict(self.raw["model"])
        inferred = {"channels": channels, "samples": samples, "embed_dim": embed_dim}
        for key, value in inferred.items():
            if sec[key] is None:
                sec[key] = value
            elif sec[key] != value:
                raise ConfigError(f"model.{key}={sec[key]} but the data gives {value}")
        return EncoderConfig(**sec, seed=self.seed)

    def alignment(self) -> AlignmentConfig:
        return AlignmentConfig(**self.raw["training"], seed=self.seed)

    def qformer(self, embed_dim: int, d_prompt: int, d_pool: int) -> QFormerConfig:
        sec = dict(self.raw["qformer"])
        sec.update({k: v for k, v in dict(embed_dim=embed_dim, d_prompt=d_prompt, d_pool=d_pool).items() if sec[k] is None})
        return QFormerConfig(**sec, seed=self.seed)

    def prior(self, embed_dim: int, out_dim: int) -> PriorConfig:
        sec = dict(self.raw["prior"])
        sec.update({k: v for k, v in dict(embed_dim=embed_dim, out_dim=out_dim).items() if sec[k] is None})
        return PriorConfig(**sec, seed=self.seed)

    def bridge_fit(self) -> FitConfig:
        return FitConfig(**self.raw["bridge_fit"], seed=self.seed)

    def validate(self) -> None:
        """Construct every section once so value errors surface before any work."""
        self.synthetic()
        self.preprocess()
        self.alignment()
        self.bridge_fit()
        m = self.raw["model"]
        self.encoder(m["channels"] or 63, m["samples"] or max(m["temporal_kernel"], m["pool_kernel"]),
                     m["embed_dim"] or 1024)
        q = self.raw["qformer"]
        self.qformer(q["embed_dim"] or q["d_model"], q["d_prompt"] or 1, q["d_pool"] or 1)
        self.prior(self.raw["prior"]["embed_dim"] or 1, self.raw["prior"]["out_dim"] or 1)
        ab = self.raw["ablation"]
        unknown = set(ab["modes"]) - {"expanding", "sliding", "decreasing", "spatial"}
        if unknown:
            raise ConfigError(f"ablation.modes: unknown modes {sorted(unknown)}")
        if ab["step_ms"] <= 0 or ab["width_ms"] <= 0:
            raise ConfigError("ablation.step_ms and ablation.width_ms must be positive")
        if self.raw["eval"]["top_k"] < 1:
            raise ConfigError("eval.top_k must be >= 1")
        if self.raw["metrics"]["n_candidates"] < 1:
            raise ConfigError("metrics.n_candidates must be >= 1")

    def echo(self) -> dict:
        return copy.deepcopy(self.raw)
