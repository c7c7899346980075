"""On-disk TrialSet layout and the channel-group map file.

A TrialSet directory contains::

    meta.txt         key = value lines: format_version, split, sample_rate_hz,
                     tmin_ms, channel_names (comma separated), subjects
    catalog.tsv      UTF-8, tab separated, header row
                     image_id, category_id, image_ref, coarse_text, fine_text
    <subject>.umt    tensor container (see umind.tensorfile) holding
                     signal float32 [n_trials, C, T] and int64 index arrays
                     category_id, image_id, repetition
"""

from __future__ import annotations

import csv
import os
from importlib import resources
from pathlib import Path

import numpy as np

from .. import tensorfile
from ..errors import ConfigError, FormatError, LoadError
from .types import ChannelGroupMap, NeuralTrial, StimulusRecord, TrialSet, check_zero_shot

CATALOG_COLUMNS = ["image_id", "category_id", "image_ref", "coarse_text", "fine_text"]
LAYOUT_VERSION = "1"


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _format_key_values(pairs: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def _subject_file(subject: str) -> str:
    if not subject or any(c in subject for c in "/\\,") or subject.startswith("."):
        raise FormatError(f"subject id {subject!r} cannot be used as a file name")
    return f"{subject}.umt"


def write_catalog(path: str | os.PathLike, catalog: list[StimulusRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(CATALOG_COLUMNS)
        for r in sorted(catalog, key=lambda r: r.image_id):
            w.writerow([r.image_id, r.category_id, r.image_ref, r.coarse_text, r.fine_text])


def read_catalog(path: str | os.PathLike) -> list[StimulusRecord]:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError as exc:
        raise LoadError(f"missing catalog: {path}") from exc
    with fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != CATALOG_COLUMNS:
            raise FormatError(f"catalog header must be {CATALOG_COLUMNS}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CATALOG_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(CATALOG_COLUMNS)} columns")
            rows.append(StimulusRecord(int(row[0]), int(row[1]), row[2], row[3], row[4]))
    return rows


def save_trialset(ts: TrialSet, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    by_subject: dict[str, list[NeuralTrial]] = {}
    for tr in ts.trials:
        by_subject.setdefault(tr.subject_id, []).append(tr)
    rate = ts.trials[0].sample_rate_hz if ts.trials else 0.0
    tmin = ts.trials[0].tmin_ms if ts.trials else 0.0
    for tr in ts.trials:
        if tr.sample_rate_hz != rate or tr.tmin_ms != tmin:
            raise FormatError("all trials in a TrialSet must share sample_rate_hz and tmin_ms")
    meta = {
        "format_version": LAYOUT_VERSION,
        "split": ts.split,
        "sample_rate_hz": repr(float(rate)),
        "tmin_ms": repr(float(tmin)),
        "channel_names": ",".join(ts.channel_names),
        "subjects": ",".join(by_subject),
    }
    (path / "meta.txt").write_text(_format_key_values(meta), encoding="utf-8")
    write_catalog(path / "catalog.tsv", ts.catalog)
    for subject, trials in by_subject.items():
        tensorfile.save(
            path / _subject_file(subject),
            {
                "signal": np.stack([t.signal for t in trials]).astype(np.float32),
                "category_id": np.array([t.category_id for t in trials], dtype=np.int64),
                "image_id": np.array([t.image_id for t in trials], dtype=np.int64),
                "repetition": np.array([t.repetition for t in trials], dtype=np.int64),
            },
            {"subject_id": subject},
        )


def load_trialset(path: str | os.PathLike, split: str, against: TrialSet | None = None) -> TrialSet:
    """Read a TrialSet directory.

    Args:
        path: Directory in the layout described in the module docstring.
        split: Expected split; must match the one recorded in ``meta.txt``.
        against: Optional split of the other kind; category overlap with it
            raises ZeroShotViolation.
    """
    path = Path(path)
    if not path.is_dir():
        raise LoadError(f"trial set directory not found: {path}")
    try:
        meta = parse_key_values((path / "meta.txt").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise LoadError(f"missing meta.txt in {path}") from exc
    for key in ("split", "sample_rate_hz", "channel_names", "subjects"):
        if key not in meta:
            raise FormatError(f"meta.txt lacks required key {key!r}")
    if meta["split"] != split:
        raise FormatError(f"{path} holds split {meta['split']!r}, requested {split!r}")
    rate = float(meta["sample_rate_hz"])
    tmin = float(meta.get("tmin_ms", "0"))
    channel_names = [c for c in meta["channel_names"].split(",") if c]
    catalog = read_catalog(path / "catalog.tsv")
    known_images = {r.image_id: r for r in catalog}

    trials: list[NeuralTrial] = []
    dims = None
    for subject in [s for s in meta["subjects"].split(",") if s]:
        arrays, _ = tensorfile.load(path / _subject_file(subject))
        sig = arrays["signal"]
        if sig.ndim != 3:
            raise FormatError(f"{subject}: signal must be [n_trials, C, T]")
        if dims is None:
            dims = sig.shape[1:]
        elif sig.shape[1:] != dims:
            raise FormatError(f"{subject}: trial dims {sig.shape[1:]} differ from {dims}")
        n = sig.shape[0]
        for key in ("category_id", "image_id", "repetition"):
            if arrays[key].shape != (n,):
                raise FormatError(f"{subject}: index array {key} has wrong length")
        for i in range(n):
            image_id = int(arrays["image_id"][i])
            rec = known_images.get(image_id)
            if rec is None:
                raise FormatError(f"{subject}: trial {i} references image {image_id} absent from catalog")
            if rec.category_id != int(arrays["category_id"][i]):
                raise FormatError(f"{subject}: trial {i} category disagrees with catalog")
            trials.append(
                NeuralTrial(sig[i], subject, int(arrays["category_id"][i]), image_id,
                            int(arrays["repetition"][i]), rate, tmin)
            )
    ts = TrialSet(trials, catalog, split, channel_names)
    if against is not None:
        if split == "train":
            check_zero_shot(ts, against)
        else:
            check_zero_shot(against, ts)
    return ts


def load_channel_groups(path: str | os.PathLike | None = None) -> ChannelGroupMap:
    """Read a ``region = ch1,ch2,...`` file; ``None`` gives the shipped 63-channel map.

    A line ``allow_overlap = true`` declares that regions may share channels.
    """
    if path is None:
        text = resources.files("umind.data").joinpath("channel_groups_63.txt").read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise LoadError(f"missing channel group file: {path}") from exc
    kv = parse_key_values(text)
    overlap = kv.pop("allow_overlap", "false").lower() in ("1", "true", "yes")
    groups = {k: [c.strip() for c in v.split(",") if c.strip()] for k, v in kv.items()}
    if not groups:
        raise ConfigError("channel group file defines no regions")
    return ChannelGroupMap(groups, allow_overlap=overlap)


def default_montage() -> list[str]:
    """The 63 channel names of the shipped montage, in recording order."""
    return list(MONTAGE_63)


MONTAGE_63 = (
    "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3",
    "F1", "F2", "F4", "F6", "F8", "FT9", "FT7", "FC5", "FC3", "FC1",
    "FCz", "FC2", "FC4", "FC6", "FT8", "FT10", "T7", "C5", "C3", "C1",
    "Cz", "C2", "C4", "C6", "T8", "TP9", "TP7", "CP5", "CP3", "CP1",
    "CPz", "CP2", "CP4", "CP6", "TP8", "TP10", "P7", "P5", "P3", "P1",
    "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3", "POz", "PO4", "PO8",
    "O1", "Oz", "O2",
)
