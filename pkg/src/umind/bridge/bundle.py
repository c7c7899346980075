"""Generator conditioning bundles and bridge-model checkpoints.

Bundle file layout (all integers and floats little-endian)::

    offset 0    8 bytes   magic, ASCII "UMCBUND1"
    offset 8    8 bytes   uint64 H, header length in bytes
    offset 16   H bytes   UTF-8 JSON header, keys sorted:
                            format_version  1
                            count           number of bundles N
                            d               image-embedding width
                            n_queries       prompt tokens per bundle
                            d_prompt        prompt-embedding width
                            d_pool          pooled-prompt width
                            dtype           "float32"
                            fingerprints    {"alignment", "prior", "qformer"}
                            records         N provenance objects
                                            (trial_index, subject_id,
                                             image_id, category_id)
    offset 16+H           N records of S = 4 * (d + n_queries*d_prompt + d_pool)
                          bytes each: image_embedding[d],
                          prompt_embeddings[n_queries][d_prompt] (row-major),
                          pooled_prompt_embedding[d_pool]

A reader needs only the header to locate bundle i at 16 + H + i * S.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import tensorfile
from ..data.types import NeuralTrial
from ..encoders import embed_trials, model_fingerprint, state_arrays
from ..errors import ConfigError, FormatError
from .prior import DiffusionPrior, PriorConfig, prior_predict
from .qformer import QFormer, QFormerConfig, qformer_forward

MAGIC = b"UMCBUND1"
FORMAT_VERSION = 1


@dataclass
class ConditionBundle:
    image_embedding: np.ndarray            # (d,)
    prompt_embeddings: np.ndarray          # (n_queries, d_prompt)
    pooled_prompt_embedding: np.ndarray    # (d_pool,)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.image_embedding = np.asarray(self.image_embedding, dtype=np.float32)
        self.prompt_embeddings = np.asarray(self.prompt_embeddings, dtype=np.float32)
        self.pooled_prompt_embedding = np.asarray(self.pooled_prompt_embedding, dtype=np.float32)
        if self.image_embedding.ndim != 1 or self.prompt_embeddings.ndim != 2 or self.pooled_prompt_embedding.ndim != 1:
            raise FormatError("bundle shapes must be (d,), (n_queries, d_prompt), (d_pool,)")
        for name in ("image_embedding", "prompt_embeddings", "pooled_prompt_embedding"):
            if not np.isfinite(getattr(self, name)).all():
                raise FormatError(f"bundle {name} contains NaN/Inf")


def export_conditions(trials: Sequence[NeuralTrial], alignment_model, prior: DiffusionPrior | None,
                      qformer: QFormer | None, prior_seed: int = 0) -> tuple[list[ConditionBundle], dict[str, str]]:
    """One bundle per trial, in input order. Returns (bundles, model fingerprints)."""
    if alignment_model is None or prior is None or qformer is None:
        raise ConfigError("export needs the alignment model, the prior and the Q-Former")
    zv_hat, zs_hat = embed_trials(alignment_model, list(trials))
    image = prior_predict(prior, zv_hat, seed=prior_seed)
    with torch.no_grad():
        prompt, pooled = qformer_forward(qformer.eval(), torch.from_numpy(zs_hat))
    prompt, pooled = prompt.float().numpy(), pooled.float().numpy()
    fps = {"alignment": model_fingerprint(alignment_model), "prior": model_fingerprint(prior),
           "qformer": model_fingerprint(qformer)}
    bundles = [
        ConditionBundle(image[i], prompt[i], pooled[i], {
            "trial_index": i, "subject_id": t.subject_id, "image_id": t.image_id, "category_id": t.category_id,
        })
        for i, t in enumerate(trials)
    ]
    return bundles, fps


def dumps_bundles(bundles: Sequence[ConditionBundle], fingerprints: dict[str, str]) -> bytes:
    if not bundles:
        raise FormatError("no bundles to write")
    b0 = bundles[0]
    d, (nq, dp), dpool = len(b0.image_embedding), b0.prompt_embeddings.shape, len(b0.pooled_prompt_embedding)
    body = []
    for b in bundles:
        if (b.image_embedding.shape, b.prompt_embeddings.shape, b.pooled_prompt_embedding.shape) != ((d,), (nq, dp), (dpool,)):
            raise FormatError("all bundles in a file must share shapes")
        for arr in (b.image_embedding, b.prompt_embeddings, b.pooled_prompt_embedding):
            body.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "format_version": FORMAT_VERSION, "count": len(bundles), "d": d, "n_queries": nq,
        "d_prompt": dp, "d_pool": dpool, "dtype": "float32", "fingerprints": dict(fingerprints),
        "records": [b.provenance for b in bundles],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(body)


def loads_bundles(data: bytes) -> tuple[list[ConditionBundle], dict]:
    if data[:8] != MAGIC:
        raise FormatError("not a condition bundle file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported bundle version {header.get('format_version')}")
    d, nq, dp, dpool, n = header["d"], header["n_queries"], header["d_prompt"], header["d_pool"], header["count"]
    stride = d + nq * dp + dpool
    flat = np.frombuffer(data, dtype="<f4", offset=16 + hlen)
    if flat.size != n * stride:
        raise FormatError(f"payload holds {flat.size} floats, expected {n * stride}")
    flat = flat.reshape(n, stride)
    bundles = [
        ConditionBundle(row[:d].copy(), row[d : d + nq * dp].reshape(nq, dp).copy(), row[d + nq * dp :].copy(), rec)
        for row, rec in zip(flat, header["records"])
    ]
    return bundles, header


def write_bundles(path: str | os.PathLike, bundles, fingerprints) -> None:
    tensorfile.atomic_write_bytes(path, dumps_bundles(bundles, fingerprints))


def read_bundles(path: str | os.PathLike) -> tuple[list[ConditionBundle], dict]:
    return loads_bundles(Path(path).read_bytes())


def save_bridge_model(path: str | os.PathLike, module: QFormer | DiffusionPrior) -> str:
    kind = "umind.qformer" if isinstance(module, QFormer) else "umind.prior"
    fp = model_fingerprint(module)
    tensorfile.save(path, state_arrays(module), {"kind": kind, "config": asdict(module.cfg), "fingerprint": fp})
    return fp


def load_bridge_model(path: str | os.PathLike) -> QFormer | DiffusionPrior:
    arrays, meta = tensorfile.load(path)
    kind = meta.get("kind")
    if kind == "umind.qformer":
        module = QFormer(QFormerConfig(**meta["config"]))
    elif kind == "umind.prior":
        module = DiffusionPrior(PriorConfig(**meta["config"]))
    else:
        raise FormatError(f"{path} is not a bridge checkpoint")
    module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return module.eval()
