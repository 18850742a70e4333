"""Posterior files: a JSON manifest followed by raw float64 arrays.

Layout::

    8 bytes   magic b"CMNPOST1"
    8 bytes   little-endian uint64, length of the JSON manifest in bytes
    manifest  UTF-8 JSON: dims, hyperparameters, seed, extra metadata and an
              "arrays" table of {name, shape, offset}; offsets count bytes
              from the start of the data block
    data      little-endian float64 arrays, row-major, concatenated

Only global factors are stored; per-datapoint factors belong to a training
set and are not needed for prediction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cmn import CMNModel, CMNPosterior
from .distributions import MatrixNormalGamma
from .experts import ExpertBank
from .mnlr import MNLRPosterior

MAGIC = b"CMNPOST1"
FORMAT_VERSION = 1


class PosteriorFormatError(ValueError):
    pass


def _arrays(post: CMNPosterior) -> dict[str, np.ndarray]:
    e = post.experts.posteriors
    return {
        "gating/mean": post.gating.mean,
        "gating/cov": post.gating.cov,
        "output/mean": post.output.mean,
        "output/cov": post.output.cov,
        "experts/M": e.M,
        "experts/V": e.V,
        "experts/V_inv": e.V_inv,
        "experts/a": e.a,
        "experts/b": e.b,
    }


def save_posterior(path, model: CMNModel, post: CMNPosterior, seed=None, metadata=None, extra_arrays=None) -> None:
    arrays = dict(_arrays(post))
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra/{name}"] = np.asarray(arr, dtype=float)
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": "cmnet-posterior",
        "version": FORMAT_VERSION,
        "model": asdict(model),
        "seed": seed,
        "metadata": metadata or {},
        "arrays": table,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_posterior_file(path):
    """Return ``(manifest, arrays)`` from a posterior file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise PosteriorFormatError(f"{path}: not a posterior file")
    (length,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + length].decode("utf-8"))
    data = memoryview(raw)[16 + length :]
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(data[start : start + 8 * count], dtype="<f8").astype(float)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return manifest, arrays


def load_posterior(path):
    """Return ``(model, posterior, manifest, extra_arrays)``."""
    manifest, arrays = read_posterior_file(path)
    model = CMNModel(**manifest["model"])
    gating = MNLRPosterior(arrays["gating/mean"].reshape(model.K - 1, model.d + 1), arrays["gating/cov"], model.sigma0**2)
    output = MNLRPosterior(arrays["output/mean"], arrays["output/cov"], model.sigma1**2)
    experts = MatrixNormalGamma(
        arrays["experts/M"], arrays["experts/V"], arrays["experts/a"], arrays["experts/b"], arrays["experts/V_inv"]
    )
    bank = ExpertBank(experts, model.expert_prior())
    extra = {k[len("extra/") :]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, CMNPosterior(gating, output, bank), manifest, extra
