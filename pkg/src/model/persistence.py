"""
Model files and detector checkpoints.

A model file is a magic line, one canonical JSON header line and the raw
little-endian float64 weights. Identical training runs produce identical
bytes. Checkpoints are JSON documents with a checksum over the canonical
payload, replaced atomically on every write.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from exceptions import StateCorruptError
from model.covariates import CovariateSpec
from model.dynamics import ModelDims, ModelParams
from model.grid import BinGrid
from utils.file_manager import atomic_write

MODEL_MAGIC = b"DISTANOM-MODEL"
MODEL_VERSION = 1
CHECKPOINT_VERSION = 1
_WEIGHT_DTYPE = np.dtype("<f8")


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class ModelBundle:
    """Everything ``detect`` needs besides the data: weights, grids and covariates."""

    params: ModelParams
    grids: Dict[str, BinGrid]
    covariates: CovariateSpec
    training: Dict[str, Any] = field(default_factory=dict)
    mode: str = "finite"
    samples_per_interval: Optional[int] = None
    seed: int = 0
    final_nll: float = float("nan")

    def grid_for(self, metric_id: str) -> BinGrid:
        if metric_id in self.grids:
            return self.grids[metric_id]
        if len(self.grids) == 1:
            return next(iter(self.grids.values()))
        raise StateCorruptError(f"model has no grid for metric {metric_id!r}")


def _weights_bytes(params: ModelParams) -> bytes:
    return params.vector.astype(_WEIGHT_DTYPE).tobytes()


def model_to_bytes(bundle: ModelBundle) -> bytes:
    weights = _weights_bytes(bundle.params)
    header = {
        "dims": bundle.params.dims.to_dict(),
        "grids": {metric: grid.to_list() for metric, grid in sorted(bundle.grids.items())},
        "covariates": bundle.covariates.to_dict(),
        "training": bundle.training,
        "mode": bundle.mode,
        "samples_per_interval": bundle.samples_per_interval,
        "seed": int(bundle.seed),
        "final_nll": float(bundle.final_nll) if np.isfinite(bundle.final_nll) else None,
        "weight_count": int(bundle.params.vector.size),
        "sha256": hashlib.sha256(weights).hexdigest(),
    }
    first = MODEL_MAGIC + f" {MODEL_VERSION}\n".encode("ascii")
    return first + canonical_json(header).encode("utf-8") + b"\n" + weights


def save_model(path, bundle: ModelBundle) -> None:
    atomic_write(path, model_to_bytes(bundle))


def load_model(path) -> ModelBundle:
    """Read a model file; any inconsistency raises ``StateCorruptError``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StateCorruptError(f"cannot read model file: {e}", str(path)) from e

    try:
        first_end = raw.index(b"\n")
        header_end = raw.index(b"\n", first_end + 1)
    except ValueError:
        raise StateCorruptError("model file is truncated", str(path)) from None

    magic, _, version = raw[:first_end].partition(b" ")
    if magic != MODEL_MAGIC or version != str(MODEL_VERSION).encode("ascii"):
        raise StateCorruptError("not a version 1 model file", str(path))

    try:
        header = json.loads(raw[first_end + 1:header_end].decode("utf-8"))
        weights = raw[header_end + 1:]
        if hashlib.sha256(weights).hexdigest() != header["sha256"]:
            raise StateCorruptError("model weights fail their checksum", str(path))
        vector = np.frombuffer(weights, dtype=_WEIGHT_DTYPE).astype(np.float64)
        if vector.size != header["weight_count"]:
            raise StateCorruptError("model weight count does not match the header", str(path))
        dims = ModelDims(**header["dims"])
        params = ModelParams(dims, vector)
        grids = {metric: BinGrid(np.asarray(knots)) for metric, knots in header["grids"].items()}
        covariates = CovariateSpec.from_dict(header["covariates"])
    except StateCorruptError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise StateCorruptError(f"model header is invalid: {e}", str(path)) from e

    for metric, grid in grids.items():
        if grid.bin_count != dims.bin_count:
            raise StateCorruptError(f"grid of {metric!r} does not match the model bin count", str(path))
    if covariates.width > dims.covariate_width:
        raise StateCorruptError("covariate spec is wider than the model input", str(path))

    final_nll = header.get("final_nll")
    return ModelBundle(
        params=params,
        grids=grids,
        covariates=covariates,
        training=header.get("training", {}),
        mode=header.get("mode", "finite"),
        samples_per_interval=header.get("samples_per_interval"),
        seed=header.get("seed", 0),
        final_nll=float("nan") if final_nll is None else float(final_nll),
    )


def checkpoint_to_bytes(payload: Dict[str, Any]) -> bytes:
    body = canonical_json(payload)
    document = {
        "format_version": CHECKPOINT_VERSION,
        "payload": payload,
        "sha256": hashlib.sha256(body.encode("utf-8")).hexdigest(),
    }
    return canonical_json(document).encode("utf-8")


def write_checkpoint(path, payload: Dict[str, Any]) -> int:
    """Atomically write a checkpoint; returns its size in bytes."""
    data = checkpoint_to_bytes(payload)
    atomic_write(path, data)
    return len(data)


def read_checkpoint(path) -> Dict[str, Any]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise StateCorruptError(f"cannot read checkpoint: {e}", str(path)) from e
    if not isinstance(document, dict) or document.get("format_version") != CHECKPOINT_VERSION:
        raise StateCorruptError("unsupported checkpoint format version", str(path))
    payload = document.get("payload")
    if not isinstance(payload, dict):
        raise StateCorruptError("checkpoint has no payload", str(path))
    expected = hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
    if document.get("sha256") != expected:
        raise StateCorruptError("checkpoint fails its checksum", str(path))
    return payload
