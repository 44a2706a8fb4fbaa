"""Int8 embedding quantization and the persistent key-value embedding store.

Each dimension i gets a calibrated range (s_min_i, s_max_i) split into
L = 255 equal intervals of length Q_i; a float maps to the uint8 interval
index floor((r - s_min) / Q) and is recovered at the interval midpoint
index * Q + Q/2 + s_min, bounding the round-trip error by Q/2 per
dimension. The store maps uint64 doc ids to quantized vectors and
round-trips byte-exactly through a single binary file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError, NotFoundError

L_INTERVALS = 255
STORE_MAGIC = b"SSES"
STORE_VERSION = 1


@dataclass
class QuantizationParams:
    s_min: np.ndarray                      # per-dimension range minimum
    s_max: np.ndarray                      # per-dimension range maximum
    widened: list[int] = field(default_factory=list)  # dims widened at calibration
    n_intervals: int = L_INTERVALS

    @property
    def dim(self) -> int:
        return int(self.s_min.shape[0])

    @property
    def interval(self) -> np.ndarray:
        """Per-dimension interval length Q."""
        return (self.s_max - self.s_min) / self.n_intervals


def calibrate(vectors: np.ndarray, epsilon: float = 1e-9) -> QuantizationParams:
    """Per-dimension min/max over a sample of embeddings.

    Constant dimensions (min == max) are widened by ``epsilon`` and flagged
    in ``widened`` so quantization stays well defined.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ContractError("calibration needs a non-empty 2-D sample")
    s_min = vectors.min(axis=0)
    s_max = vectors.max(axis=0)
    widened = np.flatnonzero(s_max <= s_min).tolist()
    for i in widened:
        s_max[i] = s_min[i] + epsilon
    return QuantizationParams(s_min=s_min, s_max=s_max, widened=widened)


def quantize(v: np.ndarray, p: QuantizationParams) -> np.ndarray:
    """uint8 interval indices; out-of-range values clamp to 0 / 255."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (p.dim,):
        raise ContractError(f"vector shape {v.shape} does not match params dim {p.dim}")
    idx = np.floor((v - p.s_min) / p.interval)
    return np.clip(idx, 0, p.n_intervals).astype(np.uint8)


def dequantize(qv: np.ndarray, p: QuantizationParams) -> np.ndarray:
    """Midpoint recovery: index * Q + Q/2 + s_min."""
    qv = np.asarray(qv)
    if qv.shape != (p.dim,):
        raise ContractError(f"vector shape {qv.shape} does not match params dim {p.dim}")
    q = p.interval
    return qv.astype(np.float64) * q + q / 2 + p.s_min


class EmbeddingStore:
    """Immutable-after-build doc_id -> quantized-vector map with binary persistence.

    File layout (little-endian): magic, version u32, dim u32, count u64,
    s_min and s_max as f64 arrays, widened-dim count u32 + indices u32,
    then records sorted by doc_id: doc_id u64 followed by dim uint8 bytes.
    """

    def __init__(self, params: QuantizationParams):
        self.params = params
        self._vectors: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, doc_id: int) -> bool:
        return doc_id in self._vectors

    def doc_ids(self) -> list[int]:
        return sorted(self._vectors)

    def put(self, doc_id: int, qv: np.ndarray) -> None:
        if doc_id < 0:
            raise ContractError("doc_id must be an unsigned integer")
        if doc_id in self._vectors:
            raise ContractError(f"duplicate doc_id {doc_id}")
        qv = np.asarray(qv, dtype=np.uint8)
        if qv.shape != (self.params.dim,):
            raise ContractError(f"vector shape {qv.shape} does not match store dim")
        self._vectors[doc_id] = qv.copy()

    def get(self, doc_id: int) -> np.ndarray:
        try:
            return self._vectors[doc_id]
        except KeyError:
            raise NotFoundError(f"doc_id {doc_id} not in store") from None

    def get_dequantized(self, doc_id: int) -> np.ndarray:
        return dequantize(self.get(doc_id), self.params)

    def persist(self, path) -> None:
        p = self.params
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<IIQ", STORE_VERSION, p.dim, len(self._vectors)))
            fh.write(np.ascontiguousarray(p.s_min, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.s_max, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", len(p.widened)))
            for i in p.widened:
                fh.write(struct.pack("<I", i))
            for doc_id in sorted(self._vectors):
                fh.write(struct.pack("<Q", doc_id))
                fh.write(self._vectors[doc_id].tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            if fh.read(4) != STORE_MAGIC:
                raise InputError(f"{path} is not an embedding store")
            version, dim, count = struct.unpack("<IIQ", fh.read(16))
            if version != STORE_VERSION:
                raise InputError(f"unsupported store version {version}")
            s_min = np.frombuffer(fh.read(8 * dim), dtype="<f8").copy()
            s_max = np.frombuffer(fh.read(8 * dim), dtype="<f8").copy()
            (n_widened,) = struct.unpack("<I", fh.read(4))
            widened = [struct.unpack("<I", fh.read(4))[0] for _ in range(n_widened)]
            store = cls(QuantizationParams(s_min=s_min, s_max=s_max, widened=widened))
            for _ in range(count):
                (doc_id,) = struct.unpack("<Q", fh.read(8))
                store._vectors[doc_id] = np.frombuffer(fh.read(dim), dtype=np.uint8).copy()
        return store


def build_store(embeddings: dict[int, np.ndarray],
                params: QuantizationParams | None = None) -> EmbeddingStore:
    """Calibrate over the given embeddings (unless params given) and quantize all."""
    if not embeddings:
        raise ContractError("no embeddings to store")
    ids = sorted(embeddings)
    if params is None:
        params = calibrate(np.stack([embeddings[i] for i in ids]))
    store = EmbeddingStore(params)
    for doc_id in ids:
        store.put(doc_id, quantize(embeddings[doc_id], params))
    return store
