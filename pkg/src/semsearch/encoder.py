"""Shared-parameter Transformer bi-encoder with context-code attention.

One Transformer stack encodes both queries and documents (the two roles
share every parameter). On the query side, m trainable context codes each
attend over all encoder outputs to produce global representations; training
scores by max over per-code dot products, prediction by the mean-pooled
surrogate embedding so standard nearest-neighbor indexes apply. A jointly
trained affine compression layer maps encoder outputs down to the stored
embedding width.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ShapeError
from .textproc import CLS_ID, Vocab

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 1024
    max_len: int = 64
    m: int = 4
    d_compress: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.m < 1:
            raise ShapeError("at least one context code is required")
        if self.d_compress > self.d_model:
            raise ShapeError("compressed width cannot exceed d_model")


@dataclass
class EncoderOutput:
    cls: Tensor            # aggregate [CLS] representation
    tokens: Tensor         # per-token representations, one row per input token
    full: Tensor = field(repr=False, default=None)  # [CLS] row stacked above tokens


class EncoderModel:
    """Parameter container plus the forward passes built on the autodiff kernel."""

    def __init__(self, config: EncoderConfig, seed: int = 0, vocab: Vocab | None = None):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, Tensor] = {}

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        p["tok_emb"] = normal(c.vocab_size, c.d_model)
        p["pos_emb"] = normal(c.max_len, c.d_model)
        p["seg_emb"] = normal(2, c.d_model)
        for i in range(c.n_layers):
            # no key bias: a constant shift of every key cancels in the
            # attention softmax, leaving a parameter with identically zero
            # gradient
            for w in ("wq", "wk", "wv", "wo"):
                p[f"layer{i}.{w}"] = normal(c.d_model, c.d_model)
                if w != "wk":
                    p[f"layer{i}.b{w[1]}"] = zeros(c.d_model)
            p[f"layer{i}.ln1_g"] = ones(c.d_model)
            p[f"layer{i}.ln1_b"] = zeros(c.d_model)
            p[f"layer{i}.ffn_w1"] = normal(c.d_model, c.d_ff)
            p[f"layer{i}.ffn_b1"] = zeros(c.d_ff)
            p[f"layer{i}.ffn_w2"] = normal(c.d_ff, c.d_model)
            p[f"layer{i}.ffn_b2"] = zeros(c.d_model)
            p[f"layer{i}.ln2_g"] = ones(c.d_model)
            p[f"layer{i}.ln2_b"] = zeros(c.d_model)
        p["codes"] = normal(c.m, c.d_model)
        p["compress_w"] = normal(c.d_model, c.d_compress)
        p["compress_b"] = zeros(c.d_compress)
        p["mlm_w"] = normal(c.d_model, c.vocab_size)
        p["mlm_b"] = zeros(c.vocab_size)
        p["nsp_w"] = normal(c.d_model)
        p["nsp_b"] = zeros()
        self.params = p

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward passes -----------------------------------------------------

    def encode(self, seq: list[int], train_mode: bool = False,
               rng: np.random.Generator | None = None,
               segments: list[int] | None = None) -> EncoderOutput:
        """Run the Transformer stack over one token sequence.

        Deterministic when ``train_mode`` is off (dropout disabled). The
        same code path serves both the query and document roles.
        """
        c = self.config
        if len(seq) == 0 or seq[0] != CLS_ID:
            raise InputError("sequence must start with the [CLS] id")
        if len(seq) > c.max_len:
            raise InputError(f"sequence length {len(seq)} exceeds max_len {c.max_len}")
        if max(seq) >= c.vocab_size:
            raise InputError("token id outside vocabulary")
        drop = c.dropout if train_mode else 0.0
        if drop > 0.0 and rng is None:
            raise InputError("train_mode encoding needs an rng for dropout")

        p = self.params
        x = ad.add(ad.gather_rows(p["tok_emb"], seq),
                   ad.gather_rows(p["pos_emb"], list(range(len(seq)))))
        if segments is not None:
            x = ad.add(x, ad.gather_rows(p["seg_emb"], segments))
        for i in range(c.n_layers):
            x = self._block(x, i, drop, rng)
        return EncoderOutput(cls=ad.row(x, 0), tokens=ad.slice_rows(x, 1, len(seq)), full=x)

    def _block(self, x: Tensor, i: int, drop: float, rng) -> Tensor:
        c = self.config
        p = self.params
        dh = c.d_model // c.n_heads
        q = ad.add(ad.matmul(x, p[f"layer{i}.wq"]), p[f"layer{i}.bq"])
        k = ad.matmul(x, p[f"layer{i}.wk"])
        v = ad.add(ad.matmul(x, p[f"layer{i}.wv"]), p[f"layer{i}.bv"])
        heads = []
        for h in range(c.n_heads):
            qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
            kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
            vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
            att = ad.softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh)))
            if drop > 0.0:
                att = ad.dropout(att, drop, rng)
            heads.append(ad.matmul(att, vh))
        attn = ad.add(ad.matmul(ad.concat_cols(heads), p[f"layer{i}.wo"]), p[f"layer{i}.bo"])
        if drop > 0.0:
            attn = ad.dropout(attn, drop, rng)
        x = ad.layernorm(ad.add(x, attn), p[f"layer{i}.ln1_g"], p[f"layer{i}.ln1_b"])
        ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, p[f"layer{i}.ffn_w1"]),
                                             p[f"layer{i}.ffn_b1"])),
                              p[f"layer{i}.ffn_w2"]),
                    p[f"layer{i}.ffn_b2"])
        if drop > 0.0:
            ff = ad.dropout(ff, drop, rng)
        return ad.layernorm(ad.add(x, ff), p[f"layer{i}.ln2_g"], p[f"layer{i}.ln2_b"])

    def attend_codes(self, out: EncoderOutput) -> tuple[Tensor, Tensor]:
        """Context-code attention over all encoder outputs.

        Returns (P, W): P row i is the attention-weighted sum of the encoder
        outputs under code i; W holds the attention weight rows (each a
        probability vector over [CLS] plus the tokens).
        """
        logits = ad.matmul(self.params["codes"], ad.transpose(out.full))
        w = ad.softmax(logits, axis=-1)
        return ad.matmul(w, out.full), w

    def compress(self, v: Tensor) -> Tensor:
        """Affine projection to the stored embedding width (1-D or 2-D input)."""
        if v.data.ndim == 1:
            out = self.compress(ad.reshape(v, (1, v.shape[0])))
            return ad.reshape(out, (self.config.d_compress,))
        return ad.add(ad.matmul(v, self.params["compress_w"]), self.params["compress_b"])

    def embed_query(self, seq: list[int]) -> Tensor:
        """Compressed mean-pooled surrogate embedding of a query."""
        p, _ = self.attend_codes(self.encode(seq))
        return ad.tmean(self.compress(p), axis=0)

    def embed_document(self, seq: list[int]) -> Tensor:
        """Compressed [CLS] embedding of a document."""
        return self.compress(self.encode(seq).cls)

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        """Single-file binary checkpoint: header JSON then f64-LE parameter blobs."""
        header = {
            "config": asdict(self.config),
            "params": [[name, list(t.shape)] for name, t in self.params.items()],
            "vocab": self.vocab.tokens if self.vocab is not None else None,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, t in self.params.items():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise InputError(f"{path} is not a model checkpoint")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise InputError(f"unsupported checkpoint version {version}")
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n).decode("utf-8"))
            model = cls(EncoderConfig(**header["config"]),
                        vocab=Vocab(header["vocab"]) if header["vocab"] is not None else None)
            for name, shape in header["params"]:
                size = int(np.prod(shape)) if shape else 1
                raw = fh.read(8 * size)
                model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return model


# ---------------------------------------------------------------------------
# relevance scoring
# ---------------------------------------------------------------------------

def _row_dots(p: Tensor, c_doc: Tensor) -> Tensor:
    if p.data.ndim != 2 or c_doc.data.ndim != 1 or p.shape[1] != c_doc.shape[0]:
        raise ShapeError(f"scoring width mismatch: {p.shape} vs {c_doc.shape}")
    return ad.stack_rows([ad.dot(ad.row(p, i), c_doc) for i in range(p.shape[0])])


def score_train(p: Tensor, c_doc: Tensor) -> Tensor:
    """Training-time relevance: max over per-code dot products.

    The subgradient flows only through the argmax row (ties to the lowest
    row index).
    """
    return ad.tmax(_row_dots(p, c_doc), axis=0)


def score_predict(p: Tensor, c_doc: Tensor) -> Tensor:
    """Prediction-time relevance: mean-pooled surrogate embedding dot c_doc."""
    if p.data.ndim != 2 or c_doc.data.ndim != 1 or p.shape[1] != c_doc.shape[0]:
        raise ShapeError(f"scoring width mismatch: {p.shape} vs {c_doc.shape}")
    return ad.dot(ad.tmean(p, axis=0), c_doc)
