"""Shared text encoder: prompts -> hashed n-gram bags -> unit-norm embeddings.

One parameter record encodes both item profiles and candidate value
prompts, so items and values live in the same embedding space and the
similarity s(item, value) is a plain dot product of unit vectors.

The featurizer replaces a subword tokenizer: lowercase, split on
whitespace/punctuation, emit word and character n-grams, hash each n-gram
with FNV-1a 64 into a power-of-two bucket table. Encoding mean-pools the
bucket embeddings, applies a linear projection, and L2-normalizes.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

# FNV-1a, 64-bit variant.
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_FNV_MASK = (1 << 64) - 1

PARAMS_MAGIC = b"TACLRPAR"
PARAMS_VERSION = 1

ITEM_PROMPT_TEMPLATE = "title: {title} description: {description}"

# Value prompt variants, richest last. The prompt-template ablation walks
# this enumeration; "full" is the default everywhere else.
VALUE_PROMPT_TEMPLATES = {
    "value": "{value}",
    "category": "A {category} with {value}",
    "attribute": "A product with {attribute} being {value}",
    "full": "A {category} with {attribute} being {value}",
}

# Counts texts pushed through the encoder (1 per encode() call, row count
# per project_rows() call). Lets tests pin down how often inference and
# training actually invoke the encoder.
_ENCODE_TEXTS = 0


def encode_counter() -> int:
    return _ENCODE_TEXTS


def reset_encode_counter() -> None:
    global _ENCODE_TEXTS
    _ENCODE_TEXTS = 0


@dataclass(frozen=True)
class EncoderConfig:
    hash_buckets: int = 1 << 16
    word_ngrams: tuple[int, ...] = (1,)
    char_ngrams: tuple[int, ...] = (3, 4)
    embed_dim: int = 64
    proj_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.hash_buckets < 2 or self.hash_buckets & (self.hash_buckets - 1):
            raise ConfigError("hash_buckets must be a power of two >= 2")
        if self.embed_dim < 2 or self.proj_dim < 2:
            raise ConfigError("embed_dim and proj_dim must be >= 2")
        if not self.word_ngrams and not self.char_ngrams:
            raise ConfigError("at least one n-gram family must be enabled")
        if any(n < 1 for n in self.word_ngrams) or any(n < 1 for n in self.char_ngrams):
            raise ConfigError("n-gram sizes must be >= 1")


@dataclass(frozen=True)
class FeatureBag:
    """Sparse bucket -> count map plus the total count."""

    counts: dict[int, int]
    total: int


@dataclass
class EncoderParams:
    """Trainable state; the single shared encoder for items and values."""

    config: EncoderConfig
    feature_table: np.ndarray  # [hash_buckets, embed_dim]
    proj_weight: np.ndarray  # [embed_dim, proj_dim]
    proj_bias: np.ndarray  # [proj_dim]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            config=self.config,
            feature_table=self.feature_table.copy(),
            proj_weight=self.proj_weight.copy(),
            proj_bias=self.proj_bias.copy(),
        )


def render_item_prompt(title: str, description: str) -> str:
    if not title:
        raise DataError("item title must be non-empty")
    return ITEM_PROMPT_TEMPLATE.format(title=title, description=description)


def render_value_prompt(
    category: str, attribute: str, value_text: str, template: str = "full"
) -> str:
    """Render a candidate value prompt (null entries pass the text "null")."""
    if not category or not attribute or not value_text:
        raise DataError("category, attribute, and value text must be non-empty")
    try:
        fmt = VALUE_PROMPT_TEMPLATES[template]
    except KeyError:
        raise ConfigError(f"unknown value prompt template {template!r}") from None
    return fmt.format(category=category, attribute=attribute, value=value_text)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _FNV_MASK
    return h


def _ngram_features(text: str, cfg: EncoderConfig) -> list[str]:
    tokens = _TOKEN_RE.findall(text.lower())
    feats: list[str] = []
    for n in cfg.word_ngrams:
        for i in range(len(tokens) - n + 1):
            feats.append(f"w{n}:" + " ".join(tokens[i : i + n]))
    for n in cfg.char_ngrams:
        for tok in tokens:
            for i in range(len(tok) - n + 1):
                feats.append(f"c{n}:" + tok[i : i + n])
    return feats


@functools.lru_cache(maxsize=1 << 17)
def _featurize_cached(text: str, cfg: EncoderConfig) -> FeatureBag:
    counts: dict[int, int] = {}
    for feat in _ngram_features(text, cfg):
        bucket = fnv1a64(feat.encode("utf-8")) % cfg.hash_buckets
        counts[bucket] = counts.get(bucket, 0) + 1
    return FeatureBag(counts=counts, total=sum(counts.values()))


def featurize(text: str, cfg: EncoderConfig) -> FeatureBag:
    """Hashed n-gram bag of a text. Deterministic; empty text -> empty bag."""
    return _featurize_cached(text, cfg)


def bag_row(bag: FeatureBag) -> tuple[np.ndarray, np.ndarray]:
    """Bag -> (sorted bucket indices, mean-pooling weights count/total)."""
    if bag.total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    idx = np.fromiter(sorted(bag.counts), dtype=np.int64, count=len(bag.counts))
    w = np.array([bag.counts[int(b)] for b in idx], dtype=np.float64) / bag.total
    return idx, w


def rows_to_csr(
    rows: list[tuple[np.ndarray, np.ndarray]], hash_buckets: int
) -> sparse.csr_matrix:
    """Stack (indices, weights) rows into one CSR matrix [n_rows, buckets]."""
    if rows:
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(idx) for idx, _ in rows])
        indices = np.concatenate([idx for idx, _ in rows]) if indptr[-1] else np.empty(0, np.int64)
        data = np.concatenate([w for _, w in rows]) if indptr[-1] else np.empty(0, np.float64)
    else:
        indptr = np.zeros(1, dtype=np.int64)
        indices = np.empty(0, dtype=np.int64)
        data = np.empty(0, dtype=np.float64)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), hash_buckets))


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    """Seeded uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) per matrix."""
    rng = np.random.default_rng(cfg.seed)
    a_table = np.sqrt(6.0 / (cfg.hash_buckets + cfg.embed_dim))
    a_proj = np.sqrt(6.0 / (cfg.embed_dim + cfg.proj_dim))
    return EncoderParams(
        config=cfg,
        feature_table=rng.uniform(-a_table, a_table, size=(cfg.hash_buckets, cfg.embed_dim)),
        proj_weight=rng.uniform(-a_proj, a_proj, size=(cfg.embed_dim, cfg.proj_dim)),
        proj_bias=np.zeros(cfg.proj_dim),
    )


DEGENERATE_NORM = 1e-12


@dataclass
class RowForward:
    """Intermediates of project_rows, kept for the backward pass."""

    x: sparse.csr_matrix
    pooled: np.ndarray
    y: np.ndarray
    norms: np.ndarray
    degenerate: np.ndarray
    embeddings: np.ndarray


def project_rows(x: sparse.csr_matrix, params: EncoderParams) -> RowForward:
    """Forward pass for a block of mean-pooled feature rows.

    Rows whose pre-normalization vector has norm < 1e-12 fall back to the
    first basis vector (and carry zero gradient).
    """
    global _ENCODE_TEXTS
    _ENCODE_TEXTS += x.shape[0]
    pooled = x @ params.feature_table
    y = pooled @ params.proj_weight + params.proj_bias
    norms = np.linalg.norm(y, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    e = y / safe[:, None]
    if degenerate.any():
        e[degenerate] = 0.0
        e[degenerate, 0] = 1.0
    return RowForward(x=x, pooled=pooled, y=y, norms=safe, degenerate=degenerate, embeddings=e)


@dataclass
class ParamGrads:
    """Gradient accumulator shaped like EncoderParams."""

    feature_table: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "ParamGrads":
        return cls(
            feature_table=np.zeros_like(params.feature_table),
            proj_weight=np.zeros_like(params.proj_weight),
            proj_bias=np.zeros_like(params.proj_bias),
        )

    def add_scaled(self, other: "ParamGrads", scale: float = 1.0) -> None:
        self.feature_table += scale * other.feature_table
        self.proj_weight += scale * other.proj_weight
        self.proj_bias += scale * other.proj_bias


def backprop_rows(
    g_emb: np.ndarray, fwd: RowForward, params: EncoderParams, grads: ParamGrads
) -> None:
    """Accumulate parameter gradients given d(loss)/d(embeddings)."""
    # Through L2 normalization: g_y = (g_e - (g_e . e) e) / ||y||.
    dot = np.einsum("ij,ij->i", g_emb, fwd.embeddings)
    g_y = (g_emb - dot[:, None] * fwd.embeddings) / fwd.norms[:, None]
    if fwd.degenerate.any():
        g_y[fwd.degenerate] = 0.0
    grads.proj_bias += g_y.sum(axis=0)
    grads.proj_weight += fwd.pooled.T @ g_y
    g_pooled = g_y @ params.proj_weight.T
    grads.feature_table += fwd.x.T @ g_pooled


def encode(bag: FeatureBag, params: EncoderParams) -> np.ndarray:
    """Unit-norm embedding of a single feature bag."""
    global _ENCODE_TEXTS
    _ENCODE_TEXTS += 1
    idx, w = bag_row(bag)
    if idx.size:
        pooled = w @ params.feature_table[idx]
    else:
        pooled = np.zeros(params.config.embed_dim)
    y = pooled @ params.proj_weight + params.proj_bias
    norm = float(np.linalg.norm(y))
    if norm < DEGENERATE_NORM:
        e = np.zeros(params.config.proj_dim)
        e[0] = 1.0
        return e
    return y / norm


def encode_text(text: str, params: EncoderParams) -> np.ndarray:
    return encode(featurize(text, params.config), params)


def params_digest(params: EncoderParams) -> str:
    """SHA-256 over the canonical config header and raw parameter bytes."""
    h = hashlib.sha256()
    h.update(_config_header(params.config, template=None))
    for arr in (params.feature_table, params.proj_weight, params.proj_bias):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def _config_header(cfg: EncoderConfig, template: str | None) -> bytes:
    obj = {
        "hash_buckets": cfg.hash_buckets,
        "word_ngrams": list(cfg.word_ngrams),
        "char_ngrams": list(cfg.char_ngrams),
        "embed_dim": cfg.embed_dim,
        "proj_dim": cfg.proj_dim,
        "seed": cfg.seed,
    }
    if template is not None:
        obj["value_template"] = template
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def save_params(path: str | Path, params: EncoderParams, template: str = "full") -> None:
    """Binary container: magic, version byte, JSON header, row-major float64."""
    header = _config_header(params.config, template)
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<B", PARAMS_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in (params.feature_table, params.proj_weight, params.proj_bias):
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_params(path: str | Path) -> tuple[EncoderParams, str]:
    """Load a params container; returns (params, value prompt template)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(PARAMS_MAGIC))
        if magic != PARAMS_MAGIC:
            raise DataError(f"{path}: not an encoder params file")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != PARAMS_VERSION:
            raise DataError(f"{path}: unsupported params format version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        template = header.pop("value_template", "full")
        cfg = EncoderConfig(
            hash_buckets=header["hash_buckets"],
            word_ngrams=tuple(header["word_ngrams"]),
            char_ngrams=tuple(header["char_ngrams"]),
            embed_dim=header["embed_dim"],
            proj_dim=header["proj_dim"],
            seed=header["seed"],
        )
        table = np.frombuffer(
            fh.read(cfg.hash_buckets * cfg.embed_dim * 8), dtype=np.float64
        ).reshape(cfg.hash_buckets, cfg.embed_dim)
        weight = np.frombuffer(
            fh.read(cfg.embed_dim * cfg.proj_dim * 8), dtype=np.float64
        ).reshape(cfg.embed_dim, cfg.proj_dim)
        bias = np.frombuffer(fh.read(cfg.proj_dim * 8), dtype=np.float64)
    params = EncoderParams(
        config=cfg,
        feature_table=table.copy(),
        proj_weight=weight.copy(),
        proj_bias=bias.copy(),
    )
    return params, template
