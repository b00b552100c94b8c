"""Embedding-set file I/O (GVLE format), run configuration, synthetic data.

The GVLE layout is little-endian throughout:

    magic "GVLE" | n: uint32 | d: uint32 | has_labels: uint8
    | n*d float32 row-major | if has_labels: n int32 labels

Config files are UTF-8 ``key=value`` lines mirroring RunConfig field names.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    InputError,
    InvariantError,
    LabelRangeError,
    NonFiniteError,
    TruncatedError,
)

GVLE_MAGIC = b"GVLE"

# Synthetic class centers must sit at least 60 degrees apart on the unit
# sphere (chord >= 1); rejection beyond this budget means the requested
# class_count does not fit in d dimensions.
_MAX_CENTER_COS = 0.5
_CENTER_ATTEMPTS = 10_000


@dataclass
class EmbeddingSet:
    """An n x d float32 embedding matrix with optional per-row class labels.

    ``labels`` uses -1 for "unlabeled". ``class_names`` and
    ``known_class_count`` are runtime annotations; the GVLE file format does
    not store them.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    class_names: list[str] | None = None
    known_class_count: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise InvariantError(
                f"embedding data must be 2-D, got shape {self.data.shape}"
            )
        n, d = self.data.shape
        if n < 1 or d < 1:
            raise InvariantError(f"embedding set needs n >= 1 and d >= 1, got {n}x{d}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("embedding data contains non-finite values")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (n,):
                raise InvariantError(
                    f"labels shape {self.labels.shape} does not match n={n}"
                )
            if (self.labels < -1).any():
                raise InvariantError("labels must be -1 or non-negative")
            if self.class_names is not None and self.labels.size:
                if int(self.labels.max()) >= len(self.class_names):
                    raise InvariantError("label exceeds class_names length")
        if self.known_class_count < 0:
            raise InvariantError("known_class_count must be >= 0")
        if self.class_names is not None and self.known_class_count > len(
            self.class_names
        ):
            raise InvariantError("known_class_count exceeds total class count")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_embedding_file(emb: EmbeddingSet, path) -> None:
    """Serialize ``emb`` to ``path`` in the GVLE format.

    Byte output is deterministic for equal inputs. Raises NonFiniteError if
    the data was mutated to contain NaN/Inf after construction; OSError if
    the path is unwritable.
    """
    if not np.isfinite(emb.data).all():
        raise NonFiniteError("refusing to write non-finite embedding values")
    n, d = emb.data.shape
    has_labels = emb.labels is not None
    buf = bytearray()
    buf += GVLE_MAGIC
    buf += struct.pack("<IIB", n, d, 1 if has_labels else 0)
    buf += np.ascontiguousarray(emb.data, dtype="<f4").tobytes()
    if has_labels:
        buf += np.ascontiguousarray(emb.labels, dtype="<i4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_embedding_file(path) -> EmbeddingSet:
    """Parse a GVLE file back into an EmbeddingSet.

    Round-trips bit-exactly with write_embedding_file on data and labels.
    Errors name the byte offset of the offending field.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"embedding file not found: {p}")
    raw = p.read_bytes()

    if len(raw) < 4 or raw[:4] != GVLE_MAGIC:
        raise BadMagicError(p, GVLE_MAGIC, raw[:4])
    off = 4

    def take(nbytes: int) -> bytes:
        nonlocal off
        if len(raw) - off < nbytes:
            raise TruncatedError(p, off, nbytes, len(raw) - off)
        chunk = raw[off : off + nbytes]
        off += nbytes
        return chunk

    n, d = struct.unpack("<II", take(8))
    (has_labels,) = struct.unpack("<B", take(1))
    if n == 0 or d == 0:
        raise FormatError(f"{p}: header declares empty set (n={n}, d={d})")
    if has_labels not in (0, 1):
        raise FormatError(f"{p}: has_labels byte at offset 12 must be 0/1, got {has_labels}")

    payload_off = off
    data = np.frombuffer(take(4 * n * d), dtype="<f4").reshape(n, d)
    finite = np.isfinite(data)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.ravel())[0])
        raise NonFiniteError(
            f"{p}: non-finite value at offset {payload_off + 4 * bad}"
        )

    labels = None
    if has_labels:
        labels_off = off
        labels = np.frombuffer(take(4 * n), dtype="<i4")
        bad = np.flatnonzero(labels < -1)
        if bad.size:
            i = int(bad[0])
            raise LabelRangeError(p, labels_off + 4 * i, int(labels[i]))
    if off != len(raw):
        raise FormatError(f"{p}: {len(raw) - off} trailing bytes at offset {off}")

    return EmbeddingSet(data=data.copy(), labels=None if labels is None else labels.copy())


@dataclass
class RunConfig:
    """Hyperparameters for one pipeline run.

    hidden_dim=0 means "resolve to the input embedding dimension".
    """

    knn_k: int = 3
    gcn_layers: int = 2
    margin_alpha: float = 0.3
    learn_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    hidden_dim: int = 0
    context_vectors_m: int = 16
    temperature: float = 1.0

    def validate(self, known_class_count: int | None = None) -> None:
        if self.knn_k < 1:
            raise InputError(f"knn_k must be >= 1, got {self.knn_k}")
        if known_class_count is not None and self.knn_k >= known_class_count:
            raise InputError(
                f"knn_k={self.knn_k} must be < known class count {known_class_count}"
            )
        if self.gcn_layers not in (0, 1, 2, 3):
            raise InputError(f"gcn_layers must be in {{0,1,2,3}}, got {self.gcn_layers}")
        if not 0.0 <= self.margin_alpha <= 1.0:
            raise InputError(f"margin_alpha must be in [0,1], got {self.margin_alpha}")
        if self.temperature <= 0.0:
            raise InputError(f"temperature must be > 0, got {self.temperature}")
        if self.learn_rate <= 0.0:
            raise InputError(f"learn_rate must be > 0, got {self.learn_rate}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.seed < 2**64:
            raise InputError(f"seed must be a uint64, got {self.seed}")
        if self.hidden_dim < 0:
            raise InputError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if self.context_vectors_m < 0:
            raise InputError(
                f"context_vectors_m must be >= 0, got {self.context_vectors_m}"
            )

    def resolved(self, input_dim: int) -> "RunConfig":
        """Return a copy with hidden_dim=0 replaced by the input dimension."""
        if self.hidden_dim:
            return dataclasses.replace(self)
        return dataclasses.replace(self, hidden_dim=input_dim)


def format_config(config: RunConfig) -> str:
    """Render a RunConfig as key=value lines in field order."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if f.type in ("float", float):
            lines.append(f"{f.name}={value!r}")
        else:
            lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    """Parse key=value config text; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in fields:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        try:
            if fields[key].type in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = int(raw)
        except ValueError as exc:
            raise InputError(f"config line {lineno}: bad value for {key}: {raw!r}") from exc
    return RunConfig(**values)


def write_config(config: RunConfig, path) -> None:
    Path(path).write_text(format_config(config), encoding="utf-8")


def read_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def _draw_centers(rng: np.random.Generator, class_count: int, d: int) -> np.ndarray:
    centers = np.empty((class_count, d))
    have = 0
    attempts = 0
    while have < class_count:
        if attempts >= _CENTER_ATTEMPTS:
            raise InputError(
                f"could not place {class_count} class centers pairwise >=60 degrees "
                f"apart in {d} dimensions after {_CENTER_ATTEMPTS} attempts"
            )
        attempts += 1
        v = rng.standard_normal(d)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            continue
        v /= norm
        if have == 0 or (centers[:have] @ v).max() <= _MAX_CENTER_COS:
            centers[have] = v
            have += 1
    return centers


def generate_synthetic(
    class_count: int,
    known_count: int,
    per_class: int,
    d: int,
    separation: float,
    seed: int,
) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    """Generate (labeled, unlabeled, class_embeddings) sets on the unit sphere.

    Class centers are drawn uniformly on the sphere with pairwise angular
    separation enforced by rejection; samples are center + Gaussian noise of
    scale 1/separation, L2-normalized. The labeled set holds per_class
    samples for each known class; the unlabeled set holds per_class fresh
    samples for every class (ground-truth labels kept for scoring);
    class_embeddings is one noisy copy of each known-class center.
    Deterministic given the seed.
    """
    if not 1 <= known_count <= class_count:
        raise InputError(
            f"need 1 <= known_count <= class_count, got {known_count}/{class_count}"
        )
    if per_class < 2:
        raise InputError(f"per_class must be >= 2, got {per_class}")
    if d < 1:
        raise InputError(f"d must be >= 1, got {d}")
    if separation <= 0:
        raise InputError(f"separation must be > 0, got {separation}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    centers = _draw_centers(rng, class_count, d)
    sigma = 1.0 / separation

    def noisy(center: np.ndarray, count: int) -> np.ndarray:
        x = center[None, :] + rng.standard_normal((count, d)) * sigma
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        # zero-norm draws have probability zero; renormalize defensively
        norms[norms < 1e-12] = 1.0
        return (x / norms).astype(np.float32)

    class_emb = np.vstack([noisy(centers[c], 1) for c in range(known_count)])

    labeled_rows = np.vstack([noisy(centers[c], per_class) for c in range(known_count)])
    labeled_labels = np.repeat(np.arange(known_count, dtype=np.int32), per_class)

    unlabeled_rows = np.vstack([noisy(centers[c], per_class) for c in range(class_count)])
    unlabeled_labels = np.repeat(np.arange(class_count, dtype=np.int32), per_class)

    labeled = EmbeddingSet(labeled_rows, labeled_labels, known_class_count=known_count)
    unlabeled = EmbeddingSet(unlabeled_rows, unlabeled_labels, known_class_count=known_count)
    class_embeddings = EmbeddingSet(
        class_emb,
        np.arange(known_count, dtype=np.int32),
        known_class_count=known_count,
    )
    return labeled, unlabeled, class_embeddings
