"""Frozen teacher embeddings: DDEF file I/O and a deterministic mock.

DDEF layout (all integers in ASCII decimal)::

    DDEF v1 dim=<D> count=<C> modality=<image|text>\\n
    then C records, each:  <name>\\n  followed by D little-endian float32 values

Names are UTF-8 and may not contain newlines.
"""

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("image", "text")
_HEADER = re.compile(r"^DDEF v1 dim=(\d+) count=(\d+) modality=(image|text)$")


class EmbeddingLoadError(ValueError):
    pass


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(v).all() or n == 0.0:
        return None
    return v / n


@dataclass
class EmbeddingTable:
    dim: int
    modality: str
    names: list = field(default_factory=list)
    vectors: np.ndarray = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise EmbeddingLoadError(f"unknown modality {self.modality!r}")
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim), dtype=np.float32)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if len(set(self.names)) != len(self.names):
            raise EmbeddingLoadError("duplicate entry names")
        self.vectors.setflags(write=False)
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._index

    def get(self, name):
        return self.vectors[self._index[name]]

    def matrix(self, names=None):
        if names is None:
            return self.vectors
        return self.vectors[[self._index[n] for n in names]]

    def save(self, path):
        with open(path, "wb") as f:
            f.write(f"DDEF v1 dim={self.dim} count={len(self)} modality={self.modality}\n".encode())
            for name, vec in zip(self.names, self.vectors):
                f.write(name.encode("utf-8") + b"\n")
                f.write(np.asarray(vec, dtype="<f4").tobytes())


def make_table(names, vectors, modality):
    """Build a table from raw vectors, L2-normalizing any that are not unit-norm."""
    vectors = np.asarray(vectors, dtype=np.float64)
    out = np.empty(vectors.shape, dtype=np.float32)
    for i, (name, v) in enumerate(zip(names, vectors)):
        u = _unit(v)
        if u is None:
            raise EmbeddingLoadError(f"record {name!r}: vector is zero or non-finite")
        v32 = np.asarray(v, dtype=np.float32)
        # keep already-normalized payloads bit-exact
        out[i] = v32 if abs(np.linalg.norm(v32.astype(np.float64)) - 1.0) <= 1e-6 else u
    return EmbeddingTable(dim=vectors.shape[1], modality=modality, names=list(names), vectors=out)


def load_embeddings(path):
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    m = _HEADER.match(data[:nl].decode("utf-8", errors="replace")) if nl >= 0 else None
    if m is None:
        raise EmbeddingLoadError(f"{path}: malformed DDEF header")
    dim, count, modality = int(m.group(1)), int(m.group(2)), m.group(3)
    if dim < 1:
        raise EmbeddingLoadError(f"{path}: dim must be positive")
    pos = nl + 1
    names, vecs = [], []
    nbytes = 4 * dim
    for rec in range(count):
        end = data.find(b"\n", pos)
        if end < 0:
            raise EmbeddingLoadError(f"{path}: record {rec} is missing its name line")
        name = data[pos:end].decode("utf-8")
        payload = data[end + 1 : end + 1 + nbytes]
        if len(payload) != nbytes:
            raise EmbeddingLoadError(f"{path}: record {name!r} has {len(payload)} payload bytes, expected {nbytes}")
        if name in names:
            raise EmbeddingLoadError(f"{path}: duplicate record name {name!r}")
        names.append(name)
        vecs.append(np.frombuffer(payload, dtype="<f4"))
        pos = end + 1 + nbytes
    if pos != len(data):
        raise EmbeddingLoadError(f"{path}: {len(data) - pos} trailing bytes after {count} records (width mismatch?)")
    vectors = np.stack(vecs) if vecs else np.zeros((0, dim), dtype=np.float32)
    try:
        return make_table(names, vectors, modality)
    except EmbeddingLoadError as e:
        raise EmbeddingLoadError(f"{path}: {e}") from None


def keyed_rng(seed, *key):
    """Generator seeded from SHA-256 of ``seed`` and ``key`` joined by NUL bytes.

    Stable across processes and platforms (no use of Python's salted ``hash``).
    """
    msg = "\x00".join([str(seed), *map(str, key)]).encode("utf-8")
    return np.random.Generator(np.random.PCG64(int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")))


def mock_text_vector(name, dim, seed):
    return _unit(keyed_rng(seed, "text", name).standard_normal(dim))


def mock_image_vector(text_vec, key, dim, seed, eta=0.2):
    """Class text vector plus ``eta``-scaled noise of expected unit norm, renormalized."""
    if eta == 0:
        return np.asarray(text_vec, dtype=np.float64)
    noise = keyed_rng(seed, "image", key).standard_normal(dim) / np.sqrt(dim)
    return _unit(np.asarray(text_vec, dtype=np.float64) + eta * noise)


def mock_teacher(class_names, dim=512, seed=0, eta=0.2, samples=None):
    """Deterministic stand-in teachers.

    Returns ``(image_table, text_table)``. The text table has one vector per
    class. The image table is keyed by class name, or by sample id when
    ``samples`` (an iterable of ``(sample_id, label)``) is given.
    """
    class_names = list(class_names)
    if not class_names:
        raise EmbeddingLoadError("mock teacher needs at least one class name")
    text = np.stack([mock_text_vector(n, dim, seed) for n in class_names])
    text_table = make_table(class_names, text, "text")
    keys = [(n, n) for n in class_names] if samples is None else list(samples)
    img = np.stack([mock_image_vector(text_table.get(lbl), key, dim, seed, eta) for key, lbl in keys])
    image_table = make_table([k for k, _ in keys], img, "image")
    return image_table, text_table
