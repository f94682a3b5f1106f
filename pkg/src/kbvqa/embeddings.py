"""Embedding tables and the linear alignment between entity and wordpiece spaces.

Two vector tables live here: a cased word/entity table (entity keys marked
with an ``ENTITY/`` prefix on disk) and an uncased wordpiece table. Words the
two tables share anchor a least-squares linear map from the entity space into
the wordpiece space; entity vectors pushed through that map can then be fed
to the language encoder as if they were native wordpiece embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORD = "WORD"
ENTITY = "ENTITY"
WORDPIECE = "WORDPIECE"
NAMESPACES = (WORD, ENTITY, WORDPIECE)

ENTITY_PREFIX = "ENTITY/"
CONTINUATION_PREFIX = "##"


class EmbeddingFormatError(ValueError):
    """Raised when an embedding file violates the text format contract."""


class AlignmentError(ValueError):
    """Raised when an alignment cannot be fit or applied."""


@dataclass
class EmbeddingTable:
    """Keyed fixed-dimension vectors, namespaced by WORD / ENTITY / WORDPIECE."""

    dim: int
    cased: bool = True
    entries: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    _fold_index: dict[tuple[str, str], str] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("embedding dim must be positive")

    def add(self, namespace: str, key: str, vector: np.ndarray) -> None:
        if namespace not in NAMESPACES:
            raise ValueError(f"unknown namespace {namespace!r}")
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ValueError(f"vector for {key!r} has length {vector.shape}, expected ({self.dim},)")
        if (namespace, key) in self.entries:
            raise ValueError(f"duplicate key {key!r} in namespace {namespace}")
        self.entries[(namespace, key)] = vector
        self._fold_index = None

    def has(self, namespace: str, key: str) -> bool:
        return (namespace, key) in self.entries

    def get(self, namespace: str, key: str) -> np.ndarray:
        return self.entries[(namespace, key)]

    def keys(self, namespace: str) -> list[str]:
        return [k for (ns, k) in self.entries if ns == namespace]

    def __len__(self) -> int:
        return len(self.entries)

    def resolve_folded(self, namespace: str, folded_key: str) -> np.ndarray | None:
        """Case-insensitive lookup: exact key first, then the lexicographically
        smallest key whose lowercase form matches."""
        if (namespace, folded_key) in self.entries:
            return self.entries[(namespace, folded_key)]
        if self._fold_index is None:
            index: dict[tuple[str, str], str] = {}
            for ns, key in sorted(self.entries):
                index.setdefault((ns, key.lower()), key)
            self._fold_index = index
        actual = self._fold_index.get((namespace, folded_key.lower()))
        if actual is None:
            return None
        return self.entries[(namespace, actual)]


@dataclass
class AlignmentMap:
    """Linear map W (target_dim x source_dim) from entity space into wordpiece space."""

    matrix: np.ndarray
    source_dim: int
    target_dim: int
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (self.target_dim, self.source_dim):
            raise AlignmentError(
                f"matrix shape {self.matrix.shape} != ({self.target_dim}, {self.source_dim})"
            )
        if self.fit_info.get("sum_squared_residual", 0.0) < 0:
            raise AlignmentError("negative residual")


def load_table(path, default_namespace: str = WORD, cased: bool | None = None) -> EmbeddingTable:
    """Load a text-format embedding table.

    First line is ``<count> <dim>``; each following line is a key and ``dim``
    space-separated floats. Keys beginning ``ENTITY/`` land in the ENTITY
    namespace with the prefix stripped, everything else in
    ``default_namespace``. Casedness is inferred from the keys unless given.
    """
    if default_namespace not in (WORD, WORDPIECE):
        raise ValueError("default namespace must be WORD or WORDPIECE")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise EmbeddingFormatError(f"{path}: missing header")
        parts = header.split()
        if len(parts) != 2:
            raise EmbeddingFormatError(f"{path}: malformed header {header.strip()!r}")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise EmbeddingFormatError(f"{path}: malformed header {header.strip()!r}") from None
        if dim <= 0:
            raise EmbeddingFormatError(f"{path}: non-positive dim in header")

        table = EmbeddingTable(dim=dim, cased=True)
        any_upper = False
        n_rows = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split(" ")
            key = fields[0]
            values = fields[1:]
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: {len(values)} values for key {key!r}, expected {dim}"
                )
            try:
                vector = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric value") from None
            if key.startswith(ENTITY_PREFIX):
                # disk keys are space-free; entity titles use underscores
                namespace, key = ENTITY, key[len(ENTITY_PREFIX):].replace("_", " ")
            else:
                namespace = default_namespace
            if table.has(namespace, key):
                raise EmbeddingFormatError(f"{path}:{lineno}: duplicate key {key!r}")
            table.add(namespace, key, vector)
            any_upper = any_upper or key != key.lower()
            n_rows += 1

    if n_rows != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} rows, found {n_rows}")
    table.cased = any_upper if cased is None else cased
    return table


def save_table(table: EmbeddingTable, path) -> None:
    """Write a table back out in the text format. Entity keys are re-prefixed
    with spaces turned into underscores; other keys must be space-free."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for (namespace, key) in sorted(table.entries):
            if namespace == ENTITY:
                disk_key = ENTITY_PREFIX + key.replace(" ", "_")
            elif " " in key:
                raise EmbeddingFormatError(f"key {key!r} contains a space")
            else:
                disk_key = key
            vec = " ".join(repr(float(v)) for v in table.entries[(namespace, key)])
            fh.write(f"{disk_key} {vec}\n")


def shared_vocabulary(src: EmbeddingTable, tgt: EmbeddingTable) -> list[str]:
    """Keys present as WORD in ``src`` and as a full-word WORDPIECE in ``tgt``.

    Both sides are lowercased before intersecting (the entity table is cased,
    the wordpiece model is not); subword continuation pieces never intersect.
    Returns the folded keys, sorted.
    """
    src_words = {k.lower() for k in src.keys(WORD)}
    tgt_pieces = {
        k.lower() for k in tgt.keys(WORDPIECE) if not k.startswith(CONTINUATION_PREFIX)
    }
    shared = sorted(src_words & tgt_pieces)
    if not shared:
        raise AlignmentError("no shared vocabulary between tables")
    return shared


def learn_alignment(src: EmbeddingTable, tgt: EmbeddingTable, keys: list[str]) -> AlignmentMap:
    """Fit W minimizing sum ||W x_src - x_tgt||^2 over the shared keys.

    Solved in closed form by orthogonal-decomposition least squares; for a
    rank-deficient system this is the minimum-norm solution. Each shared key
    contributes one uniformly weighted pair.
    """
    if not keys:
        raise AlignmentError("cannot fit alignment on zero shared keys")
    xs, ys = [], []
    for key in keys:
        x = src.resolve_folded(WORD, key)
        y = tgt.resolve_folded(WORDPIECE, key)
        if x is None or y is None:
            raise AlignmentError(f"shared key {key!r} not resolvable in both tables")
        xs.append(x)
        ys.append(y)
    X = np.stack(xs)  # (n, source_dim)
    Y = np.stack(ys)  # (n, target_dim)
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise AlignmentError("non-finite vector values in alignment inputs")

    # X @ Wt ~= Y, minimum-norm when rank-deficient
    Wt, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    residual = float(np.sum((X @ Wt - Y) ** 2))
    return AlignmentMap(
        matrix=Wt.T,
        source_dim=src.dim,
        target_dim=tgt.dim,
        fit_info={
            "num_shared_keys": len(keys),
            "sum_squared_residual": residual,
            "effective_rank": int(rank),
        },
    )


def map_entity(alignment: AlignmentMap, entity_vector: np.ndarray) -> np.ndarray:
    """Project one entity vector into the wordpiece space: W @ v."""
    v = np.asarray(entity_vector, dtype=np.float64)
    if v.shape != (alignment.source_dim,):
        raise AlignmentError(
            f"entity vector has length {v.shape}, expected ({alignment.source_dim},)"
        )
    return alignment.matrix @ v


def save_alignment(alignment: AlignmentMap, path) -> None:
    """Persist the map: one header line, then target_dim rows of floats."""
    info = alignment.fit_info
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{alignment.target_dim} {alignment.source_dim} "
            f"{info.get('num_shared_keys', 0)} {info.get('sum_squared_residual', 0.0)!r}\n"
        )
        for row in alignment.matrix:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_alignment(path) -> AlignmentMap:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise EmbeddingFormatError(f"{path}: malformed alignment header")
        target_dim, source_dim = int(header[0]), int(header[1])
        num_keys, residual = int(header[2]), float(header[3])
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            values = [float(v) for v in line.split()]
            if len(values) != source_dim:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected {source_dim} floats")
            rows.append(values)
    if len(rows) != target_dim:
        raise EmbeddingFormatError(f"{path}: expected {target_dim} rows, found {len(rows)}")
    return AlignmentMap(
        matrix=np.array(rows, dtype=np.float64),
        source_dim=source_dim,
        target_dim=target_dim,
        fit_info={"num_shared_keys": num_keys, "sum_squared_residual": residual},
    )
