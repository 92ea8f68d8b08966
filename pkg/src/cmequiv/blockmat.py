"""Dense block matrices over the time grid k = 0..N.

Every matrix in the package (T, P, C^-1, C) is an (N+1) x (N+1) grid of
d x d blocks. Storage is a single dense array; structural zeros are explicit.
Block indices are 0-based and coincide with the time index.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NonSymmetric, NotSPD, Singular

DEFAULT_TOL = 1e-8


class StructureKind(str, enum.Enum):
    BLOCK_DIAGONAL = "BlockDiagonal"
    TRI_DIAGONAL = "TriDiagonal"
    CYCLIC_TRI_DIAGONAL = "CyclicTriDiagonal"
    CML_SHAPE = "CMLShape"
    CMF_SHAPE = "CMFShape"
    DENSE = "Dense"


# most specific first; classify_structure returns the first match
_SPECIFICITY = (
    StructureKind.BLOCK_DIAGONAL,
    StructureKind.TRI_DIAGONAL,
    StructureKind.CYCLIC_TRI_DIAGONAL,
    StructureKind.CML_SHAPE,
    StructureKind.CMF_SHAPE,
    StructureKind.DENSE,
)

# kinds whose pattern contains the pattern of the key
_GENERALIZES = {
    StructureKind.BLOCK_DIAGONAL: set(_SPECIFICITY),
    StructureKind.TRI_DIAGONAL: set(_SPECIFICITY) - {StructureKind.BLOCK_DIAGONAL},
    StructureKind.CYCLIC_TRI_DIAGONAL: {
        StructureKind.CYCLIC_TRI_DIAGONAL,
        StructureKind.CML_SHAPE,
        StructureKind.CMF_SHAPE,
        StructureKind.DENSE,
    },
    StructureKind.CML_SHAPE: {StructureKind.CML_SHAPE, StructureKind.DENSE},
    StructureKind.CMF_SHAPE: {StructureKind.CMF_SHAPE, StructureKind.DENSE},
    StructureKind.DENSE: {StructureKind.DENSE},
}


def is_compatible(actual: StructureKind, required: StructureKind) -> bool:
    """True if a matrix of shape ``actual`` also has the pattern ``required``."""
    return required in _GENERALIZES[actual]


def pattern_mask(kind: StructureKind, n_blocks: int) -> np.ndarray:
    """Boolean (n_blocks, n_blocks) mask of the blocks allowed to be nonzero."""
    i, j = np.indices((n_blocks, n_blocks))
    last = n_blocks - 1
    band = np.abs(i - j) <= 1
    if kind is StructureKind.BLOCK_DIAGONAL:
        return i == j
    if kind is StructureKind.TRI_DIAGONAL:
        return band
    if kind is StructureKind.CYCLIC_TRI_DIAGONAL:
        return band | ((i == 0) & (j == last)) | ((i == last) & (j == 0))
    if kind is StructureKind.CML_SHAPE:
        return band | (i == last) | (j == last)
    if kind is StructureKind.CMF_SHAPE:
        return band | (i == 0) | (j == 0)
    return np.ones((n_blocks, n_blocks), dtype=bool)


@dataclass(frozen=True, eq=False)
class BlockMatrix:
    """An (N+1) x (N+1) grid of d x d real blocks backed by one dense array."""

    array: np.ndarray
    block_dim: int
    structure_hint: StructureKind | None = field(default=None)

    def __post_init__(self):
        a = np.array(self.array, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"block matrix must be square, got shape {a.shape}")
        d = int(self.block_dim)
        if d < 1 or a.shape[0] % d:
            raise ValueError(f"size {a.shape[0]} is not a multiple of block_dim {d}")
        if a.shape[0] // d < 2:
            raise ValueError("need at least two block rows (N >= 1)")
        a.setflags(write=False)
        object.__setattr__(self, "array", a)
        object.__setattr__(self, "block_dim", d)
        if self.structure_hint is not None:
            hint = StructureKind(self.structure_hint)
            object.__setattr__(self, "structure_hint", hint)
            if not is_compatible(classify_structure(self), hint):
                raise ValueError(f"matrix does not have the hinted structure {hint.value}")

    @property
    def n_blocks(self) -> int:
        return self.array.shape[0] // self.block_dim

    @property
    def N(self) -> int:
        return self.n_blocks - 1

    def block(self, i: int, j: int) -> np.ndarray:
        d = self.block_dim
        return self.array[i * d:(i + 1) * d, j * d:(j + 1) * d]

    @property
    def T(self) -> BlockMatrix:
        return BlockMatrix(self.array.T, self.block_dim)

    def __matmul__(self, other):
        if isinstance(other, BlockMatrix):
            return BlockMatrix(self.array @ other.array, self.block_dim)
        return self.array @ np.asarray(other)

    def norm(self) -> float:
        return float(np.linalg.norm(self.array))

    def allclose(self, other: BlockMatrix, rtol: float = DEFAULT_TOL) -> bool:
        return relative_error(self, other) <= rtol

    @classmethod
    def from_blocks(cls, grid) -> BlockMatrix:
        grid = [[np.atleast_2d(np.asarray(b, dtype=float)) for b in row] for row in grid]
        d = grid[0][0].shape[0]
        return cls(np.block(grid), d)

    @classmethod
    def zeros(cls, n_blocks: int, d: int) -> BlockMatrix:
        return cls(np.zeros((n_blocks * d, n_blocks * d)), d)

    @classmethod
    def identity(cls, n_blocks: int, d: int) -> BlockMatrix:
        return cls(np.eye(n_blocks * d), d)

    def to_json_dict(self) -> dict:
        n, d = self.n_blocks, self.block_dim
        out = {
            "N": n - 1,
            "d": d,
            "blocks": [[self.block(i, j).tolist() for j in range(n)] for i in range(n)],
        }
        if self.structure_hint is not None:
            out["structure"] = self.structure_hint.value
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> BlockMatrix:
        unknown = set(data) - {"N", "d", "blocks", "structure"}
        if unknown:
            raise ValueError(f"unknown BlockMatrix fields: {sorted(unknown)}")
        n, d = int(data["N"]) + 1, int(data["d"])
        blocks = data["blocks"]
        if len(blocks) != n or any(len(row) != n for row in blocks):
            raise ValueError("block grid does not match N")
        grid = [[np.asarray(b, dtype=float).reshape(d, d) for b in row] for row in blocks]
        return cls(np.block(grid), d, data.get("structure"))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text: str) -> BlockMatrix:
        return cls.from_json_dict(json.loads(text))


def relative_error(a, b) -> float:
    """Frobenius ||a - b|| / ||b|| (absolute when b is zero)."""
    a = a.array if isinstance(a, BlockMatrix) else np.asarray(a)
    b = b.array if isinstance(b, BlockMatrix) else np.asarray(b)
    scale = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    return float(diff / scale) if scale > 0 else float(diff)


def off_pattern_norm(m: BlockMatrix, kind: StructureKind) -> float:
    """Largest Frobenius norm of a block outside the pattern of ``kind``, relative to ||m||."""
    n, d = m.n_blocks, m.block_dim
    blocks = m.array.reshape(n, d, n, d).transpose(0, 2, 1, 3)
    norms = np.linalg.norm(blocks, axis=(2, 3))
    outside = norms[~pattern_mask(kind, n)]
    if outside.size == 0:
        return 0.0
    scale = m.norm()
    return float(outside.max() / scale) if scale > 0 else float(outside.max())


def classify_structure(m: BlockMatrix, tol: float = DEFAULT_TOL) -> StructureKind:
    for kind in _SPECIFICITY:
        if off_pattern_norm(m, kind) <= tol:
            return kind
    return StructureKind.DENSE


def check_symmetric(m: BlockMatrix, tol: float = DEFAULT_TOL) -> None:
    if relative_error(m.array, m.array.T) > tol:
        raise NonSymmetric(f"asymmetry {relative_error(m.array, m.array.T):.3e} exceeds {tol:g}")


def block_cholesky(m: BlockMatrix, tol: float = DEFAULT_TOL) -> BlockMatrix:
    """Lower block-Cholesky factor L with m = L L'. No pivoting.

    Raises NotSPD if a pivot (squared diagonal of a diagonal factor) falls to
    ``tol * ||m||`` or below.
    """
    check_symmetric(m, tol)
    n, d = m.n_blocks, m.block_dim
    a = 0.5 * (m.array + m.array.T)
    L = np.zeros_like(a)
    floor = tol * np.linalg.norm(a)
    for k in range(n):
        rk = slice(k * d, (k + 1) * d)
        head = slice(0, k * d)
        schur = a[rk, rk] - L[rk, head] @ L[rk, head].T
        try:
            lkk = np.linalg.cholesky(schur)
        except np.linalg.LinAlgError:
            raise NotSPD(f"pivot block {k} is not positive definite") from None
        if np.min(np.diag(lkk)) ** 2 <= floor:
            raise NotSPD(f"pivot block {k} is below the tolerance floor")
        L[rk, rk] = lkk
        below = slice((k + 1) * d, n * d)
        rhs = a[below, rk] - L[below, head] @ L[rk, head].T
        L[below, rk] = scipy.linalg.solve_triangular(lkk, rhs.T, lower=True).T
    return BlockMatrix(L, d)


def spd_check(m: BlockMatrix, tol: float = DEFAULT_TOL) -> bool:
    try:
        block_cholesky(m, tol)
    except NotSPD:
        return False
    return True


def _lu(m: BlockMatrix):
    a = m.array
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    u = np.abs(np.diag(lu))
    if u.min() <= a.shape[0] * np.finfo(float).eps * max(u.max(), 1e-300):
        raise Singular("matrix is numerically singular")
    return lu, piv


def solve(m: BlockMatrix, rhs: np.ndarray) -> np.ndarray:
    """Solve m x = rhs with partially pivoted LU. ``rhs`` may be a vector or have columns."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != m.array.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, matrix has {m.array.shape[0]}")
    return scipy.linalg.lu_solve(_lu(m), rhs)


def invert(m: BlockMatrix) -> BlockMatrix:
    inv = solve(m, np.eye(m.array.shape[0]))
    if relative_error(m.array, m.array.T) <= DEFAULT_TOL:
        inv = 0.5 * (inv + inv.T)
    return BlockMatrix(inv, m.block_dim)


@dataclass(frozen=True, eq=False)
class EntryView:
    """Named blocks of a structured symmetric matrix.

    ``A[k]`` is the diagonal block (k, k), ``B[k]`` the super-diagonal block
    (k, k+1). ``D`` maps k to the last-column block (k, N): only k=0 for a
    cyclic matrix, k=0..N-2 for a CM_L matrix. ``E`` maps k=2..N to the
    first-row block (0, k) of a CM_F matrix.
    """

    kind: StructureKind
    A: tuple
    B: tuple
    D: dict = field(default_factory=dict)
    E: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.A) - 1

    @classmethod
    def from_matrix(cls, m: BlockMatrix, kind: StructureKind) -> EntryView:
        N = m.N
        A = tuple(m.block(k, k).copy() for k in range(N + 1))
        if kind is StructureKind.BLOCK_DIAGONAL:
            return cls(kind, A, ())
        B = tuple(m.block(k, k + 1).copy() for k in range(N))
        D, E = {}, {}
        if kind is StructureKind.CYCLIC_TRI_DIAGONAL and N >= 2:
            D = {0: m.block(0, N).copy()}
        elif kind is StructureKind.CML_SHAPE:
            D = {k: m.block(k, N).copy() for k in range(N - 1)}
        elif kind is StructureKind.CMF_SHAPE:
            E = {k: m.block(0, k).copy() for k in range(2, N + 1)}
        elif kind is StructureKind.DENSE:
            raise ValueError("a dense matrix has no entry view")
        return cls(kind, A, B, D, E)

    def to_matrix(self) -> BlockMatrix:
        N = self.N
        d = self.A[0].shape[0]
        out = np.zeros(((N + 1) * d, (N + 1) * d))

        def put(i, j, blk):
            out[i * d:(i + 1) * d, j * d:(j + 1) * d] = blk
            if i != j:
                out[j * d:(j + 1) * d, i * d:(i + 1) * d] = np.asarray(blk).T

        for k, a in enumerate(self.A):
            put(k, k, a)
        for k, b in enumerate(self.B):
            put(k, k + 1, b)
        for k, blk in self.D.items():
            put(k, N, blk)
        for k, blk in self.E.items():
            put(0, k, blk)
        return BlockMatrix(out, d)

    def max_relative_error(self, other: EntryView) -> float:
        """Largest block discrepancy relative to the Frobenius norm of the assembled ``other``."""
        scale = other.to_matrix().norm() or 1.0
        worst = 0.0
        for mine, theirs in ((self.A, other.A), (self.B, other.B)):
            if len(mine) != len(theirs):
                return float("inf")
            for x, y in zip(mine, theirs):
                worst = max(worst, np.linalg.norm(x - y))
        for mine, theirs in ((self.D, other.D), (self.E, other.E)):
            if set(mine) != set(theirs):
                return float("inf")
            for k in mine:
                worst = max(worst, np.linalg.norm(mine[k] - theirs[k]))
        return float(worst / scale)
