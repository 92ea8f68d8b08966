"""Parameter containers and stacked systems T x = v for every model form.

Index conventions (k is the time index, lists are 0-based):

========== ================================ ==================================
form       step_gains / transitions         cond_gains
========== ================================ ==================================
markov-fwd M_{k,k-1}, k = 1..N              --
markov-bwd M^B_{k,k+1}, k = 0..N-1          --
cml-fwd    G_{k,k-1}, k = 1..N-1            G_{k,N}, k = 1..N-1
cmf-fwd    G_{k,k-1}, k = 2..N              G_{k,0}, k = 1..N
cml-bwd    G^B_{k,k+1}, k = 1..N-1          G^B_{k,0}, k = 1..N-1
cmf-bwd    G^B_{k,k+1}, k = 0..N-2          G^B_{k,N}, k = 0..N-1
========== ================================ ==================================

For cmf-fwd the k=1 step and conditioning terms both act on x_0 and share the
gain G_{1,0}, which enters T as -2 G_{1,0}; cmf-bwd likewise carries
-2 G^B_{N-1,N}. The boundary gain of a CM_L model (G_{N,0} for BC1, G_{0,N}
for BC2; backward: G^B_{0,N} for BC1, G^B_{N,0} for BC2) is ``boundary_gain``.

Reciprocal models store R^0_k for k = 1..N-1 and R^+_k for k = 0..N-1; the
left couplings follow from R^-_{k+1} = (R^+_k)'. The boundary blocks are
``R0_0``, ``R0_N``, ``Rminus_0`` for the cyclic boundary and ``cov_0``,
``cov_N``, ``gain`` for the two Dirichlet boundaries (``gain`` is R_{N,0}
when x_0 is drawn first, R_{0,N} when x_N is drawn first).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .blockmat import (
    DEFAULT_TOL,
    BlockMatrix,
    EntryView,
    StructureKind,
    block_cholesky,
    solve,
)
from .errors import InvalidParams, NotSPD, SingularT

FAMILIES = ("markov", "reciprocal", "cml", "cmf")
BOUNDARIES = ("none", "cyclic", "dirichlet-x0", "dirichlet-xN", "BC1", "BC2")


@dataclass(frozen=True)
class Form:
    family: str
    direction: str
    boundary: str

    def __post_init__(self):
        if self not in _ALL_FORMS_SET and _ALL_FORMS_SET:
            raise ValueError(f"unsupported form {self.family}/{self.direction}/{self.boundary}")

    @property
    def tag(self) -> str:
        if self.family == "markov":
            return f"markov-{self.direction}"
        if self.family == "reciprocal":
            return f"reciprocal-{self.boundary}"
        return f"{self.family}-{self.direction}-{self.boundary}"

    @property
    def json_form(self) -> str:
        return "reciprocal" if self.family == "reciprocal" else f"{self.family}-{self.direction}"

    @classmethod
    def parse(cls, tag: str) -> Form:
        for f in ALL_FORMS:
            if f.tag.lower() == tag.lower():
                return f
        raise ValueError(f"unknown form tag {tag!r}; choose from {[f.tag for f in ALL_FORMS]}")

    @classmethod
    def from_json_tags(cls, form: str, boundary: str) -> Form:
        for f in ALL_FORMS:
            if f.json_form == form and f.boundary == boundary:
                return f
        raise ValueError(f"unknown form/boundary pair {form!r}/{boundary!r}")

    @property
    def shape(self) -> StructureKind:
        """Sparsity pattern of the precision matrix of this form."""
        if self.family == "markov":
            return StructureKind.TRI_DIAGONAL
        if self.family == "reciprocal":
            return StructureKind.CYCLIC_TRI_DIAGONAL
        cml_like = (self.family == "cml") == (self.direction == "fwd")
        return StructureKind.CML_SHAPE if cml_like else StructureKind.CMF_SHAPE

    @property
    def min_N(self) -> int:
        if self.family == "markov":
            return 1
        if self.boundary == "cyclic":
            return 3
        return 2

    @property
    def conditioning_time(self) -> str:
        """'N' or '0' for CM forms."""
        if self.family not in ("cml", "cmf"):
            raise AttributeError("only CM forms condition on an endpoint")
        return "N" if self.shape is StructureKind.CML_SHAPE else "0"

    def __str__(self) -> str:
        return self.tag


_ALL_FORMS_SET: set = set()
ALL_FORMS = (
    Form("markov", "fwd", "none"),
    Form("markov", "bwd", "none"),
    Form("reciprocal", "fwd", "cyclic"),
    Form("reciprocal", "fwd", "dirichlet-x0"),
    Form("reciprocal", "fwd", "dirichlet-xN"),
    Form("cml", "fwd", "BC1"),
    Form("cml", "fwd", "BC2"),
    Form("cmf", "fwd", "BC1"),
    Form("cml", "bwd", "BC1"),
    Form("cml", "bwd", "BC2"),
    Form("cmf", "bwd", "BC1"),
)
_ALL_FORMS_SET.update(ALL_FORMS)

MARKOV_FWD, MARKOV_BWD, RECIPROCAL_CYCLIC, RECIPROCAL_X0, RECIPROCAL_XN = ALL_FORMS[:5]
CML_FWD_BC1, CML_FWD_BC2, CMF_FWD, CML_BWD_BC1, CML_BWD_BC2, CMF_BWD = ALL_FORMS[5:]


def _as_blocks(seq, d: int | None, what: str) -> tuple:
    out = []
    for b in seq:
        a = np.array(b, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        a = np.atleast_2d(a)
        if d is not None and a.shape != (d, d):
            raise InvalidParams(f"{what}: expected {d}x{d} block, got {a.shape}")
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


def _check_spd_block(a: np.ndarray, what: str) -> None:
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise InvalidParams(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise InvalidParams(f"{what} is not positive definite") from None


def spd_inv(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD block through its Cholesky factor, symmetrized."""
    c = np.linalg.cholesky(a)
    ci = np.linalg.inv(c)
    inv = ci.T @ ci
    return 0.5 * (inv + inv.T)


def _block_dim(first) -> int:
    a = np.atleast_2d(np.asarray(first, dtype=float))
    return a.shape[0]


@dataclass(frozen=True, eq=False)
class MarkovParams:
    direction: str
    transitions: tuple
    noise_covs: tuple

    def __post_init__(self):
        if self.direction not in ("fwd", "bwd"):
            raise InvalidParams(f"direction must be 'fwd' or 'bwd', got {self.direction!r}")
        if not self.noise_covs:
            raise InvalidParams("noise_covs is empty")
        d = _block_dim(self.noise_covs[0])
        object.__setattr__(self, "noise_covs", _as_blocks(self.noise_covs, d, "noise_covs"))
        object.__setattr__(self, "transitions", _as_blocks(self.transitions, d, "transitions"))
        N = len(self.noise_covs) - 1
        if N < 1:
            raise InvalidParams("Markov models need N >= 1")
        if len(self.transitions) != N:
            raise InvalidParams(f"expected {N} transitions, got {len(self.transitions)}")
        for k, m in enumerate(self.noise_covs):
            _check_spd_block(m, f"noise_covs[{k}]")

    @property
    def form(self) -> Form:
        return MARKOV_FWD if self.direction == "fwd" else MARKOV_BWD

    @property
    def N(self) -> int:
        return len(self.noise_covs) - 1

    @property
    def d(self) -> int:
        return self.noise_covs[0].shape[0]

    def transition(self, k: int) -> np.ndarray:
        """M_{k,k-1} (forward, k=1..N) or M^B_{k,k+1} (backward, k=0..N-1)."""
        return self.transitions[k - 1 if self.direction == "fwd" else k]

    def cov(self, k: int) -> np.ndarray:
        return self.noise_covs[k]


_RECIPROCAL_BOUNDARY_KEYS = {
    "cyclic": ("R0_0", "R0_N", "Rminus_0"),
    "dirichlet-x0": ("cov_0", "cov_N", "gain"),
    "dirichlet-xN": ("cov_0", "cov_N", "gain"),
}


@dataclass(frozen=True, eq=False)
class ReciprocalParams:
    boundary: str
    R0: tuple
    Rplus: tuple
    boundary_blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.boundary not in _RECIPROCAL_BOUNDARY_KEYS:
            raise InvalidParams(f"unknown reciprocal boundary {self.boundary!r}")
        if not self.R0:
            raise InvalidParams("R0 is empty")
        d = _block_dim(self.R0[0])
        object.__setattr__(self, "R0", _as_blocks(self.R0, d, "R0"))
        object.__setattr__(self, "Rplus", _as_blocks(self.Rplus, d, "Rplus"))
        keys = _RECIPROCAL_BOUNDARY_KEYS[self.boundary]
        if set(self.boundary_blocks) != set(keys):
            raise InvalidParams(f"boundary_blocks for {self.boundary} must be exactly {keys}")
        bb = {k: _as_blocks([self.boundary_blocks[k]], d, k)[0] for k in keys}
        object.__setattr__(self, "boundary_blocks", bb)
        N = len(self.R0) + 1
        if N < self.form.min_N:
            raise InvalidParams(f"{self.form.tag} needs N >= {self.form.min_N}")
        if len(self.Rplus) != N:
            raise InvalidParams(f"expected {N} Rplus blocks (k=0..N-1), got {len(self.Rplus)}")
        for k, r in enumerate(self.R0, start=1):
            if not np.allclose(r, r.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(r).max())):
                raise InvalidParams(f"R0[{k}] is not symmetric")
        if self.boundary == "cyclic":
            for key in ("R0_0", "R0_N"):
                r = bb[key]
                if not np.allclose(r, r.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(r).max())):
                    raise InvalidParams(f"{key} is not symmetric")
        else:
            _check_spd_block(bb["cov_0"], "cov_0")
            _check_spd_block(bb["cov_N"], "cov_N")

    @property
    def form(self) -> Form:
        return {
            "cyclic": RECIPROCAL_CYCLIC,
            "dirichlet-x0": RECIPROCAL_X0,
            "dirichlet-xN": RECIPROCAL_XN,
        }[self.boundary]

    @property
    def N(self) -> int:
        return len(self.R0) + 1

    @property
    def d(self) -> int:
        return self.R0[0].shape[0]

    def r0(self, k: int) -> np.ndarray:
        """R^0_k; the endpoints only exist for the cyclic boundary."""
        if k == 0:
            return self.boundary_blocks["R0_0"]
        if k == self.N:
            return self.boundary_blocks["R0_N"]
        return self.R0[k - 1]

    def rplus(self, k: int) -> np.ndarray:
        """R^+_k for k=0..N-1, and R^+_N = (R^-_0)' for the cyclic boundary."""
        if k == self.N:
            return self.boundary_blocks["Rminus_0"].T
        return self.Rplus[k]

    def rminus(self, k: int) -> np.ndarray:
        """R^-_k for k=1..N, and R^-_0 for the cyclic boundary."""
        if k == 0:
            return self.boundary_blocks["Rminus_0"]
        return self.Rplus[k - 1].T


@dataclass(frozen=True, eq=False)
class CMParams:
    family: str
    direction: str
    boundary: str
    step_gains: tuple
    cond_gains: tuple
    noise_covs: tuple
    boundary_gain: np.ndarray | None = None

    def __post_init__(self):
        try:
            form = Form(self.family, self.direction, self.boundary)
        except ValueError as exc:
            raise InvalidParams(str(exc)) from None
        if form.family not in ("cml", "cmf"):
            raise InvalidParams(f"{form.tag} is not a CM form")
        if not self.noise_covs:
            raise InvalidParams("noise_covs is empty")
        d = _block_dim(self.noise_covs[0])
        object.__setattr__(self, "noise_covs", _as_blocks(self.noise_covs, d, "noise_covs"))
        object.__setattr__(self, "step_gains", _as_blocks(self.step_gains, d, "step_gains"))
        object.__setattr__(self, "cond_gains", _as_blocks(self.cond_gains, d, "cond_gains"))
        N = len(self.noise_covs) - 1
        if N < form.min_N:
            raise InvalidParams(f"{form.tag} needs N >= {form.min_N}")
        n_step, n_cond = N - 1, (N - 1 if form.family == "cml" else N)
        if len(self.step_gains) != n_step:
            raise InvalidParams(f"expected {n_step} step_gains, got {len(self.step_gains)}")
        if len(self.cond_gains) != n_cond:
            raise InvalidParams(f"expected {n_cond} cond_gains, got {len(self.cond_gains)}")
        if form.family == "cml":
            if self.boundary_gain is None:
                raise InvalidParams("CM_L models need a boundary_gain")
            object.__setattr__(self, "boundary_gain", _as_blocks([self.boundary_gain], d, "boundary_gain")[0])
        elif self.boundary_gain is not None:
            raise InvalidParams("CM_F models take no boundary_gain")
        for k, g in enumerate(self.noise_covs):
            _check_spd_block(g, f"noise_covs[{k}]")

    @property
    def form(self) -> Form:
        return Form(self.family, self.direction, self.boundary)

    @property
    def N(self) -> int:
        return len(self.noise_covs) - 1

    @property
    def d(self) -> int:
        return self.noise_covs[0].shape[0]

    def _offsets(self) -> tuple[int, int]:
        return {
            ("cml", "fwd"): (1, 1),
            ("cmf", "fwd"): (2, 1),
            ("cml", "bwd"): (1, 1),
            ("cmf", "bwd"): (0, 0),
        }[(self.family, self.direction)]

    def step(self, k: int) -> np.ndarray:
        """G_{k,k-1} (forward) or G^B_{k,k+1} (backward)."""
        return self.step_gains[k - self._offsets()[0]]

    def cond(self, k: int) -> np.ndarray:
        """G_{k,c} (forward) or G^B_{k,c} (backward)."""
        return self.cond_gains[k - self._offsets()[1]]

    def cov(self, k: int) -> np.ndarray:
        return self.noise_covs[k]


ModelParams = Union[MarkovParams, ReciprocalParams, CMParams]


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Stacked system T x = v with Cov(v) = P."""

    T: BlockMatrix
    P: BlockMatrix
    form: Form

    @property
    def N(self) -> int:
        return self.T.N

    @property
    def d(self) -> int:
        return self.T.block_dim

    def precision(self) -> BlockMatrix:
        return congruence_precision(self.T, self.P)


def congruence_precision(T: BlockMatrix, P: BlockMatrix) -> BlockMatrix:
    """T' P^{-1} T, symmetrized."""
    c = T.array.T @ solve(P, T.array)
    return BlockMatrix(0.5 * (c + c.T), T.block_dim)


class _Grid:
    def __init__(self, N: int, d: int, fill_identity: bool = False):
        self.d = d
        self.a = np.eye((N + 1) * d) if fill_identity else np.zeros(((N + 1) * d, (N + 1) * d))

    def __setitem__(self, ij, blk):
        i, j = ij
        d = self.d
        self.a[i * d:(i + 1) * d, j * d:(j + 1) * d] = blk

    def matrix(self) -> BlockMatrix:
        return BlockMatrix(self.a, self.d)


def _block_diag(blocks) -> BlockMatrix:
    g = _Grid(len(blocks) - 1, blocks[0].shape[0])
    for k, b in enumerate(blocks):
        g[k, k] = b
    return g.matrix()


def _nfrak(p: ReciprocalParams) -> BlockMatrix:
    """The cyclic tri-diagonal matrix built from the cyclic reciprocal parameters."""
    N, d = p.N, p.d
    g = _Grid(N, d)
    for k in range(N + 1):
        g[k, k] = p.r0(k)
    for k in range(N):
        g[k, k + 1] = -p.rplus(k)
        g[k + 1, k] = -p.rminus(k + 1)
    g[0, N] = -p.rminus(0)
    g[N, 0] = -p.rplus(N)
    return g.matrix()


def _interior_nfrak(p: ReciprocalParams) -> np.ndarray:
    """Rows/columns 1..N-1 of the reciprocal dynamics matrix (covariance of the interior noise)."""
    N, d = p.N, p.d
    g = _Grid(N - 2, d)
    for k in range(1, N):
        g[k - 1, k - 1] = p.R0[k - 1]
    for k in range(1, N - 1):
        g[k - 1, k] = -p.Rplus[k]
        g[k, k - 1] = -p.Rplus[k].T
    return g.a


def assemble(params: ModelParams) -> LinearModel:
    """Build (T, P) for any parameter set."""
    if isinstance(params, MarkovParams):
        return _assemble_markov(params)
    if isinstance(params, ReciprocalParams):
        return _assemble_reciprocal(params)
    if isinstance(params, CMParams):
        return _assemble_cm(params)
    raise InvalidParams(f"not a parameter set: {type(params).__name__}")


def _assemble_markov(p: MarkovParams) -> LinearModel:
    g = _Grid(p.N, p.d, fill_identity=True)
    if p.direction == "fwd":
        for k in range(1, p.N + 1):
            g[k, k - 1] = -p.transition(k)
    else:
        for k in range(p.N):
            g[k, k + 1] = -p.transition(k)
    return LinearModel(g.matrix(), _block_diag(p.noise_covs), p.form)


def _assemble_reciprocal(p: ReciprocalParams) -> LinearModel:
    N, d = p.N, p.d
    if p.boundary == "cyclic":
        nf = _nfrak(p)
        try:
            block_cholesky(nf, tol=1e-13)
        except NotSPD:
            raise SingularT("cyclic reciprocal parameters do not give an SPD dynamics matrix") from None
        return LinearModel(nf, nf, p.form)
    interior = _interior_nfrak(p)
    try:
        np.linalg.cholesky(interior)
    except np.linalg.LinAlgError:
        raise SingularT("interior reciprocal noise covariance is not SPD") from None
    T = _Grid(N, d, fill_identity=True)
    for k in range(1, N):
        T[k, k] = p.R0[k - 1]
        T[k, k - 1] = -p.rminus(k)
        T[k, k + 1] = -p.rplus(k)
    if p.boundary == "dirichlet-x0":
        T[N, 0] = -p.boundary_blocks["gain"]
    else:
        T[0, N] = -p.boundary_blocks["gain"]
    P = _Grid(N, d)
    P[0, 0] = p.boundary_blocks["cov_0"]
    P[N, N] = p.boundary_blocks["cov_N"]
    P.a[d:N * d, d:N * d] = interior
    return LinearModel(T.matrix(), P.matrix(), p.form)


def _assemble_cm(p: CMParams) -> LinearModel:
    N, d = p.N, p.d
    g = _Grid(N, d, fill_identity=True)
    if (p.family, p.direction) == ("cml", "fwd"):
        for k in range(1, N):
            g[k, k - 1] = -p.step(k)
            g[k, N] = -p.cond(k)
        if p.boundary == "BC1":
            g[N, 0] = -p.boundary_gain
        else:
            g[0, N] = -p.boundary_gain
    elif (p.family, p.direction) == ("cmf", "fwd"):
        g[1, 0] = -2.0 * p.cond(1)
        for k in range(2, N + 1):
            g[k, k - 1] = -p.step(k)
            g[k, 0] = -p.cond(k)
    elif (p.family, p.direction) == ("cml", "bwd"):
        for k in range(1, N):
            g[k, k + 1] = -p.step(k)
            g[k, 0] = -p.cond(k)
        if p.boundary == "BC1":
            g[0, N] = -p.boundary_gain
        else:
            g[N, 0] = -p.boundary_gain
    else:
        for k in range(N - 1):
            g[k, k + 1] = -p.step(k)
            g[k, N] = -p.cond(k)
        g[N - 1, N] = -2.0 * p.cond(N - 1)
    return LinearModel(g.matrix(), _block_diag(p.noise_covs), p.form)


def precision(params: ModelParams) -> BlockMatrix:
    """C^{-1} = T' P^{-1} T of the assembled system."""
    return assemble(params).precision()


def precision_entries(params: ModelParams) -> EntryView:
    """Blocks of C^{-1} computed from the parameters directly, without T or P."""
    if isinstance(params, MarkovParams):
        return _entries_markov(params)
    if isinstance(params, ReciprocalParams):
        return _entries_reciprocal(params)
    if isinstance(params, CMParams):
        return {
            ("cml", "fwd"): _entries_cml_fwd,
            ("cmf", "fwd"): _entries_cmf_fwd,
            ("cml", "bwd"): _entries_cml_bwd,
            ("cmf", "bwd"): _entries_cmf_bwd,
        }[(params.family, params.direction)](params)
    raise InvalidParams(f"not a parameter set: {type(params).__name__}")


def _entries_markov(p: MarkovParams) -> EntryView:
    N = p.N
    Mi = [spd_inv(m) for m in p.noise_covs]
    A, B = [None] * (N + 1), [None] * N
    if p.direction == "fwd":
        F = p.transition
        for k in range(N):
            A[k] = Mi[k] + F(k + 1).T @ Mi[k + 1] @ F(k + 1)
            B[k] = -F(k + 1).T @ Mi[k + 1]
        A[N] = Mi[N]
    else:
        F = p.transition
        A[0] = Mi[0]
        for k in range(1, N + 1):
            A[k] = Mi[k] + F(k - 1).T @ Mi[k - 1] @ F(k - 1)
        for k in range(N):
            B[k] = -Mi[k] @ F(k)
    return EntryView(StructureKind.TRI_DIAGONAL, tuple(A), tuple(B))


def _entries_reciprocal(p: ReciprocalParams) -> EntryView:
    N, d = p.N, p.d
    A = [None] * (N + 1)
    for k in range(1, N):
        A[k] = p.R0[k - 1]
    B = [-p.rplus(k) for k in range(N)]
    if p.boundary == "cyclic":
        A[0], A[N] = p.r0(0), p.r0(N)
        return EntryView(StructureKind.CYCLIC_TRI_DIAGONAL, tuple(A), tuple(B), {0: -p.rminus(0)})
    # boundary blocks: inverse joint covariance of (x_0, x_N) plus the interior coupling
    c0, cN, g = (p.boundary_blocks[k] for k in ("cov_0", "cov_N", "gain"))
    if p.boundary == "dirichlet-x0":
        joint = np.block([[c0, c0 @ g.T], [g @ c0, g @ c0 @ g.T + cN]])
    else:
        joint = np.block([[g @ cN @ g.T + c0, g @ cN], [cN @ g.T, cN]])
    L = np.zeros(((N - 1) * d, 2 * d))
    L[:d, :d] = p.rminus(1)
    L[(N - 2) * d:, d:] = p.rplus(N - 1)
    bb = spd_inv(joint) + L.T @ np.linalg.solve(_interior_nfrak(p), L)
    bb = 0.5 * (bb + bb.T)
    A[0], A[N] = bb[:d, :d], bb[d:, d:]
    return EntryView(StructureKind.CYCLIC_TRI_DIAGONAL, tuple(A), tuple(B), {0: bb[:d, d:]})


def _entries_cml_fwd(p: CMParams) -> EntryView:
    N = p.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q, g = p.step, p.cond, p.boundary_gain
    A, B, D = [None] * (N + 1), [None] * N, {}
    for k in range(1, N - 1):
        A[k] = Gi[k] + s(k + 1).T @ Gi[k + 1] @ s(k + 1)
        D[k] = -Gi[k] @ q(k) + s(k + 1).T @ Gi[k + 1] @ q(k + 1)
    A[N - 1] = Gi[N - 1]
    for k in range(N - 1):
        B[k] = -s(k + 1).T @ Gi[k + 1]
    B[N - 1] = -Gi[N - 1] @ q(N - 1)
    tail = sum(q(k).T @ Gi[k] @ q(k) for k in range(1, N))
    if p.boundary == "BC1":
        A[0] = Gi[0] + s(1).T @ Gi[1] @ s(1) + g.T @ Gi[N] @ g
        A[N] = Gi[N] + tail
        D[0] = s(1).T @ Gi[1] @ q(1) - g.T @ Gi[N]
    else:
        A[0] = Gi[0] + s(1).T @ Gi[1] @ s(1)
        A[N] = Gi[N] + tail + g.T @ Gi[0] @ g
        D[0] = -Gi[0] @ g + s(1).T @ Gi[1] @ q(1)
    return EntryView(StructureKind.CML_SHAPE, tuple(A), tuple(B), dict(sorted(D.items())))


def _entries_cmf_fwd(p: CMParams) -> EntryView:
    N = p.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q = p.step, p.cond
    A, B, E = [None] * (N + 1), [None] * N, {}
    A[0] = Gi[0] + sum(q(k).T @ Gi[k] @ q(k) for k in range(2, N + 1)) + 4.0 * q(1).T @ Gi[1] @ q(1)
    for k in range(1, N):
        A[k] = s(k + 1).T @ Gi[k + 1] @ s(k + 1) + Gi[k]
        B[k] = -s(k + 1).T @ Gi[k + 1]
    A[N] = Gi[N]
    B[0] = q(2).T @ Gi[2] @ s(2) - 2.0 * q(1).T @ Gi[1]
    for k in range(2, N):
        E[k] = q(k + 1).T @ Gi[k + 1] @ s(k + 1) - q(k).T @ Gi[k]
    E[N] = -q(N).T @ Gi[N]
    return EntryView(StructureKind.CMF_SHAPE, tuple(A), tuple(B), {}, E)


def _entries_cml_bwd(p: CMParams) -> EntryView:
    N = p.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q, g = p.step, p.cond, p.boundary_gain
    A, B, E = [None] * (N + 1), [None] * N, {}
    A[1] = Gi[1]
    for k in range(2, N):
        A[k] = s(k - 1).T @ Gi[k - 1] @ s(k - 1) + Gi[k]
        E[k] = q(k - 1).T @ Gi[k - 1] @ s(k - 1) - q(k).T @ Gi[k]
    B[0] = -q(1).T @ Gi[1]
    for k in range(1, N):
        B[k] = -Gi[k] @ s(k)
    head = sum(q(k).T @ Gi[k] @ q(k) for k in range(1, N))
    last = s(N - 1).T @ Gi[N - 1] @ s(N - 1) + Gi[N]
    if p.boundary == "BC1":
        A[0] = Gi[0] + head
        A[N] = last + g.T @ Gi[0] @ g
        E[N] = q(N - 1).T @ Gi[N - 1] @ s(N - 1) - Gi[0] @ g
    else:
        A[0] = Gi[0] + head + g.T @ Gi[N] @ g
        A[N] = last
        E[N] = q(N - 1).T @ Gi[N - 1] @ s(N - 1) - g.T @ Gi[N]
    return EntryView(StructureKind.CMF_SHAPE, tuple(A), tuple(B), {}, dict(sorted(E.items())))


def _entries_cmf_bwd(p: CMParams) -> EntryView:
    N = p.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q = p.step, p.cond
    A, B, D = [None] * (N + 1), [None] * N, {}
    A[0] = Gi[0]
    for k in range(N - 1):
        A[k + 1] = s(k).T @ Gi[k] @ s(k) + Gi[k + 1]
        B[k] = -Gi[k] @ s(k)
    A[N] = (
        sum(q(k).T @ Gi[k] @ q(k) for k in range(N - 1))
        + 4.0 * q(N - 1).T @ Gi[N - 1] @ q(N - 1)
        + Gi[N]
    )
    B[N - 1] = s(N - 2).T @ Gi[N - 2] @ q(N - 2) - 2.0 * Gi[N - 1] @ q(N - 1)
    D[0] = -Gi[0] @ q(0)
    for k in range(1, N - 1):
        D[k] = s(k - 1).T @ Gi[k - 1] @ q(k - 1) - Gi[k] @ q(k)
    return EntryView(StructureKind.CML_SHAPE, tuple(A), tuple(B), D)


@dataclass(frozen=True)
class Membership:
    is_reciprocal: bool
    is_markov: bool
    reciprocal_residual: float
    markov_residual: float


def cm_membership(params: CMParams, tol: float = DEFAULT_TOL) -> Membership:
    """Check the reciprocity and Markov conditions on CM_c gains.

    Residuals are block norms of (lhs - rhs) of each condition, relative to
    ||C^{-1}||_F.
    """
    if not isinstance(params, CMParams):
        raise InvalidParams("cm_membership needs CM parameters")
    p, N = params, params.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q, g = p.step, p.cond, p.boundary_gain
    rec, mk = [0.0], 0.0
    key = (p.family, p.direction)
    if key == ("cml", "fwd"):
        for k in range(1, N - 1):
            rec.append(np.linalg.norm(Gi[k] @ q(k) - s(k + 1).T @ Gi[k + 1] @ q(k + 1)))
        if p.boundary == "BC1":
            mk = np.linalg.norm(Gi[N] @ g - q(1).T @ Gi[1] @ s(1))
        else:
            mk = np.linalg.norm(Gi[0] @ g - s(1).T @ Gi[1] @ q(1))
    elif key == ("cmf", "fwd"):
        for k in range(2, N):
            rec.append(np.linalg.norm(Gi[k] @ q(k) - s(k + 1).T @ Gi[k + 1] @ q(k + 1)))
        mk = np.linalg.norm(Gi[N] @ q(N))
    elif key == ("cml", "bwd"):
        for k in range(1, N - 1):
            rec.append(np.linalg.norm(Gi[k + 1] @ q(k + 1) - s(k).T @ Gi[k] @ q(k)))
        if p.boundary == "BC1":
            mk = np.linalg.norm(Gi[0] @ g - q(N - 1).T @ Gi[N - 1] @ s(N - 1))
        else:
            mk = np.linalg.norm(Gi[N] @ g - s(N - 1).T @ Gi[N - 1] @ q(N - 1))
    else:
        for k in range(0, N - 2):
            rec.append(np.linalg.norm(Gi[k + 1] @ q(k + 1) - s(k).T @ Gi[k] @ q(k)))
        mk = np.linalg.norm(Gi[0] @ q(0))
    scale = precision(p).norm()
    rec_res = float(max(rec) / scale)
    mk_res = float(mk / scale)
    is_rec = rec_res <= tol
    return Membership(is_rec, is_rec and mk_res <= tol, rec_res, mk_res)


# ---------------------------------------------------------------- JSON I/O

_LIST_FIELDS = ("transitions", "noise_covs", "step_gains", "cond_gains", "R0", "Rplus")
_ALLOWED = {"form", "boundary", "N", "d", *_LIST_FIELDS, "boundary_blocks"}


def _lst(blocks) -> list:
    return [np.asarray(b).tolist() for b in blocks]


def params_to_dict(params: ModelParams) -> dict:
    form = params.form
    out = {"form": form.json_form, "boundary": form.boundary, "N": params.N, "d": params.d}
    if isinstance(params, MarkovParams):
        out["transitions"] = _lst(params.transitions)
        out["noise_covs"] = _lst(params.noise_covs)
    elif isinstance(params, ReciprocalParams):
        out["R0"] = _lst(params.R0)
        out["Rplus"] = _lst(params.Rplus)
        out["boundary_blocks"] = {k: v.tolist() for k, v in params.boundary_blocks.items()}
    else:
        out["step_gains"] = _lst(params.step_gains)
        out["cond_gains"] = _lst(params.cond_gains)
        out["noise_covs"] = _lst(params.noise_covs)
        if params.boundary_gain is not None:
            out["boundary_blocks"] = {"gain": params.boundary_gain.tolist()}
    return out


def params_from_dict(data: dict) -> ModelParams:
    unknown = set(data) - _ALLOWED
    if unknown:
        raise InvalidParams(f"unknown fields: {sorted(unknown)}")
    try:
        form = Form.from_json_tags(data["form"], data["boundary"])
        N, d = int(data["N"]), int(data["d"])
    except (KeyError, ValueError) as exc:
        raise InvalidParams(f"bad form header: {exc}") from None

    def blocks(name):
        if name not in data:
            raise InvalidParams(f"{form.tag} needs field {name!r}")
        return [np.asarray(b, dtype=float).reshape(d, d) for b in data[name]]

    bb = data.get("boundary_blocks", {})
    if form.family == "markov":
        needed = {"transitions", "noise_covs"}
        extra = set(data) & (set(_LIST_FIELDS) | {"boundary_blocks"}) - needed
        if extra:
            raise InvalidParams(f"fields {sorted(extra)} do not apply to {form.tag}")
        p = MarkovParams(form.direction, blocks("transitions"), blocks("noise_covs"))
    elif form.family == "reciprocal":
        extra = set(data) & set(_LIST_FIELDS) - {"R0", "Rplus"}
        if extra:
            raise InvalidParams(f"fields {sorted(extra)} do not apply to {form.tag}")
        p = ReciprocalParams(
            form.boundary,
            blocks("R0"),
            blocks("Rplus"),
            {k: np.asarray(v, dtype=float).reshape(d, d) for k, v in bb.items()},
        )
    else:
        extra = set(data) & set(_LIST_FIELDS) - {"step_gains", "cond_gains", "noise_covs"}
        if extra:
            raise InvalidParams(f"fields {sorted(extra)} do not apply to {form.tag}")
        if set(bb) - {"gain"}:
            raise InvalidParams(f"unknown boundary_blocks {sorted(set(bb) - {'gain'})}")
        gain = np.asarray(bb["gain"], dtype=float).reshape(d, d) if "gain" in bb else None
        p = CMParams(
            form.family, form.direction, form.boundary,
            blocks("step_gains"), blocks("cond_gains"), blocks("noise_covs"), gain,
        )
    if p.N != N or p.d != d:
        raise InvalidParams(f"header says N={N}, d={d}; blocks give N={p.N}, d={p.d}")
    return p


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1))


def load_params(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
