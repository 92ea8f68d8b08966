"""Probabilistic and algebraic equivalence between model forms.

PE conversion reads the target parameters off C^{-1} with the extraction
recursions for each form. AE mapping sends the noise/boundary vector v of one
model to the w of another so that both stacked systems produce the same path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockmat import (
    DEFAULT_TOL,
    BlockMatrix,
    EntryView,
    StructureKind,
    check_symmetric,
    invert,
    off_pattern_norm,
    relative_error,
    solve,
    spd_check,
)
from .errors import (
    FactorizationFailure,
    IncompatibleShape,
    InvalidParams,
    NotEquivalent,
    NotReciprocal,
    NotSPD,
    UnsupportedPair,
)
from .models import (
    CMF_BWD,
    CMF_FWD,
    MARKOV_BWD,
    MARKOV_FWD,
    RECIPROCAL_CYCLIC,
    CMParams,
    Form,
    LinearModel,
    MarkovParams,
    ModelParams,
    ReciprocalParams,
    assemble,
    cm_membership,
    congruence_precision,
    precision,
    spd_inv,
)

PE_TOL = 1e-8
AE_TOL = 1e-9


def _inv_block(ainv: np.ndarray, what: str, k: int) -> np.ndarray:
    """Covariance block from its recursively computed inverse; the inverse must be SPD."""
    ainv = 0.5 * (ainv + ainv.T)
    try:
        return spd_inv(ainv)
    except np.linalg.LinAlgError:
        raise FactorizationFailure(f"{what} at k={k} is not positive definite", k) from None


# ------------------------------------------------------------ extraction


def extract_model(cinv: BlockMatrix, target: Form | str, tol: float = PE_TOL) -> ModelParams:
    """Unique parameters of ``target`` whose precision equals ``cinv``."""
    target = Form.parse(target) if isinstance(target, str) else target
    check_symmetric(cinv, tol)
    if not spd_check(cinv, tol=1e-14):
        raise NotSPD("precision matrix is not positive definite")
    if cinv.N < target.min_N:
        raise IncompatibleShape(f"{target.tag} needs N >= {target.min_N}, matrix has N={cinv.N}")
    if off_pattern_norm(cinv, target.shape) > tol:
        raise IncompatibleShape(
            f"precision is not {target.shape.value}-compatible "
            f"(off-pattern norm {off_pattern_norm(cinv, target.shape):.3e})"
        )
    ev = EntryView.from_matrix(cinv, target.shape)
    if target.family == "markov":
        return _extract_markov(ev, target.direction)
    if target.family == "reciprocal":
        return _extract_reciprocal(ev, cinv, target.boundary)
    return {
        ("cml", "fwd"): _extract_cml_fwd,
        ("cmf", "fwd"): _extract_cmf_fwd,
        ("cml", "bwd"): _extract_cml_bwd,
        ("cmf", "bwd"): _extract_cmf_bwd,
    }[(target.family, target.direction)](ev, target.boundary)


def _extract_markov(ev: EntryView, direction: str) -> MarkovParams:
    A, B, N = ev.A, ev.B, ev.N
    M = [None] * (N + 1)
    F = [None] * N
    if direction == "fwd":
        # F[k-1] = M_{k,k-1}; sweep k = N down to 0
        M[N] = _inv_block(A[N], "M_N^{-1}", N)
        F[N - 1] = -M[N] @ B[N - 1].T
        for k in range(N - 2, -1, -1):
            Mi_next = spd_inv(M[k + 2])
            M[k + 1] = _inv_block(A[k + 1] - F[k + 1].T @ Mi_next @ F[k + 1], "M^{-1}", k + 1)
            F[k] = -M[k + 1] @ B[k].T
        M[0] = _inv_block(A[0] - F[0].T @ spd_inv(M[1]) @ F[0], "M_0^{-1}", 0)
    else:
        # F[k] = M^B_{k,k+1}; sweep k = 0 up to N
        M[0] = _inv_block(A[0], "(M^B_0)^{-1}", 0)
        F[0] = -M[0] @ B[0]
        for k in range(2, N + 1):
            M[k - 1] = _inv_block(A[k - 1] - F[k - 2].T @ spd_inv(M[k - 2]) @ F[k - 2], "(M^B)^{-1}", k - 1)
            F[k - 1] = -M[k - 1] @ B[k - 1]
        M[N] = _inv_block(A[N] - F[N - 1].T @ spd_inv(M[N - 1]) @ F[N - 1], "(M^B_N)^{-1}", N)
    return MarkovParams(direction, F, M)


def _extract_reciprocal(ev: EntryView, cinv: BlockMatrix, boundary: str) -> ReciprocalParams:
    A, B, N = ev.A, ev.B, ev.N
    R0 = [A[k] for k in range(1, N)]
    Rplus = [-B[k] for k in range(N)]
    if boundary == "cyclic":
        return ReciprocalParams("cyclic", R0, Rplus, {"R0_0": A[0], "R0_N": A[N], "Rminus_0": -ev.D[0]})
    # endpoint law of (x_0, x_N) from the joint covariance
    C = invert(cinv)
    c00, c0N, cNN = C.block(0, 0), C.block(0, N), C.block(N, N)
    if boundary == "dirichlet-x0":
        gain = c0N.T @ spd_inv(c00)
        bb = {"cov_0": c00, "cov_N": cNN - gain @ c0N, "gain": gain}
    else:
        gain = c0N @ spd_inv(cNN)
        bb = {"cov_0": c00 - gain @ c0N.T, "cov_N": cNN, "gain": gain}
    bb["cov_0"] = 0.5 * (bb["cov_0"] + bb["cov_0"].T)
    bb["cov_N"] = 0.5 * (bb["cov_N"] + bb["cov_N"].T)
    return ReciprocalParams(boundary, R0, Rplus, bb)


def _extract_cml_fwd(ev: EntryView, boundary: str) -> CMParams:
    A, B, D, N = ev.A, ev.B, ev.D, ev.N
    G = [None] * (N + 1)
    s = {}  # G_{k,k-1}
    q = {}  # G_{k,N}
    G[N - 1] = _inv_block(A[N - 1], "G_{N-1}^{-1}", N - 1)
    q[N - 1] = -G[N - 1] @ B[N - 1]
    for k in range(N - 1, 1, -1):
        Gi_k = spd_inv(G[k])
        s[k] = -G[k] @ B[k - 1].T
        G[k - 1] = _inv_block(A[k - 1] - s[k].T @ Gi_k @ s[k], "G^{-1}", k - 1)
        q[k - 1] = G[k - 1] @ (s[k].T @ Gi_k @ q[k] - D[k - 1])
    s[1] = -G[1] @ B[0].T
    Gi1 = spd_inv(G[1])
    tail = sum(q[k].T @ spd_inv(G[k]) @ q[k] for k in range(1, N))
    if boundary == "BC1":
        G[N] = _inv_block(A[N] - tail, "G_N^{-1}", N)
        gain = G[N] @ (q[1].T @ Gi1 @ s[1] - D[0].T)
        G[0] = _inv_block(A[0] - s[1].T @ Gi1 @ s[1] - gain.T @ spd_inv(G[N]) @ gain, "G_0^{-1}", 0)
    else:
        G[0] = _inv_block(A[0] - s[1].T @ Gi1 @ s[1], "G_0^{-1}", 0)
        gain = G[0] @ (s[1].T @ Gi1 @ q[1] - D[0])
        G[N] = _inv_block(A[N] - tail - gain.T @ spd_inv(G[0]) @ gain, "G_N^{-1}", N)
    return CMParams(
        "cml", "fwd", boundary,
        [s[k] for k in range(1, N)], [q[k] for k in range(1, N)], G, gain,
    )


def _extract_cmf_bwd(ev: EntryView, boundary: str) -> CMParams:
    A, B, D, N = ev.A, ev.B, ev.D, ev.N
    G = [None] * (N + 1)
    s = {}  # G^B_{k,k+1}
    q = {}  # G^B_{k,N}
    G[0] = _inv_block(A[0], "(G^B_0)^{-1}", 0)
    for k in range(N - 1):
        s[k] = -G[k] @ B[k]
        G[k + 1] = _inv_block(A[k + 1] - s[k].T @ spd_inv(G[k]) @ s[k], "(G^B)^{-1}", k + 1)
    q[0] = -G[0] @ D[0]
    for k in range(1, N - 1):
        q[k] = G[k] @ (s[k - 1].T @ spd_inv(G[k - 1]) @ q[k - 1] - D[k])
    q[N - 1] = 0.5 * G[N - 1] @ (s[N - 2].T @ spd_inv(G[N - 2]) @ q[N - 2] - B[N - 1])
    rest = sum(q[i].T @ spd_inv(G[i]) @ q[i] for i in range(N - 1))
    rest = rest + 4.0 * q[N - 1].T @ spd_inv(G[N - 1]) @ q[N - 1]
    G[N] = _inv_block(A[N] - rest, "(G^B_N)^{-1}", N)
    return CMParams(
        "cmf", "bwd", boundary,
        [s[k] for k in range(N - 1)], [q[k] for k in range(N)], G,
    )


def _extract_cmf_fwd(ev: EntryView, boundary: str) -> CMParams:
    A, B, E, N = ev.A, ev.B, ev.E, ev.N
    G = [None] * (N + 1)
    s = {}  # G_{k,k-1}
    q = {}  # G_{k,0}
    G[N] = _inv_block(A[N], "G_N^{-1}", N)
    for k in range(N, 1, -1):
        s[k] = -G[k] @ B[k - 1].T
        G[k - 1] = _inv_block(A[k - 1] - s[k].T @ spd_inv(G[k]) @ s[k], "G^{-1}", k - 1)
    q[N] = -G[N] @ E[N].T
    for k in range(N - 1, 1, -1):
        q[k] = G[k] @ (s[k + 1].T @ spd_inv(G[k + 1]) @ q[k + 1] - E[k].T)
    q[1] = 0.5 * G[1] @ (s[2].T @ spd_inv(G[2]) @ q[2] - B[0].T)
    rest = sum(q[k].T @ spd_inv(G[k]) @ q[k] for k in range(2, N + 1))
    rest = rest + 4.0 * q[1].T @ spd_inv(G[1]) @ q[1]
    G[0] = _inv_block(A[0] - rest, "G_0^{-1}", 0)
    return CMParams(
        "cmf", "fwd", boundary,
        [s[k] for k in range(2, N + 1)], [q[k] for k in range(1, N + 1)], G,
    )


def _extract_cml_bwd(ev: EntryView, boundary: str) -> CMParams:
    A, B, E, N = ev.A, ev.B, ev.E, ev.N
    G = [None] * (N + 1)
    s = {}  # G^B_{k,k+1}
    q = {}  # G^B_{k,0}
    G[1] = _inv_block(A[1], "(G^B_1)^{-1}", 1)
    for k in range(1, N - 1):
        s[k] = -G[k] @ B[k]
        G[k + 1] = _inv_block(A[k + 1] - s[k].T @ spd_inv(G[k]) @ s[k], "(G^B)^{-1}", k + 1)
    s[N - 1] = -G[N - 1] @ B[N - 1]
    q[1] = -G[1] @ B[0].T
    for k in range(2, N):
        q[k] = G[k] @ (s[k - 1].T @ spd_inv(G[k - 1]) @ q[k - 1] - E[k].T)
    head = sum(q[k].T @ spd_inv(G[k]) @ q[k] for k in range(1, N))
    GiNm1 = spd_inv(G[N - 1])
    last = s[N - 1].T @ GiNm1 @ s[N - 1]
    if boundary == "BC1":
        G[0] = _inv_block(A[0] - head, "(G^B_0)^{-1}", 0)
        gain = G[0] @ (q[N - 1].T @ GiNm1 @ s[N - 1] - E[N])
        G[N] = _inv_block(A[N] - last - gain.T @ spd_inv(G[0]) @ gain, "(G^B_N)^{-1}", N)
    else:
        G[N] = _inv_block(A[N] - last, "(G^B_N)^{-1}", N)
        gain = G[N] @ (s[N - 1].T @ GiNm1 @ q[N - 1] - E[N].T)
        G[0] = _inv_block(A[0] - head - gain.T @ spd_inv(G[N]) @ gain, "(G^B_0)^{-1}", 0)
    return CMParams(
        "cml", "bwd", boundary,
        [s[k] for k in range(1, N)], [q[k] for k in range(1, N)], G, gain,
    )


def pe_convert(src: ModelParams, target: Form | str, tol: float = PE_TOL) -> ModelParams:
    """Parameters of ``target`` describing the same sequence law as ``src``."""
    return extract_model(precision(src), target, tol)


def compatible_targets(form_or_shape) -> list[Form]:
    from .blockmat import is_compatible
    from .models import ALL_FORMS

    shape = form_or_shape.shape if isinstance(form_or_shape, Form) else form_or_shape
    return [f for f in ALL_FORMS if is_compatible(shape, f.shape)]


# ------------------------------------------------------------ noise maps


@dataclass(frozen=True, eq=False)
class NoiseMap:
    source_form: Form
    target_form: Form
    T1: BlockMatrix
    P1: BlockMatrix
    T2: BlockMatrix
    P2: BlockMatrix

    def pe_residual(self) -> float:
        c1 = congruence_precision(self.T1, self.P1)
        c2 = congruence_precision(self.T2, self.P2)
        return relative_error(c2, c1)

    def to_json_dict(self) -> dict:
        return {
            "source_form": self.source_form.tag,
            "target_form": self.target_form.tag,
            **{k: getattr(self, k).to_json_dict() for k in ("T1", "P1", "T2", "P2")},
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> NoiseMap:
        return cls(
            Form.parse(data["source_form"]),
            Form.parse(data["target_form"]),
            *(BlockMatrix.from_json_dict(data[k]) for k in ("T1", "P1", "T2", "P2")),
        )


def noise_map(src, tgt, tol: float = PE_TOL) -> NoiseMap:
    """NoiseMap between two PE models given as parameters or assembled LinearModels."""
    m1 = src if isinstance(src, LinearModel) else assemble(src)
    m2 = tgt if isinstance(tgt, LinearModel) else assemble(tgt)
    nm = NoiseMap(m1.form, m2.form, m1.T, m1.P, m2.T, m2.P)
    res = nm.pe_residual()
    if res > tol:
        raise NotEquivalent(f"models are not PE: precision mismatch {res:.3e} > {tol:g}")
    return nm


def ae_map(nm: NoiseMap, v: np.ndarray, check: bool = True, tol: float = AE_TOL) -> np.ndarray:
    """w = T2 T1^{-1} v. ``v`` is one stacked vector or a (trials, n) batch."""
    v = np.asarray(v, dtype=float)
    batch = v.ndim == 2
    cols = v.T if batch else v
    x = solve(nm.T1, cols)
    w = nm.T2.array @ x
    if check:
        eq34, path = ae_residuals(nm, cols, w)
        if max(eq34, path) > tol:
            raise NotEquivalent(f"AE postcondition failed: eq34 {eq34:.3e}, path {path:.3e}")
    return w.T if batch else w


def ae_residuals(nm: NoiseMap, v: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """(information-form residual, path deviation), both relative."""
    lhs = nm.T2.array.T @ solve(nm.P2, w)
    rhs = nm.T1.array.T @ solve(nm.P1, v)
    x1 = solve(nm.T1, v)
    x2 = solve(nm.T2, w)
    return relative_error(lhs, rhs), relative_error(x2, x1)


def path_deviation(nm: NoiseMap, v: np.ndarray, w: np.ndarray) -> float:
    return relative_error(solve(nm.T2, w), solve(nm.T1, v))


# ------------------------------------------------------------ closed forms


def markov_fwd_to_bwd(src: MarkovParams) -> tuple[MarkovParams, NoiseMap]:
    """Backward Markov model AE to a forward one, by the forward recursion.

    No transition matrix is ever inverted, so singular M_{k,k-1} are fine.
    """
    if src.direction != "fwd":
        raise InvalidParams("markov_fwd_to_bwd needs a forward model")
    N = src.N
    Mi = [spd_inv(m) for m in src.noise_covs]
    F = src.transition
    MB = [None] * (N + 1)
    FB = [None] * N  # FB[k] = M^B_{k,k+1}
    MB[0] = _inv_block(Mi[0] + F(1).T @ Mi[1] @ F(1), "(M^B_0)^{-1}", 0)
    FB[0] = MB[0] @ F(1).T @ Mi[1]
    for k in range(2, N + 1):
        info = Mi[k - 1] + F(k).T @ Mi[k] @ F(k) - FB[k - 2].T @ spd_inv(MB[k - 2]) @ FB[k - 2]
        MB[k - 1] = _inv_block(info, "(M^B)^{-1}", k - 1)
        FB[k - 1] = MB[k - 1] @ F(k).T @ Mi[k]
    MB[N] = _inv_block(Mi[N] - FB[N - 1].T @ spd_inv(MB[N - 1]) @ FB[N - 1], "(M^B_N)^{-1}", N)
    bwd = MarkovParams("bwd", FB, MB)
    return bwd, noise_map(src, bwd)


def markov_bwd_noise(fwd: MarkovParams, bwd: MarkovParams, v: np.ndarray) -> np.ndarray:
    """Backward-model noise from forward-model noise by the block recursion, k = 0..N."""
    N, d = fwd.N, fwd.d
    e = np.asarray(v, dtype=float).reshape(N + 1, d)
    Mi = [spd_inv(m) for m in fwd.noise_covs]
    MBi = [spd_inv(m) for m in bwd.noise_covs]
    F, FB = fwd.transition, bwd.transition
    w = np.zeros_like(e)
    w[0] = bwd.cov(0) @ (Mi[0] @ e[0] - F(1).T @ Mi[1] @ e[1])
    for k in range(1, N):
        rhs = FB(k - 1).T @ MBi[k - 1] @ w[k - 1] + Mi[k] @ e[k] - F(k + 1).T @ Mi[k + 1] @ e[k + 1]
        w[k] = bwd.cov(k) @ rhs
    w[N] = bwd.cov(N) @ (FB(N - 1).T @ MBi[N - 1] @ w[N - 1] + Mi[N] @ e[N])
    return w.reshape(-1)


def cml_to_reciprocal(src: CMParams, tol: float = PE_TOL) -> tuple[ReciprocalParams, NoiseMap]:
    """Cyclic reciprocal model AE to a reciprocal CM_L model (c = N, forward)."""
    if (src.family, src.direction) != ("cml", "fwd"):
        raise InvalidParams("cml_to_reciprocal needs a forward CM_L model")
    mem = cm_membership(src, tol)
    if not mem.is_reciprocal:
        raise NotReciprocal(f"reciprocity condition fails (residual {mem.reciprocal_residual:.3e})")
    N = src.N
    Gi = [spd_inv(g) for g in src.noise_covs]
    s, q, g = src.step, src.cond, src.boundary_gain
    R0 = [Gi[k] + s(k + 1).T @ Gi[k + 1] @ s(k + 1) for k in range(1, N - 1)] + [Gi[N - 1]]
    Rplus = [s(k + 1).T @ Gi[k + 1] for k in range(N - 1)] + [Gi[N - 1] @ q(N - 1)]
    tail = sum(q(k).T @ Gi[k] @ q(k) for k in range(1, N))
    if src.boundary == "BC1":
        R00 = Gi[0] + s(1).T @ Gi[1] @ s(1) + g.T @ Gi[N] @ g
        R0N = Gi[N] + tail
        Rm0 = -s(1).T @ Gi[1] @ q(1) + g.T @ Gi[N]
    else:
        R00 = Gi[0] + s(1).T @ Gi[1] @ s(1)
        R0N = Gi[N] + tail + g.T @ Gi[0] @ g
        Rm0 = Gi[0] @ g - s(1).T @ Gi[1] @ q(1)
    rec = ReciprocalParams("cyclic", R0, Rplus, {"R0_0": R00, "R0_N": R0N, "Rminus_0": Rm0})
    return rec, noise_map(src, rec, tol)


def cml_reciprocal_noise(src: CMParams, v: np.ndarray) -> np.ndarray:
    """Cyclic reciprocal noise e^R from CM_L noise e, block by block."""
    N, d = src.N, src.d
    e = np.asarray(v, dtype=float).reshape(N + 1, d)
    Gi = [spd_inv(g) for g in src.noise_covs]
    s, q, g = src.step, src.cond, src.boundary_gain
    out = np.zeros_like(e)
    out[0] = Gi[0] @ e[0] - s(1).T @ Gi[1] @ e[1]
    for k in range(1, N - 1):
        out[k] = Gi[k] @ e[k] - s(k + 1).T @ Gi[k + 1] @ e[k + 1]
    out[N - 1] = Gi[N - 1] @ e[N - 1]
    out[N] = Gi[N] @ e[N] - sum(q(k).T @ Gi[k] @ e[k] for k in range(1, N))
    if src.boundary == "BC1":
        out[0] -= g.T @ Gi[N] @ e[N]
    else:
        out[N] -= g.T @ Gi[0] @ e[0]
    return out.reshape(-1)


@dataclass(frozen=True, eq=False)
class ReciprocalCMLLink:
    """Reciprocal CM_L model AE to a Dirichlet reciprocal model through e^r = T e."""

    params: CMParams
    noise_map: NoiseMap
    transfer: np.ndarray
    cov_e: np.ndarray
    whiteness_residual: float
    diag_residual: float


def transfer_matrix(cml: CMParams) -> np.ndarray:
    """T_{R|CM_L}: identity at the endpoints, G_k^{-1} and -G'_{k+1,k} G_{k+1}^{-1} inside."""
    N, d = cml.N, cml.d
    Gi = [spd_inv(g) for g in cml.noise_covs]
    T = np.eye((N + 1) * d)
    for k in range(1, N):
        T[k * d:(k + 1) * d, k * d:(k + 1) * d] = Gi[k]
        if k < N - 1:
            T[k * d:(k + 1) * d, (k + 1) * d:(k + 2) * d] = -cml.step(k + 1).T @ Gi[k + 1]
    return T


def reciprocal_to_cml_via_T(src: ReciprocalParams, tol: float = PE_TOL) -> ReciprocalCMLLink:
    """AE reciprocal CM_L model for a Dirichlet-boundary reciprocal model.

    x_N drawn first pairs with CM_L BC2, x_0 drawn first with CM_L BC1.
    """
    if src.boundary == "cyclic":
        raise IncompatibleShape("the transfer-matrix route needs a Dirichlet boundary")
    target = "cml-fwd-BC2" if src.boundary == "dirichlet-xN" else "cml-fwd-BC1"
    cml = extract_model(precision(src), target, tol)
    nm = noise_map(src, cml, tol)
    T = transfer_matrix(cml)
    N, d = src.N, src.d
    # Cov(e) = T^{-1} R_r T^{-T}
    Ti_P = np.linalg.solve(T, nm.P1.array)
    cov_e = np.linalg.solve(T, Ti_P.T).T
    cov_e = 0.5 * (cov_e + cov_e.T)
    off = cov_e.copy()
    for k in range(N + 1):
        off[k * d:(k + 1) * d, k * d:(k + 1) * d] = 0.0
    whiteness = float(np.linalg.norm(off) / np.linalg.norm(cov_e))
    diag_expected = np.zeros_like(cov_e)
    for k in range(N + 1):
        diag_expected[k * d:(k + 1) * d, k * d:(k + 1) * d] = cml.cov(k)
    diag = relative_error(cov_e, diag_expected)
    return ReciprocalCMLLink(cml, nm, T, cov_e, whiteness, diag)


def reciprocal_from_markov(src: MarkovParams, check: bool = True, tol: float = AE_TOL) -> ReciprocalParams:
    """Cyclic reciprocal model of a forward Markov sequence (zero corner coupling)."""
    if src.direction != "fwd":
        raise InvalidParams("reciprocal_from_markov needs a forward model")
    if src.N < 3:
        raise InvalidParams("reciprocal models need N >= 3")
    N = src.N
    Mi = [spd_inv(m) for m in src.noise_covs]
    F = src.transition
    R0 = [Mi[k] + F(k + 1).T @ Mi[k + 1] @ F(k + 1) for k in range(1, N)]
    Rplus = [F(k + 1).T @ Mi[k + 1] for k in range(N)]
    bb = {
        "R0_0": Mi[0] + F(1).T @ Mi[1] @ F(1),
        "R0_N": Mi[N],
        "Rminus_0": np.zeros((src.d, src.d)),
    }
    rec = ReciprocalParams("cyclic", R0, Rplus, bb)
    if check:
        res = markov_reciprocal_consistency(src, rec)
        if res > tol:
            raise NotEquivalent(f"conditional-density parameters disagree ({res:.3e})")
    return rec


@dataclass(frozen=True)
class ConditionalDensity:
    """p(x_k | x_{k-1}, x_{k+1}) = N(R_{k,k-1} x_{k-1} + R_{k,k+1} x_{k+1}, R_k)."""

    k: int
    left: np.ndarray
    right: np.ndarray
    cov: np.ndarray


def conditional_density_params(src: MarkovParams) -> list[ConditionalDensity]:
    N = src.N
    Mi = [spd_inv(m) for m in src.noise_covs]
    F = src.transition
    out = []
    for k in range(1, N):
        cov = spd_inv(Mi[k] + F(k + 1).T @ Mi[k + 1] @ F(k + 1))
        right = cov @ F(k + 1).T @ Mi[k + 1]
        left = F(k) - cov @ F(k + 1).T @ Mi[k + 1] @ F(k + 1) @ F(k)
        out.append(ConditionalDensity(k, left, right, cov))
    return out


def markov_reciprocal_consistency(src: MarkovParams, rec: ReciprocalParams | None = None) -> float:
    """Largest mismatch, relative to ||R^0_k||, between R^0_k R_{k,k-1}, R^0_k R_{k,k+1},
    R^0_k R_k R^0_k and R^-_k, R^+_k, R^0_k."""
    rec = rec if rec is not None else reciprocal_from_markov(src, check=False)
    worst = 0.0
    for cd in conditional_density_params(src):
        r0 = rec.r0(cd.k)
        scale = np.linalg.norm(r0)
        worst = max(
            worst,
            np.linalg.norm(r0 @ cd.left - rec.rminus(cd.k)) / scale,
            np.linalg.norm(r0 @ cd.right - rec.rplus(cd.k)) / scale,
            np.linalg.norm(r0 @ cd.cov @ r0 - r0) / scale,
        )
    return float(worst)


# ------------------------------------------------------- noise relation oracles


def _markov_fwd_info(p: MarkovParams, e: np.ndarray) -> np.ndarray:
    N = p.N
    Mi = [spd_inv(m) for m in p.noise_covs]
    F = p.transition
    out = np.zeros_like(e)
    for k in range(N):
        out[k] = Mi[k] @ e[k] - F(k + 1).T @ Mi[k + 1] @ e[k + 1]
    out[N] = Mi[N] @ e[N]
    return out


def _cmf_fwd_info(p: CMParams, e: np.ndarray) -> np.ndarray:
    N = p.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q = p.step, p.cond
    out = np.zeros_like(e)
    out[0] = Gi[0] @ e[0] - 2.0 * q(1).T @ Gi[1] @ e[1] - sum(q(k).T @ Gi[k] @ e[k] for k in range(2, N + 1))
    for k in range(1, N):
        out[k] = Gi[k] @ e[k] - s(k + 1).T @ Gi[k + 1] @ e[k + 1]
    out[N] = Gi[N] @ e[N]
    return out


def _cmf_bwd_info(p: CMParams, e: np.ndarray) -> np.ndarray:
    N = p.N
    Gi = [spd_inv(g) for g in p.noise_covs]
    s, q = p.step, p.cond
    out = np.zeros_like(e)
    out[0] = Gi[0] @ e[0]
    for k in range(1, N):
        out[k] = Gi[k] @ e[k] - s(k - 1).T @ Gi[k - 1] @ e[k - 1]
    out[N] = (
        Gi[N] @ e[N]
        - sum(q(k).T @ Gi[k] @ e[k] for k in range(N - 1))
        - 2.0 * q(N - 1).T @ Gi[N - 1] @ e[N - 1]
    )
    return out


_PAIR_KINDS = {
    "reciprocal-markov": ({MARKOV_FWD}, {RECIPROCAL_CYCLIC}),
    "cml-markov": ({Form("cml", "fwd", "BC1"), Form("cml", "fwd", "BC2")}, {MARKOV_FWD}),
    "cmf-reciprocal": ({CMF_FWD}, {RECIPROCAL_CYCLIC}),
    "cml-bwdcmf": ({Form("cml", "fwd", "BC1"), Form("cml", "fwd", "BC2")}, {CMF_BWD}),
}


def _info(p: ModelParams, e: np.ndarray) -> np.ndarray:
    """Closed-form T' P^{-1} e for the forms covered by the noise relation oracles."""
    f = p.form
    if f == MARKOV_FWD:
        return _markov_fwd_info(p, e)
    if f == RECIPROCAL_CYCLIC:
        return e.copy()
    if f.family == "cml" and f.direction == "fwd":
        return cml_reciprocal_noise(p, e.reshape(-1)).reshape(e.shape)
    if f == CMF_FWD:
        return _cmf_fwd_info(p, e)
    if f == CMF_BWD:
        return _cmf_bwd_info(p, e)
    raise UnsupportedPair(f"no closed-form noise relation for {f.tag}")


def appendix_b_noise_check(pair_kind: str, source: ModelParams, target: ModelParams, v: np.ndarray) -> float:
    """Max block residual of the closed-form noise relation between two AE models.

    ``v`` is the noise vector of ``source``; the target noise is ae_map(v).
    The pair may be given in either order.
    """
    if pair_kind not in _PAIR_KINDS:
        raise UnsupportedPair(f"unknown pair kind {pair_kind!r}; choose from {sorted(_PAIR_KINDS)}")
    left, right = _PAIR_KINDS[pair_kind]
    forms = (source.form, target.form)
    if not ((forms[0] in left and forms[1] in right) or (forms[0] in right and forms[1] in left)):
        raise UnsupportedPair(f"{pair_kind} does not relate {forms[0].tag} and {forms[1].tag}")
    N, d = source.N, source.d
    v = np.asarray(v, dtype=float)
    w = ae_map(noise_map(source, target), v, check=False)
    lhs = _info(source, v.reshape(N + 1, d))
    rhs = _info(target, w.reshape(N + 1, d))
    return float(np.max(np.linalg.norm(lhs - rhs, axis=1)))
