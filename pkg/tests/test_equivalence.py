import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmequiv.blockmat import BlockMatrix, invert, relative_error, solve
from cmequiv.equivalence import (
    appendix_b_noise_check,
    ae_map,
    ae_residuals,
    cml_reciprocal_noise,
    cml_to_reciprocal,
    compatible_targets,
    conditional_density_params,
    extract_model,
    markov_bwd_noise,
    markov_fwd_to_bwd,
    markov_reciprocal_consistency,
    noise_map,
    pe_convert,
    reciprocal_from_markov,
    reciprocal_to_cml_via_T,
    transfer_matrix,
)
from cmequiv.errors import IncompatibleShape, NotEquivalent, NotReciprocal, NotSPD, UnsupportedPair
from cmequiv.generate import random_cm, random_markov, random_params, random_reciprocal, reciprocal_cml
from cmequiv.models import (
    ALL_FORMS,
    CML_FWD_BC1,
    CML_FWD_BC2,
    CML_BWD_BC1,
    CMF_BWD,
    CMF_FWD,
    MARKOV_BWD,
    MARKOV_FWD,
    RECIPROCAL_CYCLIC,
    RECIPROCAL_X0,
    RECIPROCAL_XN,
    CMParams,
    LinearModel,
    MarkovParams,
    assemble,
    cm_membership,
    precision,
)

from conftest import seeds, sizes

CINV = BlockMatrix(np.array([[2.0, -1.0], [-1.0, 1.0]]), 1)
UNIT = MarkovParams("fwd", [[[1.0]]], [[[1.0]]] * 2)


def flat(params):
    """All parameter blocks of a model as one vector."""
    parts = []
    for name in ("transitions", "noise_covs", "step_gains", "cond_gains", "R0", "Rplus"):
        parts += [np.ravel(b) for b in getattr(params, name, ())]
    if getattr(params, "boundary_gain", None) is not None:
        parts.append(np.ravel(params.boundary_gain))
    for key in sorted(getattr(params, "boundary_blocks", {})):
        parts.append(np.ravel(params.boundary_blocks[key]))
    return np.concatenate(parts)


def conditional_gaussian(C, d, k, given):
    """Gain blocks and covariance of x_k given x_j (j in ``given``) straight from C."""
    idx = lambda j: list(range(j * d, (j + 1) * d))
    gi = sum((idx(j) for j in given), [])
    ki = idx(k)
    Cgg = C[np.ix_(gi, gi)]
    Ckg = C[np.ix_(ki, gi)]
    gain = Ckg @ np.linalg.inv(Cgg)
    cov = C[np.ix_(ki, ki)] - gain @ Ckg.T
    return [gain[:, i * d:(i + 1) * d] for i in range(len(given))], cov


# ------------------------------------------------------------ extraction examples


def test_extract_forward_markov_unit():
    p = extract_model(CINV, MARKOV_FWD)
    assert np.allclose(p.transition(1), 1.0) and np.allclose(p.cov(0), 1.0) and np.allclose(p.cov(1), 1.0)


def test_extract_backward_markov_unit():
    p = extract_model(CINV, MARKOV_BWD)
    # x_1 ~ N(0, 2) and x_0 | x_1 ~ N(x_1 / 2, 1/2) from C = [[1, 1], [1, 2]]
    assert np.allclose(p.cov(1), 2.0)
    assert np.allclose(p.transition(0), 0.5)
    assert np.allclose(p.cov(0), 0.5)


def test_extract_identity_cml_bc2():
    p = extract_model(BlockMatrix.identity(4, 2), CML_FWD_BC2)
    for g in p.step_gains + p.cond_gains + (p.boundary_gain,):
        assert np.allclose(g, 0.0)
    for c in p.noise_covs:
        assert np.allclose(c, np.eye(2))


@pytest.mark.parametrize("form", [MARKOV_FWD, MARKOV_BWD], ids=lambda f: f.tag)
def test_extracted_markov_conditionals_match_covariance(form, rng):
    """Forward Markov parameters are the one-step conditional laws of C itself."""
    p = random_params(form, 4, 2, rng)
    C = invert(precision(p)).array
    fwd = extract_model(precision(p), MARKOV_FWD)
    for k in range(1, p.N + 1):
        (gain,), cov = conditional_gaussian(C, 2, k, [k - 1])
        assert np.allclose(fwd.transition(k), gain) and np.allclose(fwd.cov(k), cov)


@pytest.mark.parametrize("target", [RECIPROCAL_X0, RECIPROCAL_XN], ids=lambda f: f.tag)
def test_dirichlet_boundary_is_endpoint_law(target, rng):
    src = random_reciprocal(rng, 5, 2)
    C = invert(precision(src)).array
    p = extract_model(precision(src), target)
    first, second = (0, 5) if target is RECIPROCAL_X0 else (5, 0)
    (gain,), cov = conditional_gaussian(C, 2, second, [first])
    key_first, key_second = ("cov_0", "cov_N") if target is RECIPROCAL_X0 else ("cov_N", "cov_0")
    d = 2
    block = C[first * d:(first + 1) * d, first * d:(first + 1) * d]
    assert np.allclose(p.boundary_blocks[key_first], block)
    assert np.allclose(p.boundary_blocks[key_second], cov)
    assert np.allclose(p.boundary_blocks["gain"], gain)


def test_markov_precision_accepted_as_cyclic(rng):
    m = random_markov(rng, 4, 2)
    p = extract_model(precision(m), RECIPROCAL_CYCLIC)
    assert np.allclose(p.boundary_blocks["Rminus_0"], 0.0)


def test_extract_errors(rng):
    with pytest.raises(IncompatibleShape):
        extract_model(precision(random_cm(rng, CML_FWD_BC1, 4, 2)), RECIPROCAL_CYCLIC)
    with pytest.raises(IncompatibleShape):
        extract_model(precision(random_cm(rng, CMF_FWD, 4, 2)), CML_FWD_BC1)
    with pytest.raises(NotSPD):
        extract_model(BlockMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]), 1), MARKOV_FWD)


def test_uniqueness_is_deterministic(rng):
    c = precision(random_params(CMF_FWD, 5, 2, rng))
    a, b = extract_model(c, CML_BWD_BC1), extract_model(c, CML_BWD_BC1)
    assert np.array_equal(flat(a), flat(b))


@given(seed=seeds, d=sizes, form=st.sampled_from(ALL_FORMS), extra=st.integers(0, 3))
def test_pe_round_trip_property(seed, d, form, extra):
    rng = np.random.default_rng(seed)
    N = max(form.min_N, 3) + extra
    p = random_params(form, N, d, rng)
    c = precision(p)
    for target in compatible_targets(form):
        q = pe_convert(p, target)
        assert relative_error(precision(q), c) < 1e-8
        assert relative_error(precision(pe_convert(q, form)), c) < 1e-8


# ------------------------------------------------------------ AE maps


def test_ae_unit_example():
    bwd, nm = markov_fwd_to_bwd(UNIT)
    w = ae_map(nm, np.array([1.0, 0.0]))
    assert np.allclose(w, [0.5, 1.0])
    # (M^B_0)^{-1} w_0 = M_0^{-1} e_0 - M'_{1,0} M_1^{-1} e_1
    assert np.isclose(2.0 * w[0], 1.0 * 1.0 - 1.0 * 0.0)


def test_ae_identity_models():
    eye = BlockMatrix.identity(3, 2)
    m = LinearModel(eye, eye, MARKOV_FWD)
    nm = noise_map(m, m)
    v = np.arange(6.0)
    assert np.array_equal(ae_map(nm, v), v)


@pytest.mark.parametrize("singular", ["zero", "rank1"])
def test_ae_singular_transitions(singular, rng):
    m = random_markov(rng, 4, 2, singular=singular)
    bwd, nm = markov_fwd_to_bwd(m)
    v = rng.standard_normal((20, 10))
    w = ae_map(nm, v)
    assert relative_error(solve(nm.T2, w.T), solve(nm.T1, v.T)) < 1e-9


def test_noise_map_rejects_non_pe(rng):
    with pytest.raises(NotEquivalent):
        noise_map(random_markov(rng, 3, 1), random_markov(rng, 3, 1))


def test_independent_noises_give_different_paths(rng):
    m = random_markov(rng, 4, 2)
    bwd, nm = markov_fwd_to_bwd(m)
    L1, L2 = np.linalg.cholesky(nm.P1.array), np.linalg.cholesky(nm.P2.array)
    for _ in range(100):
        v = L1 @ rng.standard_normal(10)
        w = L2 @ rng.standard_normal(10)
        assert relative_error(solve(nm.T2, w), solve(nm.T1, v)) > 1e-6


# ------------------------------------------------------------ closed forms


def test_fwd_to_bwd_unit():
    bwd, _ = markov_fwd_to_bwd(UNIT)
    assert np.allclose(bwd.cov(0), 0.5) and np.allclose(bwd.transition(0), 0.5) and np.allclose(bwd.cov(1), 2.0)


def test_fwd_to_bwd_independent_states():
    m = MarkovParams("fwd", [[[0.0]]], [[[3.0]], [[0.7]]])
    bwd, _ = markov_fwd_to_bwd(m)
    assert np.allclose(bwd.cov(0), 3.0) and np.allclose(bwd.transition(0), 0.0) and np.allclose(bwd.cov(1), 0.7)


def test_fwd_to_bwd_all_zero_transitions(rng):
    m = MarkovParams("fwd", [np.zeros((2, 2))] * 4, [np.eye(2) * (k + 1) for k in range(5)])
    bwd, nm = markov_fwd_to_bwd(m)
    for k in range(5):
        assert np.allclose(bwd.cov(k), m.cov(k))
    v = rng.standard_normal(10)
    assert np.allclose(ae_map(nm, v), v)


@given(seed=seeds, d=sizes, N=st.integers(1, 6), singular=st.sampled_from([None, "zero", "rank1"]))
def test_fwd_to_bwd_matches_generic(seed, d, N, singular):
    rng = np.random.default_rng(seed)
    m = random_markov(rng, N, d, singular=singular)
    bwd, nm = markov_fwd_to_bwd(m)
    assert relative_error(flat(bwd), flat(extract_model(precision(m), MARKOV_BWD))) < 1e-9
    v = rng.standard_normal((N + 1) * d)
    w = ae_map(nm, v)
    assert relative_error(markov_bwd_noise(m, bwd, v), w) < 1e-9


def test_cml_to_reciprocal_zero_cond_gains(rng):
    N = 3
    steps = [rng.standard_normal((1, 1)) for _ in range(N - 1)]
    src = CMParams("cml", "fwd", "BC1", steps, [np.zeros((1, 1))] * (N - 1), [np.eye(1)] * (N + 1), np.zeros((1, 1)))
    rec, _ = cml_to_reciprocal(src)
    g10 = steps[0]
    assert np.allclose(rec.r0(0), 1.0 + g10.T @ g10)
    assert np.allclose(rec.r0(N - 1), 1.0)
    assert np.allclose(rec.rplus(N - 1), 0.0)


@pytest.mark.parametrize("boundary", ["BC1", "BC2"])
def test_cml_to_reciprocal_markov_induced(boundary, rng):
    m = random_markov(rng, 5, 2)
    cml = pe_convert(m, CML_FWD_BC1 if boundary == "BC1" else CML_FWD_BC2)
    rec, nm = cml_to_reciprocal(cml)
    assert relative_error(flat(rec), flat(reciprocal_from_markov(m))) < 1e-9
    v = rng.standard_normal(12)
    assert relative_error(cml_reciprocal_noise(cml, v), ae_map(nm, v)) < 1e-9


@given(seed=seeds, d=sizes, N=st.integers(3, 7), boundary=st.sampled_from(["BC1", "BC2"]))
def test_cml_to_reciprocal_matches_generic(seed, d, N, boundary):
    rng = np.random.default_rng(seed)
    src = reciprocal_cml(rng, N, d, boundary)
    rec, _ = cml_to_reciprocal(src)
    assert relative_error(flat(rec), flat(extract_model(precision(src), RECIPROCAL_CYCLIC))) < 1e-9


def test_cml_to_reciprocal_rejects_general_cm(rng):
    with pytest.raises(NotReciprocal):
        cml_to_reciprocal(random_cm(rng, CML_FWD_BC1, 4, 2))


def test_transfer_matrix_white_source():
    N, d = 4, 2
    covs = [np.eye(d) * (k + 1.0) for k in range(N + 1)]
    z = np.zeros((d, d))
    cml = CMParams("cml", "fwd", "BC2", [z] * (N - 1), [z] * (N - 1), covs, z)
    T = transfer_matrix(cml)
    expected = np.eye((N + 1) * d)
    for k in range(1, N):
        expected[k * d:(k + 1) * d, k * d:(k + 1) * d] = np.linalg.inv(covs[k])
    assert np.allclose(T, expected)


@pytest.mark.parametrize("target", [RECIPROCAL_X0, RECIPROCAL_XN], ids=lambda f: f.tag)
def test_transfer_route_whiteness_and_paths(target, rng):
    src = random_reciprocal(rng, 4, 2, target.boundary)
    link = reciprocal_to_cml_via_T(src)
    assert link.whiteness_residual < 1e-8
    assert link.diag_residual < 1e-8
    assert link.params.boundary == ("BC1" if target is RECIPROCAL_X0 else "BC2")
    # e^r = T e, so T must equal the reciprocal dynamics times the inverse CM_L dynamics
    nm = link.noise_map
    assert np.allclose(link.transfer, nm.T1.array @ np.linalg.inv(nm.T2.array))
    L = np.linalg.cholesky(nm.P1.array)
    v = (L @ rng.standard_normal((10, 100))).T
    w = ae_map(nm, v)
    dev = np.linalg.norm(solve(nm.T2, w.T) - solve(nm.T1, v.T), axis=0) / np.linalg.norm(solve(nm.T1, v.T), axis=0)
    assert dev.max() < 1e-9


def test_transfer_route_needs_dirichlet(rng):
    with pytest.raises(IncompatibleShape):
        reciprocal_to_cml_via_T(random_reciprocal(rng, 4, 1))


def test_reciprocal_from_markov_unit_chain():
    m = MarkovParams("fwd", [[[1.0]]] * 3, [[[1.0]]] * 4)
    r = reciprocal_from_markov(m)
    for k in (1, 2):
        assert np.allclose(r.r0(k), 2.0) and np.allclose(r.rminus(k), 1.0)
    for k in range(3):
        assert np.allclose(r.rplus(k), 1.0)


def test_reciprocal_from_markov_zero_transitions():
    m = MarkovParams("fwd", [np.zeros((1, 1))] * 3, [[[2.0]], [[4.0]], [[5.0]], [[1.0]]])
    r = reciprocal_from_markov(m)
    for k in (1, 2):
        assert np.allclose(r.r0(k), 1.0 / m.cov(k)) and np.allclose(r.rminus(k), 0.0)
    assert all(np.allclose(r.rplus(k), 0.0) for k in range(3))


def test_conditional_density_matches_covariance(rng):
    m = random_markov(rng, 5, 2)
    C = invert(precision(m)).array
    for cd in conditional_density_params(m):
        (left, right), cov = conditional_gaussian(C, 2, cd.k, [cd.k - 1, cd.k + 1])
        assert np.allclose(cd.left, left) and np.allclose(cd.right, right) and np.allclose(cd.cov, cov)


@given(seed=seeds, d=sizes, N=st.integers(3, 7))
def test_markov_reciprocal_consistency(seed, d, N):
    m = random_markov(np.random.default_rng(seed), N, d)
    assert markov_reciprocal_consistency(m) < 1e-9


# ------------------------------------------------------------ noise relation oracles


def test_noise_relation_unit_chain():
    m = MarkovParams("fwd", [[[1.0]]] * 3, [[[1.0]]] * 4)
    v = np.array([1.0, 0.0, 0.0, 0.0])
    assert appendix_b_noise_check("reciprocal-markov", m, reciprocal_from_markov(m), v) < 1e-12


@pytest.mark.parametrize("boundary", ["BC1", "BC2"])
def test_noise_relation_cml_markov(boundary, rng):
    m = random_markov(rng, 4, 2)
    cml = pe_convert(m, CML_FWD_BC1 if boundary == "BC1" else CML_FWD_BC2)
    v = rng.standard_normal(10)
    assert appendix_b_noise_check("cml-markov", cml, m, v) < 1e-9 * np.linalg.norm(v)


@pytest.mark.parametrize("form", [CML_FWD_BC1, CML_FWD_BC2], ids=lambda f: f.tag)
def test_noise_relation_cml_bwdcmf(form, rng):
    c = random_cm(rng, form, 4, 2)
    v = rng.standard_normal(10)
    assert appendix_b_noise_check("cml-bwdcmf", c, pe_convert(c, CMF_BWD), v) < 1e-9 * np.linalg.norm(v)


def test_noise_relation_cmf_reciprocal(rng):
    r = random_reciprocal(rng, 5, 2)
    v = rng.standard_normal(12)
    assert appendix_b_noise_check("cmf-reciprocal", r, pe_convert(r, CMF_FWD), v) < 1e-9 * np.linalg.norm(v)


def test_noise_relation_errors(rng):
    m = random_markov(rng, 3, 1)
    with pytest.raises(UnsupportedPair):
        appendix_b_noise_check("markov-markov", m, m, np.zeros(4))
    with pytest.raises(UnsupportedPair):
        appendix_b_noise_check("cml-bwdcmf", m, reciprocal_from_markov(m), np.zeros(4))


def test_ae_residuals_report_both_conditions(rng):
    m = random_markov(rng, 3, 2)
    _, nm = markov_fwd_to_bwd(m)
    v = rng.standard_normal(8)
    eq, path = ae_residuals(nm, v, ae_map(nm, v))
    assert eq < 1e-12 and path < 1e-12
    eq, path = ae_residuals(nm, v, rng.standard_normal(8))
    assert eq > 1e-3 and path > 1e-3
