import numpy as np
import pytest
import scipy.sparse as sp

from evmpopf.ipm import CallbackNlp, IpmOptions, KktSystem, Regularization, kkt_solve, solve


def hs071():
    f = lambda x: x[0] * x[3] * (x[0] + x[1] + x[2]) + x[2]
    grad = lambda x: np.array([
        x[3] * (2 * x[0] + x[1] + x[2]), x[0] * x[3], x[0] * x[3] + 1, x[0] * (x[0] + x[1] + x[2])])
    eq = lambda x: np.array([x @ x - 40.0])
    ineq = lambda x: np.array([25.0 - np.prod(x)])
    return CallbackNlp(f, grad, [1, 5, 5, 1], lower=np.ones(4), upper=np.full(4, 5.0), eq=eq, ineq=ineq)


@pytest.mark.parametrize("barrier", ["mehrotra", "monotone"])
def test_hs071(barrier):
    res = solve(hs071(), IpmOptions(barrier=barrier))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(17.0140173, rel=1e-6)
    np.testing.assert_allclose(res.x, [1.0, 4.7429994, 3.8211503, 1.3794082], atol=1e-5)


def test_bound_multiplier_of_simple_qp():
    nlp = CallbackNlp(lambda x: x[0] ** 2, lambda x: 2 * x, [3.0], lower=[1.0],
                      hess=lambda x, y, z, of: np.array([[2.0 * of]]))
    res = solve(nlp)
    assert res.status == "optimal"
    assert res.x[0] == pytest.approx(1.0, abs=1e-6)
    assert res.z_lower[0] == pytest.approx(2.0, abs=1e-5)


def test_linear_program_with_equality():
    # min -x - y  s.t. x + y = 1 (not binding at a vertex) , 0 <= x <= 0.3, 0 <= y
    nlp = CallbackNlp(lambda x: -x[0] - 2 * x[1], lambda x: np.array([-1.0, -2.0]), [0.1, 0.1],
                      lower=[0, 0], upper=[0.3, np.inf],
                      eq=lambda x: np.array([x[0] + x[1] - 1]), eq_jac=lambda x: np.array([[1.0, 1.0]]),
                      hess=lambda x, y, z, of: np.zeros((2, 2)))
    res = solve(nlp)
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, [0.0, 1.0], atol=1e-6)
    assert res.y_eq[0] == pytest.approx(2.0, abs=1e-5)


def test_infeasible_constraints_reported():
    # x >= 2 and x <= 1 through inequalities
    nlp = CallbackNlp(lambda x: x[0], lambda x: np.array([1.0]), [0.0],
                      ineq=lambda x: np.array([2 - x[0], x[0] - 1]))
    res = solve(nlp)
    assert res.status == "infeasible"


def test_empty_box_is_infeasible():
    nlp = CallbackNlp(lambda x: x[0], lambda x: np.array([1.0]), [0.0], lower=[1.0], upper=[0.0])
    assert solve(nlp).status == "infeasible"


def test_fixed_variable_needs_elimination():
    nlp = CallbackNlp(lambda x: x[0], lambda x: np.array([1.0]), [0.0], lower=[1.0], upper=[1.0])
    assert solve(nlp).status == "numerical"


def test_iteration_limit():
    res = solve(hs071(), IpmOptions(max_iter=3))
    assert res.status == "max_iter" and res.iterations == 3


def test_log_columns_and_trace(tmp_path):
    from evmpopf.ipm import write_trace
    from evmpopf.ipm.solver import TRACE_COLUMNS

    res = solve(hs071())
    write_trace(res.log, tmp_path / "t.csv", header_line="# test")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# test" and lines[1].split(",") == list(TRACE_COLUMNS)
    assert len(lines) == 2 + len(res.log)
    barrier = [r["barrier"] for r in res.log]
    assert barrier[-1] < barrier[0]


@pytest.mark.parametrize("bad", [dict(tol_kkt=0), dict(tau=1.0), dict(barrier="x"), dict(mu0=-1)])
def test_option_validation(bad):
    with pytest.raises(ValueError):
        IpmOptions(**bad)


def _random_kkt(rng, n, m, indefinite):
    a = rng.standard_normal((n, n))
    w = a @ a.T + np.eye(n)
    if indefinite:
        w -= 3 * np.eye(n) * np.abs(np.linalg.eigvalsh(w)).max()
    jc = rng.standard_normal((m, n))
    return sp.csr_matrix(w), sp.csr_matrix(jc)


def test_kkt_inertia_and_solution():
    rng = np.random.default_rng(0)
    n, m = 6, 2
    w, jc = _random_kkt(rng, n, m, indefinite=False)
    jh = sp.csr_matrix((0, n))
    kkt = KktSystem(n, m, 0)
    rhs = rng.standard_normal(n + m)
    step, info = kkt_solve(kkt, w, jc, jh, np.zeros(n), np.zeros(0), rhs, Regularization())
    assert info["delta_w"] == 0.0
    full = np.block([[w.toarray(), jc.toarray().T], [jc.toarray(), -info["delta_c"] * np.eye(m)]])
    np.testing.assert_allclose(full @ step, rhs, atol=1e-8)


def test_kkt_inertia_correction_on_nonconvex_block():
    rng = np.random.default_rng(1)
    n, m = 5, 2
    w, jc = _random_kkt(rng, n, m, indefinite=True)
    kkt = KktSystem(n, m, 0)
    reg = Regularization()
    _, info = kkt_solve(kkt, w, jc, sp.csr_matrix((0, n)), np.zeros(n), np.zeros(0),
                        np.ones(n + m), reg)
    assert info["delta_w"] > 0 and reg.delta_w_last == info["delta_w"]
    inertia = kkt.factor(kkt.assemble(w, jc, sp.csr_matrix((0, n)), np.zeros(n), np.zeros(0),
                                      info["delta_w"], 1e-8))
    assert inertia.matches(n, m)


def test_decoupled_blocks_match_monolithic():
    rng = np.random.default_rng(2)
    n, m = 8, 4
    blocks = [_random_kkt(rng, 4, 2, False) for _ in range(2)]
    w = sp.block_diag([b[0] for b in blocks], format="csr")
    jc = sp.block_diag([b[1] for b in blocks], format="csr")
    jh = sp.csr_matrix((0, n))
    rhs = rng.standard_normal(n + m)
    split = KktSystem(n, m, 0, var_period=np.repeat([0, 1], 4))
    mono = KktSystem(n, m, 0)
    a, _ = kkt_solve(split, w, jc, jh, np.zeros(n), np.zeros(0), rhs)
    b, _ = kkt_solve(mono, w, jc, jh, np.zeros(n), np.zeros(0), rhs)
    assert split.decoupled and not mono.decoupled
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_coupling_row_disables_block_split():
    rng = np.random.default_rng(3)
    w, _ = _random_kkt(rng, 4, 1, False)
    jc = sp.csr_matrix(np.array([[1.0, 0, 0, 1.0]]))
    kkt = KktSystem(4, 1, 0, var_period=np.array([0, 0, 1, 1]))
    kkt_solve(kkt, w, jc, sp.csr_matrix((0, 4)), np.zeros(4), np.zeros(0), np.ones(5))
    assert not kkt.decoupled
