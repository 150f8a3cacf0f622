import numpy as np
import pytest

from hedgegame.model import (
    DerivativePack,
    FinanceSpec,
    ModelError,
    mu_Y_hat,
    operator_H_eps,
    operator_L,
    operator_La,
    rho,
    shake_lattice,
    u_hat_finance,
    validate_assumptions,
)

from conftest import (
    bs_singleton_model,
    constant_mu,
    constant_rate,
    finance_spec,
    sigma_from_a,
    uncertain_vol_model,
)


def pack(y=0.0, q=0.0, p=0.0, M=0.0, d=1):
    p = np.full(d, float(p)) if np.isscalar(p) else np.asarray(p, float)
    M = float(M) * np.eye(d) if np.isscalar(M) else np.asarray(M, float)
    return DerivativePack(y=y, q=q, p=p, M=M)


class TestRho:
    def setup_method(self):
        self.fin = finance_spec(r_lend=0.02, r_borrow=0.05)

    def test_positive_cash_lends(self):
        x = np.zeros((1, 1))
        out = rho(0.0, x, 1.0, np.array([[0.4]]), self.fin, np.array([0.2]))
        assert out[0] == pytest.approx(0.6 * 0.02, abs=1e-15)

    def test_negative_cash_borrows(self):
        x = np.zeros((1, 1))
        out = rho(0.0, x, 0.4, np.array([[1.0]]), self.fin, np.array([0.2]))
        assert out[0] == pytest.approx(-0.6 * 0.05, abs=1e-15)

    def test_kink_point_is_zero(self):
        x = np.zeros((1, 1))
        out = rho(0.0, x, 0.7, np.array([[0.7]]), self.fin, np.array([0.2]))
        assert out[0] == 0.0


class TestUHatFinance:
    def test_scalar_inversion(self):
        fin = finance_spec()
        u = u_hat_finance(0.0, np.zeros(1), 0.0, np.array([0.1]), np.array([0.2]), fin)
        assert u == pytest.approx(0.5, abs=1e-14)

    def test_zero_z(self):
        fin = finance_spec()
        u = u_hat_finance(0.0, np.zeros(1), 0.0, np.array([0.0]), np.array([0.2]), fin)
        assert u == pytest.approx(0.0, abs=1e-15)

    def test_diagonal_inversion_2d(self):
        fin = FinanceSpec(
            mu=constant_mu(2),
            sigma=lambda t, x, a: np.broadcast_to(
                np.diag([0.1, 0.2]), np.asarray(x).shape[:-1] + (2, 2)
            ),
            r_lend=constant_rate(0.0),
            r_borrow=constant_rate(0.0),
        )
        u = u_hat_finance(0.0, np.zeros(2), 0.0, np.array([0.1, 0.2]), np.array([0.0]), fin)
        assert np.allclose(u, [1.0, 1.0], atol=1e-14)

    def test_singular_sigma_reports_point(self):
        fin = FinanceSpec(
            mu=constant_mu(1),
            sigma=lambda t, x, a: np.zeros(np.asarray(x).shape[:-1] + (1, 1)),
            r_lend=constant_rate(0.0),
            r_borrow=constant_rate(0.0),
        )
        with pytest.raises(ModelError, match="singular"):
            u_hat_finance(0.5, np.ones(1), 0.0, np.array([0.1]), np.array([0.3]), fin)

    def test_inversion_identity_randomized(self, rng):
        model = uncertain_vol_model(r_lend=0.01, r_borrow=0.03)
        worst = 0.0
        for _ in range(10):
            x = rng.normal(0.0, 1.0, (1000, 1))
            y = rng.normal(0.0, 1.0, 1000)
            z = rng.normal(0.0, 1.0, (1000, 1))
            for a in model.A_points:
                u = model.u_hat(0.3, x, y, z, a)
                back = model.sigma_Y(0.3, x, y, u, a)
                worst = max(worst, float(np.max(np.abs(back - z))))
        assert worst <= 1e-10


class TestMuYHat:
    def test_zero_control_zero_rates(self):
        model = bs_singleton_model()
        out = mu_Y_hat(0.0, np.zeros((1, 1)), np.array([1.0]), np.zeros((1, 1)),
                       model.A_points[0], model)
        assert out[0] == pytest.approx(0.0, abs=1e-15)

    def test_unit_control(self):
        model = bs_singleton_model()
        out = mu_Y_hat(0.0, np.zeros((1, 1)), np.array([1.0]), np.array([[0.2]]),
                       model.A_points[0], model)
        assert out[0] == pytest.approx(0.02, abs=1e-15)

    def test_composes_rho_and_u_hat(self):
        # independent recomputation: u = z / sigma, drift = rho + u*(mu + gamma/2)
        fin = finance_spec(mu=0.01, r_lend=0.02, r_borrow=0.02)
        from hedgegame.model import make_finance_model, make_payoff
        model = make_finance_model(fin, make_payoff("constant", level=0.0), 1,
                                   [np.array([0.2])], 1.0, 0.25)
        a = model.A_points[0]
        out = mu_Y_hat(0.0, np.zeros((1, 1)), np.array([2.0]), np.array([[0.2]]), a, model)
        u = u_hat_finance(0.0, np.zeros((1, 1)), 2.0, np.array([[0.2]]), a, fin)
        expect = rho(0.0, np.zeros((1, 1)), 2.0, u, fin, a) + u[0, 0] * (0.01 + 0.02)
        assert out[0] == pytest.approx(float(expect[0]), abs=1e-14)
        assert out[0] == pytest.approx(0.05, abs=1e-14)


class TestOperatorLa:
    def test_trace_arithmetic(self):
        # mu_X = 0, sigma_X = I (d=2), hedged drift == 0, q = 1, M = I -> -2
        def mu_Y(t, x, y, u, a):
            return np.zeros(np.asarray(x).shape[:-1])

        from hedgegame.model import ModelSpec
        model = ModelSpec(
            dim=2,
            mu_X=constant_mu(2),
            sigma_X=lambda t, x, a: np.broadcast_to(np.eye(2), np.asarray(x).shape[:-1] + (2, 2)),
            mu_Y=mu_Y,
            sigma_Y=lambda t, x, y, u, a: np.asarray(u, float),
            u_hat=lambda t, x, y, z, a: np.asarray(z, float),
            payoff_g=lambda x: np.zeros(np.asarray(x).shape[:-1]),
            A_points=[np.array([0.0])],
            horizon_T=1.0,
            lipschitz_K=2.0,
        )
        out = operator_La(0.0, np.zeros(2), pack(q=1.0, M=1.0, d=2), model.A_points[0], model)
        assert out == pytest.approx(-2.0, abs=1e-14)

    def test_zero_pack(self):
        model = bs_singleton_model()
        out = operator_La(0.0, np.zeros(1), pack(), model.A_points[0], model)
        assert out == pytest.approx(0.0, abs=1e-15)

    def test_finance_drift_cancellation(self, rng):
        # La must equal rho(.,y,p,a) + gamma.p/2 - q - tr(sigma sigma^T M)/2
        fin = finance_spec(mu=0.07, r_lend=0.01, r_borrow=0.04)
        from hedgegame.model import make_finance_model, make_payoff
        model = make_finance_model(fin, make_payoff("constant", level=0.0), 1,
                                   [np.array([0.2])], 1.0, 0.3)
        a = model.A_points[0]
        for _ in range(50):
            y, q = rng.normal(), rng.normal()
            p, M = rng.normal(), rng.normal()
            x = rng.normal(0.0, 1.0, 1)
            got = operator_La(0.1, x, pack(y=y, q=q, p=p, M=M), a, model)
            gam = 0.04
            r = rho(0.1, x.reshape(1, 1), y, np.array([[p]]), fin, a)[0]
            want = r + 0.5 * gam * p - q - 0.5 * gam * M
            assert got == pytest.approx(want, abs=1e-12)

    def test_asymmetric_hessian_rejected(self):
        with pytest.raises(ModelError, match="symmetric"):
            DerivativePack(y=0.0, q=0.0, p=np.zeros(2), M=np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestOperatorL:
    def test_singleton_equals_la(self):
        model = bs_singleton_model()
        pk = pack(y=0.3, q=0.1, p=0.5, M=0.2)
        v, idx = operator_L(0.2, np.zeros(1), pk, model)
        assert idx == 0
        assert v == operator_La(0.2, np.zeros(1), pk, model.A_points[0], model)

    def test_two_point_minimum(self):
        model = uncertain_vol_model()
        v, idx = operator_L(0.0, np.zeros(1), pack(M=1.0), model)
        assert v == pytest.approx(-0.045, abs=1e-14)
        assert idx == 1  # a = 0.3

    def test_matches_bruteforce_loop(self, rng):
        model = uncertain_vol_model(vols=(0.05, 0.1, 0.2, 0.25, 0.3))
        for _ in range(20):
            pk = pack(y=rng.normal(), q=rng.normal(), p=rng.normal(), M=rng.normal())
            v, idx = operator_L(0.4, np.zeros(1), pk, model)
            vals = [operator_La(0.4, np.zeros(1), pk, a, model) for a in model.A_points]
            assert v == min(vals)
            assert idx == int(np.argmin(vals))
            assert all(v <= w for w in vals)


class TestOperatorHEps:
    def test_zero_shake_equals_L(self):
        model = uncertain_vol_model()
        pk = pack(y=0.1, q=0.2, p=0.3, M=0.4)
        got = operator_H_eps(0.5, np.zeros(1), pk, 0.0, None, model)
        want, _ = operator_L(0.5, np.zeros(1), pk, model)
        assert got == want

    def test_translation_invariance_constant_coeffs(self):
        model = uncertain_vol_model()
        pk = pack(y=0.1, q=0.2, p=0.3, M=0.4)
        got = operator_H_eps(0.5, np.zeros(1), pk, 0.25, None, model)
        want, _ = operator_L(0.5, np.zeros(1), pk, model)
        assert got == pytest.approx(want, abs=1e-14)

    def test_brute_force_over_shifts(self):
        # sigma(t,x,a) = a * (1 + 0.1 sin x): shifted minima match a direct loop
        def sigma(t, x, a):
            s = float(np.asarray(a).reshape(-1)[0]) * (1.0 + 0.1 * np.sin(np.asarray(x, float)[..., 0]))
            return s[..., None, None] * np.eye(1)

        fin = FinanceSpec(mu=constant_mu(1), sigma=sigma,
                          r_lend=constant_rate(0.0), r_borrow=constant_rate(0.0))
        from hedgegame.model import make_finance_model, make_payoff
        model = make_finance_model(fin, make_payoff("constant", level=0.0), 1,
                                   [np.array([0.2]), np.array([0.3])], 1.0, 0.5)
        eps = 0.05
        shakes = np.array([[dt, dx] for dt in (-eps, 0.0, eps) for dx in (-eps, 0.0, eps)
                           if dt * dt + dx * dx <= eps * eps + 1e-15])
        pk = pack(y=0.2, q=0.05, p=1.1, M=0.7)
        got = operator_H_eps(0.5, np.array([0.4]), pk, eps, shakes, model)
        brute = min(
            operator_L(min(max(0.5 + b[0], 0.0), 1.0), np.array([0.4 + b[1]]), pk, model)[0]
            for b in shakes
        )
        assert got == brute

    def test_below_L_when_origin_included(self, rng):
        model = uncertain_vol_model()
        for _ in range(10):
            pk = pack(y=rng.normal(), q=rng.normal(), p=rng.normal(), M=rng.normal())
            h = operator_H_eps(0.3, np.zeros(1), pk, 0.1, None, model)
            l, _ = operator_L(0.3, np.zeros(1), pk, model)
            assert h <= l + 1e-15

    def test_points_outside_ball_rejected(self):
        model = bs_singleton_model()
        with pytest.raises(ModelError, match="ball"):
            operator_H_eps(0.5, np.zeros(1), pack(), 0.1, np.array([[0.2, 0.0]]), model)


class TestShakeLattice:
    def test_zero_eps_is_origin(self):
        assert shake_lattice(0.0, 1).shape == (1, 2)

    def test_axis_points_only(self):
        pts = shake_lattice(0.1, 1)
        # corners of the cube exceed the ball radius, only axis shifts survive
        assert pts.shape == (5, 2)
        assert np.all(np.sqrt((pts**2).sum(axis=1)) <= 0.1 + 1e-15)
        assert any(np.all(p == 0.0) for p in pts)


class TestValidateAssumptions:
    def test_finance_preset_passes(self):
        model = uncertain_vol_model(r_lend=0.02, r_borrow=0.05)
        rep = validate_assumptions(model, sample_count=200, rng_seed=1)
        assert rep.ok, rep.summary()

    def test_reversed_rates_report_concavity_witness(self):
        model = uncertain_vol_model(r_lend=0.05, r_borrow=0.02)
        rep = validate_assumptions(model, sample_count=400, rng_seed=2)
        assert not rep.ok
        bad = {c.id for c in rep.failed()}
        assert "concavity_La" in bad or "rates_order_rb_ge_rl" in bad
        assert rep["concavity_La"].witness is not None or rep["rates_order_rb_ge_rl"].witness is not None

    def test_constant_coefficients_zero_lipschitz(self):
        model = bs_singleton_model()
        rep = validate_assumptions(model, sample_count=100, rng_seed=3)
        assert rep["x_lipschitz_muX_sigmaX"].worst == pytest.approx(0.0, abs=1e-12)
        assert rep.ok

    def test_sample_count_guard(self):
        with pytest.raises(ModelError):
            validate_assumptions(bs_singleton_model(), sample_count=0)

    def test_concavity_midpoint_violation_at_kink(self):
        # reversed rates make the cash term convex at the kink y = u.1
        fin = finance_spec(r_lend=0.05, r_borrow=0.02)
        a = np.array([0.2])
        x = np.zeros((1, 1))
        mid = rho(0.0, x, 0.0, np.array([[0.0]]), fin, a)[0]
        avg = 0.5 * (rho(0.0, x, 1.0, np.array([[0.0]]), fin, a)[0]
                     + rho(0.0, x, -1.0, np.array([[0.0]]), fin, a)[0])
        assert mid < avg - 1e-3  # convex kink: midpoint strictly below average
