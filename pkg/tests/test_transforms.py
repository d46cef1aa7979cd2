import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dscm.distributions import StandardNormal
from dscm.nn import MLP
from dscm.numerics import Tensor, finite_diff_grad
from dscm.synthdata import true_scm
from dscm.transforms import (
    Affine,
    Composition,
    ConditionalAffine,
    DomainError,
    Exp,
    LinearSpline,
    Preprocessing,
    Sigmoid,
    affine_normalisation,
    affine_normalisation_fit,
)


def random_spline(rng: np.random.Generator, bins: int = 8, bound: float = 3.0) -> LinearSpline:
    return LinearSpline(bins, bound, rng=rng, init_scale=1.0)


def random_flow(rng: np.random.Generator, ctx_dim: int = 2):
    """A conditional flow mixing every kind, mapping R onto (64, 255)."""
    net = MLP([ctx_dim, 4, 2], rng, out_gain=0.5)
    return Composition(
        [
            Affine(float(rng.uniform(0.5, 2.0)), float(rng.normal())),
            random_spline(rng),
            ConditionalAffine(net),
            affine_normalisation("doubly", 64.0, 191.0),
        ]
    )


# -- forward examples ------------------------------------------------------


def test_affine_forward():
    assert Affine(2.0, 3.0).forward([[1.0]]).item() == 5.0


def test_true_intensity_mechanism_at_zero_noise_is_midpoint():
    i_mech = true_scm(with_image=False).mechanism("i")
    assert i_mech.sample(np.array([[0.0]]), [np.array([[2.5]])]).item() == pytest.approx(159.5, abs=1e-12)


def test_identity_spline():
    x = np.linspace(-2.9, 2.9, 51)[:, None]
    assert np.allclose(LinearSpline(8, 3.0).forward(x).data, x, atol=1e-14)


def test_context_presence_enforced():
    ca = ConditionalAffine(None, dim=1)
    with pytest.raises(ValueError, match="needs a context"):
        ca.forward([[0.0]])
    with pytest.raises(ValueError, match="superfluous"):
        Exp().forward([[0.0]], context=[[1.0]])


# -- inverse examples -----------------------------------------------------------


def test_exp_inverse_at_one():
    assert Exp().inverse([[1.0]]).item() == 0.0


def test_doubly_bounded_boundary_rejected():
    norm = affine_normalisation("doubly", 64.0, 191.0)
    with pytest.raises(DomainError, match="boundary"):
        norm.inverse([[255.0]])
    with pytest.raises(DomainError):
        norm.inverse([[300.0]])


def test_sigmoid_and_preprocessing_domain_errors():
    with pytest.raises(DomainError):
        Sigmoid().inverse([[1.2]])
    with pytest.raises(DomainError):
        Preprocessing().inverse([[400.0]])
    assert np.isnan(Sigmoid().inverse([[1.2]], strict=False).item())


def test_round_trip_on_ten_thousand_random_points():
    rng = np.random.default_rng(5)
    worst_eps, worst_x = 0.0, 0.0
    for _ in range(10):
        flow = random_flow(rng)
        inner = Composition(flow.transforms[:3])
        eps = rng.normal(scale=2.0, size=(1000, 1))
        ctx = rng.normal(size=(1000, 2))
        # beyond |logit| ~ 15 the bounded output rounds to its endpoint in float64
        ok = np.abs(inner.forward(eps, ctx).data[:, 0]) < 15
        x = flow.forward(eps[ok], ctx[ok])
        worst_eps = max(worst_eps, np.abs(flow.inverse(x, ctx[ok]).data - eps[ok]).max())
        y = rng.normal(scale=3.0, size=(1000, 1))
        worst_x = max(worst_x, np.abs(inner.forward(inner.inverse(y, ctx), ctx).data - y).max())
        worst_eps = max(worst_eps, np.abs(inner.inverse(inner.forward(eps, ctx), ctx).data - eps).max())
    assert worst_eps <= 1e-5 and worst_x <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(-8, 8), st.integers(1, 12), st.floats(0.5, 5.0))
def test_spline_round_trip_property(seed, e, bins, bound):
    s = LinearSpline(bins, bound, rng=np.random.default_rng(seed), init_scale=1.5)
    x = s.forward([[e]])
    assert abs(s.inverse(x).item() - e) <= 1e-5
    assert abs(s.forward(s.inverse([[e]])).item() - e) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.floats(0.01, 50), st.floats(-100, 100))
def test_analytic_round_trips_property(e, scale, shift):
    for t in (Affine(scale, shift), Exp(), Sigmoid(), Preprocessing()):
        x = t.forward([[e]])
        if isinstance(t, (Sigmoid, Preprocessing)) and abs(e) > 12:
            continue  # saturated in float64: the image point is not resolvable
        if isinstance(t, Exp) and e < -20:
            continue
        assert abs(t.inverse(x).item() - e) <= 1e-8 * max(1.0, abs(e))


# -- log-determinants -----------------------------------------------------------


def test_affine_log_det():
    ld = Affine(np.array([2.0, 2.0]), 0.0).log_abs_det_jacobian(np.zeros((3, 2))).data
    assert np.allclose(ld, 2 * math.log(2))


def test_exp_log_det_at_zero():
    assert Exp().log_abs_det_jacobian([[0.0]]).item() == 0.0


def test_spline_log_det_matches_finite_differences():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        s = random_spline(rng, bins=int(rng.integers(2, 12)), bound=float(rng.uniform(1, 4)))
        e = rng.uniform(-s.bound, s.bound, size=(5, 1))
        h = 1e-6
        slope = (s.forward(e + h).data - s.forward(e - h).data) / (2 * h)
        worst = max(worst, np.abs(np.log(slope[:, 0]) - s.log_abs_det_jacobian(e).data).max())
    assert worst <= 1e-4


@pytest.mark.parametrize("make", [lambda r: Sigmoid(), lambda r: Exp(), lambda r: Preprocessing(), lambda r: Affine(1.7, -2.0)])
def test_analytic_log_det_matches_finite_differences(make):
    t = make(None)
    e = np.linspace(-4, 4, 17)[:, None]
    h = 1e-6
    slope = (t.forward(e + h).data - t.forward(e - h).data) / (2 * h)
    assert np.allclose(np.log(slope[:, 0]), t.log_abs_det_jacobian(e).data, atol=1e-6)


def test_composition_log_det_is_sum_at_chained_points():
    rng = np.random.default_rng(2)
    flow = random_flow(rng)
    eps = rng.normal(size=(20, 1))
    ctx = rng.normal(size=(20, 2))
    x, total = flow.forward_and_log_det(eps, ctx)
    parts, y = [], Tensor(eps)
    for t in flow.transforms:
        c = ctx if t.conditional else None
        parts.append(t.log_abs_det_jacobian(y, c).data)
        y = t.forward(y, c)
    assert np.allclose(total.data, np.sum(parts, axis=0), atol=1e-12)
    assert np.allclose(y.data, x.data)
    eps_back, ld_back = flow.inverse_and_log_det(x, ctx)
    assert np.allclose(ld_back.data, total.data, atol=1e-6)


def test_transform_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        flow = random_flow(rng)
        eps = rng.normal(size=(6, 1))
        ctx = rng.normal(size=(6, 2))
        params = flow.parameters()

        def loss():
            x, ld = flow.forward_and_log_det(eps, ctx)
            return (x * 0.01).sum() + ld.sum()

        loss().backward()
        for p in params:
            g = p.grad.copy()
            p.grad = None
            saved = p.data

            def f(w: Tensor, p=p, saved=saved) -> Tensor:
                p.data = w.data
                try:
                    return loss()
                finally:
                    p.data = saved

            fd = finite_diff_grad(f, saved)
            scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8)
            assert np.linalg.norm(g - fd) / scale <= 1e-4


# -- monotonicity and change of variables ------------------------------------


def test_forward_strictly_monotone_on_sorted_grid():
    rng = np.random.default_rng(8)
    grid = np.linspace(-6, 6, 4001)[:, None]
    for _ in range(20):
        flow = random_flow(rng)
        ctx = np.repeat(rng.normal(size=(1, 2)), len(grid), axis=0)
        inner = Composition(flow.transforms[:3])
        assert np.all(np.diff(inner.forward(grid, ctx).data[:, 0]) > 0)
        assert np.all(np.diff(flow.forward(grid, ctx).data[:, 0]) >= 0)


def test_flow_density_integrates_to_one():
    rng = np.random.default_rng(12)
    base = StandardNormal()
    for _ in range(5):
        flow = random_flow(rng)
        ctx = rng.normal(size=(1, 2))

        def density(v: float) -> float:
            eps, ld = flow.inverse_and_log_det([[v]], ctx)
            return math.exp(base.log_prob(eps).item() - ld.item())

        total, _ = integrate.quad(density, 64.0 + 1e-9, 255.0 - 1e-9, limit=400, points=np.linspace(70, 250, 10))
        assert total == pytest.approx(1.0, abs=1e-2)


# -- affine normalisation ---------------------------------------------------------


def test_doubly_bounded_fit_recovers_range():
    norm = affine_normalisation_fit(np.linspace(64, 255, 200), "doubly")
    aff = norm.transforms[1]
    assert aff.shift.item() == 64.0 and aff.scale.item() == pytest.approx(191.0)
    assert norm.forward([[0.0]]).item() == pytest.approx((64 + 255) / 2)


def test_singly_bounded_fit_whitens_log_values():
    data = np.exp(np.random.default_rng(0).normal(1.3, 0.4, size=5000))
    norm = affine_normalisation_fit(data, "singly")
    white = norm.inverse(data[:, None]).data
    assert white.mean() == pytest.approx(0.0, abs=1e-9)
    assert white.std() == pytest.approx(1.0, abs=1e-9)


def test_degenerate_data_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        affine_normalisation_fit([3.0, 3.0], "doubly")
    with pytest.raises(ValueError):
        affine_normalisation_fit([], "singly")


def test_normalisation_constants_are_not_learnable():
    assert affine_normalisation_fit([1.0, 2.0, 4.0], "singly").parameters() == []
