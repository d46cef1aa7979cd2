import itertools
import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from dscm.evalsuite import (
    association_report,
    counterfactual_mae_benchmark,
    covariate_fidelity,
    histogram2d,
    histogram_csv,
    interventional_comparison,
    ks_distance,
    mae,
    noise_shift,
    oracle_interventional_samples,
    tv_distance,
)
from dscm.synthdata import TrueScmParams, generate_dataset, true_scm

FIDELITY_TARGETS = list(itertools.product([1.5, 2.0, 2.5, 3.0, 3.5, 4.0], [100.0, 150.0, 200.0]))


# -- mae -------------------------------------------------------------------------


def test_mae_examples():
    a = np.random.default_rng(0).uniform(0, 255, size=(3, 28, 28))
    assert mae(a, a) == 0.0
    assert mae(np.zeros((2, 4, 4)), np.full((2, 4, 4), 255.0)) == 255.0


def test_mae_matches_naive_loop():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 255, size=(5, 4, 4)), rng.uniform(0, 255, size=(5, 4, 4))
    total = 0.0
    for n in range(5):
        for r in range(4):
            for c in range(4):
                total += abs(a[n, r, c] - b[n, r, c])
    assert mae(a, b) == pytest.approx(total / 80, rel=1e-14)


def test_mae_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        mae(np.zeros((2, 4)), np.zeros((4, 2)))


# -- distances -----------------------------------------------------------------------


def test_ks_self_distance_is_zero():
    a = np.random.default_rng(2).normal(size=(500, 2))
    assert ks_distance(a[:, 0], a[:, 0]) == 0.0
    assert ks_distance(a, a) == 0.0


def test_ks_shifted_uniforms():
    rng = np.random.default_rng(3)
    assert ks_distance(rng.uniform(0, 1, 100_000), rng.uniform(0.5, 1.5, 100_000)) == pytest.approx(0.5, abs=0.01)


def test_ks_same_generator_is_small():
    rng = np.random.default_rng(4)
    assert ks_distance(rng.normal(size=10_000), rng.normal(size=10_000)) <= 0.025
    assert ks_distance(rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2))) <= 0.025


def test_ks_is_symmetric_and_bounded():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(300, 2)), rng.normal(1.0, 2.0, size=(400, 2))
    assert ks_distance(a, b) == pytest.approx(ks_distance(b, a), abs=1e-12)
    assert 0.0 <= ks_distance(a, b) <= 1.0
    assert ks_distance(np.zeros(10), np.ones(10)) == 1.0


def test_ks_empty_rejected():
    with pytest.raises(ValueError):
        ks_distance(np.zeros(0), np.ones(3))


def test_tv_distance():
    g = np.linspace(-10, 10, 4001)
    p = stats.norm.pdf(g)
    assert tv_distance(g, p, p) == 0.0
    # TV between unit normals one apart is 2 Phi(1/2) - 1
    assert tv_distance(g, p, stats.norm.pdf(g, 1.0)) == pytest.approx(2 * stats.norm.cdf(0.5) - 1, abs=1e-6)


def test_histograms_count_every_sample():
    s = np.random.default_rng(6).normal(size=(1000, 2))
    counts, _, _ = histogram2d(s, bins=64)
    assert counts.shape == (64, 64) and counts.sum() == 1000
    rows = histogram_csv(s, bins=8).strip().splitlines()
    assert rows[0].split(",")[-1] == "count" and len(rows) == 65
    assert sum(int(r.split(",")[-1]) for r in rows[1:]) == 1000


# -- oracles on the true generator -----------------------------------------------


def _true_conditional_entropy(n: int = 1_000_000) -> float:
    """Monte Carlo estimate of E[log p(i|t)] under the generator."""
    p = TrueScmParams()
    rng = np.random.default_rng(11)
    t = p.thickness(rng.gamma(p.alpha, 1 / p.beta, n))
    eps = rng.standard_normal(n)
    z = p.noise_gain * eps + p.t_gain * t + p.bias
    s = special.expit(z)
    # i = span * sigmoid(z) + low, so |di/d eps| = span * gain * s (1 - s)
    return float(np.mean(stats.norm.logpdf(eps) - np.log(p.i_span * p.noise_gain * s * (1 - s))))


def test_generator_intensity_likelihoods():
    # the exact conditional sits 0.09 nats above the published -4.30; the
    # learned mechanism sees thickness only through its log-whitened encoding
    assert _true_conditional_entropy() == pytest.approx(-4.2085, abs=0.005)
    p = TrueScmParams()
    d = generate_dataset(20_000, 13, "test", images=False)
    tg = np.linspace(0.5, 6.5, 1201)
    pt = stats.gamma.pdf(tg - p.t_offset, p.alpha, scale=1 / p.beta)
    u = (d.i[:, None] - p.i_low) / p.i_span
    eps = (special.logit(u) - p.t_gain * tg[None] - p.bias) / p.noise_gain
    dens = stats.norm.pdf(eps) / (p.i_span * p.noise_gain * u * (1 - u))
    marginal = integrate.trapezoid(dens * pt[None], tg, axis=1)
    assert np.mean(np.log(marginal)) == pytest.approx(-5.19, abs=0.05)


def test_association_report_on_true_scalars():
    test = generate_dataset(10_000, 0, "test", images=False)
    rep = association_report({"truth": true_scm(with_image=False)}, test)
    row = rep.row("truth")
    assert row.log_p_t == pytest.approx(-0.93, abs=0.05)
    assert row.log_p_i == pytest.approx(-4.2085, abs=0.03)
    assert abs(row.additivity_gap) <= 1e-9 and math.isnan(row.recon_mae)
    assert rep.to_csv().splitlines()[0].startswith("model,joint_bound,image_bound,log_p_t,log_p_i,recon_mae")


def test_oracle_interventional_samples_shift_thickness():
    base = oracle_interventional_samples(50_000, 0.0, seed=1)
    up = oracle_interventional_samples(50_000, 1.0, seed=1)
    assert np.allclose(up[:, 0] - base[:, 0], 1.0)
    assert up[:, 1].mean() > base[:, 1].mean()
    assert base[:, 0].mean() == pytest.approx(2.5, abs=0.01)


@pytest.mark.parametrize("delta", [1.0, -0.5])
def test_true_model_interventional_densities_agree(delta):
    cmp = interventional_comparison(true_scm(with_image=False), delta)
    assert cmp.ks_joint <= 0.05 and cmp.ks_i <= 0.025 and cmp.ks_t <= 0.025
    h_model, h_oracle = cmp.histograms()
    assert h_model.splitlines()[0] == h_oracle.splitlines()[0]


def test_noise_shift_surrogate_samples_shifted_mechanism():
    s = true_scm(with_image=False)
    shifted = s.do({"t": noise_shift(s, "t", 1.0)})
    a = s.ancestral_sample(1000, np.random.default_rng(0))["t"]
    b = shifted.ancestral_sample(1000, np.random.default_rng(0))["t"]
    assert np.allclose(b, a + 1.0)


def test_true_scm_counterfactual_benchmark():
    test = generate_dataset(200, 0, "test")
    out = counterfactual_mae_benchmark({"truth": true_scm()}, test, S=1)
    assert out["truth"] <= 0.5
    null = counterfactual_mae_benchmark({"truth": true_scm()}, test, delta=0.0, S=1)
    assert null["truth"] == 0.0


def test_true_scm_fidelity_is_exact():
    fid = covariate_fidelity(true_scm(), FIDELITY_TARGETS, samples_per_target=2)
    assert fid.thickness_slope == pytest.approx(1.0, abs=0.02)
    assert fid.intensity_slope == pytest.approx(1.0, abs=0.01)
    assert fid.thickness_rms <= 0.1 and fid.intensity_rms <= 1.0
    assert fid.to_csv().splitlines()[0] == "target_t,target_i,measured_t,measured_i"


# -- trained models ----------------------------------------------------------------


@pytest.fixture(scope="module")
def report(trained):
    return association_report(trained.models, trained.test.subset(np.arange(2000)))


@pytest.mark.slow
def test_report_likelihood_columns(report):
    assert report.row("full").log_p_t == pytest.approx(-0.93, abs=0.05)
    assert report.row("full").log_p_i == pytest.approx(-4.30, abs=0.10)
    assert report.row("independent").log_p_t == pytest.approx(report.row("conditional").log_p_t, abs=0.02)
    for name in ("independent", "conditional"):
        assert report.row(name).log_p_i == pytest.approx(-5.19, abs=0.10)


@pytest.mark.slow
def test_report_additivity(report):
    for row in report.rows:
        assert abs(row.additivity_gap) <= 3 * math.sqrt(2) * row.joint_se
    assert [r.model for r in report.rows] == ["independent", "conditional", "full"]


@pytest.fixture(scope="module")
def fidelity(trained):
    return {k: covariate_fidelity(m, FIDELITY_TARGETS, samples_per_target=32) for k, m in trained.models.items()}


@pytest.mark.slow
def test_independent_model_ignores_targets(fidelity):
    f = fidelity["independent"]
    assert abs(f.thickness_r) <= 0.1 and abs(f.intensity_r) <= 0.1


@pytest.mark.slow
def test_conditioned_models_comparable(fidelity):
    full, cond = fidelity["full"], fidelity["conditional"]
    for attr in ("thickness_rms", "intensity_rms"):
        a, b = getattr(full, attr), getattr(cond, attr)
        assert max(a, b) <= 2 * min(a, b)


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="prior samples from the CPU-budget image decoder are faint: the aggregate posterior is about 1.5x wider "
    "than the prior and even posterior reconstructions track thickness with slope 0.8",
)
def test_full_model_thickness_slope(fidelity):
    assert fidelity["full"].thickness_slope == pytest.approx(1.0, abs=0.15)


@pytest.mark.slow
def test_null_benchmark_is_zero_for_trained_models(trained, cf_records):
    out = counterfactual_mae_benchmark(trained.models, cf_records.subset(np.arange(200)), delta=0.0, S=2)
    assert out == {k: 0.0 for k in trained.models}
