import math

import numpy as np
import pytest
from scipy import stats

from dscm.config import build_scm, bundled_config
from dscm.evalsuite import tv_distance
from dscm.mechanisms import GumbelMechanism, InvertibleMechanism, ShiftedMechanism
from dscm.nn import MLP
from dscm.scm import CycleError, Node, Scm, Surrogate
from dscm.synthdata import TrueScmParams, generate_dataset, true_scm
from dscm.transforms import Affine, ConditionalAffine


# two-sample KS critical coefficient at the 0.1% level
KS_999 = 1.95


def normal_root(scale: float = 1.0, shift: float = 0.0) -> InvertibleMechanism:
    return InvertibleMechanism(Affine(scale, shift))


def linear_child(n_parents: int = 1, rng=None) -> InvertibleMechanism:
    rng = rng or np.random.default_rng(0)
    return InvertibleMechanism(ConditionalAffine(MLP([n_parents, 2], rng)), parent_encoders=n_parents)


def oracle_i(t, i, t_new, p: TrueScmParams = TrueScmParams()):
    return p.intensity(t_new, p.eps_i_of(i, t))


@pytest.fixture(scope="module")
def truth() -> Scm:
    return true_scm(with_image=False)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(2000, 3, "test", images=False)


# -- validation --------------------------------------------------------------


def test_single_root_is_valid():
    s = Scm([Node("a", (), normal_root())])
    assert s.order == ["a"]


def test_cycle_reported_with_path():
    with pytest.raises(CycleError, match="a -> b -> a|b -> a -> b"):
        Scm([Node("a", ("b",), linear_child()), Node("b", ("a",), linear_child())])


def test_dangling_parent_rejected():
    with pytest.raises(ValueError, match="unknown parent 'z'"):
        Scm([Node("a", ("z",), linear_child())])


def test_full_graph_order():
    s = build_scm(bundled_config("full"))
    assert s.order == ["t", "i", "x"]
    assert s.descendants(["t"]) == {"i", "x"} and s.children("i") == ["x"]


# -- sampling and likelihood -------------------------------------------------------


def test_root_only_graph_samples_iid_from_mechanism():
    s = Scm([Node("a", (), normal_root(2.0, 1.0))])
    a = s.ancestral_sample(100_000, np.random.default_rng(0))["a"]
    assert a.shape == (100_000, 1)
    assert stats.kstest(a[:, 0], stats.norm(1.0, 2.0).cdf).pvalue > 1e-3


def test_sampling_is_seeded(truth):
    a = truth.ancestral_sample(50, np.random.default_rng(4))
    b = truth.ancestral_sample(50, np.random.default_rng(4))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_true_scm_samples_match_generator(truth):
    s = truth.ancestral_sample(20_000, np.random.default_rng(1))
    d = generate_dataset(20_000, 1, "train", images=False)
    assert np.corrcoef(s["t"][:, 0], s["i"][:, 0])[0, 1] == pytest.approx(np.corrcoef(d.t, d.i)[0, 1], abs=0.05)


def test_additive_joint_objective():
    s = Scm([Node("a", (), normal_root()), Node("b", (), normal_root())])
    assert s.joint_objective({"a": [[0.0]], "b": [[0.0]]}).item() == pytest.approx(2 * -0.918939, abs=1e-6)


def test_missing_node_named(truth):
    with pytest.raises(ValueError, match="missing nodes: i"):
        truth.joint_objective({"t": [[2.0]]})


def test_loss_decreases_early_in_training():
    from dscm.numerics import Adam

    rng = np.random.default_rng(2)
    s = Scm([Node("a", (), normal_root()), Node("b", ("a",), linear_child(1, rng))])
    a = rng.normal(1.0, 2.0, size=(256, 1))
    batch = {"a": a, "b": 0.5 * a + rng.normal(scale=0.3, size=(256, 1))}
    opt = Adam({"flow": (s.parameters(), 1e-3)})
    losses = []
    for _ in range(30):
        loss = -s.joint_objective(batch)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert np.all(np.diff(losses) < 0)


# -- interventions --------------------------------------------------------------------


def test_atomic_intervention(truth):
    cf = truth.do({"t": 3.0})
    draw = cf.ancestral_sample(5000, np.random.default_rng(0))
    assert np.all(draw["t"] == 3.0)
    assert draw["i"].mean() > truth.ancestral_sample(5000, np.random.default_rng(0))["i"].mean()
    assert cf.nodes["t"].parents == () and cf.intervened == {"t"}
    assert truth.intervened == frozenset() and truth.mechanism("t") is not cf.mechanism("t")


def test_unknown_target_rejected(truth):
    with pytest.raises(KeyError, match="unknown node 'q'"):
        truth.do({"q": 1.0})


def test_surrogate_arity_checked(truth):
    with pytest.raises(ValueError, match="parents"):
        truth.do({"i": Surrogate(normal_root(), parents=("t",))})


def test_sink_intervention_leaves_other_marginals(truth):
    n = 20_000
    a = truth.ancestral_sample(n, np.random.default_rng(3))["t"][:, 0]
    b = truth.do({"i": 100.0}).ancestral_sample(n, np.random.default_rng(4))["t"][:, 0]
    assert stats.ks_2samp(a, b).statistic <= KS_999 * math.sqrt(2 / n)


def test_do_on_child_keeps_parent_distribution(truth):
    n = 20_000
    ref = truth.ancestral_sample(n, np.random.default_rng(5))["t"][:, 0]
    for c in (80.0, 160.0, 240.0):
        t = truth.do({"i": c}).ancestral_sample(n, np.random.default_rng(6))["t"][:, 0]
        assert stats.ks_2samp(ref, t).statistic <= KS_999 * math.sqrt(2 / n)


# -- abduction and counterfactuals -------------------------------------------------


def test_abducted_thickness_noise(truth, data):
    post = truth.abduct(data.observation())
    assert np.allclose(post["t"].eps[:, 0], data.t - 0.5)


def test_abducted_intensity_noise_is_standard_normal(truth):
    d = generate_dataset(100_000, 9, "train", images=False)
    eps = truth.abduct({"t": d.t, "i": d.i})["i"].eps[:, 0]
    assert stats.kstest(eps, "norm").statistic <= 0.01
    assert np.allclose(eps, d.eps_i, atol=1e-6)


def test_null_counterfactual_is_identity(truth, data):
    obs = data.observation()
    cf = truth.counterfactual(obs, {}, np.random.default_rng(0), S=3)
    for k in ("t", "i"):
        assert all(np.array_equal(draw, obs[k]) for draw in cf.samples[k])
        assert np.allclose(cf.mean[k], obs[k], rtol=1e-15, atol=0)


def test_factorised_abduction(truth, data):
    obs = data.observation()
    joint = truth.abduct(obs)
    for name in truth.order:
        alone = truth.abduct(obs, nodes=[name])[name]
        assert np.array_equal(alone.eps, joint[name].eps)


def test_scalar_counterfactual_matches_closed_form(truth):
    obs = {"t": np.array([[2.0]]), "i": np.array([[150.0]])}
    cf = truth.counterfactual(obs, {"t": 3.0})
    assert cf.mean["t"].item() == 3.0
    assert cf.mean["i"].item() == pytest.approx(oracle_i(2.0, 150.0, 3.0), abs=1e-9)


def test_counterfactual_of_counterfactual_returns_original(truth, data):
    obs = data.observation()
    t_new = obs["t"] + np.random.default_rng(1).uniform(-0.4, 2.0, size=obs["t"].shape)
    cf = truth.counterfactual(obs, {"t": t_new})
    back = truth.counterfactual({k: v for k, v in cf.mean.items()}, {"t": obs["t"]})
    ok = np.isfinite(back.mean["i"][:, 0]) & (cf.mean["i"][:, 0] < 254.9)
    assert ok.mean() > 0.95
    assert np.abs(back.mean["i"][ok] - obs["i"][ok]).max() <= 1e-6


def test_non_descendants_unchanged():
    rng = np.random.default_rng(3)
    s = Scm(
        [
            Node("a", (), normal_root()),
            Node("b", ("a",), linear_child(1, rng)),
            Node("c", (), normal_root(2.0)),
            Node("d", ("b", "c"), linear_child(2, rng)),
        ]
    )
    obs = s.ancestral_sample(100, rng)
    cf = s.counterfactual(obs, {"b": obs["b"] + 1.0}, rng, S=2)
    for k in ("a", "c"):
        assert np.array_equal(cf.samples[k][0], obs[k]) and np.array_equal(cf.samples[k][1], obs[k])
    assert not np.allclose(cf.mean["d"], obs["d"])


def test_noise_shift_surrogate(truth, data):
    obs = data.observation()
    shifted = Surrogate(ShiftedMechanism(truth.mechanism("t"), 1.0))
    cf = truth.counterfactual(obs, {"t": shifted})
    assert np.allclose(cf.mean["t"], obs["t"] + 1.0)
    assert np.allclose(cf.mean["i"][:, 0], oracle_i(obs["t"][:, 0], obs["i"][:, 0], obs["t"][:, 0] + 1.0), atol=1e-8)


def test_discrete_node_counterfactual():
    rng = np.random.default_rng(8)
    s = Scm(
        [
            Node("a", (), normal_root()),
            Node("y", ("a",), GumbelMechanism(3, net=MLP([1, 3], rng), parent_encoders=1)),
            Node("b", ("y",), InvertibleMechanism(ConditionalAffine(MLP([3, 2], rng)), parent_encoders=[lambda v: np.eye(3)[v[:, 0].astype(int)]])),
        ]
    )
    obs = s.ancestral_sample(200, rng)
    null = s.counterfactual(obs, {}, rng, S=4)
    assert np.array_equal(null.mean["y"], obs["y"])
    cf = s.counterfactual(obs, {"a": obs["a"] + 3.0}, rng, S=4)
    assert cf.samples["y"].shape == (4, 200, 1)
    assert set(np.unique(cf.samples["y"])) <= {0.0, 1.0, 2.0}


# -- conditioning versus intervening ---------------------------------------------------


def test_conditioning_differs_from_intervening(truth):
    grid = (0.5, 8.0)
    p_t = truth.posterior_grid_1d("t", grid=grid)
    assert p_t.integral() == pytest.approx(1.0, abs=1e-6)
    high = truth.posterior_grid_1d("t", {"i": 245.0}, grid=grid)
    assert np.sum(high.grid * high.density) > np.sum(p_t.grid * p_t.density)
    do_i = truth.do({"i": 245.0}).posterior_grid_1d("t", {"i": 245.0}, grid=grid)
    assert tv_distance(p_t.grid, p_t.density, do_i.density) <= 0.02
    assert tv_distance(p_t.grid, p_t.density, high.density) >= 0.1


def test_intervening_on_cause_equals_conditioning(truth):
    grid = (64.0, 255.0)
    cond = truth.posterior_grid_1d("i", {"t": 3.0}, grid=grid)
    do_t = truth.do({"t": 3.0}).posterior_grid_1d("i", grid=grid)
    assert tv_distance(cond.grid, cond.density, do_t.density) <= 0.02


def test_grid_rejects_image_nodes():
    s = build_scm(bundled_config("full"))
    with pytest.raises(ValueError, match="amortised"):
        s.posterior_grid_1d("t", {"x": np.zeros((1, 784))})
