"""Metrics and reports for trained models on synthetic data."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy import stats

from .mechanisms import AmortisedMechanism, ShiftedMechanism
from .scm import Scm, Surrogate
from .synthdata import (
    I_RANGE,
    T_RANGE,
    SyntheticDataset,
    TrueScmParams,
    measure_intensity,
    measure_thickness,
    reference_counterfactual,
)

__all__ = [
    "mae",
    "ks_distance",
    "tv_distance",
    "histogram2d",
    "histogram_csv",
    "AssociationRow",
    "AssociationReport",
    "association_report",
    "DensityComparison",
    "interventional_comparison",
    "oracle_interventional_samples",
    "noise_shift",
    "covariate_fidelity",
    "FidelitySummary",
    "counterfactual_mae_benchmark",
]


def mae(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _directions(dim: int, n: int, seed: int) -> np.ndarray:
    d = np.random.default_rng(seed).standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ks_distance(a, b, projections: int = 16, seed: int = 0) -> float:
    """Two-sample KS statistic; multivariate samples are averaged over random 1-D projections.

    Multivariate inputs are standardised with the pooled mean and spread
    first so that no coordinate dominates the projections.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_distance needs nonempty samples")
    if a.ndim == 1 or (a.ndim == 2 and a.shape[1] == 1):
        return float(stats.ks_2samp(a.reshape(-1), b.reshape(-1)).statistic)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    pooled = np.concatenate([a, b])
    mu, sd = pooled.mean(0), pooled.std(0)
    sd = np.where(sd > 0, sd, 1.0)
    a, b = (a - mu) / sd, (b - mu) / sd
    dirs = _directions(a.shape[1], projections, seed)
    return float(np.mean([stats.ks_2samp(a @ d, b @ d).statistic for d in dirs]))


def tv_distance(grid, p, q) -> float:
    """Total variation between two densities tabulated on the same grid."""
    return float(0.5 * np.trapezoid(np.abs(np.asarray(p) - np.asarray(q)), np.asarray(grid)))


def histogram2d(samples, bins: int = 64, ranges=None):
    samples = np.asarray(samples, dtype=float)
    if ranges is None:
        ranges = [(samples[:, k].min(), samples[:, k].max()) for k in range(2)]
    counts, ex, ey = np.histogram2d(samples[:, 0], samples[:, 1], bins=bins, range=ranges)
    return counts, ex, ey


def histogram_csv(samples, names=("t", "i"), bins: int = 64, ranges=None) -> str:
    """Long-format 2-D histogram: one row per bin with its edges and count."""
    counts, ex, ey = histogram2d(samples, bins, ranges)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    a, b = names
    w.writerow([f"{a}_low", f"{a}_high", f"{b}_low", f"{b}_high", "count"])
    for j in range(len(ex) - 1):
        for k in range(len(ey) - 1):
            w.writerow([repr(float(ex[j])), repr(float(ex[j + 1])), repr(float(ey[k])), repr(float(ey[k + 1])), int(counts[j, k])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# associative metrics


@dataclass
class AssociationRow:
    model: str
    joint_bound: float
    image_bound: float
    log_p_t: float
    log_p_i: float
    recon_mae: float
    joint_se: float = 0.0

    @property
    def additivity_gap(self) -> float:
        return self.joint_bound - (self.image_bound + self.log_p_t + self.log_p_i)


@dataclass
class AssociationReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "joint_bound", "image_bound", "log_p_t", "log_p_i", "recon_mae", "additivity_gap", "joint_se"])
        for r in self.rows:
            d = asdict(r)
            w.writerow([r.model] + [f"{d[k]:.6f}" for k in ("joint_bound", "image_bound", "log_p_t", "log_p_i", "recon_mae")] + [f"{r.additivity_gap:.6f}", f"{r.joint_se:.6f}"])
        return buf.getvalue()

    def row(self, model: str) -> AssociationRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


def association_report(
    models: Mapping[str, Scm],
    test: SyntheticDataset,
    seed: int = 0,
    particles: int = 4,
    recon_samples: int = 32,
    batch: int = 500,
    image_node: str = "x",
) -> AssociationReport:
    """Per-model average test log-densities and image bounds, plus reconstruction MAE."""
    report = AssociationReport()
    obs = test.observation()
    n = len(test)
    for name, scm in models.items():
        terms: dict[str, list] = {}
        joint = []
        recon = []
        rng_terms = np.random.default_rng([seed, 0])
        rng_joint = np.random.default_rng([seed, 1])
        rng_rec = np.random.default_rng([seed, 2])
        for s in range(0, n, batch):
            part = {k: v[s : s + batch] for k, v in obs.items()}
            nt = scm.node_objectives(part, rng_terms, particles)
            for k, v in nt.items():
                terms.setdefault(k, []).append(v.data)
            # an independent draw of the full joint bound checks additivity
            jt = scm.node_objectives(part, rng_joint, particles)
            joint.append(sum(v.data for v in jt.values()))
            mech = scm.nodes[image_node].mechanism if image_node in scm.nodes else None
            if isinstance(mech, AmortisedMechanism):
                parents = [part[p] for p in scm.nodes[image_node].parents] or None
                rec = mech.reconstruct(part[image_node], parents, rng_rec, recon_samples)
                recon.append(np.abs(rec - part[image_node]).mean(axis=1))
        joint_all = np.concatenate(joint)
        means = {k: float(np.mean(np.concatenate(v))) for k, v in terms.items()}
        report.rows.append(
            AssociationRow(
                model=name,
                joint_bound=float(joint_all.mean()),
                image_bound=means.get(image_node, 0.0),
                log_p_t=means.get("t", 0.0),
                log_p_i=means.get("i", 0.0),
                recon_mae=float(np.mean(np.concatenate(recon))) if recon else float("nan"),
                joint_se=float(joint_all.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
            )
        )
    return report


# ---------------------------------------------------------------------------
# interventional densities


def noise_shift(scm: Scm, node: str, delta: float) -> Surrogate:
    """Surrogate ``node := f(eps) + delta`` reusing the node's learned mechanism."""
    return Surrogate(ShiftedMechanism(scm.mechanism(node), delta))


def oracle_interventional_samples(n: int, delta: float, seed: int = 0, params: TrueScmParams | None = None) -> np.ndarray:
    """``(t, i)`` samples of the true generator under ``do(t := f_T(eps_T) + delta)``."""
    p = params or TrueScmParams()
    rng = np.random.default_rng([seed, 17])
    eps_t = rng.standard_gamma(p.alpha, size=n) / p.beta
    t = p.thickness(eps_t) + delta
    i = p.intensity(t, rng.standard_normal(n))
    return np.column_stack([t, i])


@dataclass
class DensityComparison:
    model_samples: np.ndarray
    oracle_samples: np.ndarray
    ks_joint: float
    ks_i: float
    ks_t: float

    def histograms(self, bins: int = 64) -> tuple[str, str]:
        both = np.concatenate([self.model_samples, self.oracle_samples])
        ranges = [(both[:, k].min(), both[:, k].max()) for k in range(2)]
        return histogram_csv(self.model_samples, bins=bins, ranges=ranges), histogram_csv(self.oracle_samples, bins=bins, ranges=ranges)


def interventional_comparison(scm: Scm, delta: float, n: int = 10_000, seed: int = 0, nodes=("t", "i")) -> DensityComparison:
    """Compare model and generator ``(t, i)`` samples under the same noise-shift intervention."""
    scalar = scm
    keep = set(nodes)
    # the image node plays no part in the scalar joint; sampling it would only cost time
    if all(set(scm.nodes[k].parents) <= keep for k in keep):
        scalar = Scm([scm.nodes[k] for k in scm.nodes if k in keep])
    model = scalar.do({nodes[0]: noise_shift(scalar, nodes[0], delta)})
    s = model.ancestral_sample(n, np.random.default_rng([seed, 3]))
    ms = np.column_stack([s[nodes[0]][:, 0], s[nodes[1]][:, 0]])
    os_ = oracle_interventional_samples(n, delta, seed)
    return DensityComparison(ms, os_, ks_distance(ms, os_), ks_distance(ms[:, 1], os_[:, 1]), ks_distance(ms[:, 0], os_[:, 0]))


# ---------------------------------------------------------------------------
# image-level checks


@dataclass
class FidelitySummary:
    table: np.ndarray  # columns: target_t, target_i, measured_t, measured_i
    thickness_slope: float
    intensity_slope: float
    thickness_r: float
    intensity_r: float
    thickness_rms: float
    intensity_rms: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target_t", "target_i", "measured_t", "measured_i"])
        for row in self.table:
            w.writerow([f"{v:.6f}" for v in row])
        return buf.getvalue()


def covariate_fidelity(scm: Scm, targets, samples_per_target: int = 8, seed: int = 0, image_node: str = "x") -> FidelitySummary:
    """Sample images at fixed ``(t, i)`` and measure what was drawn."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng([seed, 5])
    rows = []
    for tt, ii in targets:
        model = scm.do({"t": tt, "i": ii})
        draw = model.ancestral_sample(samples_per_target, rng)[image_node]
        draw = np.clip(draw, 0.0, 255.0).reshape(samples_per_target, 28, 28)
        keep = draw.reshape(samples_per_target, -1).max(axis=1) > 0
        if not np.any(keep):
            continue
        for img in draw[keep]:
            rows.append([tt, ii, measure_thickness(img), measure_intensity(img)])
    table = np.asarray(rows)

    def fit(x, y):
        slope = float(np.polyfit(x, y, 1)[0]) if np.ptp(x) > 0 else float("nan")
        r = float(np.corrcoef(x, y)[0, 1]) if np.std(x) > 0 and np.std(y) > 0 else 0.0
        return slope, r, float(np.sqrt(np.mean((y - x) ** 2)))

    st, rt, et = fit(table[:, 0], table[:, 2])
    si, ri, ei = fit(table[:, 1], table[:, 3])
    return FidelitySummary(table, st, si, rt, ri, et, ei)


def counterfactual_mae_benchmark(
    models: Mapping[str, Scm],
    test: SyntheticDataset,
    delta: float = 2.0,
    S: int = 32,
    seed: int = 0,
    batch: int = 100,
    image_node: str = "x",
) -> dict[str, float]:
    """Per-model image MAE against the generator's counterfactual under ``do(t := t + delta)``.

    Records whose shifted thickness leaves the renderable range are skipped.
    """
    keep = np.where((test.t + delta >= T_RANGE[0]) & (test.t + delta <= T_RANGE[1]))[0]
    sub = test.subset(keep)
    ref = reference_counterfactual(sub, t_new=sub.t + delta)
    truth = ref.images.reshape(len(sub), -1).astype(float)
    obs = sub.observation()
    out = {}
    for name, scm in models.items():
        rng = np.random.default_rng([seed, 7])
        errs = []
        for s in range(0, len(sub), batch):
            part = {k: v[s : s + batch] for k, v in obs.items()}
            # a zero shift is the null intervention
            iv = {"t": part["t"] + delta} if delta != 0 else {}
            cf = scm.counterfactual(part, iv, rng, S)
            errs.append(np.abs(cf.mean[image_node] - truth[s : s + batch]).mean(axis=1))
        out[name] = float(np.mean(np.concatenate(errs))) if errs else float("nan")
    return out


def in_render_range(t, i) -> np.ndarray:
    t, i = np.asarray(t), np.asarray(i)
    return (t >= T_RANGE[0]) & (t <= T_RANGE[1]) & (i >= I_RANGE[0]) & (i <= I_RANGE[1])
