"""Synthetic (thickness, intensity, image) data with a known causal generator.

Thickness and intensity follow the ground-truth assignments in
:class:`TrueScmParams`. Images are anti-aliased straight strokes of length
20 px on a 28×28 canvas. Pixel values are the exact area coverage of the
stroke rectangle times a foreground level, so thickness and intensity are
recoverable from the image and counterfactual images can be re-rendered
exactly from the stored identity and noise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .distributions import Gamma, make_rng
from .mechanisms import ExactPosterior, InvertibleMechanism, Mechanism
from .scm import Node, Scm
from .transforms import Affine, Composition, ConditionalAffine, Sigmoid

__all__ = [
    "TrueScmParams",
    "StrokeIdentity",
    "SyntheticRecord",
    "SyntheticDataset",
    "RenderMechanism",
    "generate_dataset",
    "generate_splits",
    "render",
    "render_batch",
    "measure_thickness",
    "measure_intensity",
    "estimate_identity",
    "reference_counterfactual",
    "true_scm",
    "save_images",
    "load_images",
]

HEIGHT = WIDTH = 28
STROKE_LENGTH = 20.0
N_CLASSES = 10
MAX_OFFSET = 2.0
T_RANGE = (0.5, 8.0)
I_RANGE = (64.0, 255.0)
MASK_THRESHOLD = 0.5
BLOCK = 1000
CSV_HEADER = ["index", "t", "i", "eps_t", "eps_i", "shape_class", "offset_x", "offset_y"]
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class TrueScmParams:
    alpha: float = 10.0
    beta: float = 5.0
    t_offset: float = 0.5
    i_low: float = 64.0
    i_span: float = 191.0
    noise_gain: float = 0.5
    t_gain: float = 2.0
    bias: float = -5.0

    def thickness(self, eps_t):
        return self.t_offset + np.asarray(eps_t, dtype=float)

    def intensity(self, t, eps_i):
        z = self.noise_gain * np.asarray(eps_i, dtype=float) + self.t_gain * np.asarray(t, dtype=float) + self.bias
        return self.i_span * special.expit(z) + self.i_low

    def eps_t_of(self, t):
        return np.asarray(t, dtype=float) - self.t_offset

    def eps_i_of(self, i, t):
        u = (np.asarray(i, dtype=float) - self.i_low) / self.i_span
        return (special.logit(u) - self.t_gain * np.asarray(t, dtype=float) - self.bias) / self.noise_gain


@dataclass(frozen=True)
class StrokeIdentity:
    """Stroke pose: one of ten angles plus a centre offset. ``seed`` records provenance."""

    shape_class: int
    offset_x: float = 0.0
    offset_y: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.shape_class) < N_CLASSES:
            raise ValueError(f"shape_class must lie in [0, {N_CLASSES}), got {self.shape_class}")
        if max(abs(self.offset_x), abs(self.offset_y)) > MAX_OFFSET:
            raise ValueError(f"offsets must lie within ±{MAX_OFFSET} px")

    @property
    def angle(self) -> float:
        return class_angle(self.shape_class)


def class_angle(shape_class):
    # quarter-step phase keeps every class off the pixel axes
    return (np.asarray(shape_class, dtype=float) + 0.25) * math.pi / N_CLASSES


# ---------------------------------------------------------------------------
# rendering


def _projected_cdf(x, p, q):
    """CDF of a uniform unit pixel projected onto a unit normal with |components| p >= q."""
    a = (p + q) / 2
    b = (p - q) / 2
    out = np.clip(0.5 + x / np.maximum(p, 1e-12), 0.0, 1.0)
    qq = np.maximum(p * q, 1e-300)
    lo = (x > -a) & (x < -b)
    hi = (x < a) & (x > b)
    sloped = q > 1e-9
    out = np.where(lo & sloped, (x + a) ** 2 / (2 * qq), out)
    out = np.where(hi & sloped, 1 - (a - x) ** 2 / (2 * qq), out)
    out = np.where(x <= -a, 0.0, out)
    out = np.where(x >= a, 1.0, out)
    return out


def _slab(d, half, theta):
    c, s = np.abs(np.cos(theta)), np.abs(np.sin(theta))
    p, q = np.maximum(c, s), np.minimum(c, s)
    return _projected_cdf(half - d, p, q) - _projected_cdf(-half - d, p, q)


def coverage(theta, t, ox, oy) -> np.ndarray:
    """Pixel area covered by the stroke rectangle, shape ``(N, 28, 28)``."""
    theta, t, ox, oy = (np.asarray(v, dtype=float).reshape(-1, 1, 1) for v in (theta, t, ox, oy))
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH] + 0.5
    dx = xx[None] - (WIDTH / 2 + ox)
    dy = yy[None] - (HEIGHT / 2 + oy)
    cos, sin = np.cos(theta), np.sin(theta)
    along = dx * cos + dy * sin
    perp = -dx * sin + dy * cos
    return _slab(perp, t / 2, theta + math.pi / 2) * _slab(along, STROKE_LENGTH / 2, theta)


def _masked_median(x: np.ndarray) -> np.ndarray:
    """Row-wise median of pixels above half the row maximum; ``x`` is ``(N, P)``."""
    peak = x.max(axis=1, keepdims=True)
    vals = np.where(x > MASK_THRESHOLD * peak, x, np.nan)
    return np.nanmedian(vals, axis=1)


def _check_ranges(t, i) -> None:
    t, i = np.asarray(t), np.asarray(i)
    if np.any(~np.isfinite(t)) or np.any(t < T_RANGE[0]) or np.any(t > T_RANGE[1]):
        raise ValueError(f"thickness must lie in [{T_RANGE[0]}, {T_RANGE[1]}] px")
    if np.any(~np.isfinite(i)) or np.any(i < I_RANGE[0]) or np.any(i > I_RANGE[1]):
        raise ValueError(f"intensity must lie in [{I_RANGE[0]}, {I_RANGE[1]}]")


def render_batch(shape_class, offset_x, offset_y, t, i) -> np.ndarray:
    """Render ``N`` strokes, returning ``(N, 28, 28)`` float64 images in [0, 255]."""
    t = np.asarray(t, dtype=float).reshape(-1)
    i = np.asarray(i, dtype=float).reshape(-1)
    _check_ranges(t, i)
    n = len(t)
    cov = coverage(class_angle(shape_class), t, offset_x, offset_y).reshape(n, -1)
    level = i / _masked_median(cov)
    img = np.minimum(level[:, None] * cov, 255.0)
    clipped = level * cov.max(axis=1) > 255.0
    if np.any(clipped):
        img[clipped] = _solve_clipped(cov[clipped], i[clipped], level[clipped])
    return img.reshape(n, HEIGHT, WIDTH)


def _solve_clipped(cov: np.ndarray, i: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Raise the foreground level of saturated strokes until the masked median is ``i``."""
    positive = np.where(cov > 0, cov, np.inf).min(axis=1)
    hi = np.maximum(255.0 / positive, lo * 1.0001)
    log_lo, log_hi = np.log(lo), np.log(hi)
    for _ in range(60):
        mid = 0.5 * (log_lo + log_hi)
        med = _masked_median(np.minimum(np.exp(mid)[:, None] * cov, 255.0))
        below = med < i
        log_lo = np.where(below, mid, log_lo)
        log_hi = np.where(below, log_hi, mid)
    return np.minimum(np.exp(log_hi)[:, None] * cov, 255.0)


def render(identity: StrokeIdentity, t: float, i: float) -> np.ndarray:
    return render_batch([identity.shape_class], [identity.offset_x], [identity.offset_y], [t], [i])[0]


# ---------------------------------------------------------------------------
# measurement


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2 and x.shape == (HEIGHT, WIDTH)
    flat = x.reshape(1 if single else len(x), -1)
    if np.any(flat.max(axis=1) <= 0):
        raise ValueError("image has an empty mask (no positive pixels)")
    return flat, single


def measure_intensity(x):
    """Median of pixels above half the image maximum; scalar for one image, array for a batch."""
    flat, single = _as_batch(x)
    out = _masked_median(flat)
    return float(out[0]) if single else out


def measure_thickness(x):
    """Coverage-weighted stroke area divided by the stroke length."""
    flat, single = _as_batch(x)
    out = flat.sum(axis=1) / (flat.max(axis=1) * STROKE_LENGTH)
    return float(out[0]) if single else out


def estimate_identity(x, t, i, iterations: int = 6) -> np.ndarray:
    """Recover ``(shape_class, offset_x, offset_y)`` from images with known ``t`` and ``i``.

    The angle and a first offset guess come from image moments; offsets are
    then refined by Gauss-Newton on the rendering residual.
    """
    flat, _ = _as_batch(x)
    n = len(flat)
    t = np.asarray(t, dtype=float).reshape(-1)
    i = np.asarray(i, dtype=float).reshape(-1)
    w = flat.reshape(n, HEIGHT, WIDTH)
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH] + 0.5
    mass = w.sum(axis=(1, 2))
    cx = (w * xx).sum(axis=(1, 2)) / mass
    cy = (w * yy).sum(axis=(1, 2)) / mass
    sxx = (w * (xx - cx[:, None, None]) ** 2).sum(axis=(1, 2))
    syy = (w * (yy - cy[:, None, None]) ** 2).sum(axis=(1, 2))
    sxy = (w * (xx - cx[:, None, None]) * (yy - cy[:, None, None])).sum(axis=(1, 2))
    theta = 0.5 * np.arctan2(2 * sxy, sxx - syy) % math.pi
    cls = np.rint(theta / (math.pi / N_CLASSES) - 0.25).astype(int) % N_CLASSES
    off = np.stack([cx - WIDTH / 2, cy - HEIGHT / 2], axis=1)
    h = 1e-4
    for _ in range(iterations):
        off = np.clip(off, -MAX_OFFSET, MAX_OFFSET)
        base = render_batch(cls, off[:, 0], off[:, 1], t, i).reshape(n, -1)
        r = base - flat
        jx = (render_batch(cls, off[:, 0] + h, off[:, 1], t, i).reshape(n, -1) - base) / h
        jy = (render_batch(cls, off[:, 0], off[:, 1] + h, t, i).reshape(n, -1) - base) / h
        a11, a12, a22 = (jx * jx).sum(1), (jx * jy).sum(1), (jy * jy).sum(1)
        b1, b2 = (jx * r).sum(1), (jy * r).sum(1)
        det = a11 * a22 - a12 * a12
        ok = det > 1e-12
        det = np.where(ok, det, 1.0)
        step = np.stack([(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det], axis=1)
        off = off - np.where(ok[:, None], step, 0.0)
    off = np.clip(off, -MAX_OFFSET, MAX_OFFSET)
    return np.column_stack([cls.astype(float), off])


# ---------------------------------------------------------------------------
# records and datasets


@dataclass
class SyntheticRecord:
    t: float
    i: float
    x: np.ndarray
    identity: StrokeIdentity
    eps_t: float
    eps_i: float


@dataclass
class SyntheticDataset:
    """Column-oriented batch of records; images are stored as float32."""

    t: np.ndarray
    i: np.ndarray
    eps_t: np.ndarray
    eps_i: np.ndarray
    shape_class: np.ndarray
    offset_x: np.ndarray
    offset_y: np.ndarray
    images: np.ndarray
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.t)
        if self.index is None:
            self.index = np.arange(n)
        for name in ("i", "eps_t", "eps_i", "shape_class", "offset_x", "offset_y", "images", "index"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> SyntheticRecord:
        ident = StrokeIdentity(int(self.shape_class[k]), float(self.offset_x[k]), float(self.offset_y[k]), int(self.index[k]))
        return SyntheticRecord(
            float(self.t[k]), float(self.i[k]), self.images[k].astype(float), ident, float(self.eps_t[k]), float(self.eps_i[k])
        )

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(**{k: getattr(self, k)[idx] for k in _COLUMNS}, images=self.images[idx], index=self.index[idx])

    def observation(self) -> dict[str, np.ndarray]:
        """Node values for an SCM over ``t``, ``i`` and the flattened image ``x``."""
        n = len(self)
        return {"t": self.t[:, None].astype(float), "i": self.i[:, None].astype(float), "x": self.images.reshape(n, -1).astype(float)}

    def identities(self) -> np.ndarray:
        return np.column_stack([self.shape_class.astype(float), self.offset_x, self.offset_y])

    # io -------------------------------------------------------------------
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "covariates.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for k in range(len(self)):
                w.writerow(
                    [
                        int(self.index[k]),
                        repr(float(self.t[k])),
                        repr(float(self.i[k])),
                        repr(float(self.eps_t[k])),
                        repr(float(self.eps_i[k])),
                        int(self.shape_class[k]),
                        repr(float(self.offset_x[k])),
                        repr(float(self.offset_y[k])),
                    ]
                )
        save_images(d, self.images)

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        d = Path(directory)
        path = d / "covariates.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = [r for r in reader if r]
        cols = list(zip(*rows)) if rows else [[] for _ in CSV_HEADER]
        data = {name: np.asarray(col, dtype=float) for name, col in zip(CSV_HEADER, cols)}
        images = load_images(d)
        if len(images) != len(rows):
            raise ValueError(f"{d}: {len(rows)} covariate rows but {len(images)} images")
        return cls(
            t=data["t"],
            i=data["i"],
            eps_t=data["eps_t"],
            eps_i=data["eps_i"],
            shape_class=data["shape_class"].astype(int),
            offset_x=data["offset_x"],
            offset_y=data["offset_y"],
            images=images,
            index=data["index"].astype(int),
        )


_COLUMNS = ("t", "i", "eps_t", "eps_i", "shape_class", "offset_x", "offset_y")


def save_images(directory, images: np.ndarray) -> None:
    d = Path(directory)
    images = np.asarray(images, dtype="<f4")
    images.tofile(d / "images.bin")
    header = {"count": int(len(images)), "height": HEIGHT, "width": WIDTH, "mask_threshold": MASK_THRESHOLD}
    (d / "images.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")


def load_images(directory) -> np.ndarray:
    d = Path(directory)
    header = json.loads((d / "images.json").read_text(encoding="utf-8"))
    raw = np.fromfile(d / "images.bin", dtype="<f4")
    shape = (int(header["count"]), int(header["height"]), int(header["width"]))
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{d / 'images.bin'} holds {raw.size} floats, header declares {shape}")
    return raw.reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# generation


def _generate_block(seed: int, split: int, block: int, n: int, params: TrueScmParams):
    rng = make_rng([seed, split, block])
    gamma = Gamma(params.alpha, params.beta)
    eps_t = gamma.sample(rng, n)[:, 0]
    # rejection keeps every stroke renderable; the excluded tail has mass below 1e-9
    while np.any(params.thickness(eps_t) > T_RANGE[1]):
        bad = params.thickness(eps_t) > T_RANGE[1]
        eps_t[bad] = gamma.sample(rng, int(bad.sum()))[:, 0]
    eps_i = rng.standard_normal(n)
    cls = rng.integers(0, N_CLASSES, size=n)
    off = rng.uniform(-MAX_OFFSET, MAX_OFFSET, size=(n, 2))
    return eps_t, eps_i, cls, off


def generate_dataset(n: int, seed: int = 0, split: int | str = 0, params: TrueScmParams | None = None, images: bool = True) -> SyntheticDataset:
    """Draw ``n`` i.i.d. records.

    Records come in blocks of 1000 with seeds derived from ``(seed, split,
    block)``, so a shorter dataset is a prefix of a longer one.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or TrueScmParams()
    split = SPLITS[split] if isinstance(split, str) else int(split)
    # whole blocks are always drawn, then cut, so the random streams do not depend on n
    parts = [tuple(c[: min(BLOCK, n - b * BLOCK)] for c in _generate_block(seed, split, b, BLOCK, params)) for b in range(math.ceil(n / BLOCK))]
    eps_t, eps_i, cls = (np.concatenate([p[k] for p in parts]) for k in range(3))
    off = np.concatenate([p[3] for p in parts])
    t = params.thickness(eps_t)
    i = params.intensity(t, eps_i)
    if images:
        img = np.concatenate(
            [render_batch(cls[s : s + BLOCK], off[s : s + BLOCK, 0], off[s : s + BLOCK, 1], t[s : s + BLOCK], i[s : s + BLOCK]) for s in range(0, n, BLOCK)]
        ).astype(np.float32)
    else:
        img = np.zeros((n, HEIGHT, WIDTH), dtype=np.float32)
    return SyntheticDataset(t, i, eps_t, eps_i, cls, off[:, 0], off[:, 1], img)


def generate_splits(n_train: int, n_val: int, n_test: int, seed: int = 0, params: TrueScmParams | None = None) -> dict[str, SyntheticDataset]:
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    return {name: generate_dataset(size, seed, name, params) for name, size in sizes.items()}


def reference_counterfactual(ds: SyntheticDataset, t_new=None, i_new=None, params: TrueScmParams | None = None) -> SyntheticDataset:
    """Ground-truth counterfactual records under ``do(t := t_new)`` or ``do(i := i_new)``.

    Intervening on ``t`` recomputes ``i`` from the stored intensity noise.
    """
    if (t_new is None) == (i_new is None):
        raise ValueError("give exactly one of t_new or i_new")
    params = params or TrueScmParams()
    n = len(ds)
    if t_new is not None:
        t = np.broadcast_to(np.asarray(t_new, dtype=float).reshape(-1), (n,)).copy()
        i = params.intensity(t, ds.eps_i)
        eps_t = params.eps_t_of(t)
    else:
        t = ds.t.copy()
        i = np.broadcast_to(np.asarray(i_new, dtype=float).reshape(-1), (n,)).copy()
        eps_t = ds.eps_t.copy()
    _check_ranges(t, i)
    img = render_batch(ds.shape_class, ds.offset_x, ds.offset_y, t, i).astype(np.float32)
    return SyntheticDataset(t, i, eps_t, ds.eps_i.copy(), ds.shape_class.copy(), ds.offset_x.copy(), ds.offset_y.copy(), img, ds.index.copy())


# ---------------------------------------------------------------------------
# the generator as an SCM


class RenderMechanism(Mechanism):
    """Image node of the true generator; its noise is the stroke identity."""

    kind = "render"

    def __init__(self):
        super().__init__(2)
        self.dim = HEIGHT * WIDTH

    def sample_noise(self, rng, n):
        cls = rng.integers(0, N_CLASSES, size=n)
        off = rng.uniform(-MAX_OFFSET, MAX_OFFSET, size=(n, 2))
        return np.column_stack([cls.astype(float), off])

    def sample(self, noise, parents=None):
        t, i = (np.asarray(p, dtype=float).reshape(-1) for p in parents)
        noise = np.asarray(noise)
        return render_batch(noise[:, 0].astype(int), noise[:, 1], noise[:, 2], t, i).reshape(len(t), -1)

    def log_prob(self, x, parents=None):
        raise NotImplementedError("the renderer is deterministic given its identity and has no image density")

    def abduct(self, x, parents=None, rng=None, S: int = 1):
        t, i = parents
        return ExactPosterior(estimate_identity(x, t, i))

    def replay(self, posterior, parents=None, *, observed_parents=None):
        return self.sample(posterior.eps, parents)


def true_scm(params: TrueScmParams | None = None, with_image: bool = True) -> Scm:
    """The data-generating process as an :class:`~dscm.scm.Scm` with invertible scalar nodes."""
    p = params or TrueScmParams()
    t_mech = InvertibleMechanism(Affine(1.0, p.t_offset, learnable=False), noise=Gamma(p.alpha, p.beta))
    i_core = ConditionalAffine(None, dim=1, fixed_log_scale=math.log(p.noise_gain))
    i_mech = InvertibleMechanism(
        i_core,
        constraint=Composition([Sigmoid(), Affine(p.i_span, p.i_low, learnable=False)]),
        parent_encoders=[lambda t: p.t_gain * np.asarray(t, dtype=float) + p.bias],
    )
    nodes = [Node("t", (), t_mech), Node("i", ("t",), i_mech)]
    if with_image:
        nodes.append(Node("x", ("t", "i"), RenderMechanism()))
    return Scm(nodes)

