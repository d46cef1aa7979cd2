"""Conditional bijections with forward, inverse and log-abs-det-Jacobian.

Inputs are arrays whose last axis is the event axis; log-determinants are
summed over it. A transform is *conditional* when its parameters depend on
a context tensor; passing a context to an unconditional transform (or
omitting it for a conditional one) is an error.
"""

from __future__ import annotations

import numpy as np

from .nn import MLP
from .numerics import Tensor, as_tensor, softmax, where

__all__ = [
    "DomainError",
    "Transform",
    "Affine",
    "ConditionalAffine",
    "Exp",
    "Sigmoid",
    "LinearSpline",
    "Preprocessing",
    "Composition",
    "affine_normalisation_fit",
    "affine_normalisation",
]


class DomainError(ValueError):
    """Raised when an inverse is asked for a point outside the transform's image."""


def _event_sum(t: Tensor) -> Tensor:
    return t.sum(axis=-1) if t.ndim >= 2 else t


class Transform:
    conditional = False

    def forward(self, eps, context=None) -> Tensor:
        self._check_context(context)
        return self._forward(as_tensor(eps), _ctx(context))

    def inverse(self, x, context=None, strict: bool = True) -> Tensor:
        self._check_context(context)
        return self._inverse(as_tensor(x), _ctx(context), strict)

    def log_abs_det_jacobian(self, eps, context=None) -> Tensor:
        self._check_context(context)
        return self._ladj(as_tensor(eps), _ctx(context))

    def forward_and_log_det(self, eps, context=None) -> tuple[Tensor, Tensor]:
        eps = as_tensor(eps)
        return self.forward(eps, context), self.log_abs_det_jacobian(eps, context)

    def inverse_and_log_det(self, x, context=None, strict: bool = True) -> tuple[Tensor, Tensor]:
        """Return ``(eps, log|f'(eps)|)`` for ``eps = f^{-1}(x)``."""
        eps = self.inverse(x, context, strict)
        return eps, self.log_abs_det_jacobian(eps, context)

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def named_tensors(self) -> dict[str, Tensor]:
        return {}

    def _check_context(self, context) -> None:
        if self.conditional and context is None:
            raise ValueError(f"{type(self).__name__} is conditional and needs a context")
        if not self.conditional and context is not None:
            raise ValueError(f"{type(self).__name__} is unconditional; got a superfluous context")

    def _forward(self, eps, ctx):
        raise NotImplementedError

    def _inverse(self, x, ctx, strict):
        raise NotImplementedError

    def _ladj(self, eps, ctx):
        raise NotImplementedError


def _ctx(context):
    return None if context is None else as_tensor(context)


class Affine(Transform):
    """``x = exp(log_scale) * eps + shift``, learnable or fixed."""

    def __init__(self, scale=1.0, shift=0.0, learnable: bool = True):
        scale = np.asarray(scale, dtype=float)
        if np.any(scale <= 0):
            raise ValueError("Affine scale must be positive")
        self.log_scale = Tensor(np.log(scale), requires_grad=learnable)
        self.shift = Tensor(np.asarray(shift, dtype=float), requires_grad=learnable)

    def named_tensors(self):
        return {"log_scale": self.log_scale, "shift": self.shift}

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def _forward(self, eps, ctx):
        return eps * self.log_scale.exp() + self.shift

    def _inverse(self, x, ctx, strict):
        # divide rather than multiply by exp(-log_scale) so that range endpoints map exactly
        return (x - self.shift) / self.log_scale.exp()

    def _ladj(self, eps, ctx):
        return _event_sum(self.log_scale + eps * 0.0)


class ConditionalAffine(Transform):
    """Affine map whose raw log-scale and shift come from a context network.

    With ``net=None`` the context *is* the parameter vector. With
    ``fixed_log_scale`` set, only shifts are predicted (one per event dim).
    """

    conditional = True

    def __init__(self, net: MLP | None = None, dim: int = 1, fixed_log_scale: float | None = None):
        self.net = net
        self.dim = int(dim)
        self.fixed_log_scale = fixed_log_scale
        n_params = self.dim if fixed_log_scale is not None else 2 * self.dim
        if net is not None and net.n_out != n_params:
            raise ValueError(f"context network must output {n_params} values, outputs {net.n_out}")
        self.n_params = n_params

    def named_tensors(self):
        if self.net is None:
            return {}
        return {p.name: p for p in self.net.parameters()}

    def params(self, ctx: Tensor) -> tuple[Tensor, Tensor]:
        out = self.net(ctx) if self.net is not None else ctx
        if out.shape[-1] != self.n_params:
            raise ValueError(f"expected {self.n_params} affine parameters, got {out.shape[-1]}")
        if self.fixed_log_scale is not None:
            return Tensor(np.full(out.shape, self.fixed_log_scale)), out
        return out[:, : self.dim], out[:, self.dim :]

    def _forward(self, eps, ctx):
        log_scale, shift = self.params(ctx)
        return eps * log_scale.exp() + shift

    def _inverse(self, x, ctx, strict):
        log_scale, shift = self.params(ctx)
        return (x - shift) * (-log_scale).exp()

    def _ladj(self, eps, ctx):
        log_scale, _ = self.params(ctx)
        return _event_sum(log_scale + eps * 0.0)

    def forward_and_log_det(self, eps, context=None):
        self._check_context(context)
        log_scale, shift = self.params(as_tensor(context))
        eps = as_tensor(eps)
        return eps * log_scale.exp() + shift, _event_sum(log_scale + eps * 0.0)

    def inverse_and_log_det(self, x, context=None, strict=True):
        self._check_context(context)
        log_scale, shift = self.params(as_tensor(context))
        eps = (as_tensor(x) - shift) * (-log_scale).exp()
        return eps, _event_sum(log_scale + eps * 0.0)


class Exp(Transform):
    def _forward(self, eps, ctx):
        return eps.exp()

    def _inverse(self, x, ctx, strict):
        bad = ~(x.data > 0)
        if strict and np.any(bad):
            raise DomainError("Exp inverse needs strictly positive inputs")
        with np.errstate(invalid="ignore", divide="ignore"):
            return x.log()

    def _ladj(self, eps, ctx):
        return _event_sum(eps)


class Sigmoid(Transform):
    def _forward(self, eps, ctx):
        return eps.sigmoid()

    def _inverse(self, x, ctx, strict):
        bad = ~((x.data > 0) & (x.data < 1))
        if strict and np.any(bad):
            hit = x.data[bad]
            edge = "boundary" if np.any((hit == 0) | (hit == 1)) else "range"
            raise DomainError(f"Sigmoid inverse needs inputs in the open interval (0, 1) ({edge} violation)")
        with np.errstate(invalid="ignore", divide="ignore"):
            return x.log() - (1.0 - x).log()

    def _ladj(self, eps, ctx):
        return _event_sum(eps.log_sigmoid() + (-eps).log_sigmoid())


class LinearSpline(Transform):
    """Monotone piecewise-linear spline on ``[-bound, bound]`` with identity tails.

    Bin widths and heights are softmax-normalised, so the map is strictly
    increasing for every parameter value. Zero parameters give the identity.
    """

    def __init__(self, bins: int = 8, bound: float = 3.0, rng: np.random.Generator | None = None, init_scale: float = 0.0):
        if bins < 1 or bound <= 0:
            raise ValueError("LinearSpline needs bins >= 1 and bound > 0")
        self.bins = int(bins)
        self.bound = float(bound)
        w = np.zeros(bins) if rng is None else init_scale * rng.standard_normal(bins)
        h = np.zeros(bins) if rng is None else init_scale * rng.standard_normal(bins)
        self.width_logits = Tensor(w, requires_grad=True)
        self.height_logits = Tensor(h, requires_grad=True)
        cum = np.tril(np.ones((bins + 1, bins)), k=-1)
        self._cumulate = Tensor(cum)

    def named_tensors(self):
        return {"width_logits": self.width_logits, "height_logits": self.height_logits}

    def _knots(self):
        span = 2.0 * self.bound
        widths = softmax(self.width_logits) * span
        heights = softmax(self.height_logits) * span
        kx = (self._cumulate @ widths.reshape(-1, 1)).reshape(-1) - self.bound
        ky = (self._cumulate @ heights.reshape(-1, 1)).reshape(-1) - self.bound
        log_slope = heights.log() - widths.log()
        return kx, ky, log_slope

    def _locate(self, knots: np.ndarray, v: np.ndarray):
        inside = (v >= -self.bound) & (v < self.bound)
        k = np.searchsorted(knots[1:-1], v, side="right")
        return inside, np.clip(k, 0, self.bins - 1)

    def _forward(self, eps, ctx):
        kx, ky, log_slope = self._knots()
        inside, k = self._locate(kx.data, eps.data)
        y = ky.take(k) + log_slope.take(k).exp() * (eps - kx.take(k))
        return where(inside, y, eps)

    def _inverse(self, x, ctx, strict):
        kx, ky, log_slope = self._knots()
        inside, k = self._locate(ky.data, x.data)
        e = kx.take(k) + (x - ky.take(k)) * (-log_slope.take(k)).exp()
        return where(inside, e, x)

    def _ladj(self, eps, ctx):
        kx, _, log_slope = self._knots()
        inside, k = self._locate(kx.data, eps.data)
        return _event_sum(where(inside, log_slope.take(k), 0.0))


class Preprocessing(Transform):
    """Maps unconstrained logit space onto pixel values in ``[0, max_value]``.

    ``x = max_value * (sigmoid(y) - margin) / (1 - 2 margin)``; the inverse
    is the usual logit preprocessing with a clamp margin.
    """

    def __init__(self, margin: float = 1e-3, max_value: float = 255.0):
        if not 0 < margin < 0.5:
            raise ValueError("margin must lie in (0, 0.5)")
        self.margin = float(margin)
        self.max_value = float(max_value)
        self._c = self.max_value / (1.0 - 2.0 * self.margin)

    def _forward(self, eps, ctx):
        return (eps.sigmoid() - self.margin) * self._c

    def _inverse(self, x, ctx, strict):
        p = x * (1.0 / self._c) + self.margin
        bad = ~((p.data > 0) & (p.data < 1))
        if strict and np.any(bad):
            raise DomainError(f"pixel values outside the representable range of Preprocessing")
        with np.errstate(invalid="ignore", divide="ignore"):
            return p.log() - (1.0 - p).log()

    def _ladj(self, eps, ctx):
        return _event_sum(eps.log_sigmoid() + (-eps).log_sigmoid() + np.log(self._c))


class Composition(Transform):
    """Applies ``transforms`` in list order; the context reaches conditional members."""

    def __init__(self, transforms):
        self.transforms = list(transforms)
        self.conditional = any(t.conditional for t in self.transforms)

    def named_tensors(self):
        out = {}
        for k, t in enumerate(self.transforms):
            for name, tensor in t.named_tensors().items():
                out[f"{k}.{name}"] = tensor
        return out

    def _sub(self, t, ctx):
        return ctx if t.conditional else None

    def _forward(self, eps, ctx):
        for t in self.transforms:
            eps = t.forward(eps, self._sub(t, ctx))
        return eps

    def _inverse(self, x, ctx, strict):
        for t in reversed(self.transforms):
            x = t.inverse(x, self._sub(t, ctx), strict)
        return x

    def _ladj(self, eps, ctx):
        return self.forward_and_log_det(eps, ctx)[1]

    def forward_and_log_det(self, eps, context=None):
        self._check_context(context)
        ctx = _ctx(context)
        x = as_tensor(eps)
        total = None
        for t in self.transforms:
            x, ld = t.forward_and_log_det(x, self._sub(t, ctx))
            total = ld if total is None else total + ld
        return x, total

    def inverse_and_log_det(self, x, context=None, strict=True):
        self._check_context(context)
        ctx = _ctx(context)
        y = as_tensor(x)
        total = None
        for t in reversed(self.transforms):
            y, ld = t.inverse_and_log_det(y, self._sub(t, ctx), strict)
            total = ld if total is None else total + ld
        return y, total


def affine_normalisation(bounds_kind: str, loc: float, scale: float) -> Composition:
    """Fixed constraining transform.

    ``doubly``: sigmoid then affine onto ``(loc, loc + scale)``.
    ``singly``: whitening affine in log space (``loc``, ``scale`` are the log
    mean and sd) followed by exp.
    """
    if scale <= 0:
        raise ValueError("normalisation scale must be positive")
    if bounds_kind == "doubly":
        return Composition([Sigmoid(), Affine(scale, loc, learnable=False)])
    if bounds_kind == "singly":
        return Composition([Affine(scale, loc, learnable=False), Exp()])
    raise ValueError(f"bounds_kind must be 'doubly' or 'singly', got {bounds_kind!r}")


def affine_normalisation_fit(data, bounds_kind: str, bounds=None) -> Composition:
    """Fit the fixed normalisation of a bounded variable from data.

    For doubly bounded data ``bounds`` (low, high) overrides the data range.
    """
    data = np.asarray(as_tensor(data).data, dtype=float).reshape(-1)
    if data.size == 0:
        raise ValueError("cannot fit a normalisation on empty data")
    if bounds_kind == "doubly":
        lo, hi = (float(data.min()), float(data.max())) if bounds is None else map(float, bounds)
        if not hi > lo:
            raise ValueError(f"degenerate data range: min = max = {lo}")
        return affine_normalisation("doubly", lo, hi - lo)
    if bounds_kind == "singly":
        if np.any(data <= 0):
            raise ValueError("singly bounded normalisation needs positive data")
        logs = np.log(data)
        sd = float(logs.std())
        if not sd > 0:
            raise ValueError("degenerate data: zero spread in log space")
        return affine_normalisation("singly", float(logs.mean()), sd)
    raise ValueError(f"bounds_kind must be 'doubly' or 'singly', got {bounds_kind!r}")
