"""Structural assignments for single nodes.

Each mechanism maps exogenous noise and parent values to the node value,
scores observations, and abducts the noise posterior of an observed node.
Node values are ``(N, D)`` float arrays; parents arrive as a list of such
arrays in declared order and are turned into a context vector by the
mechanism's parent encoders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .distributions import Distribution, Gumbel, StandardNormal
from .nn import MLP
from .numerics import Tensor, as_tensor, concat, log_softmax
from .transforms import Composition, ConditionalAffine, DomainError, Preprocessing, Transform

__all__ = [
    "Mechanism",
    "InvertibleMechanism",
    "AmortisedMechanism",
    "GumbelMechanism",
    "ConstantMechanism",
    "ShiftedMechanism",
    "ImplicitMechanism",
    "ExactPosterior",
    "AmortisedPosterior",
    "DiscretePosterior",
    "gumbel_posterior_sample",
    "gumbel_counterfactual",
]

Encoder = Callable[[np.ndarray], np.ndarray]


def identity_encoder(v: np.ndarray) -> np.ndarray:
    return v


# ---------------------------------------------------------------------------
# Noise posteriors
# ---------------------------------------------------------------------------


@dataclass
class ExactPosterior:
    """Deterministically inverted noise, shape ``(N, D)``."""

    eps: np.ndarray


@dataclass
class AmortisedPosterior:
    """``S`` pairs ``(z, u)`` stacked as ``(S, N, ·)``, plus the observed value."""

    z: np.ndarray
    u: np.ndarray
    x: np.ndarray
    mu: np.ndarray


@dataclass
class DiscretePosterior:
    """``S`` exact Gumbel posterior samples stacked as ``(S, N, K)``."""

    eps: np.ndarray


# ---------------------------------------------------------------------------


class Mechanism:
    kind = "abstract"
    n_parents = 0
    dim = 1

    def __init__(self, parent_encoders: Sequence[Encoder] | int | None = None):
        # an int declares that many raw (identity-encoded) parents
        if isinstance(parent_encoders, int):
            parent_encoders = [identity_encoder] * parent_encoders
        self.parent_encoders = list(parent_encoders) if parent_encoders is not None else []
        self.n_parents = len(self.parent_encoders)

    # context ----------------------------------------------------------------
    def context(self, parents) -> Tensor | None:
        parents = [] if parents is None else list(parents)
        if len(parents) != self.n_parents:
            raise ValueError(f"{type(self).__name__} expects {self.n_parents} parent values, got {len(parents)}")
        if not parents:
            return None
        pieces = [np.asarray(enc(np.asarray(p, dtype=float)), dtype=float) for enc, p in zip(self.parent_encoders, parents)]
        n = {len(p) for p in pieces}
        if len(n) != 1:
            raise ValueError(f"parent batches disagree in length: {sorted(n)}")
        return Tensor(np.concatenate([p.reshape(len(p), -1) for p in pieces], axis=1))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Normalised representation of this node's value for use as a child's context."""
        raise TypeError(f"{type(self).__name__} values cannot condition other mechanisms")

    # interface ----------------------------------------------------------------
    def sample_noise(self, rng: np.random.Generator, n: int):
        raise NotImplementedError

    def sample(self, noise, parents=None) -> np.ndarray:
        raise NotImplementedError

    def abduct(self, x, parents=None, rng=None, S: int = 1):
        raise NotImplementedError

    def replay(self, posterior, parents=None, *, observed_parents=None) -> np.ndarray:
        """Push abducted noise through the mechanism with (possibly new) parents.

        Returns an ``(S, N, D)`` array when the posterior is sample-based and
        ``(N, D)`` otherwise.
        """
        raise NotImplementedError

    def named_tensors(self) -> dict[str, Tensor]:
        return {}

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    @property
    def exact(self) -> bool:
        return True


# ---------------------------------------------------------------------------


class InvertibleMechanism(Mechanism):
    """``x = constraint(core(eps; context))`` with explicit likelihood."""

    kind = "flow"

    def __init__(
        self,
        core: Transform,
        noise: Distribution | None = None,
        constraint: Transform | None = None,
        parent_encoders: Sequence[Encoder] | None = None,
        dim: int = 1,
    ):
        super().__init__(parent_encoders)
        self.core = core
        self.constraint = constraint
        self.noise = noise if noise is not None else StandardNormal(dim)
        self.dim = dim
        self.flow = Composition([core] + ([constraint] if constraint is not None else []))
        if self.flow.conditional and self.n_parents == 0:
            raise ValueError("a conditional flow needs at least one parent")
        if not self.flow.conditional and self.n_parents > 0:
            raise ValueError("parents were declared but the flow is unconditional")

    def named_tensors(self):
        return {f"flow.{k}": v for k, v in self.flow.named_tensors().items()}

    def encode(self, x):
        if self.constraint is None:
            return np.asarray(x, dtype=float)
        return self.constraint.inverse(x).data

    def sample_noise(self, rng, n):
        return self.noise.sample(rng, n)

    def sample(self, noise, parents=None) -> np.ndarray:
        ctx = self.context(parents)
        return self.flow.forward(np.asarray(noise, dtype=float), ctx).data

    def log_prob(self, x, parents=None) -> Tensor:
        """Exact conditional log-density, shape ``(N,)``; ``-inf`` outside the support."""
        return self._log_prob(np.asarray(as_tensor(x).data, dtype=float), self.context(parents))

    def _log_prob(self, x: np.ndarray, ctx: Tensor | None) -> Tensor:
        try:
            eps, ladj = self.flow.inverse_and_log_det(x, ctx)
        except DomainError:
            eps = self.flow.inverse(x, ctx, strict=False)
            ok = np.all(np.isfinite(eps.data), axis=-1)
            out = np.full(len(x), -np.inf)
            if np.any(ok):
                sub = None if ctx is None else Tensor(ctx.data[ok])
                out[ok] = self._log_prob(x[ok], sub).data
            return Tensor(out)
        lp = self.noise.log_prob(eps)
        lp = lp.sum(axis=-1) if lp.ndim >= 2 else lp
        return lp - ladj

    def abduct(self, x, parents=None, rng=None, S: int = 1) -> ExactPosterior:
        ctx = self.context(parents)
        return ExactPosterior(self.flow.inverse(np.asarray(x, dtype=float), ctx).data)

    def replay(self, posterior, parents=None, *, observed_parents=None):
        return self.sample(posterior.eps, parents)


# ---------------------------------------------------------------------------


class AmortisedMechanism(Mechanism):
    """Decoder/encoder mechanism ``x = h(u; g(z; pa), pa)`` for images.

    ``g`` is a dense decoder producing per-pixel means in logit space, ``h``
    is a fixed-variance location transform followed by pixel preprocessing,
    and ``q(z | x, pa)`` is a diagonal normal from a dense encoder.
    """

    kind = "amortised"

    def __init__(
        self,
        event_shape=(28, 28),
        latent_dim: int = 16,
        encoder_hidden=(128, 64),
        decoder_hidden=(64, 128),
        log_var: float = -5.0,
        margin: float = 1e-3,
        max_value: float = 255.0,
        context_dim: int | None = None,
        parent_encoders: Sequence[Encoder] | None = None,
        rng: np.random.Generator | None = None,
    ):
        super().__init__(parent_encoders)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.event_shape = tuple(int(s) for s in event_shape)
        self.dim = int(np.prod(self.event_shape))
        self.latent_dim = int(latent_dim)
        self.context_dim = self.n_parents if context_dim is None else int(context_dim)
        self.log_var = float(log_var)
        self.log_sigma = 0.5 * self.log_var
        self.max_value = float(max_value)
        c = self.context_dim
        self.encoder = MLP([self.dim + c, *encoder_hidden, 2 * self.latent_dim], rng, name="encoder", out_gain=0.1)
        self.decoder = MLP([self.latent_dim + c, *decoder_hidden, self.dim], rng, name="decoder")
        self.preprocessing = Preprocessing(margin, max_value)
        self.low_level = Composition([ConditionalAffine(None, dim=self.dim, fixed_log_scale=self.log_sigma), self.preprocessing])
        self.prior = StandardNormal(self.latent_dim)
        self.u_prior = StandardNormal(self.dim)

    def named_tensors(self):
        out = {}
        for net in (self.encoder, self.decoder):
            out.update({p.name: p for p in net.parameters()})
        return out

    # helpers ----------------------------------------------------------------
    def _ctx(self, parents, n: int) -> Tensor:
        ctx = self.context(parents)
        if ctx is None:
            return Tensor(np.zeros((n, 0)))
        return ctx

    def _flat(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x.reshape(len(x), self.dim)

    def decode(self, z, ctx: Tensor) -> Tensor:
        """Per-pixel logit-space means ``mu(z; pa)``."""
        z = as_tensor(z)
        if ctx.shape[1] == 0:
            return self.decoder(z)
        return self.decoder(concat([z, ctx], axis=1))

    def encode_posterior(self, x, ctx: Tensor) -> tuple[Tensor, Tensor]:
        """Mean and log-variance of ``q(z | x, pa)``."""
        xin = Tensor(self._flat(x) / self.max_value - 0.5)
        inp = xin if ctx.shape[1] == 0 else concat([xin, ctx], axis=1)
        out = self.encoder(inp)
        return out[:, : self.latent_dim], out[:, self.latent_dim :]

    # sampling ----------------------------------------------------------------
    def sample_noise(self, rng, n):
        return self.prior.sample(rng, n), self.u_prior.sample(rng, n)

    def sample(self, noise, parents=None) -> np.ndarray:
        z, u = noise
        z = np.asarray(z, dtype=float)
        ctx = self._ctx(parents, len(z))
        mu = self.decode(z, ctx)
        return self.low_level.forward(np.asarray(u, dtype=float), mu).data

    def mean_image(self, z, parents=None) -> np.ndarray:
        """Decoded mean in pixel space (noise ``u = 0``)."""
        z = np.asarray(z, dtype=float)
        return self.sample((z, np.zeros((len(z), self.dim))), parents)

    # likelihood ----------------------------------------------------------------
    def pixel_logits(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Preprocessed logits ``y`` of an image batch and the per-record log-det of preprocessing at ``y``."""
        y = self.preprocessing.inverse(self._flat(x))
        return y.data, self.preprocessing.log_abs_det_jacobian(y).data

    def log_prob_given_z(self, x, z, ctx: Tensor, logits: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        """``log p(x | z, pa)`` by change of variables through the low-level flow.

        The preprocessing part does not depend on ``z``, so callers scoring
        several particles per record can pass ``pixel_logits(x)`` once.
        """
        y, ladj_pre = logits if logits is not None else self.pixel_logits(x)
        mu = self.decode(z, ctx)
        u = (Tensor(y) - mu) * math.exp(-self.log_sigma)
        return self.u_prior.log_prob(u).sum(axis=-1) - (ladj_pre + self.dim * self.log_sigma)

    def elbo(self, x, parents=None, rng=None, particles: int = 4) -> Tensor:
        """Per-record Monte-Carlo ELBO, shape ``(N,)``."""
        if particles < 1:
            raise ValueError("particles must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        x = self._flat(x)
        n = len(x)
        ctx = self._ctx(parents, n)
        mean, log_var = self.encode_posterior(x, ctx)
        kl = ((log_var.exp() + mean.square() - 1.0 - log_var) * 0.5).sum(axis=-1)
        P = int(particles)
        rep = np.tile(np.arange(n), P)
        e = rng.standard_normal((P * n, self.latent_dim))
        z = mean[rep] + (log_var[rep] * 0.5).exp() * e
        ctx_rep = Tensor(ctx.data[rep])
        y, ladj_pre = self.pixel_logits(x)
        lp = self.log_prob_given_z(None, z, ctx_rep, (y[rep], ladj_pre[rep]))
        rec = lp.reshape(P, n).mean(axis=0)
        return rec - kl

    def importance_log_likelihood(self, x, parents=None, rng=None, samples: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
        """Importance-sampled ``log p(x | pa)`` with ``q`` as proposal, and its standard error."""
        rng = rng if rng is not None else np.random.default_rng()
        x = self._flat(x)
        ctx = self._ctx(parents, len(x))
        mean, log_var = (t.data for t in self.encode_posterior(x, ctx))
        est, se = [], []
        for k in range(len(x)):
            e = rng.standard_normal((samples, self.latent_dim))
            sd = np.exp(0.5 * log_var[k])
            z = mean[k] + sd * e
            ck = Tensor(np.repeat(ctx.data[k : k + 1], samples, axis=0))
            y, ladj_pre = self.pixel_logits(x[k : k + 1])
            lpx = self.log_prob_given_z(None, z, ck, (np.repeat(y, samples, axis=0), np.repeat(ladj_pre, samples))).data
            lpz = -0.5 * (z * z).sum(1) - 0.5 * self.latent_dim * math.log(2 * math.pi)
            lq = -0.5 * (e * e).sum(1) - np.log(sd).sum() - 0.5 * self.latent_dim * math.log(2 * math.pi)
            w = lpx + lpz - lq
            m = w.max()
            ratio = np.exp(w - m)
            est.append(m + math.log(ratio.mean()))
            # delta-method standard error of the log of the mean
            se.append(ratio.std(ddof=1) / math.sqrt(samples) / ratio.mean())
        return np.array(est), np.array(se)

    # abduction and counterfactuals ------------------------------------------------
    def abduct(self, x, parents=None, rng=None, S: int = 32) -> AmortisedPosterior:
        rng = rng if rng is not None else np.random.default_rng()
        x = self._flat(x)
        n = len(x)
        ctx = self._ctx(parents, n)
        mean, log_var = (t.data for t in self.encode_posterior(x, ctx))
        z = mean[None] + np.exp(0.5 * log_var)[None] * rng.standard_normal((S, n, self.latent_dim))
        zf = z.reshape(S * n, self.latent_dim)
        ctx_rep = Tensor(np.tile(ctx.data, (S, 1)))
        mu = self.decode(zf, ctx_rep).data
        u = self.low_level.inverse(np.tile(x, (S, 1)), mu).data
        return AmortisedPosterior(z=z, u=u.reshape(S, n, self.dim), x=x, mu=mu.reshape(S, n, self.dim))

    def replay(self, posterior: AmortisedPosterior, parents=None, *, observed_parents=None):
        """Counterfactual images ``(S, N, D)``.

        With a constant decoder variance the low-level noise cancels and the
        counterfactual is the observed logit image shifted by the change in
        decoded mean, mapped back to pixels.
        """
        S, n, _ = posterior.z.shape
        zf = posterior.z.reshape(S * n, self.latent_dim)
        if parents is not None and len(parents) and np.ndim(parents[0]) == 3:
            flat_parents = [np.asarray(p).reshape(S * n, -1) for p in parents]
        else:
            flat_parents = None if parents is None else [np.tile(np.asarray(p, dtype=float), (S, 1)) for p in parents]
        ctx_new = self._ctx(flat_parents, S * n)
        mu_new = self.decode(zf, ctx_new).data
        y = self.preprocessing.inverse(posterior.x).data
        y_cf = np.tile(y, (S, 1)) + (mu_new - posterior.mu.reshape(S * n, self.dim))
        return self.preprocessing.forward(y_cf).data.reshape(S, n, self.dim)

    def reconstruct(self, x, parents=None, rng=None, S: int = 32) -> np.ndarray:
        """Pixel-space image of the MC mean of decoded logit means under ``q``."""
        post = self.abduct(x, parents, rng, S)
        return self.preprocessing.forward(post.mu.mean(axis=0)).data

    @property
    def exact(self) -> bool:
        return False


# ---------------------------------------------------------------------------


def gumbel_posterior_sample(logits, k, rng: np.random.Generator, S: int | None = None) -> np.ndarray:
    """Exact samples of Gumbel noise given that ``argmax(eps + logits) == k``.

    ``logits`` is ``(K,)`` or ``(N, K)``, ``k`` a scalar or ``(N,)`` array.
    Returns ``(N, K)`` or, when ``S`` is given, ``(S, N, K)``.
    """
    lam = np.atleast_2d(np.asarray(logits, dtype=float))
    n, K = lam.shape
    k = np.broadcast_to(np.asarray(k, dtype=int).reshape(-1), (n,))
    if np.any((k < 0) | (k >= K)):
        raise IndexError(f"observed category out of range for K={K}")
    reps = 1 if S is None else int(S)
    G = Gumbel(dim=K).sample(rng, reps * n).reshape(reps, n, K)
    rows = np.arange(n)
    lam_k = lam[rows, k]
    lse = special.logsumexp(lam, axis=1)
    top = G[:, rows, k] + lse - lam_k  # (reps, n)
    # -log(exp(-G_l - lam_l) + exp(-top - lam_k)) - lam_l, stabilised
    a = -G - lam[None]
    b = (-top - lam_k[None])[..., None]
    eps = -np.logaddexp(a, b) - lam[None]
    eps[:, rows, k] = top
    return eps[0] if S is None else eps


def gumbel_counterfactual(eps, new_logits) -> np.ndarray:
    """``argmax(eps + new_logits)`` along the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(eps) + np.asarray(new_logits), axis=-1)


class GumbelMechanism(Mechanism):
    """Categorical node ``y = argmax(eps + logits(pa))`` with Gumbel(0,1) noise."""

    kind = "gumbel"

    def __init__(self, n_categories: int, net: MLP | None = None, logits=None, parent_encoders=None, rng=None):
        super().__init__(parent_encoders)
        self.K = int(n_categories)
        self.net = net
        if net is None:
            init = np.zeros(self.K) if logits is None else np.asarray(logits, dtype=float)
            self.logit_param: Tensor | None = Tensor(init, requires_grad=True)
            if self.n_parents:
                raise ValueError("a Gumbel mechanism with parents needs a logit network")
        else:
            if net.n_out != self.K:
                raise ValueError(f"logit network must output {self.K} values")
            self.logit_param = None

    def named_tensors(self):
        if self.net is None:
            return {"logits": self.logit_param}
        return {p.name: p for p in self.net.parameters()}

    def logits(self, parents=None, n: int | None = None) -> Tensor:
        ctx = self.context(parents)
        if self.net is not None:
            return self.net(ctx)
        n = n if ctx is None else len(ctx.data)
        lam = self.logit_param.reshape(1, self.K)
        return lam if n is None else lam + Tensor(np.zeros((n, 1)))

    def encode(self, x):
        idx = np.asarray(x).reshape(-1).astype(int)
        return np.eye(self.K)[idx]

    def sample_noise(self, rng, n):
        return Gumbel(dim=self.K).sample(rng, n)

    def sample(self, noise, parents=None):
        noise = np.asarray(noise, dtype=float)
        lam = self.logits(parents, len(noise)).data
        return gumbel_counterfactual(noise, lam)[:, None].astype(float)

    def log_prob(self, x, parents=None) -> Tensor:
        idx = np.asarray(as_tensor(x).data).reshape(-1).astype(int)
        if np.any((idx < 0) | (idx >= self.K)):
            raise IndexError(f"category index out of range for K={self.K}")
        lp = log_softmax(self.logits(parents, len(idx)), axis=1)
        return lp[np.arange(len(idx)), idx]

    def abduct(self, x, parents=None, rng=None, S: int = 1) -> DiscretePosterior:
        rng = rng if rng is not None else np.random.default_rng()
        idx = np.asarray(x).reshape(-1).astype(int)
        lam = self.logits(parents, len(idx)).data
        return DiscretePosterior(gumbel_posterior_sample(lam, idx, rng, S))

    def replay(self, posterior: DiscretePosterior, parents=None, *, observed_parents=None):
        S, n, _ = posterior.eps.shape
        if parents is not None and len(parents) and np.ndim(parents[0]) == 3:
            lam = self.logits([np.asarray(p).reshape(S * n, -1) for p in parents], S * n).data.reshape(S, n, self.K)
        else:
            lam = self.logits(parents, n).data[None]
        return gumbel_counterfactual(posterior.eps, lam)[..., None].astype(float)


# ---------------------------------------------------------------------------


class ConstantMechanism(Mechanism):
    """Atomic intervention ``x := value``; ``value`` is a scalar, vector or per-record array."""

    kind = "constant"

    def __init__(self, value, dim: int = 1):
        super().__init__([])
        self.value = np.asarray(value, dtype=float)
        self.dim = dim

    def values(self, n: int) -> np.ndarray:
        v = self.value
        if v.ndim == 2:
            if len(v) != n:
                raise ValueError(f"per-record constant has {len(v)} rows, batch has {n}")
            return v.copy()
        return np.broadcast_to(v.reshape(1, -1), (n, max(v.size, self.dim) if v.ndim else self.dim)).copy()

    def sample_noise(self, rng, n):
        return np.zeros((n, 0))

    def sample(self, noise, parents=None):
        return self.values(len(noise))

    def log_prob(self, x, parents=None) -> Tensor:
        x = np.asarray(as_tensor(x).data)
        hit = np.all(np.isclose(x, self.values(len(x))), axis=-1)
        return Tensor(np.where(hit, 0.0, -np.inf))

    def abduct(self, x, parents=None, rng=None, S: int = 1):
        return None

    def replay(self, posterior, parents=None, *, observed_parents=None):
        raise RuntimeError("constant nodes are not replayed")


class ShiftedMechanism(Mechanism):
    """Surrogate ``x := f(eps; pa) + delta`` reusing another mechanism's noise."""

    kind = "shifted"

    def __init__(self, base: InvertibleMechanism, delta: float):
        super().__init__(base.parent_encoders)
        self.base = base
        self.delta = float(delta)
        self.dim = base.dim

    def encode(self, x):
        return self.base.encode(x)

    def sample_noise(self, rng, n):
        return self.base.sample_noise(rng, n)

    def sample(self, noise, parents=None):
        return self.base.sample(noise, parents) + self.delta

    def log_prob(self, x, parents=None) -> Tensor:
        return self.base.log_prob(np.asarray(as_tensor(x).data) - self.delta, parents)

    def abduct(self, x, parents=None, rng=None, S: int = 1):
        return self.base.abduct(np.asarray(x, dtype=float) - self.delta, parents, rng, S)

    def replay(self, posterior, parents=None, *, observed_parents=None):
        return self.base.replay(posterior, parents) + self.delta


class ImplicitMechanism(Mechanism):
    """Reserved slot for adversarially trained amortised-implicit mechanisms."""

    kind = "implicit"

    def __init__(self, *args, **kwargs):
        raise NotImplementedError("amortised-implicit (adversarial) mechanisms are not implemented")
