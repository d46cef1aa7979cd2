"""Causal-graph engine: sampling, likelihood, interventions and counterfactuals.

An :class:`Scm` is an ordered collection of :class:`Node` objects. Observations
are ``dict[str, ndarray]`` with one ``(N, D)`` array per node. Counterfactuals
run the three-step procedure: abduct the noise of the affected nodes under
the original mechanisms, swap in the intervened mechanisms, and replay in
topological order. Nodes that are not descendants of an intervention are
copied from the observation untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .mechanisms import (
    AmortisedMechanism,
    ConstantMechanism,
    GumbelMechanism,
    InvertibleMechanism,
    Mechanism,
    ShiftedMechanism,
)
from .numerics import Tensor

__all__ = ["Node", "Surrogate", "Scm", "Counterfactual", "GridDensity", "CycleError"]


class CycleError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    name: str
    parents: tuple
    mechanism: Mechanism

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))


@dataclass(frozen=True)
class Surrogate:
    """Replacement mechanism for an intervention; ``parents=None`` keeps the old ones."""

    mechanism: Mechanism
    parents: tuple | None = None


@dataclass
class Counterfactual:
    samples: dict
    mean: dict = field(default_factory=dict)


@dataclass
class GridDensity:
    grid: np.ndarray
    density: np.ndarray

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def _as_2d(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v.reshape(1, 1)
    if v.ndim == 1:
        return v[:, None]
    return v.reshape(len(v), -1)


class Scm:
    def __init__(self, nodes, intervened=()):
        nodes = list(nodes)
        names = [n.name for n in nodes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate node names in {names}")
        self.nodes: dict[str, Node] = {n.name: n for n in nodes}
        self.intervened = frozenset(intervened)
        self.order: list[str] = []
        self.validate()

    # ------------------------------------------------------------------ graph
    def validate(self) -> None:
        """Check that parents resolve and the graph is acyclic; cache a topological order."""
        for node in self.nodes.values():
            for p in node.parents:
                if p not in self.nodes:
                    raise ValueError(f"node {node.name!r} has unknown parent {p!r}")
            if node.mechanism.n_parents != len(node.parents):
                raise ValueError(
                    f"node {node.name!r} declares {len(node.parents)} parents but its mechanism takes {node.mechanism.n_parents}"
                )
        state: dict[str, int] = {}
        order: list[str] = []

        def visit(name: str, path: list[str]) -> None:
            s = state.get(name, 0)
            if s == 2:
                return
            if s == 1:
                # the walk follows parent links, so reverse to read cause -> effect
                cycle = (path[path.index(name) :] + [name])[::-1]
                raise CycleError("cycle: " + " -> ".join(cycle))
            state[name] = 1
            for p in self.nodes[name].parents:
                visit(p, path + [name])
            state[name] = 2
            order.append(name)

        for name in self.nodes:
            visit(name, [])
        self.order = order

    def children(self, name: str) -> list[str]:
        return [n for n in self.order if name in self.nodes[n].parents]

    def descendants(self, names) -> set[str]:
        out: set[str] = set()
        frontier = list(names)
        while frontier:
            for c in self.children(frontier.pop()):
                if c not in out:
                    out.add(c)
                    frontier.append(c)
        return out

    def mechanism(self, name: str) -> Mechanism:
        return self.nodes[name].mechanism

    def _parents(self, name: str, values: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        return [values[p] for p in self.nodes[name].parents]

    def check_observation(self, obs: Mapping[str, np.ndarray], names=None) -> dict[str, np.ndarray]:
        """Coerce node values to ``(N, D)``; ``names`` restricts which nodes must be present."""
        names = self.order if names is None else [n for n in self.order if n in set(names)]
        missing = [n for n in names if n not in obs]
        if missing:
            raise ValueError(f"observation is missing nodes: {', '.join(missing)}")
        out = {n: _as_2d(obs[n]) for n in names}
        sizes = {len(v) for v in out.values()}
        if len(sizes) > 1:
            raise ValueError(f"observation batches differ in length: {sorted(sizes)}")
        return out

    def with_parents(self, nodes) -> set[str]:
        nodes = set(nodes)
        for k in list(nodes):
            nodes.update(self.nodes[k].parents)
        return nodes

    def node_rngs(self, rng: np.random.Generator) -> dict[str, np.random.Generator]:
        """One independent stream per node, keyed by declaration position."""
        base = int(rng.integers(0, 2**63 - 1))
        return {name: np.random.default_rng([base, k]) for k, name in enumerate(self.nodes)}

    # ----------------------------------------------------------- rung 1 & 2
    def sample_noise(self, n: int, rng: np.random.Generator) -> dict:
        rngs = self.node_rngs(rng)
        return {name: self.mechanism(name).sample_noise(rngs[name], n) for name in self.order}

    def push(self, noise: Mapping) -> dict[str, np.ndarray]:
        values: dict[str, np.ndarray] = {}
        for name in self.order:
            values[name] = _as_2d(self.mechanism(name).sample(noise[name], self._parents(name, values) or None))
        return values

    def ancestral_sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if int(n) < 1:
            raise ValueError("n must be >= 1")
        return self.push(self.sample_noise(int(n), rng))

    def node_objectives(self, obs, rng: np.random.Generator | None = None, particles: int = 4, nodes=None) -> dict[str, Tensor]:
        """Per-record log-likelihood (exact nodes) or ELBO (amortised nodes)."""
        obs = self.check_observation(obs, None if nodes is None else self.with_parents(nodes))
        rng = rng if rng is not None else np.random.default_rng(0)
        rngs = self.node_rngs(rng)
        out = {}
        for name in self.order:
            if nodes is not None and name not in nodes:
                continue
            mech = self.mechanism(name)
            parents = self._parents(name, obs) or None
            if isinstance(mech, AmortisedMechanism):
                out[name] = mech.elbo(obs[name], parents, rngs[name], particles)
            else:
                out[name] = mech.log_prob(obs[name], parents)
        return out

    def joint_objective(self, obs, rng=None, particles: int = 4) -> Tensor:
        """Mean over records of the summed node terms; a lower bound when amortised nodes exist."""
        terms = list(self.node_objectives(obs, rng, particles).values())
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total.mean()

    def do(self, iv: Mapping) -> "Scm":
        """Return a new SCM with the given assignments replaced."""
        nodes = []
        for name in iv:
            if name not in self.nodes:
                raise KeyError(f"intervention targets unknown node {name!r}")
        for name, node in self.nodes.items():
            if name not in iv:
                nodes.append(node)
                continue
            spec = iv[name]
            if isinstance(spec, Surrogate):
                parents = node.parents if spec.parents is None else tuple(spec.parents)
                mech = spec.mechanism
            elif isinstance(spec, Mechanism):
                parents, mech = node.parents, spec
            else:
                parents, mech = (), ConstantMechanism(spec, dim=node.mechanism.dim)
            if mech.n_parents != len(parents):
                raise ValueError(f"surrogate for {name!r} takes {mech.n_parents} parents, {len(parents)} declared")
            nodes.append(Node(name, parents, mech))
        return Scm(nodes, intervened=self.intervened | set(iv))

    # ----------------------------------------------------------------- rung 3
    def abduct(self, obs, rng: np.random.Generator | None = None, S: int = 1, nodes=None) -> dict:
        """Factorised noise posterior, one entry per (requested) node."""
        obs = self.check_observation(obs, None if nodes is None else self.with_parents(nodes))
        rng = rng if rng is not None else np.random.default_rng(0)
        rngs = self.node_rngs(rng)
        post = {}
        for name in self.order:
            if nodes is not None and name not in nodes:
                continue
            mech = self.mechanism(name)
            post[name] = mech.abduct(obs[name], self._parents(name, obs) or None, rngs[name], S)
        return post

    def abduction_targets(self, iv: Mapping) -> set[str]:
        """Nodes whose noise a counterfactual under ``iv`` actually needs."""
        cf_scm = self.do(iv)
        downstream = cf_scm.descendants(iv) - set(iv)
        surrogates = {k for k in iv if not isinstance(cf_scm.mechanism(k), ConstantMechanism)}
        return downstream | surrogates

    def replay(self, posterior: Mapping, obs, iv: Mapping) -> dict[str, np.ndarray]:
        """Propagate abducted noise through ``do(iv)``; one ``(N, D)`` value per node.

        Sample-based posteriors must carry one draw per record (``S=1``);
        :meth:`counterfactual` handles several draws by tiling the batch.
        """
        obs = self.check_observation(obs)
        n = len(next(iter(obs.values())))
        cf_scm = self.do(iv)
        downstream = cf_scm.descendants(iv) - set(iv)
        values: dict[str, np.ndarray] = {}
        for name in cf_scm.order:
            mech = cf_scm.mechanism(name)
            if name not in iv and name not in downstream:
                values[name] = obs[name]
            elif isinstance(mech, ConstantMechanism):
                v = mech.value
                if v.ndim == 2 and len(v) != n and n % len(v) == 0:
                    v = np.tile(v, (n // len(v), 1))
                values[name] = ConstantMechanism(v, mech.dim).values(n)
            else:
                if name not in posterior:
                    raise KeyError(f"no abducted noise for node {name!r}")
                parents = [values[p] for p in cf_scm.nodes[name].parents] or None
                values[name] = np.asarray(mech.replay(posterior[name], parents)).reshape(n, -1)
        return values

    def counterfactual(self, obs, iv: Mapping, rng: np.random.Generator | None = None, S: int = 1) -> Counterfactual:
        """Counterfactual samples ``(S, N, D)`` per node and their per-node means."""
        obs = self.check_observation(obs)
        n = len(next(iter(obs.values())))
        S = int(S)
        if S < 1:
            raise ValueError("S must be >= 1")
        # tile the batch so every row carries one posterior draw
        tiled = {k: np.tile(v, (S, 1)) for k, v in obs.items()}
        post = self.abduct(tiled, rng, 1, nodes=self.abduction_targets(iv))
        values = self.replay(post, tiled, iv)
        samples = {k: v.reshape(S, n, -1) for k, v in values.items()}
        return Counterfactual(samples=samples, mean={k: v.mean(axis=0) for k, v in samples.items()})

    # ------------------------------------------------------------ conditioning
    def posterior_grid_1d(self, target: str, evidence: Mapping | None = None, grid=(0.0, 1.0), n: int = 2048) -> GridDensity:
        """Normalised density of a scalar node given scalar evidence, by quadrature."""
        evidence = {k: _as_2d(v)[:1] for k, v in (evidence or {}).items()}
        for k in [target, *evidence]:
            if k not in self.nodes:
                raise KeyError(f"unknown node {k!r}")
            mech = self.mechanism(k)
            if isinstance(mech, AmortisedMechanism):
                raise ValueError(f"node {k!r} has an amortised mechanism; grid conditioning supports scalar exact nodes")
        tmech = self.mechanism(target)
        if not isinstance(tmech, (InvertibleMechanism, ShiftedMechanism)) or tmech.dim != 1:
            raise ValueError(f"target {target!r} must be a scalar continuous node")
        known = dict(evidence)
        for name in self.order:
            m = self.mechanism(name)
            if isinstance(m, ConstantMechanism) and name not in known:
                known[name] = m.values(1)
        parents = self.nodes[target].parents
        missing = [p for p in parents if p not in known]
        if missing:
            raise ValueError(f"parents of {target!r} must be observed: {missing}")
        kids = set(self.children(target))
        for k in evidence:
            # an intervened node may be restated as evidence; it carries no information
            if isinstance(self.mechanism(k), ConstantMechanism):
                continue
            if k != target and k not in parents and k not in kids:
                raise ValueError(f"evidence on {k!r} is neither a parent nor a child of {target!r}")
        g = np.linspace(float(grid[0]), float(grid[1]), int(n))[:, None]
        m = len(g)
        tile = lambda v: np.repeat(v, m, axis=0)  # noqa: E731
        logp = tmech.log_prob(g, [tile(known[p]) for p in parents] or None).data.copy()
        for c in kids:
            if c not in evidence:
                continue
            cmech = self.mechanism(c)
            if isinstance(cmech, ConstantMechanism):
                continue
            cparents = []
            for p in self.nodes[c].parents:
                if p == target:
                    cparents.append(g)
                elif p in known:
                    cparents.append(tile(known[p]))
                else:
                    raise ValueError(f"co-parent {p!r} of evidence node {c!r} must be observed")
            logp = logp + cmech.log_prob(tile(evidence[c]), cparents).data
        finite = np.isfinite(logp)
        dens = np.zeros(m)
        if np.any(finite):
            dens[finite] = np.exp(logp[finite] - logp[finite].max())
        total = np.trapezoid(dens, g[:, 0])
        if not total > 0:
            raise ValueError("posterior has no mass on the requested grid")
        return GridDensity(g[:, 0], dens / total)

    # ------------------------------------------------------------- parameters
    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in self.nodes:
            for k, t in self.mechanism(name).named_tensors().items():
                out[f"{name}.{k}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def param_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {"flow": [], "amortised": [], "discrete": []}
        for name in self.order:
            mech = self.mechanism(name)
            key = "amortised" if isinstance(mech, AmortisedMechanism) else "discrete" if isinstance(mech, GumbelMechanism) else "flow"
            groups[key].extend(mech.parameters())
        return groups
