"""Declarative graph configs (JSON) and the builder that turns them into an :class:`Scm`.

Every parse error is a :class:`ConfigError` carrying the field path (or the
JSON line and column) where the problem was found.
"""

from __future__ import annotations

import copy
import graphlib
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .mechanisms import AmortisedMechanism, GumbelMechanism, ImplicitMechanism, InvertibleMechanism, Mechanism
from .nn import MLP
from .scm import Node, Scm
from .transforms import Affine, Composition, ConditionalAffine, LinearSpline, affine_normalisation, affine_normalisation_fit

__all__ = [
    "ConfigError",
    "GraphConfig",
    "TrainingConfig",
    "parse_config",
    "load_config",
    "bundled_config",
    "BUNDLED",
    "build_scm",
    "config_hash",
]

BUNDLED = ("independent", "conditional", "full")
# CPU-budget variants: a looser image likelihood and a faster encoder-decoder rate,
# for runs of tens rather than hundreds of epochs
DESK = {"log_var": -1.0, "lr_amortised": 1e-3}
DEFAULT_LR = {"flow": 5e-3, "amortised": 1e-4, "discrete": 5e-3}


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass
class TrainingConfig:
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    batch_size: int = 256
    epochs: int = 100
    particles: int = 4
    seed: int = 0


@dataclass
class GraphConfig:
    name: str
    nodes: list
    training: TrainingConfig
    data: dict
    raw: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def node_names(self) -> list[str]:
        return [n["name"] for n in self.nodes]


def config_hash(raw: Mapping) -> str:
    """SHA-256 of the canonical JSON of the graph part (name and nodes)."""
    graph = {"name": raw.get("name"), "nodes": raw.get("nodes")}
    return hashlib.sha256(json.dumps(graph, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# validation helpers


def _obj(v, where: str, required: set, optional: set) -> dict:
    if not isinstance(v, dict):
        raise ConfigError(where, f"expected an object, got {type(v).__name__}")
    unknown = sorted(set(v) - required - optional)
    if unknown:
        raise ConfigError(where, f"unknown key(s) {', '.join(map(repr, unknown))}")
    missing = sorted(required - set(v))
    if missing:
        raise ConfigError(where, f"missing key(s) {', '.join(map(repr, missing))}")
    return v


def _int(v, where: str, low: int = 0) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < low:
        raise ConfigError(where, f"expected an integer >= {low}, got {v!r}")
    return v


def _num(v, where: str, positive: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(where, f"expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(where, f"expected a positive number, got {v!r}")
    return float(v)


def _ints(v, where: str) -> list[int]:
    if not isinstance(v, list):
        raise ConfigError(where, f"expected a list of integers, got {v!r}")
    return [_int(x, f"{where}[{k}]", 1) for k, x in enumerate(v)]


def _str(v, where: str) -> str:
    if not isinstance(v, str) or not v:
        raise ConfigError(where, f"expected a nonempty string, got {v!r}")
    return v


_TRANSFORM_KEYS = {
    "affine": set(),
    "spline": {"bins", "bound"},
    "conditional_affine": {"hidden"},
}


def _check_transform(t, where: str) -> None:
    if not isinstance(t, dict) or "type" not in t:
        raise ConfigError(where, "expected an object with a 'type'")
    kind = t["type"]
    if kind not in _TRANSFORM_KEYS:
        raise ConfigError(f"{where}.type", f"unknown transform {kind!r} (choose from {', '.join(_TRANSFORM_KEYS)})")
    _obj(t, where, {"type"}, _TRANSFORM_KEYS[kind])
    if "bins" in t:
        _int(t["bins"], f"{where}.bins", 1)
    if "bound" in t:
        _num(t["bound"], f"{where}.bound", positive=True)
    if "hidden" in t:
        _ints(t["hidden"], f"{where}.hidden")


def _check_mechanism(m, where: str, has_parents: bool) -> None:
    if not isinstance(m, dict) or "kind" not in m:
        raise ConfigError(where, "expected an object with a 'kind'")
    kind = m["kind"]
    if kind == "flow":
        _obj(m, where, {"kind", "transforms"}, {"constraint", "dim"})
        if not isinstance(m["transforms"], list) or not m["transforms"]:
            raise ConfigError(f"{where}.transforms", "expected a nonempty list")
        for k, t in enumerate(m["transforms"]):
            _check_transform(t, f"{where}.transforms[{k}]")
        conditional = any(t["type"] == "conditional_affine" for t in m["transforms"])
        if conditional != has_parents:
            need = "needs a conditional_affine transform" if has_parents else "has no parents for its conditional transform"
            raise ConfigError(f"{where}.transforms", f"node {need}")
        if "dim" in m:
            _int(m["dim"], f"{where}.dim", 1)
        if "constraint" in m:
            c = m["constraint"]
            _obj(c, f"{where}.constraint", {"type"}, {"bounds"})
            if c["type"] not in ("none", "singly", "doubly"):
                raise ConfigError(f"{where}.constraint.type", f"expected 'none', 'singly' or 'doubly', got {c['type']!r}")
            if "bounds" in c:
                b = c["bounds"]
                if c["type"] != "doubly" or not isinstance(b, list) or len(b) != 2:
                    raise ConfigError(f"{where}.constraint.bounds", "bounds apply to doubly bounded constraints as [low, high]")
                lo, hi = (_num(x, f"{where}.constraint.bounds[{k}]") for k, x in enumerate(b))
                if not hi > lo:
                    raise ConfigError(f"{where}.constraint.bounds", "high must exceed low")
    elif kind == "amortised":
        _obj(
            m,
            where,
            {"kind"},
            {"event_shape", "latent_dim", "encoder_hidden", "decoder_hidden", "log_var", "margin", "max_value"},
        )
        if "event_shape" in m:
            _ints(m["event_shape"], f"{where}.event_shape")
        if "latent_dim" in m:
            _int(m["latent_dim"], f"{where}.latent_dim", 1)
        for key in ("encoder_hidden", "decoder_hidden"):
            if key in m:
                _ints(m[key], f"{where}.{key}")
        if "log_var" in m:
            _num(m["log_var"], f"{where}.log_var")
        for key in ("margin", "max_value"):
            if key in m:
                _num(m[key], f"{where}.{key}", positive=True)
    elif kind == "gumbel":
        _obj(m, where, {"kind", "categories"}, {"hidden"})
        _int(m["categories"], f"{where}.categories", 2)
        if "hidden" in m:
            _ints(m["hidden"], f"{where}.hidden")
    elif kind == "implicit":
        raise ConfigError(f"{where}.kind", "amortised-implicit (adversarial) mechanisms are not implemented")
    else:
        raise ConfigError(f"{where}.kind", f"unknown mechanism kind {kind!r} (choose from flow, amortised, gumbel)")


def parse_config(raw: Any) -> GraphConfig:
    """Validate a decoded JSON document and return a :class:`GraphConfig`."""
    doc = _obj(raw, "config", {"nodes"}, {"name", "training", "data"})
    nodes = doc["nodes"]
    if not isinstance(nodes, list) or not nodes:
        raise ConfigError("nodes", "expected a nonempty list")
    names: list[str] = []
    for k, node in enumerate(nodes):
        where = f"nodes[{k}]"
        _obj(node, where, {"name", "mechanism"}, {"parents"})
        name = _str(node["name"], f"{where}.name")
        if name in names:
            raise ConfigError(f"{where}.name", f"duplicate node name {name!r}")
        names.append(name)
        parents = node.get("parents", [])
        if not isinstance(parents, list):
            raise ConfigError(f"{where}.parents", "expected a list of node names")
        for j, p in enumerate(parents):
            _str(p, f"{where}.parents[{j}]")
        _check_mechanism(node["mechanism"], f"{where}.mechanism", bool(parents))
    for k, node in enumerate(nodes):
        for j, p in enumerate(node.get("parents", [])):
            if p not in names:
                raise ConfigError(f"nodes[{k}].parents[{j}]", f"unknown parent {p!r}")
            if p == node["name"]:
                raise ConfigError(f"nodes[{k}].parents[{j}]", "a node cannot be its own parent")
    try:
        tuple(graphlib.TopologicalSorter({n["name"]: n.get("parents", []) for n in nodes}).static_order())
    except graphlib.CycleError as exc:
        raise ConfigError("nodes", "cycle: " + " -> ".join(reversed(exc.args[1]))) from None

    tr = doc.get("training", {})
    _obj(tr, "training", set(), {"lr", "batch_size", "epochs", "particles", "seed"})
    lr = dict(DEFAULT_LR)
    if "lr" in tr:
        _obj(tr["lr"], "training.lr", set(), set(DEFAULT_LR))
        lr.update({k: _num(v, f"training.lr.{k}", positive=True) for k, v in tr["lr"].items()})
    training = TrainingConfig(
        lr=lr,
        batch_size=_int(tr.get("batch_size", 256), "training.batch_size", 1),
        epochs=_int(tr.get("epochs", 100), "training.epochs", 0),
        particles=_int(tr.get("particles", 4), "training.particles", 1),
        seed=_int(tr.get("seed", 0), "training.seed", 0),
    )
    data = doc.get("data", {})
    _obj(data, "data", set(), {"dir", "train", "val", "test"})
    for key, v in data.items():
        if v is not None:
            _str(v, f"data.{key}")
    name = _str(doc.get("name", "model"), "name")
    return GraphConfig(name=name, nodes=copy.deepcopy(nodes), training=training, data=dict(data), raw=copy.deepcopy(doc))


def load_config(path) -> GraphConfig:
    """Read and validate a JSON config; ``path`` may also name a bundled config."""
    p = Path(path)
    if not p.exists() and str(path).removesuffix("-desk") in BUNDLED:
        return bundled_config(str(path))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_config(raw)


def bundled_config(name: str) -> GraphConfig:
    """One of the bundled graphs; a ``-desk`` suffix selects the CPU-budget variant."""
    base = name.removesuffix("-desk")
    if base not in BUNDLED:
        raise ConfigError("config", f"no bundled config named {name!r} (choose from {', '.join(BUNDLED)}, optionally with -desk)")
    raw = json.loads(resources.files("dscm").joinpath("configs", f"{base}.json").read_text(encoding="utf-8"))
    if base != name:
        raw["name"] = name
        for node in raw["nodes"]:
            if node["mechanism"]["kind"] == "amortised":
                node["mechanism"]["log_var"] = DESK["log_var"]
        raw["training"]["lr"]["amortised"] = DESK["lr_amortised"]
    return parse_config(raw)


# ---------------------------------------------------------------------------
# building


def _encoded_dim(mech: Mechanism, parent: str, child: str) -> int:
    if isinstance(mech, AmortisedMechanism):
        raise ConfigError("nodes", f"amortised node {parent!r} cannot condition {child!r}")
    if isinstance(mech, GumbelMechanism):
        return mech.K
    return mech.dim


def _flow(spec: dict, ctx_dim: int, rng: np.random.Generator, name: str, data) -> InvertibleMechanism:
    dim = spec.get("dim", 1)
    core = []
    for k, t in enumerate(spec["transforms"]):
        kind = t["type"]
        if kind == "affine":
            core.append(Affine(np.ones(dim), np.zeros(dim)))
        elif kind == "spline":
            core.append(LinearSpline(t.get("bins", 8), t.get("bound", 3.0), rng=rng))
        else:
            net = MLP([ctx_dim, *t.get("hidden", []), 2 * dim], rng, name=f"{name}.cond{k}", out_gain=0.1)
            core.append(ConditionalAffine(net, dim=dim))
    core_t = core[0] if len(core) == 1 else Composition(core)
    c = spec.get("constraint", {"type": "none"})
    constraint = None
    if c["type"] == "singly":
        constraint = affine_normalisation_fit(data, "singly") if data is not None else affine_normalisation("singly", 0.0, 1.0)
    elif c["type"] == "doubly":
        if "bounds" in c:
            constraint = affine_normalisation_fit([0.0], "doubly", c["bounds"])
        elif data is not None:
            constraint = affine_normalisation_fit(data, "doubly")
        else:
            constraint = affine_normalisation("doubly", 0.0, 1.0)
    return core_t, constraint, dim


def build_scm(cfg: GraphConfig, fit_data: Mapping[str, np.ndarray] | None = None, seed: int | None = None) -> Scm:
    """Instantiate the configured graph.

    ``fit_data`` supplies training values for fitting the fixed
    normalisations of bounded flow nodes; without it they start at the
    identity and are expected to be restored from a checkpoint.
    """
    seed = cfg.training.seed if seed is None else seed
    specs = {n["name"]: n for n in cfg.nodes}
    order = list(graphlib.TopologicalSorter({n["name"]: n.get("parents", []) for n in cfg.nodes}).static_order())
    built: dict[str, Mechanism] = {}
    for name in order:
        node = specs[name]
        k = cfg.node_names().index(name)
        rng = np.random.default_rng([seed, k])
        parents = node.get("parents", [])
        encoders = [built[p].encode for p in parents]
        ctx_dim = sum(_encoded_dim(built[p], p, name) for p in parents)
        spec = node["mechanism"]
        data = None if fit_data is None or name not in fit_data else fit_data[name]
        if spec["kind"] == "flow":
            core, constraint, dim = _flow(spec, ctx_dim, rng, name, data)
            mech: Mechanism = InvertibleMechanism(core, constraint=constraint, parent_encoders=encoders, dim=dim)
        elif spec["kind"] == "amortised":
            mech = AmortisedMechanism(
                event_shape=spec.get("event_shape", [28, 28]),
                latent_dim=spec.get("latent_dim", 16),
                encoder_hidden=spec.get("encoder_hidden", [128, 64]),
                decoder_hidden=spec.get("decoder_hidden", [64, 128]),
                log_var=spec.get("log_var", -5.0),
                margin=spec.get("margin", 1e-3),
                max_value=spec.get("max_value", 255.0),
                context_dim=ctx_dim,
                parent_encoders=encoders,
                rng=rng,
            )
        elif spec["kind"] == "gumbel":
            K = spec["categories"]
            net = MLP([ctx_dim, *spec.get("hidden", []), K], rng, name=f"{name}.logits") if parents else None
            mech = GumbelMechanism(K, net=net, parent_encoders=encoders, rng=rng)
        else:
            mech = ImplicitMechanism()
        built[name] = mech
    return Scm([Node(n["name"], tuple(n.get("parents", [])), built[n["name"]]) for n in cfg.nodes])
