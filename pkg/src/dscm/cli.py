"""Command-line interface: ``dscm generate | train | eval | intervene | counterfactual``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, GraphConfig, build_scm, load_config
from .evalsuite import association_report, histogram_csv, ks_distance
from .mechanisms import AmortisedMechanism, ShiftedMechanism
from .numerics import Adam
from .scm import Scm, Surrogate
from .synthdata import (
    HEIGHT,
    WIDTH,
    SyntheticDataset,
    generate_splits,
    reference_counterfactual,
    save_images,
    true_scm,
)
from .training import fit, initialise_from_data, make_optimizer, restore, snapshot

__all__ = ["main", "parse_intervention", "InterventionSyntaxError", "ParsedIntervention"]

GRAMMAR = (
    "intervention grammar: <node>=<const> (atomic), <node>=+<delta> (per-record shift), "
    "<node>=f_<NODE>(eps)+<c> (noise-shift surrogate); join several with ','; an empty string means no intervention"
)


class UsageError(Exception):
    """Bad flags, configs or inputs; exits with code 2."""


class InterventionSyntaxError(ValueError):
    def __init__(self, text: str, detail: str):
        super().__init__(f"cannot parse intervention {text!r}: {detail}\n{GRAMMAR}")


# ---------------------------------------------------------------------------
# intervention expressions

_UNSIGNED = r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_NUM = rf"[+-]?{_UNSIGNED}"
_SHIFT = re.compile(rf"^f_(?P<fn>[A-Za-z_]\w*)(?:\(\s*eps\s*\))?\s*(?P<c>[+-]\s*{_UNSIGNED})?$")


@dataclass(frozen=True)
class ParsedIntervention:
    node: str
    kind: str  # "const", "delta" or "shift"
    value: float


def parse_intervention(text: str) -> list[ParsedIntervention]:
    text = (text or "").strip()
    if not text:
        return []
    out = []
    for part in text.split(","):
        part = part.strip()
        if "=" not in part:
            raise InterventionSyntaxError(text, f"missing '=' in {part!r}")
        node, rhs = (s.strip() for s in part.split("=", 1))
        if not re.fullmatch(r"[A-Za-z_]\w*", node):
            raise InterventionSyntaxError(text, f"bad node name {node!r}")
        if any(p.node == node for p in out):
            raise InterventionSyntaxError(text, f"node {node!r} assigned twice")
        if re.fullmatch(rf"\+\s*{_UNSIGNED}", rhs):
            out.append(ParsedIntervention(node, "delta", float(rhs.replace(" ", ""))))
        elif re.fullmatch(_NUM, rhs):
            out.append(ParsedIntervention(node, "const", float(rhs)))
        else:
            m = _SHIFT.match(rhs)
            if not m:
                raise InterventionSyntaxError(text, f"unrecognised right-hand side {rhs!r}")
            if m["fn"].lower() != node.lower():
                raise InterventionSyntaxError(text, f"f_{m['fn']} does not belong to node {node!r}")
            c = float(m["c"].replace(" ", "")) if m["c"] else 0.0
            out.append(ParsedIntervention(node, "shift", c))
    return out


def to_intervention(parsed: list[ParsedIntervention], scm: Scm, obs=None) -> dict:
    iv = {}
    for p in parsed:
        if p.node not in scm.nodes:
            raise UsageError(f"intervention targets unknown node {p.node!r} (nodes: {', '.join(scm.order)})")
        if p.kind == "const":
            iv[p.node] = p.value
        elif p.kind == "delta":
            if obs is None:
                raise UsageError(f"per-record shift on {p.node!r} needs observed records")
            iv[p.node] = np.asarray(obs[p.node], dtype=float) + p.value
        else:
            iv[p.node] = Surrogate(ShiftedMechanism(scm.mechanism(p.node), p.value))
    return iv


# ---------------------------------------------------------------------------
# helpers


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg, flush=True)


def _load_split(data_dir: Path, split: str) -> SyntheticDataset:
    d = data_dir / split
    if not (d / "covariates.csv").exists():
        raise UsageError(f"no {split} split under {data_dir} (expected {d / 'covariates.csv'})")
    return SyntheticDataset.load(d)


def _data_dir(args, cfg: GraphConfig | None = None) -> Path:
    raw = args.data_dir or (cfg.data.get("dir") if cfg else None)
    if not raw:
        raise UsageError("no data directory given (use --data-dir)")
    p = Path(raw)
    if not p.is_dir():
        raise UsageError(f"data directory {p} does not exist")
    return p


def _check_compatible(scm: Scm, cfg: GraphConfig, where: str) -> None:
    """The synthetic data provide nodes t, i and a 28×28 image x."""
    known = {"t": 1, "i": 1, "x": HEIGHT * WIDTH}
    for name in scm.order:
        dim = scm.mechanism(name).dim
        if known.get(name) != dim:
            raise CheckpointError(
                f"{where}: graph {cfg.name!r} (config hash {cfg.hash}) has node {name!r} of size {dim}, "
                "which the synthetic dataset does not provide"
            )


def _scalar_part(scm: Scm) -> Scm:
    keep = [k for k in scm.order if not isinstance(scm.mechanism(k), AmortisedMechanism)]
    if any(set(scm.nodes[k].parents) - set(keep) for k in keep):
        return scm
    return Scm([scm.nodes[k] for k in scm.nodes if k in keep])


def _out(args, own: str | None, default: str | None = None) -> Path:
    value = own or args.out or default
    if not value:
        raise UsageError("no output path given (use --out)")
    return Path(value)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.n_val < 1 or args.n_test < 1:
        raise UsageError("--n-val and --n-test must be >= 1")
    out = _out(args, args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        splits = generate_splits(args.n, args.n_val, args.n_test, seed=args.seed or 0)
        for name, ds in splits.items():
            ds.save(out / name)
    except OSError as exc:
        raise RuntimeError(f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    tr = splits["train"]
    _log(args, f"wrote {len(tr)} train / {args.n_val} val / {args.n_test} test records to {out}")
    _log(args, f"train: mean t = {tr.t.mean():.4f}, mean i = {tr.i.mean():.4f}, i range = ({tr.i.min():.2f}, {tr.i.max():.2f})")
    return 0


def cmd_train(args) -> int:
    if args.epochs is not None and args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = ckpt.config
        if args.config and load_config(args.config).hash != cfg.hash:
            raise UsageError(f"--config does not match the graph of {args.resume} (hash {cfg.hash})")
    elif args.config:
        cfg = load_config(args.config)
        ckpt = None
    else:
        raise UsageError("train needs --config or --resume")
    data = _data_dir(args, cfg)
    train_ds = _load_split(data, "train")
    val_ds = _load_split(data, "val")
    if args.max_records:
        train_ds = train_ds.subset(np.arange(min(args.max_records, len(train_ds))))
    train_obs, val_obs = train_ds.observation(), val_ds.observation()
    if ckpt is None:
        scm = build_scm(cfg, seed=args.seed)
        _check_compatible(scm, cfg, str(args.config))
        scm = build_scm(cfg, train_obs, seed=args.seed)
        initialise_from_data(scm, train_obs)
        step, history = 0, []
    else:
        scm, step, history = ckpt.scm, ckpt.step, list(ckpt.history)
        _check_compatible(scm, cfg, str(args.resume))
    tcfg = cfg.training
    if args.seed is not None:
        tcfg.seed = args.seed
    for group, lr in (("amortised", args.lr_amortised), ("flow", args.lr_flow)):
        if lr is not None:
            tcfg.lr[group] = lr
    epochs = tcfg.epochs if args.epochs is None else args.epochs
    out = _out(args, None)
    image_nodes = [k for k in scm.order if isinstance(scm.mechanism(k), AmortisedMechanism)]
    log = (lambda m: _log(args, m)) if not args.quiet else None
    # the objective is a sum of per-node terms, so node groups may see different data
    if args.image_records and image_nodes:
        scalar_nodes = [k for k in scm.order if k not in image_nodes]
        opt_all = ckpt.optimizer if ckpt and ckpt.optimizer else None
        opt_s = opt_all.subset({"flow", "discrete"}) if opt_all else make_optimizer(scm, tcfg.lr, scalar_nodes)
        opt_i = opt_all.subset({"amortised"}) if opt_all else make_optimizer(scm, tcfg.lr, image_nodes)
        _log(args, f"training scalar nodes {scalar_nodes} on {len(train_ds)} records")
        r1 = fit(scm, train_obs, val_obs, tcfg, epochs, opt_s, scalar_nodes, step, log)
        sub = {k: v[: args.image_records] for k, v in train_obs.items()}
        _log(args, f"training image nodes {image_nodes} on {len(sub[image_nodes[0]])} records")
        r2 = fit(scm, sub, val_obs, tcfg, epochs, opt_i, image_nodes, r1.step, log)
        optimizer = Adam.merge(opt_s, opt_i)
        step = r2.step
        history += [dict(h, nodes="scalar") for h in r1.history] + [dict(h, nodes="image") for h in r2.history]
        last_params = None
    else:
        optimizer = ckpt.optimizer if ckpt and ckpt.optimizer else make_optimizer(scm, tcfg.lr)
        r = fit(scm, train_obs, val_obs, tcfg, epochs, optimizer, None, step, log, restore_best=False)
        last_params = snapshot(scm)
        if r.best_epoch >= 0:
            restore(scm, r.best_params)
        step = r.step
        history += r.history
    save_checkpoint(out, Checkpoint(cfg, scm, step, history, optimizer))
    if last_params is not None and epochs > 0:
        restore(scm, last_params)
        save_checkpoint(out / "last", Checkpoint(cfg, scm, step, history, optimizer))
    _log(args, f"saved checkpoint to {out} (step {step})")
    return 0


def cmd_eval(args) -> int:
    data = _data_dir(args)
    test = _load_split(data, args.split)
    if args.max_records:
        test = test.subset(np.arange(min(args.max_records, len(test))))
    models = {}
    for path in args.checkpoints:
        ck = load_checkpoint(path)
        _check_compatible(ck.scm, ck.config, path)
        name = ck.config.name
        while name in models:
            name += "'"
        models[name] = ck.scm
    report = association_report(models, test, seed=args.seed or 0, particles=args.particles, recon_samples=args.recon_samples)
    text = report.to_csv()
    out = _out(args, None, "report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    _log(args, text.rstrip())
    return 0


def cmd_intervene(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    parsed = parse_intervention(args.do)
    ck = load_checkpoint(args.checkpoint)
    model = _scalar_part(ck.scm)
    oracle = true_scm(with_image=False)
    names = [k for k in model.order if k in oracle.nodes]
    seed = args.seed or 0
    rng = np.random.default_rng([seed, 11])
    samples = model.do(to_intervention(parsed, model)).ancestral_sample(args.n, rng)
    truth = oracle.do(to_intervention(parsed, oracle)).ancestral_sample(args.n, np.random.default_rng([seed, 12]))
    out = _out(args, None, "samples.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = model.order
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in np.column_stack([samples[k][:, 0] for k in cols]):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    summary = {"intervention": args.do, "n": args.n}
    if len(names) >= 2:
        a = np.column_stack([samples[k][:, 0] for k in names[:2]])
        b = np.column_stack([truth[k][:, 0] for k in names[:2]])
        both = np.concatenate([a, b])
        ranges = [(float(both[:, k].min()), float(both[:, k].max()) + 1e-12) for k in range(2)]
        stem = out.with_suffix("")
        Path(f"{stem}.hist.csv").write_text(histogram_csv(a, names[:2], 64, ranges), encoding="utf-8")
        Path(f"{stem}.oracle_hist.csv").write_text(histogram_csv(b, names[:2], 64, ranges), encoding="utf-8")
        summary["sliced_ks"] = ks_distance(a, b)
    for k in names:
        summary[f"ks_{k}"] = ks_distance(samples[k][:, 0], truth[k][:, 0])
    Path(f"{out.with_suffix('')}.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _log(args, json.dumps(summary, sort_keys=True))
    return 0


def _index_range(text: str, n: int) -> np.ndarray:
    m = re.fullmatch(r"\s*(\d+)\s*(?::\s*(\d+)\s*)?", text)
    if not m:
        raise UsageError(f"--index expects k or a:b, got {text!r}")
    a = int(m[1])
    b = int(m[2]) if m[2] is not None else a + 1
    if not 0 <= a < b <= n:
        raise UsageError(f"--index {text} is outside the {n} available records")
    return np.arange(a, b)


def cmd_counterfactual(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    parsed = parse_intervention(args.do)
    ck = load_checkpoint(args.checkpoint)
    _check_compatible(ck.scm, ck.config, args.checkpoint)
    data = _data_dir(args)
    ds = _load_split(data, args.split)
    idx = _index_range(args.index, len(ds))
    sub = ds.subset(idx)
    obs = sub.observation()
    iv = to_intervention(parsed, ck.scm, obs)
    cf = ck.scm.counterfactual(obs, iv, np.random.default_rng([args.seed or 0, 13]), args.samples)
    # the generator's answer for the same unit
    ref = sub
    targets = {p.node for p in parsed}
    if targets - {"t", "i"} or len(targets) > 1:
        raise UsageError("reference counterfactuals exist for a single intervention on t or i")
    if targets:
        p = parsed[0]
        base = sub.t if p.node == "t" else sub.i
        new = np.full(len(sub), p.value) if p.kind == "const" else base + p.value
        try:
            ref = reference_counterfactual(sub, **({"t_new": new} if p.node == "t" else {"i_new": new}))
        except ValueError as exc:
            raise RuntimeError(f"intervention leaves the renderable range: {exc}") from None
    n = len(sub)
    x_cf = np.asarray(cf.mean["x"]).reshape(n, HEIGHT, WIDTH)
    x_obs = sub.images.astype(float)
    diff = x_cf - x_obs
    mae = float(np.mean(np.abs(x_cf - ref.images.astype(float))))
    out = _out(args, None)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "covariates.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("index,t,i,t_cf,i_cf,t_ref,i_ref\n")
        for k in range(n):
            row = [sub.t[k], sub.i[k], cf.mean["t"][k, 0], cf.mean["i"][k, 0], ref.t[k], ref.i[k]]
            fh.write(f"{int(sub.index[k])}," + ",".join(repr(float(v)) for v in row) + "\n")
    save_images(out, x_cf)
    diff_dir = out / "difference"
    diff_dir.mkdir(exist_ok=True)
    save_images(diff_dir, diff)
    summary = {"intervention": args.do, "records": n, "samples": args.samples, "mae_vs_reference": mae}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _log(args, json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random stream")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress output")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")

    parser = argparse.ArgumentParser(prog="dscm", description="Deep structural causal models on synthetic stroke data.")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--quiet", action="store_true", default=False)
    parser.add_argument("--out", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write train/val/test splits")
    g.add_argument("--n", type=int, required=True, help="training records")
    g.add_argument("--n-val", type=int, default=1000)
    g.add_argument("--n-test", type=int, default=10000)
    g.add_argument("--out-dir", default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="fit a graph config to a dataset")
    t.add_argument("--config", help="JSON config path or bundled name (independent, conditional, full, each optionally with -desk)")
    t.add_argument("--data-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--max-records", type=int, help="use only the first N training records")
    t.add_argument("--image-records", type=int, help="train image nodes on the first N records only")
    t.add_argument("--lr-amortised", type=float)
    t.add_argument("--lr-flow", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="associative report for checkpoints")
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--particles", type=int, default=4)
    e.add_argument("--recon-samples", type=int, default=32)
    e.add_argument("--max-records", type=int)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("intervene", parents=[common], help="interventional samples vs the generator")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--do", required=True)
    v.add_argument("--n", type=int, default=10000)
    v.set_defaults(func=cmd_intervene)

    c = sub.add_parser("counterfactual", parents=[common], help="counterfactual images for stored records")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data-dir", required=True)
    c.add_argument("--index", required=True, help="record k or range a:b")
    c.add_argument("--do", default="")
    c.add_argument("--samples", type=int, default=32)
    c.add_argument("--split", default="test")
    c.set_defaults(func=cmd_counterfactual)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, InterventionSyntaxError) as exc:
        print(f"dscm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"dscm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
