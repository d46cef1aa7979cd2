import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscm.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from dscm.config import BUNDLED, ConfigError, build_scm, bundled_config, load_config, parse_config
from dscm.numerics import Adam
from dscm.synthdata import generate_dataset
from dscm.training import evaluate, fit, initialise_from_data, make_optimizer


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(300, 1, "train"), generate_dataset(100, 1, "val")


def full_raw() -> dict:
    return copy.deepcopy(bundled_config("full").raw)


# -- configs ---------------------------------------------------------------------


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_build(name):
    s = build_scm(bundled_config(name))
    assert s.order[-1] == "x" and set(s.order) == {"t", "i", "x"}


def test_bundled_graphs():
    parents = {n: {k: build_scm(bundled_config(n)).nodes[k].parents for k in "tix"} for n in BUNDLED}
    assert parents["independent"] == {"t": (), "i": (), "x": ()}
    assert parents["conditional"] == {"t": (), "i": (), "x": ("t", "i")}
    assert parents["full"] == {"t": (), "i": ("t",), "x": ("t", "i")}


def test_desk_variant_changes_only_image_settings():
    base, desk = bundled_config("full"), bundled_config("full-desk")
    assert base.hash != desk.hash
    assert base.nodes[2]["mechanism"]["log_var"] == -5.0 and desk.nodes[2]["mechanism"]["log_var"] == -1.0
    assert base.training.lr["amortised"] == 1e-4 and desk.training.lr["amortised"] == 1e-3
    assert base.nodes[:2] == desk.nodes[:2]
    assert load_config("full-desk").hash == desk.hash


def test_unknown_bundled_name():
    with pytest.raises(ConfigError, match="no bundled config"):
        bundled_config("fully")


def test_unknown_key_reported_with_path():
    raw = full_raw()
    raw["nodes"][1]["mechanism"]["colour"] = "red"
    with pytest.raises(ConfigError, match=r"nodes\[1\]\.mechanism: unknown key\(s\) 'colour'"):
        parse_config(raw)


def test_cycle_rejected():
    raw = full_raw()
    raw["nodes"][0]["parents"] = ["i"]
    raw["nodes"][0]["mechanism"]["transforms"] = [{"type": "conditional_affine", "hidden": []}]
    with pytest.raises(ConfigError, match="cycle"):
        parse_config(raw)


def test_unknown_parent_rejected():
    raw = full_raw()
    raw["nodes"][1]["parents"] = ["q"]
    with pytest.raises(ConfigError, match=r"nodes\[1\]\.parents\[0\]: unknown parent 'q'"):
        parse_config(raw)


def test_json_syntax_error_has_line_and_column(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "nodes": [\n    {"name": "t",}\n  ]\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:3:"):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.json")


@settings(max_examples=60, deadline=None)
@given(
    st.recursive(
        st.none() | st.booleans() | st.integers() | st.floats(allow_nan=True) | st.text(max_size=5),
        lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.sampled_from(["nodes", "name", "mechanism", "kind", "parents", "x"]), inner, max_size=4),
        max_leaves=12,
    )
)
def test_config_parsing_is_total(doc):
    try:
        parse_config(doc)
    except ConfigError:
        pass


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2), st.sampled_from(["name", "parents", "mechanism"]), st.sampled_from([None, 3, "x", [], {}, -1.5]))
def test_corrupting_a_field_gives_a_config_error(k, key, value):
    raw = full_raw()
    raw["nodes"][k][key] = value
    try:
        cfg = parse_config(raw)
    except ConfigError as exc:
        assert f"nodes[{k}]" in str(exc) or str(exc).startswith("nodes")
    else:
        build_scm(cfg)


# -- checkpoints -------------------------------------------------------------------


def _trained(tiny, name: str = "full"):
    train, val = tiny
    cfg = bundled_config(name)
    s = build_scm(cfg, train.observation(), seed=3)
    initialise_from_data(s, train.observation())
    opt = make_optimizer(s, cfg.training.lr)
    r = fit(s, train.observation(), val.observation(), cfg.training, epochs=1, optimizer=opt, restore_best=False)
    return cfg, s, r, opt


def test_round_trip_is_bit_exact_at_32_bits(tmp_path, tiny):
    cfg, s, r, opt = _trained(tiny)
    save_checkpoint(tmp_path / "c", Checkpoint(cfg, s, r.step, r.history, opt))
    ck = load_checkpoint(tmp_path / "c")
    for k, t in s.named_tensors().items():
        assert np.array_equal(ck.scm.named_tensors()[k].data, t.data.astype(np.float32).astype(np.float64))
    assert ck.step == r.step and ck.history == json.loads(json.dumps(r.history))
    assert ck.optimizer.step_count == opt.step_count


def test_metrics_survive_round_trip(tmp_path, tiny):
    cfg, s, r, opt = _trained(tiny)
    for t in s.named_tensors().values():
        t.data[...] = t.data.astype(np.float32)
    val = tiny[1].observation()
    before = evaluate(s, val, seed=5)
    save_checkpoint(tmp_path / "c", Checkpoint(cfg, s, r.step))
    after = evaluate(load_checkpoint(tmp_path / "c").scm, val, seed=5)
    assert before == after


def test_hash_mismatch_refused(tmp_path, tiny):
    cfg, s, r, _ = _trained(tiny)
    save_checkpoint(tmp_path / "c", Checkpoint(cfg, s, r.step))
    other = bundled_config("conditional")
    with pytest.raises(CheckpointError, match=other.hash):
        load_checkpoint(tmp_path / "c", expected=other)
    assert load_checkpoint(tmp_path / "c", expected=cfg).step == r.step


def test_tampered_manifest_detected(tmp_path, tiny):
    cfg, s, r, _ = _trained(tiny)
    d = save_checkpoint(tmp_path / "c", Checkpoint(cfg, s, r.step))
    m = json.loads((d / "manifest.json").read_text())
    m["config"]["nodes"][1]["parents"] = []
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="does not hash"):
        load_checkpoint(d)


def test_truncated_blob_detected(tmp_path, tiny):
    cfg, s, r, _ = _trained(tiny)
    d = save_checkpoint(tmp_path / "c", Checkpoint(cfg, s, r.step))
    blob = (d / "params.bin").read_bytes()
    (d / "params.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(d)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path)


def test_resumed_optimiser_continues_identically(tmp_path, tiny):
    train, val = tiny
    cfg, s, r, opt = _trained(tiny, "independent")
    save_checkpoint(tmp_path / "c", Checkpoint(cfg, s, r.step, r.history, opt))
    ck = load_checkpoint(tmp_path / "c")
    # the live run continues from the same 32-bit state as the reloaded one
    for t in s.named_tensors().values():
        t.data[...] = t.data.astype(np.float32)
    for (p, st_a), (q, st_b) in zip(opt.groups.values(), ck.optimizer.groups.values()):
        st_a.m = [m.astype(np.float32).astype(float) for m in st_a.m]
        st_a.v = [v.astype(np.float32).astype(float) for v in st_a.v]
    a = fit(s, train.observation(), None, cfg.training, epochs=1, optimizer=opt, start_step=r.step)
    b = fit(ck.scm, train.observation(), None, cfg.training, epochs=1, optimizer=ck.optimizer, start_step=ck.step)
    assert a.step == b.step > r.step
    for k, t in s.named_tensors().items():
        assert np.allclose(ck.scm.named_tensors()[k].data, t.data, atol=1e-12)
    assert isinstance(ck.optimizer, Adam)
