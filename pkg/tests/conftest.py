"""Shared fixtures: synthetic splits and the three trained models.

Training takes several minutes on one CPU, so the checkpoints are kept in the
pytest cache under a key built from the recipe and the package sources.
Delete ``.pytest_cache`` (or pass ``--cache-clear``) to retrain.
"""

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

import dscm
from dscm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dscm.config import bundled_config, build_scm
from dscm.scm import Scm
from dscm.synthdata import SyntheticDataset, generate_dataset
from dscm.training import fit, initialise_from_data, make_optimizer

RECIPE = {
    "n_train": 60_000,
    "n_val": 2_000,
    "n_test": 10_000,
    "seed": 0,
    "scalar_epochs": 20,
    "image_records": 10_000,
    "image_epochs": 30,
    "configs": ["independent-desk", "conditional-desk", "full-desk"],
}
MODEL_NAMES = ("independent", "conditional", "full")


@dataclass
class TrainedModels:
    models: dict[str, Scm]
    scalar_seconds: dict[str, float]
    test: SyntheticDataset
    paths: dict[str, Path]


def _source_digest() -> str:
    h = hashlib.sha256(json.dumps(RECIPE, sort_keys=True).encode())
    # metrics and the command line do not change what training produces
    for path in sorted(Path(dscm.__file__).parent.rglob("*")):
        if path.suffix in (".py", ".json") and path.name not in ("cli.py", "evalsuite.py"):
            h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _train(name: str, train, val) -> tuple[Scm, float]:
    cfg = bundled_config(name)
    obs, vobs = train.observation(), val.observation()
    scm = build_scm(cfg, obs, seed=RECIPE["seed"])
    initialise_from_data(scm, obs)
    scalars = [k for k in scm.order if k != "x"]
    t0 = time.perf_counter()
    r1 = fit(scm, obs, vobs, cfg.training, RECIPE["scalar_epochs"], make_optimizer(scm, cfg.training.lr, scalars), scalars)
    seconds = time.perf_counter() - t0
    sub = {k: v[: RECIPE["image_records"]] for k, v in obs.items()}
    opt = make_optimizer(scm, cfg.training.lr, ["x"])
    fit(scm, sub, vobs, cfg.training, RECIPE["image_epochs"], opt, ["x"], r1.step)
    return scm, seconds


@pytest.fixture(scope="session")
def splits():
    return {
        "train": generate_dataset(RECIPE["n_train"], RECIPE["seed"], "train"),
        "val": generate_dataset(RECIPE["n_val"], RECIPE["seed"], "val"),
        "test": generate_dataset(RECIPE["n_test"], RECIPE["seed"], "test"),
    }


@pytest.fixture(scope="session")
def trained(request, splits) -> TrainedModels:
    root = request.config.cache.mkdir(f"dscm-models-{_source_digest()}")
    models, seconds, paths = {}, {}, {}
    for short, name in zip(MODEL_NAMES, RECIPE["configs"]):
        path = paths[short] = root / short
        meta = path / "timing.json"
        if meta.exists():
            models[short] = load_checkpoint(path).scm
            seconds[short] = json.loads(meta.read_text())["scalar_seconds"]
            continue
        scm, secs = _train(name, splits["train"], splits["val"])
        save_checkpoint(path, Checkpoint(bundled_config(name), scm))
        meta.write_text(json.dumps({"scalar_seconds": secs}))
        # evaluate what was stored, so cached and fresh runs see the same 32-bit weights
        models[short] = load_checkpoint(path).scm
        seconds[short] = secs
    return TrainedModels(models, seconds, splits["test"], paths)


@pytest.fixture(scope="session")
def cf_records(splits) -> SyntheticDataset:
    """The first 1000 test records whose thickness stays renderable after ``t + 2``."""
    test = splits["test"]
    keep = np.flatnonzero(test.t + 2.0 <= 8.0)[:1000]
    return test.subset(keep)


# -- acceptance summary ----------------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
