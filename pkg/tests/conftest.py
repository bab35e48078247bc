"""Shared fixtures: the procedural corpus and a disk-cached bundle of trained
models reused by the training-dependent tests and the acceptance suite.

The bundle key hashes every package source file plus the training configs, so
any code or config change retrains from scratch. Set GARMGEN_FORCE_RETRAIN=1
to invalidate manually.
"""

import hashlib
import json
import os
import time
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import pytest

import garmgen
from garmgen import evalkit_data as ek
from garmgen import garment_latent as gl
from garmgen import prompt_map as pm

CACHE_ROOT = Path(__file__).parent / ".cache"
ACCEPT_SEEDS = (0, 1, 2)


def accept_config(seed=0, **kw):
    """Training config used by the acceptance experiments (criterion 5)."""
    return gl.desk_config(passes_per_epoch=7, seed=seed, **kw)


def covariance_config(seed, lambda_latent):
    """Paired configs for the latent-loss comparison (criterion 6)."""
    return gl.desk_config(passes_per_epoch=4, seed=seed,
                          lambda_latent=lambda_latent)


def _bundle_key() -> str:
    h = hashlib.sha256()
    src_dir = Path(garmgen.__file__).parent
    for path in sorted(src_dir.glob("*.py")):
        h.update(path.read_bytes())
    h.update(repr(asdict(accept_config())).encode())
    h.update(repr(asdict(covariance_config(0, 0.2))).encode())
    h.update(b"bundle-v1")
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def corpus():
    train, holdout = ek.make_corpus(24, 8, seed=0)
    return SimpleNamespace(train=train, holdout=holdout)


def _train_bundle(out: Path, corpus) -> dict:
    timings = {}
    logs = {}
    get = time.time

    def two_stage(name, cfg):
        t0 = get()
        ds = gl.build_dataset(corpus.train, cfg)
        enc, coarse, clog = gl.train_coarse(ds, cfg)
        gl.calibrate_model(enc, coarse, ds, cfg, stage_tag=1)
        fine, flog = gl.train_fine(enc, coarse, ds, cfg)
        gl.save_model(gl.TwoStageModel(enc, coarse, fine, cfg), out / name)
        timings[name] = get() - t0
        logs[name] = {"coarse": clog, "fine": flog}

    def coarse_only(name, cfg):
        t0 = get()
        ds = gl.build_dataset(corpus.train, cfg)
        enc, coarse, clog = gl.train_coarse(ds, cfg)
        gl.calibrate_model(enc, coarse, ds, cfg, stage_tag=1)
        gl.save_model(gl.TwoStageModel(enc, coarse, None, cfg), out / name)
        timings[name] = get() - t0
        logs[name] = {"coarse": clog}

    two_stage("full_s0", accept_config(seed=0))
    two_stage("nograd_s0", accept_config(seed=0, lambda_grad=0.0))

    t0 = get()
    cfg = accept_config(seed=0)
    ds = gl.build_dataset(corpus.train, cfg)
    model = gl.train_single_stage(ds, cfg)
    gl.save_model(model, out / "single_s0")
    timings["single_s0"] = get() - t0

    for seed in ACCEPT_SEEDS:
        coarse_only(f"withlat_s{seed}", covariance_config(seed, 0.2))
        coarse_only(f"nolat_s{seed}", covariance_config(seed, 0.0))

    # mappers ride on the full model's encoder
    full = gl.load_model(out / "full_s0")
    mapper_logs = {}
    for seed in ACCEPT_SEEDS:
        pairs = pm.build_pairs(corpus.train, full.encode_item, n_variants=4,
                               seed=seed)
        for loss in (("l1", "l2") if seed == 0 else ("l1",)):
            mc = pm.MapperConfig(loss=loss, seed=seed)
            mapper, mlog = pm.train_map(pairs, mc)
            name = f"mapper_{loss}_s{seed}"
            pm.save_mapper(mapper, out / name)
            mapper_logs[name] = mlog

    (out / "logs.json").write_text(json.dumps(
        {"timings": timings,
         "training_logs": logs,
         "mapper_logs": mapper_logs}, sort_keys=True))
    return timings


@pytest.fixture(scope="session")
def bundle(corpus):
    key = _bundle_key()
    out = CACHE_ROOT / key
    marker = out / "logs.json"
    if os.environ.get("GARMGEN_FORCE_RETRAIN") or not marker.exists():
        CACHE_ROOT.mkdir(exist_ok=True)
        out.mkdir(parents=True, exist_ok=True)
        _train_bundle(out, corpus)

    data = json.loads(marker.read_text())
    ns = SimpleNamespace(
        dir=out,
        full=gl.load_model(out / "full_s0"),
        nograd=gl.load_model(out / "nograd_s0"),
        single=gl.load_model(out / "single_s0"),
        withlat={s: gl.load_model(out / f"withlat_s{s}") for s in ACCEPT_SEEDS},
        nolat={s: gl.load_model(out / f"nolat_s{s}") for s in ACCEPT_SEEDS},
        mapper_l1=pm.load_mapper(out / "mapper_l1_s0"),
        mapper_l2=pm.load_mapper(out / "mapper_l2_s0"),
        mappers_l1={s: pm.load_mapper(out / f"mapper_l1_s{s}") for s in ACCEPT_SEEDS},
        timings=data["timings"],
        training_logs=data["training_logs"],
        mapper_logs=data["mapper_logs"],
    )
    return ns
