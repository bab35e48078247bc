import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from garmgen import prompt_map as pm
from garmgen.garment_latent import LatentCode


# ---------------------------------------------------------------------------
# pseudo-embeddings

def test_pseudo_embed_order_invariant():
    e1 = pm.pseudo_embed(["skirt", "long", "silk"], seed=0)
    e2 = pm.pseudo_embed(["silk", "skirt", "long"], seed=0)
    assert np.array_equal(e1.values, e2.values)


def test_pseudo_embed_single_token_unit_direction():
    e = pm.pseudo_embed(["skirt"], seed=0)
    assert np.linalg.norm(e.values) == pytest.approx(1.0)
    again = pm.pseudo_embed(["skirt"], seed=0)
    assert np.array_equal(e.values, again.values)


def test_pseudo_embed_distinct_prompts():
    e1 = pm.pseudo_embed(["skirt", "long"], seed=0)
    e2 = pm.pseudo_embed(["skirt", "short"], seed=0)
    assert float(e1.values @ e2.values) < 0.999


def test_pseudo_embed_unknown_token_deterministic():
    e1 = pm.pseudo_embed(["zebra-print"], seed=0)
    e2 = pm.pseudo_embed(["zebra-print"], seed=0)
    assert np.array_equal(e1.values, e2.values)


def test_pseudo_embed_empty_error():
    with pytest.raises(ValueError):
        pm.pseudo_embed([], seed=0)


def test_vocabulary_registry(tmp_path):
    path = tmp_path / "vocab.json"
    pm.save_vocabulary(path, seed=0, dim=64)
    data = json.loads(path.read_text())
    assert set(pm.MATERIALS) <= set(data["tokens"])
    assert set(pm.COLORS) <= set(data["tokens"])
    assert data["dim"] == 64


# ---------------------------------------------------------------------------
# embedding files

def test_embedding_file_round_trip(tmp_path):
    e = pm.pseudo_embed(["poncho", "wool"], seed=3)
    jpath = tmp_path / "emb.json"
    bpath = tmp_path / "emb.embv"
    pm.save_embedding(e, jpath)
    pm.save_embedding(e, bpath)
    assert np.abs(pm.load_embedding(jpath).values - e.values).max() < 1e-15
    assert np.array_equal(pm.load_embedding(bpath).values, e.values)


def test_embedding_json_dim_mismatch(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"dim": 3, "values": [1.0, 2.0]}))
    with pytest.raises(ValueError, match="dim"):
        pm.load_embedding(path)


# ---------------------------------------------------------------------------
# pair generation

class _FakeItem:
    def __init__(self, i):
        self.garment_id = f"g{i:03d}"
        self.tokens = ["skirt", "long" if i % 2 else "short", "flared"]
        self.mesh = i  # opaque handle for the fake encoder


def _fake_encode(handle):
    rng = np.random.default_rng(int(handle))
    return LatentCode(rng.normal(size=32))


def test_build_pairs_counts_and_materials():
    items = [_FakeItem(i) for i in range(20)]
    pairs = pm.build_pairs(items, _fake_encode, n_variants=4, seed=0)
    assert len(pairs) == 80
    for p in pairs.pairs:
        assert p.provenance["material"] in pm.MATERIALS
        assert p.provenance["color"] in pm.COLORS


def test_build_pairs_deterministic():
    items = [_FakeItem(i) for i in range(5)]
    p1 = pm.build_pairs(items, _fake_encode, n_variants=2, seed=9)
    p2 = pm.build_pairs(items, _fake_encode, n_variants=2, seed=9)
    for a, b in zip(p1.pairs, p2.pairs):
        assert np.array_equal(a.embedding, b.embedding)
        assert a.provenance == b.provenance


def test_build_pairs_requires_encoder():
    with pytest.raises(ValueError, match="encoder"):
        pm.build_pairs([_FakeItem(0)], None)


def test_pairs_file_round_trip(tmp_path):
    items = [_FakeItem(i) for i in range(3)]
    pairs = pm.build_pairs(items, _fake_encode, n_variants=2, seed=1)
    path = tmp_path / "pairs.jsonl"
    pm.save_pairs(pairs, path)
    back = pm.load_pairs(path)
    assert len(back) == len(pairs)
    assert np.allclose(back.pairs[0].latent, pairs.pairs[0].latent)


# ---------------------------------------------------------------------------
# mapper

def _toy_pairs(n=48, seed=0):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(64, 32)) / 8.0
    pairs = []
    for i in range(n):
        e = rng.normal(size=64)
        e /= np.linalg.norm(e)
        pairs.append(pm.Pair(e, e @ target + 0.02 * rng.normal(size=32),
                             {"garment_id": f"g{i}"}))
    return pm.PairSet(pairs, 64, 32)


def test_train_map_loss_decreases():
    params, log = pm.train_map(_toy_pairs(), pm.MapperConfig(epochs=80, seed=0))
    assert log[-1]["train_loss"] < log[0]["train_loss"]
    assert log[-1]["holdout_l1"] < log[0]["holdout_l1"]


def test_train_map_dim_mismatch():
    pairs = _toy_pairs()
    with pytest.raises(ValueError, match="dim"):
        pm.train_map(pairs, pm.MapperConfig(embedding_dim=48, epochs=2))


def test_map_embedding_repeatable_and_validated():
    params, _ = pm.train_map(_toy_pairs(), pm.MapperConfig(epochs=10, seed=1))
    e = pm.pseudo_embed(["skirt"], seed=0)
    l1 = pm.map_embedding(params, e)
    l2 = pm.map_embedding(params, e)
    assert np.array_equal(l1.values, l2.values)
    with pytest.raises(ValueError, match="dim"):
        pm.map_embedding(params, np.zeros(10))
    zero = pm.map_embedding(params, np.zeros(64))
    assert np.isfinite(zero.values).all()


def test_mapper_save_load(tmp_path):
    params, _ = pm.train_map(_toy_pairs(), pm.MapperConfig(epochs=5, seed=2))
    pm.save_mapper(params, tmp_path)
    back = pm.load_mapper(tmp_path)
    e = pm.pseudo_embed(["top"], seed=0)
    assert np.array_equal(pm.map_embedding(params, e).values,
                          pm.map_embedding(back, e).values)


# ---------------------------------------------------------------------------
# editing

@pytest.fixture(scope="module")
def trained_mapper():
    params, _ = pm.train_map(_toy_pairs(), pm.MapperConfig(epochs=60, seed=3))
    return params


def test_edit_strength_zero_identity(trained_mapper):
    lat = LatentCode(np.random.default_rng(0).normal(size=32))
    e = pm.pseudo_embed(["skirt"], seed=0)
    f = pm.pseudo_embed(["long"], seed=0)
    out = pm.edit(lat, e, f, trained_mapper, strength=0.0)
    assert np.array_equal(out.values, lat.values)


def test_edit_full_k_full_strength_lands_on_mapped(trained_mapper):
    lat = LatentCode(np.random.default_rng(1).normal(size=32))
    e = pm.pseudo_embed(["skirt"], seed=0)
    f = pm.pseudo_embed(["long"], seed=0)
    out = pm.edit(lat, e, f, trained_mapper, k=32, strength=1.0)
    mod = pm.map_embedding(trained_mapper, pm.blend_embeddings(e, f, 0.5))
    assert np.array_equal(out.values, mod.values)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.floats(0.1, 2.0, allow_nan=False))
def test_edit_changes_at_most_k_dims(k, strength):
    params, _ = pm.train_map(_toy_pairs(), pm.MapperConfig(epochs=3, seed=4))
    lat = LatentCode(np.random.default_rng(2).normal(size=32))
    e = pm.pseudo_embed(["top"], seed=0)
    f = pm.pseudo_embed(["sleeved"], seed=0)
    out = pm.edit(lat, e, f, params, k=k, strength=strength)
    assert int((out.values != lat.values).sum()) <= k


def test_edit_top_k_selection_by_magnitude(trained_mapper):
    # force a known delta by editing toward the mapped target directly
    e = pm.pseudo_embed(["skirt"], seed=0)
    mod = pm.map_embedding(trained_mapper, pm.blend_embeddings(e, e, 0.5))
    delta = np.zeros(32)
    delta[0], delta[1], delta[2] = 0.9, -0.1, 0.5
    lat = LatentCode(mod.values + delta)
    out = pm.edit(lat, e, e, trained_mapper, k=2, strength=1.0)
    changed = set(np.nonzero(out.values != lat.values)[0])
    assert changed == {0, 2}


def test_edit_k_exceeds_dim(trained_mapper):
    lat = LatentCode(np.zeros(32))
    e = pm.pseudo_embed(["skirt"], seed=0)
    with pytest.raises(ValueError, match="k="):
        pm.edit(lat, e, e, trained_mapper, k=33)


def test_edit_self_feature_near_identity(trained_mapper):
    # blending an embedding with itself re-normalizes to itself, so the edit
    # moves each touched dim by no more than its self-consistency residual
    e = pm.pseudo_embed(["skirt", "flared"], seed=0)
    blended = pm.blend_embeddings(e, e, 0.5)
    assert np.abs(blended.values - e.values).max() < 1e-12
    lat = LatentCode(np.random.default_rng(5).normal(size=32))
    out = pm.edit(lat, e, e, trained_mapper, k=7, strength=1.0)
    residual = np.abs(lat.values - pm.map_embedding(trained_mapper, e).values)
    moved = np.abs(out.values - lat.values)
    assert (moved <= residual + 1e-12).all()
