"""Embedding-space handling: deterministic pseudo-embeddings, the
embedding-to-latent mapping network, weakly supervised pair generation, and
embedding-arithmetic editing of garment latents.

Pseudo-embeddings stand in for a real text/image encoder: every token owns a
fixed seeded direction on the unit sphere and a prompt is the normalized sum
of its token directions. Real embedding vectors of any dimension can be fed
through the same file interface instead.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, MlpParams, forward, concat
from .garment_latent import LatentCode

MATERIALS = ("silk", "cotton", "wool", "leather")
COLORS = ("vibrant", "dull", "bright", "shiny", "matte")

BASE_VOCABULARY = (
    "skirt", "top", "poncho",
    "long", "short", "flared", "straight", "wrinkled", "smooth",
    "sleeved", "sleeveless",
) + MATERIALS + COLORS


@dataclass
class PromptEmbedding:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.values).all():
            raise ValueError("embedding has non-finite entries")

    @property
    def dim(self):
        return len(self.values)


def _token_direction(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(np.random.SeedSequence([seed, key]))
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def pseudo_embed(tokens, seed: int = 0, dim: int = 64) -> PromptEmbedding:
    """Normalized sum of per-token unit directions; token order irrelevant."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("pseudo_embed needs at least one token")
    total = np.zeros(dim)
    for tok in sorted(tokens):
        total += _token_direction(tok, dim, seed)
    norm = np.linalg.norm(total)
    if norm < 1e-12:
        raise ValueError("token directions cancelled; cannot normalize")
    return PromptEmbedding(total / norm)


def save_vocabulary(path, seed: int = 0, dim: int = 64, extra_tokens=()):
    """Registry of known tokens with their direction fingerprints."""
    reg = {}
    for tok in sorted(set(BASE_VOCABULARY) | set(extra_tokens)):
        d = _token_direction(tok, dim, seed)
        reg[tok] = hashlib.sha256(d.tobytes()).hexdigest()[:16]
    with open(path, "w") as fh:
        json.dump({"seed": seed, "dim": dim, "tokens": reg}, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# embedding files

_EMB_MAGIC = b"EMBV"


def save_embedding(emb: PromptEmbedding, path):
    if str(path).endswith(".json"):
        with open(path, "w") as fh:
            json.dump({"dim": emb.dim, "values": emb.values.tolist()}, fh)
    else:
        with open(path, "wb") as fh:
            fh.write(_EMB_MAGIC)
            fh.write(struct.pack("<I", emb.dim))
            fh.write(emb.values.astype("<f8").tobytes())


def load_embedding(path) -> PromptEmbedding:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _EMB_MAGIC:
            (dim,) = struct.unpack("<I", fh.read(4))
            vals = np.frombuffer(fh.read(8 * dim), dtype="<f8")
            return PromptEmbedding(vals.copy())
    with open(path) as fh:
        data = json.load(fh)
    vals = np.asarray(data["values"], dtype=np.float64)
    if len(vals) != data.get("dim", len(vals)):
        raise ValueError(f"{path}: dim field does not match value count")
    return PromptEmbedding(vals)


# ---------------------------------------------------------------------------
# pair generation

@dataclass
class Pair:
    embedding: np.ndarray
    latent: np.ndarray
    provenance: dict


@dataclass
class PairSet:
    pairs: list[Pair]
    embedding_dim: int
    latent_dim: int

    def __len__(self):
        return len(self.pairs)

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        e = np.stack([p.embedding for p in self.pairs])
        l = np.stack([p.latent for p in self.pairs])
        return e, l


def save_pairs(pairs: PairSet, path):
    with open(path, "w") as fh:
        for p in pairs.pairs:
            fh.write(json.dumps({"embedding": p.embedding.tolist(),
                                 "latent": p.latent.tolist(),
                                 "provenance": p.provenance},
                                sort_keys=True) + "\n")


def load_pairs(path) -> PairSet:
    pairs = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            pairs.append(Pair(np.asarray(d["embedding"]), np.asarray(d["latent"]),
                              d["provenance"]))
    if not pairs:
        raise ValueError(f"{path}: empty pair file")
    return PairSet(pairs, len(pairs[0].embedding), len(pairs[0].latent))


def build_pairs(items, encode_fn, n_variants: int = 4, seed: int = 0,
                embedding_dim: int = 64) -> PairSet:
    """Weakly supervised pairs: garment attribute tokens plus randomly chosen
    material/color fillers, embedded and matched to the encoded latent."""
    if encode_fn is None:
        raise ValueError("build_pairs needs a trained encoder")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 424242]))
    pairs = []
    for item in items:
        latent = encode_fn(item.mesh)
        lat = latent.values if isinstance(latent, LatentCode) else np.asarray(latent)
        for _ in range(n_variants):
            material = str(rng.choice(MATERIALS))
            color = str(rng.choice(COLORS))
            tokens = list(item.tokens) + [material, color]
            emb = pseudo_embed(tokens, seed=seed, dim=embedding_dim)
            pairs.append(Pair(emb.values, lat.copy(), {
                "garment_id": item.garment_id, "tokens": tokens,
                "material": material, "color": color}))
    return PairSet(pairs, embedding_dim, len(pairs[0].latent))


# ---------------------------------------------------------------------------
# mapping network

@dataclass
class MapperParams:
    """10 dense layers of width 256 with the input concatenated onto the
    4th layer's input; output is a garment latent."""

    front: MlpParams   # layers 1-3
    back: MlpParams    # layers 4-10 (input includes the skip)
    embedding_dim: int
    latent_dim: int

    def parameters(self):
        out = [("front." + n, p) for n, p in self.front.parameters()]
        out += [("back." + n, p) for n, p in self.back.parameters()]
        return out


@dataclass
class MapperConfig:
    embedding_dim: int = 64
    latent_dim: int = 32
    width: int = 256
    epochs: int = 300
    lr: float = 1e-3
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.2
    loss: str = "l1"          # "l1" or "l2"
    seed: int = 0


def make_mapper(config: MapperConfig) -> MapperParams:
    w = config.width
    front = dc.make_mlp([config.embedding_dim, w, w, w],
                        hidden_activation="softplus", output_activation="softplus",
                        seed=config.seed * 13 + 1)
    back = dc.make_mlp([w + config.embedding_dim, w, w, w, w, w, w, config.latent_dim],
                       hidden_activation="softplus", output_activation="linear",
                       seed=config.seed * 13 + 2)
    return MapperParams(front, back, config.embedding_dim, config.latent_dim)


def _mapper_forward(params: MapperParams, emb: Tensor) -> Tensor:
    h = forward(params.front, emb, mode="eval")
    return forward(params.back, concat([h, emb], axis=-1), mode="eval")


def map_embedding(params: MapperParams, embedding: PromptEmbedding | np.ndarray
                  ) -> LatentCode:
    vals = embedding.values if isinstance(embedding, PromptEmbedding) else np.asarray(embedding)
    if vals.ndim != 1 or len(vals) != params.embedding_dim:
        raise ValueError(
            f"embedding has dim {vals.shape}, mapper expects {params.embedding_dim}")
    out = _mapper_forward(params, Tensor(vals.reshape(1, -1)))
    return LatentCode(out.data.reshape(-1))


def train_map(pairs: PairSet, config: MapperConfig
              ) -> tuple[MapperParams, list[dict]]:
    """Regress embeddings onto latents; logs holdout L1 and MSE per epoch."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs")
    if pairs.embedding_dim != config.embedding_dim:
        raise ValueError(
            f"pair embedding dim {pairs.embedding_dim} != config {config.embedding_dim}")
    if config.loss not in ("l1", "l2"):
        raise ValueError("loss must be 'l1' or 'l2'")
    emb, lat = pairs.matrices()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 777]))
    order = rng.permutation(len(pairs))
    n_hold = max(1, int(round(config.holdout_fraction * len(pairs))))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    e_tr, l_tr = emb[train_idx], lat[train_idx]
    e_ho, l_ho = emb[hold_idx], lat[hold_idx]

    params = make_mapper(config)
    named = params.parameters()
    opt = dc.AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    log = []
    for epoch in range(config.epochs):
        pred = _mapper_forward(params, Tensor(e_tr))
        diff = pred - Tensor(l_tr)
        loss = diff.abs().mean() if config.loss == "l1" else (diff * diff).mean()
        for _, p in named:
            p.zero_grad()
        loss.backward()
        dc.adamw_step(opt, named)

        ho_pred = _mapper_forward(params, Tensor(e_ho)).data
        log.append({"epoch": epoch,
                    "train_loss": float(loss.data),
                    "holdout_l1": float(np.mean(np.abs(ho_pred - l_ho))),
                    "holdout_mse": float(np.mean((ho_pred - l_ho) ** 2))})
    return params, log


def save_mapper(params: MapperParams, out_dir, manifest: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    dc.save_mlp(params.front, os.path.join(out_dir, "mapper_front.mlpw"))
    dc.save_mlp(params.back, os.path.join(out_dir, "mapper_back.mlpw"))
    info = {"embedding_dim": params.embedding_dim, "latent_dim": params.latent_dim}
    if manifest:
        info.update(manifest)
    with open(os.path.join(out_dir, "mapper.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


def load_mapper(out_dir) -> MapperParams:
    with open(os.path.join(out_dir, "mapper.json")) as fh:
        info = json.load(fh)
    return MapperParams(
        front=dc.load_mlp(os.path.join(out_dir, "mapper_front.mlpw")),
        back=dc.load_mlp(os.path.join(out_dir, "mapper_back.mlpw")),
        embedding_dim=info["embedding_dim"], latent_dim=info["latent_dim"])


# ---------------------------------------------------------------------------
# editing

def blend_embeddings(embedding: PromptEmbedding, feature: PromptEmbedding,
                     w: float = 0.5, renormalize: bool = True) -> PromptEmbedding:
    """Weighted pull of a prompt embedding toward a feature embedding."""
    if embedding.dim != feature.dim:
        raise ValueError("embedding dims differ")
    v = w * embedding.values + (1 - w) * feature.values
    if renormalize:
        n = np.linalg.norm(v)
        if n > 1e-12:
            v = v / n
    return PromptEmbedding(v)


def edit(latent: LatentCode, embedding: PromptEmbedding, feature: PromptEmbedding,
         mapper: MapperParams, w: float = 0.5, k: int = 7,
         strength: float = 1.0) -> LatentCode:
    """Move the latent toward the mapped blended prompt on the k most
    affected dimensions only; the rest of the garment stays put.

    strength=1 lands exactly on the mapped target along those dimensions;
    strength=0 is the identity.
    """
    if k > latent.dim:
        raise ValueError(f"k={k} exceeds latent dim {latent.dim}")
    blended = blend_embeddings(embedding, feature, w=w)
    mod = map_embedding(mapper, blended)
    delta = latent.values - mod.values
    dims = np.argsort(-np.abs(delta), kind="stable")[:k]
    out = latent.values.copy()
    if strength == 1.0:  # land exactly on the mapped target along these dims
        out[dims] = mod.values[dims]
    else:
        out[dims] -= strength * delta[dims]
    return LatentCode(out)
