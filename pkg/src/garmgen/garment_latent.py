"""Garment latent space: point-cloud encoder, coarse/fine distance decoders,
training losses, and the two-stage training procedure.

The encoder is a reduced edge-convolution network (two stages, 8 neighbors,
width 64) pooled into a 32-d code; decoders are coordinate MLPs conditioned
on the code through conditional batch norm. Stage one fits smoothed/decimated
ground truth; stage two learns a residual on top against the full-detail
field. Everything is deterministic per seed and checkpoint-resumable.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from numba import njit, prange

from . import diffcore as dc
from . import meshkit
from . import udf_field
from .diffcore import Tensor, MlpParams, forward, concat, stack_rows
from .meshkit import TriMesh, SurfaceSamples
from .udf_field import Box, MeshBvh, build_bvh, default_bounds, normalize_clip, training_queries


@dataclass
class LatentCode:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.values).all():
            raise ValueError("latent code has non-finite entries")

    @property
    def dim(self):
        return len(self.values)


@dataclass
class EncoderParams:
    stage1: MlpParams  # per-edge MLP on (point, neighbor - point)
    stage2: MlpParams  # per-edge MLP on stage-1 features
    head: MlpParams    # pooled features -> latent
    k_nn: int = 8

    def parameters(self):
        out = []
        for tag, net in (("enc1", self.stage1), ("enc2", self.stage2), ("head", self.head)):
            out.extend((f"{tag}.{n}", p) for n, p in net.parameters())
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()


@dataclass
class TrainingConfig:
    lambda_dist: float = 1.0
    lambda_grad: float = 0.3
    lambda_latent: float = 0.2
    coarse_epochs: int = 20
    fine_epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_garments: int = 8
    queries_per_garment: int = 2048
    grad_queries: int = 512        # subset carrying the finite-difference term
    passes_per_epoch: int = 4      # corpus sweeps per epoch
    encoder_points: int = 512      # training cloud size (inference default 20000)
    latent_dim: int = 32
    encoder_width: int = 64
    k_nn: int = 8
    decoder_width: int = 128
    decoder_hidden_layers: int = 5
    fourier_bands: int = 4         # query featurization bands, coarse decoder
    fine_fourier_bands: int = 6    # fine decoder sees higher frequencies
    input_conditioning: bool = True  # concat latent onto the decoder input
    delta: float = 0.1             # clip scale for the BCE distance loss
    query_sigma: float = 0.05
    near_fraction: float = 0.8
    grid_resolution: int = 64
    fd_step_factor: float = 0.5    # x voxel, step for predicted-gradient FD
    decimate_ratio: float = 0.25
    smooth_iterations: int = 10
    smooth_factor: float = 0.5
    lr_final_factor: float = 0.1   # cosine decay floor as a fraction of lr
    fine_lr_factor: float = 0.33   # residual stage trains gentler than coarse
    seed: int = 0

    def __post_init__(self):
        for lam in (self.lambda_dist, self.lambda_grad, self.lambda_latent):
            if lam < 0:
                raise ValueError("loss weights must be nonnegative")
        if self.coarse_epochs < 1 or self.fine_epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def fd_step(self) -> float:
        voxel = 1.1 / (self.grid_resolution - 1)
        return self.fd_step_factor * voxel


def desk_config(**overrides) -> TrainingConfig:
    """Tuned desk-scale sizes: same contract, sized for minutes not hours."""
    base = dict(queries_per_garment=192, grad_queries=48, passes_per_epoch=10,
                encoder_points=256, decoder_width=96, lr=3e-3,
                decimate_ratio=0.2, smooth_iterations=12, smooth_factor=0.6)
    base.update(overrides)
    return TrainingConfig(**base)


# ---------------------------------------------------------------------------
# encoder

def make_encoder(config: TrainingConfig, seed: int | None = None) -> EncoderParams:
    w = config.encoder_width
    s = config.seed if seed is None else seed
    return EncoderParams(
        stage1=dc.make_mlp([6, w, w], hidden_activation="softplus",
                           output_activation="softplus", seed=s * 7 + 1),
        stage2=dc.make_mlp([2 * w, w, w], hidden_activation="softplus",
                           output_activation="softplus", seed=s * 7 + 2),
        head=dc.make_mlp([4 * w, config.latent_dim], seed=s * 7 + 3),
        k_nn=config.k_nn)


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Index array (N, k) of each point's nearest neighbors (self excluded)."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    return idx[:, 1:]


def _edge_stage(net: MlpParams, feats: Tensor, idx: np.ndarray) -> Tensor:
    n, k = idx.shape
    f_j = feats.take(idx)                                   # (N, k, C)
    f_i = feats.take(np.repeat(np.arange(n)[:, None], k, axis=1))
    edge = concat([f_i, f_j - f_i], axis=-1)                # (N, k, 2C)
    out = forward(net, edge, mode="eval")
    return out.max(axis=1)                                  # (N, C')


def point_edge_features(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Constant stage-one edge input (point, neighbor - point); cacheable."""
    n, k = idx.shape
    p_i = np.repeat(points[:, None, :], k, axis=1)
    p_j = points[idx]
    return np.concatenate([p_i, p_j - p_i], axis=-1)


def encode_tensor(params: EncoderParams, points: np.ndarray,
                  idx: np.ndarray | None = None,
                  edge0: np.ndarray | None = None) -> Tensor:
    """Differentiable encoding of a point cloud into a latent vector."""
    if len(points) < params.k_nn + 1:
        raise ValueError(
            f"need at least {params.k_nn + 1} points, got {len(points)}")
    if idx is None:
        idx = knn_indices(points, params.k_nn)
    if edge0 is None:
        edge0 = point_edge_features(points, idx)
    f1 = forward(params.stage1, Tensor(edge0), mode="eval").max(axis=1)
    f2 = _edge_stage(params.stage2, f1, idx)
    multi = concat([f1, f2], axis=-1)                       # (N, 2w)
    pooled = concat([multi.max(axis=0), multi.mean(axis=0)], axis=-1)
    return forward(params.head, pooled.reshape(1, -1), mode="eval").reshape(-1)


def encode(params: EncoderParams, samples: SurfaceSamples | np.ndarray) -> LatentCode:
    pts = samples.points if isinstance(samples, SurfaceSamples) else np.asarray(samples)
    return LatentCode(encode_tensor(params, pts).data)


# ---------------------------------------------------------------------------
# decoders

def fourier_features(points: np.ndarray, bands: int) -> np.ndarray:
    """Query featurization [p, sin(2^i pi p), cos(2^i pi p)]; speeds up fitting
    of position-dependent detail dramatically at small step budgets."""
    points = np.atleast_2d(points)
    if bands == 0:
        return points
    feats = [points]
    for i in range(bands):
        w = (2.0 ** i) * np.pi
        feats.append(np.sin(w * points))
        feats.append(np.cos(w * points))
    return np.concatenate(feats, axis=-1)


def query_input_dim(config: TrainingConfig, kind: str = "coarse") -> int:
    bands = config.fourier_bands if kind == "coarse" else config.fine_fourier_bands
    dim = 3 + 6 * bands
    if config.input_conditioning:
        dim += config.latent_dim
    return dim


def make_decoder(config: TrainingConfig, kind: str, seed: int | None = None) -> MlpParams:
    """Coordinate MLP conditioned on the latent code via conditional batch norm.

    The coarse decoder emits nonnegative distances (softplus); the fine one
    is a sign-free residual whose last layer starts at zero, so the composed
    field begins exactly at the coarse prediction.
    """
    if kind not in ("coarse", "fine"):
        raise ValueError("kind must be coarse or fine")
    w = config.decoder_width
    dims = [query_input_dim(config, kind)] + [w] * config.decoder_hidden_layers + [1]
    s = config.seed if seed is None else seed
    net = dc.make_mlp(dims, cond_dim=config.latent_dim, conditional_norm=True,
                      hidden_activation="softplus",
                      output_activation="softplus" if kind == "coarse" else "linear",
                      seed=s * 11 + (5 if kind == "coarse" else 6))
    net.input_latent = config.input_conditioning
    last = net.layers[-1]
    last.weights.data[:] = 0.0
    if kind == "coarse":
        # start flat at the middle of the clip band so the BCE is not saturated
        last.biases.data[:] = np.log(np.expm1(config.delta / 2.0))
    else:
        last.biases.data[:] = 0.0
    return net


def _tile_condition(latent: np.ndarray, n: int) -> Tensor:
    return Tensor(np.broadcast_to(latent, (n, len(latent))).copy())


def _decoder_bands(net: MlpParams) -> tuple[int, bool]:
    d_in = net.layers[0].dims[0]
    cond = (net.cond_dim or 0) if net.input_latent else 0
    return (d_in - 3 - cond) // 6, net.input_latent


@njit(cache=True, parallel=True)
def _softplus_parallel(x):
    out = np.empty_like(x)
    for i in prange(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            pos = v if v > 0.0 else 0.0
            out[i, j] = pos + np.log1p(np.exp(-abs(v)))
    return out


def fold_decoder(net: MlpParams, latent: np.ndarray) -> list:
    """Collapse eval-mode conditional batch norm (and the constant latent
    input columns) into plain dense layers for one latent code.

    Eval normalization is an affine map with per-feature constants, so each
    dense+norm pair folds into a single matmul; the latent contribution to
    the first layer folds into its bias. Decoding then costs one GEMM and one
    activation per layer.
    """
    folded = []
    pending = None  # (W, b) of the dense layer awaiting a possible norm fold
    for layer in net.layers:
        if layer.kind == "dense":
            if pending is not None:
                folded.append(pending)
            pending = (layer.weights.data.copy(), layer.biases.data.copy())
        else:
            w, b = pending
            scale = 1.0 / np.sqrt(layer.running_var + layer.eps)
            gamma = latent @ layer.scale_w.data + layer.scale_b.data
            beta = latent @ layer.shift_w.data + layer.shift_b.data
            m = scale * gamma
            pending = (w * m[None, :], (b - layer.running_mean) * m + beta)
    folded.append(pending)
    # fold the constant latent input columns of the first layer into its bias
    if net.input_latent:
        w0, b0 = folded[0]
        k = len(latent)
        folded[0] = (np.ascontiguousarray(w0[:-k]), b0 + latent @ w0[-k:])
    return folded


def _folded_activations(net: MlpParams) -> list[str]:
    """One activation per dense layer: a following norm layer's activation
    replaces the dense layer's (the pair acts as one unit)."""
    acts = []
    for layer, act in zip(net.layers, net.activations):
        if layer.kind == "dense":
            acts.append(act)
        else:
            acts[-1] = act
    return acts


def eval_folded(folded: list, acts: list[str], feats: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(feats)
    for (w, b), act in zip(folded, acts):
        x = x @ w + b
        if act == "softplus":
            x = _softplus_parallel(x)
        elif act == "relu":
            x = np.maximum(x, 0.0)
    return x


def decode_coarse(coarse: MlpParams, latent: LatentCode, queries: np.ndarray,
                  chunk: int = 65536) -> np.ndarray:
    """Predicted smooth distances at query points (eval mode, deterministic)."""
    queries = np.atleast_2d(queries)
    bands, _ = _decoder_bands(coarse)
    folded = fold_decoder(coarse, latent.values)
    acts = _folded_activations(coarse)
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        q = fourier_features(queries[s:s + chunk], bands)
        out[s:s + chunk] = eval_folded(folded, acts, q).reshape(-1)
    return out


def decode_fine(coarse: MlpParams, fine: MlpParams, latent: LatentCode,
                queries: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Composed field: coarse prediction plus residual, clamped at zero."""
    queries = np.atleast_2d(queries)
    bands_c, _ = _decoder_bands(coarse)
    bands_f, _ = _decoder_bands(fine)
    folded_c = fold_decoder(coarse, latent.values)
    folded_f = fold_decoder(fine, latent.values)
    acts_c = _folded_activations(coarse)
    acts_f = _folded_activations(fine)
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        qs = queries[s:s + chunk]
        base = eval_folded(folded_c, acts_c, fourier_features(qs, bands_c))
        delta = eval_folded(folded_f, acts_f, fourier_features(qs, bands_f))
        out[s:s + chunk] = np.maximum((base + delta).reshape(-1), 0.0)
    return out


def decode_grid(model: "TwoStageModel", latent: LatentCode, resolution: int,
                bounds: Box | None = None, stage: str = "fine",
                fine_band_voxels: float = 6.0) -> udf_field.UdfGrid:
    """Decode a latent onto a corner lattice, with numeric gradients attached.

    The residual decoder is evaluated only where the coarse field is within
    fine_band_voxels of the surface; farther corners keep the coarse value
    (extraction culls them regardless), which cuts decode cost several-fold.
    """
    bounds = bounds or default_bounds()
    xs = np.linspace(bounds.lo[0], bounds.hi[0], resolution)
    ys = np.linspace(bounds.lo[1], bounds.hi[1], resolution)
    zs = np.linspace(bounds.lo[2], bounds.hi[2], resolution)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    d = decode_coarse(model.coarse, latent, pts)
    if stage == "fine" and model.fine is not None:
        voxel = float((bounds.extent / (resolution - 1)).max())
        near = d < fine_band_voxels * voxel
        if near.any():
            bands_f, _ = _decoder_bands(model.fine)
            delta = eval_folded(fold_decoder(model.fine, latent.values),
                                _folded_activations(model.fine),
                                fourier_features(pts[near], bands_f)).reshape(-1)
            d = d.copy()
            d[near] = np.maximum(d[near] + delta, 0.0)
    values = d.reshape((resolution,) * 3)
    grads = udf_field.numeric_gradients(values, bounds)
    return udf_field.UdfGrid((resolution,) * 3, bounds, np.maximum(d, 0.0), grads)


def interpolate(l1: LatentCode, l2: LatentCode, alpha: float) -> LatentCode:
    if l1.dim != l2.dim:
        raise ValueError(f"latent dims differ: {l1.dim} vs {l2.dim}")
    return LatentCode(alpha * l1.values + (1 - alpha) * l2.values)


# ---------------------------------------------------------------------------
# losses

def loss_dist(pred: Tensor, gt: np.ndarray, delta: float) -> Tensor:
    """Mean BCE between clip-normalized predicted and true distances."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.data.size != gt.size:
        raise ValueError(f"length mismatch: {pred.data.size} vs {gt.size}")
    p = (pred.reshape(-1) * (1.0 / delta)).clip(0.0, 1.0).clip(1e-7, 1.0 - 1e-7)
    t = normalize_clip(gt, delta)
    bce = -(Tensor(t) * p.log() + Tensor(1.0 - t) * (1.0 - p).log())
    return bce.mean()


def loss_grad(pred_grads: Tensor, gt_grads: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared Euclidean distance between gradient vectors, masked."""
    gt_grads = np.asarray(gt_grads, dtype=np.float64)
    if pred_grads.shape != gt_grads.shape:
        raise ValueError(f"shape mismatch: {pred_grads.shape} vs {gt_grads.shape}")
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("loss_grad: every query masked; returning 0", RuntimeWarning)
        return Tensor(0.0)
    diff = pred_grads - Tensor(gt_grads)
    sq = (diff * diff).sum(axis=1)
    return (sq * Tensor(mask.astype(np.float64))).sum() * (1.0 / n)


def loss_latent(batch: Tensor) -> Tensor:
    """Squared Frobenius distance of the batch latent covariance from identity,
    normalized by latent_dim^2."""
    q, k = batch.shape
    if q < 2:
        raise ValueError("latent covariance needs a batch of >= 2")
    mu = batch.mean(axis=0, keepdims=True)
    centered = batch - mu
    cov = (centered.transpose2d() @ centered) * (1.0 / q)
    dev = cov - Tensor(np.eye(k))
    return (dev * dev).sum() * (1.0 / (k * k))


# ---------------------------------------------------------------------------
# dataset

@dataclass
class GarmentRecord:
    garment_id: str
    mesh: TriMesh
    encoder_points: np.ndarray
    knn_idx: np.ndarray
    edge_features: np.ndarray
    samples: SurfaceSamples
    fine_bvh: MeshBvh
    coarse_bvh: MeshBvh


def coarse_proxy(mesh: TriMesh, config: TrainingConfig) -> TriMesh:
    """Decimated then Laplacian-smoothed stand-in used as stage-one target."""
    target = max(4, int(len(mesh.faces) * config.decimate_ratio))
    dec = meshkit.decimate(mesh, target)
    return meshkit.laplacian_smooth(dec, config.smooth_iterations, config.smooth_factor)


def build_dataset(items, config: TrainingConfig) -> list[GarmentRecord]:
    records = []
    for i, item in enumerate(items):
        samples = meshkit.sample_surface(item.mesh, 4096, seed=config.seed * 1000 + i)
        enc_pts = samples.points[:config.encoder_points]
        idx = knn_indices(enc_pts, config.k_nn)
        records.append(GarmentRecord(
            garment_id=item.garment_id,
            mesh=item.mesh,
            encoder_points=enc_pts,
            knn_idx=idx,
            edge_features=point_edge_features(enc_pts, idx),
            samples=samples,
            fine_bvh=build_bvh(item.mesh),
            coarse_bvh=build_bvh(coarse_proxy(item.mesh, config))))
    return records


# ---------------------------------------------------------------------------
# training

@dataclass
class TwoStageModel:
    encoder: EncoderParams
    coarse: MlpParams
    fine: MlpParams | None
    config: TrainingConfig

    def encode_item(self, mesh_or_points) -> LatentCode:
        if isinstance(mesh_or_points, TriMesh):
            pts = meshkit.sample_surface(mesh_or_points, self.config.encoder_points,
                                         seed=97).points
        else:
            pts = np.asarray(mesh_or_points)
        return encode(self.encoder, pts)


def _seed_key(parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            import hashlib
            out.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little"))
        else:
            out.append(int(p))
    return out


def _batch_queries(rec: GarmentRecord, config: TrainingConfig, seed_key) -> np.ndarray:
    seed = int(np.random.SeedSequence(_seed_key(seed_key)).generate_state(1)[0])
    return training_queries(rec.samples, default_bounds(), config.queries_per_garment,
                            seed, config.near_fraction, config.query_sigma)


def _fd_offsets(base: np.ndarray, n_grad: int, h: float) -> np.ndarray:
    """Stack [base; sub+h*ex; sub-h*ex; ... for y, z] for one garment."""
    sub = base[:n_grad]
    offs = [base]
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        offs.append(sub + e)
        offs.append(sub - e)
    return np.vstack(offs)


def _decode_train(decoder: MlpParams, queries: np.ndarray, latents: Tensor,
                  n_each: int, update_stats: bool = True) -> Tensor:
    """Train-mode decode of a multi-garment batch with shared batch stats."""
    cond = dc.repeat_rows(latents, n_each)
    bands, with_input = _decoder_bands(decoder)
    feats = Tensor(fourier_features(queries, bands))
    x = concat([feats, cond], axis=-1) if with_input else feats
    return forward(decoder, x, cond, mode="train",
                   update_stats=update_stats)


def _split_fd(sigma: Tensor, n_base: int, n_grad: int, h: float,
              n_garments: int) -> tuple[Tensor, Tensor]:
    """Undo _fd_offsets packing: return base predictions and FD gradients."""
    per = n_base + 6 * n_grad
    bases, grads = [], []
    for g in range(n_garments):
        o = g * per
        bases.append(sigma[o:o + n_base])
        cols = []
        for ax in range(3):
            plus = sigma[o + n_base + 2 * ax * n_grad:
                         o + n_base + (2 * ax + 1) * n_grad]
            minus = sigma[o + n_base + (2 * ax + 1) * n_grad:
                          o + n_base + (2 * ax + 2) * n_grad]
            cols.append((plus - minus) * (1.0 / (2 * h)))
        grads.append(concat(cols, axis=-1))
    return concat(bases, axis=0), concat(grads, axis=0)


def _cosine_lr(base: float, floor_factor: float, epoch: int, total: int) -> float:
    t = epoch / max(total - 1, 1)
    lo = base * floor_factor
    return lo + 0.5 * (base - lo) * (1 + np.cos(np.pi * t))


_STAGE_TAG = {"coarse": 1, "fine": 2}


def _epoch_rng(seed: int, stage: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [seed, _STAGE_TAG[stage], epoch]))


def calibrate_norm_stats(decoder: MlpParams, dataset: list[GarmentRecord],
                         latents_by_id: dict, config: TrainingConfig,
                         stage_tag: int):
    """Set conditional-batch-norm running statistics from one large batch.

    Momentum-EMA estimates drift with batch composition; a single pass over a
    representative all-garment batch pins eval-mode behavior to the training
    distribution. Deterministic.
    """
    queries, lat_rows = [], []
    for rec in dataset:
        base = _batch_queries(rec, config, (config.seed, 9, stage_tag,
                                            rec.garment_id))
        queries.append(_fd_offsets(base, config.grad_queries, config.fd_step))
        lat_rows.append(latents_by_id[rec.garment_id])
    latents = Tensor(np.stack(lat_rows))
    norm_layers = [l for l in decoder.layers if l.kind == "cond_batchnorm"]
    saved = [l.momentum for l in norm_layers]
    for l in norm_layers:
        l.momentum = 0.0
    try:
        _decode_train(decoder, np.vstack(queries), latents, queries[0].shape[0],
                      update_stats=True)
    finally:
        for l, m in zip(norm_layers, saved):
            l.momentum = m


def train_coarse(dataset: list[GarmentRecord], config: TrainingConfig,
                 start_state: dict | None = None, log_path=None,
                 gt_attr: str = "coarse_bvh", stop_epoch: int | None = None
                 ) -> tuple[EncoderParams, MlpParams, list[dict]]:
    """Jointly fit the encoder and coarse decoder against the smoothed field.

    gt_attr selects the supervision field; the single-stage ablation trains
    the same architecture directly against the full-detail field.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if start_state is None:
        encoder = make_encoder(config)
        coarse = make_decoder(config, "coarse")
        opt = dc.AdamWState(lr=config.lr, weight_decay=config.weight_decay)
        first_epoch = 0
        log: list[dict] = []
    else:
        encoder, coarse = start_state["encoder"], start_state["coarse"]
        opt, first_epoch, log = (start_state["opt"], start_state["epoch"],
                                 start_state.get("log", []))
    named = encoder.parameters() + [("coarse." + n, p) for n, p in coarse.parameters()]
    h = config.fd_step

    for epoch in range(first_epoch, stop_epoch or config.coarse_epochs):
        t0 = time.time()
        opt.lr = _cosine_lr(config.lr, config.lr_final_factor, epoch,
                            config.coarse_epochs)
        rng = _epoch_rng(config.seed, "coarse", epoch)
        sums = np.zeros(3)
        n_batches = 0
        for sweep in range(config.passes_per_epoch):
            order = rng.permutation(len(dataset))
            for s in range(0, len(order), config.batch_garments):
                chunk = [dataset[i] for i in order[s:s + config.batch_garments]]
                if len(chunk) < 2:
                    continue  # covariance needs >= 2 garments
                lat_rows = [encode_tensor(encoder, r.encoder_points, r.knn_idx,
                                          r.edge_features) for r in chunk]
                latents = stack_rows(lat_rows)

                queries, gt_d, gt_g = [], [], []
                for gi, rec in enumerate(chunk):
                    base = _batch_queries(rec, config,
                                          (config.seed, 1, epoch, sweep, int(order[s + gi])))
                    queries.append(_fd_offsets(base, config.grad_queries, h))
                    d, g = udf_field.udf(getattr(rec, gt_attr), base)
                    gt_d.append(d)
                    gt_g.append(g[:config.grad_queries])
                sigma = _decode_train(coarse, np.vstack(queries), latents,
                                      queries[0].shape[0])
                base_pred, fd_grads = _split_fd(
                    sigma, config.queries_per_garment, config.grad_queries, h, len(chunk))

                gt_d = np.concatenate(gt_d)
                gt_g = np.vstack(gt_g)
                d_sub = gt_d.reshape(len(chunk), -1)[:, :config.grad_queries].reshape(-1)
                mask = d_sub > 1e-6
                l_d = loss_dist(base_pred, gt_d, config.delta)
                l_g = loss_grad(fd_grads, gt_g, mask)
                l_l = loss_latent(latents)
                total = (config.lambda_dist * l_d + config.lambda_grad * l_g
                         + config.lambda_latent * l_l)
                for _, p in named:
                    p.zero_grad()
                total.backward()
                dc.adamw_step(opt, named)
                sums += (float(l_d.data), float(l_g.data), float(l_l.data))
                n_batches += 1
        entry = {"stage": "coarse", "epoch": epoch,
                 "L_dist": sums[0] / n_batches, "L_grad": sums[1] / n_batches,
                 "L_latent": sums[2] / n_batches,
                 "wall_ms": int(1000 * (time.time() - t0))}
        log.append(entry)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return encoder, coarse, log


def train_fine(encoder: EncoderParams, coarse: MlpParams,
               dataset: list[GarmentRecord], config: TrainingConfig,
               log_path=None) -> tuple[MlpParams, list[dict]]:
    """Fit the residual decoder against the full-detail field; the encoder and
    coarse decoder stay frozen (coarse is evaluated with running statistics)."""
    if not dataset:
        raise ValueError("empty dataset")
    fine = make_decoder(config, "fine")
    opt = dc.AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    named = [("fine." + n, p) for n, p in fine.parameters()]
    h = config.fd_step

    frozen_latents = {r.garment_id: encode_tensor(encoder, r.encoder_points,
                                                  r.knn_idx, r.edge_features).data
                      for r in dataset}
    log: list[dict] = []
    for epoch in range(config.fine_epochs):
        t0 = time.time()
        opt.lr = _cosine_lr(config.lr * config.fine_lr_factor,
                            config.lr_final_factor, epoch, config.fine_epochs)
        rng = _epoch_rng(config.seed, "fine", epoch)
        sums = np.zeros(2)
        n_batches = 0
        for sweep in range(config.passes_per_epoch):
            order = rng.permutation(len(dataset))
            for s in range(0, len(order), config.batch_garments):
                chunk = [dataset[i] for i in order[s:s + config.batch_garments]]
                lat = np.stack([frozen_latents[r.garment_id] for r in chunk])
                latents = Tensor(lat)

                queries, gt_d, gt_g = [], [], []
                for gi, rec in enumerate(chunk):
                    base = _batch_queries(rec, config,
                                          (config.seed, 2, epoch, sweep, int(order[s + gi])))
                    queries.append(_fd_offsets(base, config.grad_queries, h))
                    d, g = udf_field.udf(rec.fine_bvh, base)
                    gt_d.append(d)
                    gt_g.append(g[:config.grad_queries])
                q_all = np.vstack(queries)
                cond_np = np.repeat(lat, queries[0].shape[0], axis=0)
                bands_c, with_input_c = _decoder_bands(coarse)
                feats_c = fourier_features(q_all, bands_c)
                if with_input_c:
                    feats_c = np.concatenate([feats_c, cond_np], axis=-1)
                base_vals = forward(coarse, Tensor(feats_c),
                                    Tensor(cond_np), mode="eval").data  # frozen, no tape
                delta_pred = _decode_train(fine, q_all, latents, queries[0].shape[0])
                sigma = (delta_pred + Tensor(base_vals)).relu()
                base_pred, fd_grads = _split_fd(
                    sigma, config.queries_per_garment, config.grad_queries, h, len(chunk))

                gt_d = np.concatenate(gt_d)
                gt_g = np.vstack(gt_g)
                d_sub = gt_d.reshape(len(chunk), -1)[:, :config.grad_queries].reshape(-1)
                mask = d_sub > 1e-6
                l_d = loss_dist(base_pred, gt_d, config.delta)
                l_g = loss_grad(fd_grads, gt_g, mask)
                total = config.lambda_dist * l_d + config.lambda_grad * l_g
                for _, p in named:
                    p.zero_grad()
                total.backward()
                dc.adamw_step(opt, named)
                sums += (float(l_d.data), float(l_g.data))
                n_batches += 1
        entry = {"stage": "fine", "epoch": epoch,
                 "L_dist": sums[0] / n_batches, "L_grad": sums[1] / n_batches,
                 "wall_ms": int(1000 * (time.time() - t0))}
        log.append(entry)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    calibrate_norm_stats(fine, dataset, frozen_latents, config, stage_tag=2)
    return fine, log


def calibrate_model(encoder: EncoderParams, decoder: MlpParams,
                    dataset: list[GarmentRecord], config: TrainingConfig,
                    stage_tag: int = 1):
    """Finalize a trained decoder for eval use (pins the norm statistics).

    Kept separate from the epoch loop so checkpoint-resumed training stays
    bit-identical to an uninterrupted run.
    """
    lat_by_id = {r.garment_id: encode_tensor(encoder, r.encoder_points, r.knn_idx,
                                             r.edge_features).data
                 for r in dataset}
    calibrate_norm_stats(decoder, dataset, lat_by_id, config, stage_tag=stage_tag)


def save_training_state(out_dir, encoder: EncoderParams, coarse: MlpParams,
                        config: TrainingConfig, opt, epoch: int, log: list):
    """Mid-run coarse-stage checkpoint: parameters, optimizer, position."""
    os.makedirs(out_dir, exist_ok=True)
    save_model(TwoStageModel(encoder, coarse, None, config), out_dir)
    blobs = {f"m::{k}": v for k, v in opt.m.items()}
    blobs.update({f"v::{k}": v for k, v in opt.v.items()})
    np.savez(os.path.join(out_dir, "optimizer.npz"), **blobs)
    with open(os.path.join(out_dir, "train_state.json"), "w") as fh:
        json.dump({"epoch": epoch, "step": opt.step, "lr": opt.lr,
                   "weight_decay": opt.weight_decay, "log": log}, fh)


def load_training_state(out_dir) -> dict:
    """Inverse of save_training_state; feed the result to train_coarse."""
    model = load_model(out_dir)
    with open(os.path.join(out_dir, "train_state.json")) as fh:
        meta = json.load(fh)
    opt = dc.AdamWState(lr=meta["lr"], weight_decay=meta["weight_decay"],
                        step=meta["step"])
    with np.load(os.path.join(out_dir, "optimizer.npz")) as blobs:
        for key in blobs.files:
            kind, name = key.split("::", 1)
            (opt.m if kind == "m" else opt.v)[name] = blobs[key]
    return {"encoder": model.encoder, "coarse": model.coarse, "opt": opt,
            "epoch": meta["epoch"], "log": meta["log"]}


def train_single_stage(dataset: list[GarmentRecord], config: TrainingConfig
                       ) -> TwoStageModel:
    """Ablation variant: one decoder fit directly against the detailed field."""
    encoder, decoder, _ = train_coarse(dataset, config, gt_attr="fine_bvh")
    calibrate_model(encoder, decoder, dataset, config, stage_tag=1)
    return TwoStageModel(encoder, decoder, None, config)


def train_two_stage(items, config: TrainingConfig, out_dir=None) -> TwoStageModel:
    dataset = build_dataset(items, config)
    log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
    if log_path and os.path.exists(log_path):
        os.remove(log_path)
    encoder, coarse, _ = train_coarse(dataset, config, log_path=log_path)
    calibrate_model(encoder, coarse, dataset, config, stage_tag=1)
    fine, _ = train_fine(encoder, coarse, dataset, config, log_path=log_path)
    model = TwoStageModel(encoder, coarse, fine, config)
    if out_dir:
        save_model(model, out_dir)
    return model


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: TwoStageModel, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg = asdict(model.config)
    manifest = {"seed": model.config.seed, "config": cfg,
                "config_hash": dc.config_hash(cfg)}
    dc.save_mlp(model.encoder.stage1, os.path.join(out_dir, "encoder_stage1.mlpw"))
    dc.save_mlp(model.encoder.stage2, os.path.join(out_dir, "encoder_stage2.mlpw"))
    dc.save_mlp(model.encoder.head, os.path.join(out_dir, "encoder_head.mlpw"))
    dc.save_mlp(model.coarse, os.path.join(out_dir, "coarse.mlpw"))
    if model.fine is not None:
        dc.save_mlp(model.fine, os.path.join(out_dir, "fine.mlpw"))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_model(out_dir) -> TwoStageModel:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    config = TrainingConfig(**manifest["config"])
    encoder = EncoderParams(
        stage1=dc.load_mlp(os.path.join(out_dir, "encoder_stage1.mlpw")),
        stage2=dc.load_mlp(os.path.join(out_dir, "encoder_stage2.mlpw")),
        head=dc.load_mlp(os.path.join(out_dir, "encoder_head.mlpw")),
        k_nn=config.k_nn)
    coarse = dc.load_mlp(os.path.join(out_dir, "coarse.mlpw"))
    fine_path = os.path.join(out_dir, "fine.mlpw")
    fine = dc.load_mlp(fine_path) if os.path.exists(fine_path) else None
    return TwoStageModel(encoder, coarse, fine, config)


# ---------------------------------------------------------------------------
# evaluation helpers

def reconstruction_metrics(model: TwoStageModel, items, resolution: int = 48,
                           stage: str = "fine", n_samples: int = 10000
                           ) -> tuple[float, float]:
    """Mean chamfer (x1000 squared convention) and p2s of auto-encoded garments."""
    from . import evalkit_data as ek
    from . import surfacer

    cds, p2ss = [], []
    for item in items:
        latent = model.encode_item(item.mesh)
        grid = decode_grid(model, latent, resolution, stage=stage)
        mesh = surfacer.extract_mesh(grid)
        if len(mesh.faces) == 0:
            cds.append(float("inf"))
            p2ss.append(float("inf"))
            continue
        a = meshkit.sample_surface(item.mesh, n_samples, seed=3).points
        b = meshkit.sample_surface(mesh, n_samples, seed=4).points
        cds.append(ek.chamfer(a, b))
        p2ss.append(ek.p2s(b, item.mesh))
    return float(np.mean(cds)), float(np.mean(p2ss))


def decode_interpolated(model: TwoStageModel, g1: TriMesh, g2: TriMesh,
                        alpha: float, resolution: int = 48,
                        stage: str = "coarse") -> TriMesh:
    from . import surfacer

    l1 = model.encode_item(g1)
    l2 = model.encode_item(g2)
    grid = decode_grid(model, interpolate(l1, l2, alpha), resolution, stage=stage)
    return surfacer.extract_mesh(grid)
