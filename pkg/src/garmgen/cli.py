"""Command-line surface tying the pipeline together.

Every subcommand takes --config/--seed/--out, prints a JSON summary to
stdout, and writes artifacts plus the effective config into the output
directory. Outputs are byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import evalkit_data as ek
from . import garment_latent as gl
from . import meshkit
from . import prompt_map as pm
from . import surfacer
from . import texture_pipe as tp


def _summary(data: dict):
    print(json.dumps(data, sort_keys=True, default=str))


def _load_latent(path) -> gl.LatentCode:
    with open(path) as fh:
        d = json.load(fh)
    return gl.LatentCode(np.asarray(d["values"], dtype=np.float64))


def _save_latent(latent: gl.LatentCode, path):
    with open(path, "w") as fh:
        json.dump({"dim": latent.dim, "values": latent.values.tolist()}, fh)


def _decode_to_mesh(model, latent, cfg):
    res = cfg["decode"]["resolution"]
    grid = gl.decode_grid(model, latent, res)
    voxel = grid.voxel_size
    return surfacer.extract_mesh(
        grid, iso=cfg["decode"]["iso_factor"] * voxel,
        open_threshold=cfg["decode"]["open_threshold_factor"] * voxel)


def _corpus(cfg):
    c = cfg["corpus"]
    return ek.make_corpus(c["n_train"], c["n_holdout"], seed=c["seed"])


def _require(path, what):
    if not os.path.exists(path):
        raise SystemExit(f"error: missing {what}: {path} "
                         f"(run the producing command first)")


def _embedding_from_arg(tokens_or_file: str, cfg) -> pm.PromptEmbedding:
    if os.path.exists(tokens_or_file):
        return pm.load_embedding(tokens_or_file)
    tokens = tokens_or_file.split()
    return pm.pseudo_embed(tokens, seed=cfg["embedding"]["seed"],
                           dim=cfg["embedding"]["dim"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg):
    train, hold = _corpus(cfg)
    os.makedirs(args.out, exist_ok=True)
    for item in train + hold:
        meshkit.save_obj(item.mesh, os.path.join(args.out, item.garment_id + ".obj"))
    ek.save_manifest(train + hold, os.path.join(args.out, "manifest.json"))
    pm.save_vocabulary(os.path.join(args.out, "vocabulary.json"),
                       seed=cfg["embedding"]["seed"], dim=cfg["embedding"]["dim"])
    _summary({"command": "gen-data", "out": args.out,
              "n_train": len(train), "n_holdout": len(hold)})


def cmd_train_latent(args, cfg):
    tc = cfgmod.training_config(cfg)
    train, _ = _corpus(cfg)
    dataset = gl.build_dataset(train, tc)
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    os.makedirs(ckpt, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    t0 = time.time()
    if args.stage in ("coarse", "both"):
        encoder, coarse, _ = gl.train_coarse(dataset, tc, log_path=log_path)
        gl.calibrate_model(encoder, coarse, dataset, tc, stage_tag=1)
        gl.save_model(gl.TwoStageModel(encoder, coarse, None, tc), ckpt)
    if args.stage in ("fine", "both"):
        _require(os.path.join(ckpt, "coarse.mlpw"), "coarse checkpoint")
        model = gl.load_model(ckpt)
        fine, _ = gl.train_fine(model.encoder, model.coarse, dataset, tc,
                                log_path=log_path)
        gl.save_model(gl.TwoStageModel(model.encoder, model.coarse, fine, tc), ckpt)
    _summary({"command": "train-latent", "stage": args.stage, "checkpoint": ckpt,
              "wall_s": round(time.time() - t0, 1)})


def cmd_train_map(args, cfg):
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    _require(os.path.join(ckpt, "manifest.json"), "latent checkpoint")
    model = gl.load_model(ckpt)
    train, _ = _corpus(cfg)
    mc = cfgmod.mapper_config(cfg)
    pairs = pm.build_pairs(train, model.encode_item, n_variants=4,
                           seed=mc.seed, embedding_dim=mc.embedding_dim)
    pm.save_pairs(pairs, os.path.join(args.out, "pairs.jsonl"))
    mapper, log = pm.train_map(pairs, mc)
    pm.save_mapper(mapper, ckpt, manifest={"loss": mc.loss, "seed": mc.seed})
    _summary({"command": "train-map", "pairs": len(pairs),
              "holdout_l1_first": log[0]["holdout_l1"],
              "holdout_l1_last": log[-1]["holdout_l1"], "checkpoint": ckpt})


def cmd_encode(args, cfg):
    _require(args.mesh, "input mesh")
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    model = gl.load_model(ckpt)
    mesh = meshkit.load_obj(args.mesh)
    mesh, _ = meshkit.normalize_unit(mesh)
    samples = meshkit.sample_surface(mesh, args.points, seed=args.seed or 0)
    latent = gl.encode(model.encoder, samples.points[:model.config.encoder_points])
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "latent.json")
    _save_latent(latent, out_path)
    _summary({"command": "encode", "latent": out_path, "dim": latent.dim})


def cmd_decode(args, cfg):
    _require(args.latent, "latent file")
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    model = gl.load_model(ckpt)
    if args.resolution:
        cfg["decode"]["resolution"] = args.resolution
    cfgmod.validate_config(cfg)
    latent = _load_latent(args.latent)
    mesh = _decode_to_mesh(model, latent, cfg)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "mesh.obj")
    meshkit.save_obj(mesh, out_path)
    _summary({"command": "decode", "mesh": out_path,
              "vertices": len(mesh.vertices), "faces": len(mesh.faces),
              "boundary_loops": len(meshkit.boundary_loops(mesh))})


def cmd_interpolate(args, cfg):
    l1 = _load_latent(args.latent1)
    l2 = _load_latent(args.latent2)
    out = gl.interpolate(l1, l2, args.alpha)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "latent_interp.json")
    _save_latent(out, out_path)
    _summary({"command": "interpolate", "alpha": args.alpha, "latent": out_path})


def cmd_edit(args, cfg):
    _require(args.latent, "latent file")
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    mapper = pm.load_mapper(ckpt)
    latent = _load_latent(args.latent)
    emb = _embedding_from_arg(args.prompt_tokens, cfg)
    feat = _embedding_from_arg(args.feature_tokens, cfg)
    edited = pm.edit(latent, emb, feat, mapper, w=args.w, k=args.k,
                     strength=args.strength)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "latent_edited.json")
    _save_latent(edited, out_path)
    changed = int((edited.values != latent.values).sum())
    _summary({"command": "edit", "latent": out_path, "dims_changed": changed})


def cmd_render_depth(args, cfg):
    _require(args.mesh, "input mesh")
    mesh = meshkit.load_obj(args.mesh)
    res = cfg["texture"]["view_resolution"]
    front = tp.render_depth_ortho(mesh, "front", res)
    back = tp.render_depth_ortho(mesh, "back", res)
    comp = tp.composite_front_back(front, back)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "depth.png")
    tp.save_depth_png(comp, out_path)
    _summary({"command": "render-depth", "depth": out_path,
              "size": [comp.width, comp.height]})


def cmd_colorize_stub(args, cfg):
    _require(args.depth, "depth image")
    depth = tp.load_depth_png(args.depth)
    rgb = tp.stub_colorize(depth, style_seed=args.style_seed)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "rgb.png")
    tp.save_rgb_png(rgb, out_path)
    _summary({"command": "colorize-stub", "rgb": out_path,
              "style_seed": args.style_seed})


def cmd_project_texture(args, cfg):
    _require(args.mesh, "input mesh")
    _require(args.rgb, "rgb image")
    mesh = meshkit.load_obj(args.mesh)
    rgb = tp.load_rgb_png(args.rgb)
    atlas = tp.uv_parametrize(mesh, size=cfg["texture"]["atlas_size"])
    filled = tp.project_texture(mesh, atlas, rgb,
                                dilation=cfg["texture"]["dilation"])
    os.makedirs(args.out, exist_ok=True)
    paths = tp.export_textured(mesh, filled, os.path.join(args.out, "textured"))
    _summary({"command": "project-texture",
              "coverage": round(filled.coverage_fraction(), 4), **paths})


def cmd_eval(args, cfg):
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    train, hold = _corpus(cfg)
    tc = cfgmod.training_config(cfg)
    if not args.ablation:
        _require(os.path.join(ckpt, "manifest.json"), "checkpoint")
        model = gl.load_model(ckpt)
        cd, ps = gl.reconstruction_metrics(model, train,
                                           resolution=cfg["decode"]["resolution"])
        _summary({"command": "eval", "CD": cd, "P2S": ps})
        return
    variants = {}
    dataset = gl.build_dataset(train, tc)
    for name, overrides in (
            ("full", {}),
            ("no_grad_loss", {"lambda_grad": 0.0}),
            ("no_latent_loss", {"lambda_latent": 0.0}),
            ("single_stage", {"single_stage": True})):
        sub = gl.TrainingConfig(**{**cfg["latent"], **{k: v for k, v in overrides.items()
                                                       if k != "single_stage"}})
        if overrides.get("single_stage"):
            variants[name] = gl.train_single_stage(dataset, sub)
        else:
            enc, coarse, _ = gl.train_coarse(dataset, sub)
            fine, _ = gl.train_fine(enc, coarse, dataset, sub)
            variants[name] = gl.TwoStageModel(enc, coarse, fine, sub)
    rows = ek.run_ablation(train, hold, variants, args.out,
                           resolution=cfg["decode"]["resolution"])
    _summary({"command": "eval", "ablation_rows": len(rows),
              "table": os.path.join(args.out, "ablation.csv")})


def cmd_pipeline(args, cfg):
    t0 = time.time()
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    _require(os.path.join(ckpt, "manifest.json"), "latent checkpoint")
    _require(os.path.join(ckpt, "mapper.json"), "mapper checkpoint")
    model = gl.load_model(ckpt)
    mapper = pm.load_mapper(ckpt)
    emb = _embedding_from_arg(args.prompt_tokens, cfg)
    latent = pm.map_embedding(mapper, emb)
    mesh = _decode_to_mesh(model, latent, cfg)
    if len(mesh.faces) == 0:
        raise SystemExit("error: decoded field produced an empty mesh")
    os.makedirs(args.out, exist_ok=True)
    _save_latent(latent, os.path.join(args.out, "latent.json"))
    meshkit.save_obj(mesh, os.path.join(args.out, "mesh.obj"))

    res = cfg["texture"]["view_resolution"]
    front = tp.render_depth_ortho(mesh, "front", res)
    back = tp.render_depth_ortho(mesh, "back", res)
    comp = tp.composite_front_back(front, back)
    tp.save_depth_png(comp, os.path.join(args.out, "depth.png"))
    rgb = tp.stub_colorize(comp, style_seed=cfg["texture"]["style_seed"])
    tp.save_rgb_png(rgb, os.path.join(args.out, "rgb.png"))
    atlas = tp.uv_parametrize(mesh, size=cfg["texture"]["atlas_size"])
    filled = tp.project_texture(mesh, atlas, rgb, dilation=cfg["texture"]["dilation"])
    paths = tp.export_textured(mesh, filled, os.path.join(args.out, "textured"))

    report = {"prompt_tokens": args.prompt_tokens,
              "latent_dim": latent.dim,
              "mesh": {"vertices": len(mesh.vertices), "faces": len(mesh.faces),
                       "boundary_loops": len(meshkit.boundary_loops(mesh))},
              "texture_coverage": round(filled.coverage_fraction(), 4),
              "artifacts": {"mesh": "mesh.obj", "depth": "depth.png",
                            "rgb": "rgb.png", **{k: os.path.basename(v)
                                                 for k, v in paths.items()}}}
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _summary({"command": "pipeline", "out": args.out,
              "wall_s": round(time.time() - t0, 1), **report["mesh"]})


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garmgen",
                                description="Desk-scale text-driven 3D garment generation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--checkpoint", default=None,
                        help="checkpoint directory (default <out>/checkpoint)")

    sp = sub.add_parser("gen-data", help="generate the procedural corpus")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-latent", help="train encoder and decoders")
    common(sp)
    sp.add_argument("--stage", choices=("coarse", "fine", "both"), default="both")
    sp.set_defaults(fn=cmd_train_latent)

    sp = sub.add_parser("train-map", help="train the embedding-to-latent mapper")
    common(sp)
    sp.set_defaults(fn=cmd_train_map)

    sp = sub.add_parser("encode", help="encode a mesh into a latent code")
    common(sp)
    sp.add_argument("mesh")
    sp.add_argument("--points", type=int, default=20000)
    sp.set_defaults(fn=cmd_encode)

    sp = sub.add_parser("decode", help="decode a latent code into a mesh")
    common(sp)
    sp.add_argument("latent")
    sp.add_argument("--resolution", type=int, default=None)
    sp.set_defaults(fn=cmd_decode)

    sp = sub.add_parser("interpolate", help="blend two latent codes")
    common(sp)
    sp.add_argument("latent1")
    sp.add_argument("latent2")
    sp.add_argument("--alpha", type=float, required=True)
    sp.set_defaults(fn=cmd_interpolate)

    sp = sub.add_parser("edit", help="feature-directed latent edit")
    common(sp)
    sp.add_argument("latent")
    sp.add_argument("--prompt-tokens", required=True)
    sp.add_argument("--feature-tokens", required=True)
    sp.add_argument("--w", type=float, default=0.5)
    sp.add_argument("--k", type=int, default=7)
    sp.add_argument("--strength", type=float, default=1.0)
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("render-depth", help="front/back orthographic depth")
    common(sp)
    sp.add_argument("mesh")
    sp.set_defaults(fn=cmd_render_depth)

    sp = sub.add_parser("colorize-stub", help="procedural stand-in colorizer")
    common(sp)
    sp.add_argument("depth")
    sp.add_argument("--style-seed", type=int, default=0)
    sp.set_defaults(fn=cmd_colorize_stub)

    sp = sub.add_parser("project-texture", help="back-project an RGB onto UVs")
    common(sp)
    sp.add_argument("mesh")
    sp.add_argument("rgb")
    sp.set_defaults(fn=cmd_project_texture)

    sp = sub.add_parser("eval", help="metrics / ablation table")
    common(sp)
    sp.add_argument("--ablation", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pipeline", help="prompt tokens to textured mesh")
    common(sp)
    sp.add_argument("--prompt-tokens", required=True)
    sp.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
            cfg["corpus"]["seed"] = args.seed
            cfg["latent"]["seed"] = args.seed
            cfg["mapper"]["seed"] = args.seed
            cfg["embedding"]["seed"] = args.seed
            cfg["texture"]["style_seed"] = args.seed
        cfgmod.validate_config({k: v for k, v in cfg.items()})
        cfgmod.echo_config(cfg, args.out)
        args.fn(args, cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
