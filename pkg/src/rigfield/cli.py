"""Batch command line: synth, extract, generate, eval, export."""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import artifacts as io
from .gradtape import InvalidInput
from .metrics import evaluate_meshes
from .oracle_ipc import IpcOracle, make_oracle
from .pipeline import ConfigError, NumericalAbort, train_extraction, train_generation
from .skeleton import EmptyMesh, marching_cubes
from .synthetic import SCENES, generate_synthetic

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_IPC = [sys.executable, "-m", "rigfield.oracle_ipc", "--kind", "blur"]


def _common(p):
    p.add_argument("--config", type=Path, default=None, help="JSON config overlaid on the desk preset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--oracle", choices=["target", "blur", "ipc"], default="blur")
    p.add_argument("--oracle-cmd", default=None, help="server command for --oracle ipc")
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--preset", choices=["desk", "full"], default="desk")
    p.add_argument("--out", type=Path, required=True)


def build_parser():
    ap = argparse.ArgumentParser(prog="rigfield", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset with ground-truth meshes")
    p.add_argument("--scene", choices=sorted(SCENES), default="two_bone")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("extract", help="stage 1: fit the video and extract a skeleton")
    p.add_argument("--data", type=Path, required=True)
    _common(p)

    p = sub.add_parser("generate", help="stage 2: regrow the model under the skeleton")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="dataset whose scene backs the target oracle")
    _common(p)

    p = sub.add_parser("eval", help="Chamfer distance and F-score of posed meshes against ground truth")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("export", help="write meshes, skinning, skeleton and checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)
    return ap


def _stage_config(a, stage):
    cfg = io.load_config(a.config, stage, a.preset)
    over = {}
    if a.seed is not None:
        over["seed"] = a.seed
    if a.iters is not None:
        over["iters"] = a.iters
    if a.cfg_scale is not None:
        over["cfg_scale"] = a.cfg_scale
    return cfg.from_dict(over, cfg) if over else cfg


def _scene_meta(data_dir):
    if data_dir is None:
        return {}
    return json.loads((Path(data_dir) / "cameras.json").read_text())


def _oracle(a, meta):
    if a.oracle == "ipc":
        return IpcOracle(shlex.split(a.oracle_cmd) if a.oracle_cmd else DEFAULT_IPC)
    if a.oracle == "target":
        if "scene" not in meta:
            raise ConfigError("the target oracle needs a synthetic dataset (no scene recorded)")
        return make_oracle("target", meta["scene"], meta.get("scene_seed", 0))
    return make_oracle("blur")


def _close(oracle):
    if hasattr(oracle, "close"):
        oracle.close()


def cmd_synth(a):
    scene = SCENES[a.scene](resolution=a.resolution, seed=a.seed)
    data, meshes = generate_synthetic(scene, a.frames, a.views)
    io.save_dataset(data, a.out, {"scene": a.scene, "scene_seed": a.seed})
    (a.out / "gt").mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(meshes):
        io.write_obj(a.out / "gt" / f"frame_{i:03d}.obj", m)
    print(f"wrote {data.n_frames} frames x {data.n_views} views to {a.out}")


def cmd_extract(a):
    cfg = _stage_config(a, "extract")
    data = io.load_dataset(a.data)
    oracle = _oracle(a, _scene_meta(a.data)) if cfg.csd else None
    try:
        model, graph, log = train_extraction(data, cfg, oracle)
    finally:
        _close(oracle)
    a.out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(a.out / "checkpoint.rfck", model, model.optimizer,
                       {"stage": "extract", "config": cfg.to_dict(), "data": str(a.data)})
    (a.out / "skeleton.json").write_text(io.skeleton_json(graph))
    print(f"edges {graph.edge_list()} alpha={graph.alpha} xi={graph.xi:.4g} rollbacks={log.rollbacks}")


def cmd_generate(a):
    cfg = _stage_config(a, "generate")
    model, _, meta = io.load_checkpoint(a.model)
    if model.graph is None:
        raise ConfigError(f"{a.model}: checkpoint has no skeleton; run extract first")
    data_dir = a.data or meta.get("data")
    oracle = _oracle(a, _scene_meta(data_dir) if data_dir and Path(data_dir).exists() else {})
    try:
        gen, log = train_generation(model, model.graph, cfg, oracle)
    finally:
        _close(oracle)
    a.out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(a.out / "checkpoint.rfck", gen, gen.optimizer,
                       {"stage": "generate", "config": cfg.to_dict(), "data": meta.get("data")})
    print(f"generated model written to {a.out / 'checkpoint.rfck'} rollbacks={log.rollbacks}")


def cmd_eval(a):
    model, _, _ = io.load_checkpoint(a.model)
    gt_files = sorted((a.data / "gt").glob("frame_*.obj"))
    if not gt_files:
        raise ConfigError(f"{a.data}: no ground-truth meshes under gt/")
    truth = [io.read_obj(p) for p in gt_files]
    if len(truth) != len(model.times):
        raise ConfigError(f"{len(truth)} ground-truth meshes for {len(model.times)} model frames")
    canon = marching_cubes(model.field, a.resolution)
    pred = [io.posed_mesh(model, canon, float(t)) for t in model.times]
    rep = evaluate_meshes(pred, truth, seed=a.seed)
    text = rep.to_json()
    if a.out is not None:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(text)
    print(f"chamfer x100 {rep.chamfer_x100:.4f}  F-score {rep.fscore:.2f}")


def cmd_export(a):
    model, opt, _ = io.load_checkpoint(a.model)
    files = io.export_artifacts(model, a.out, a.resolution, opt=opt)
    print("\n".join(f"{k}: {v}" for k, v in files.items()))


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "generate": cmd_generate, "eval": cmd_eval,
            "export": cmd_export}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[a.cmd](a)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InvalidInput, EmptyMesh, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
