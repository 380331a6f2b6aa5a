"""Checkpoints, dataset directories, mesh export and config files."""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradtape as gt
from .gradtape import AdamW
from .metrics import EvalReport
from .neuralfield import FieldConfig
from .pipeline import ConfigError, RigModel, StageConfig
from .renderer import Camera
from .skeleton import Mesh, RangeStats, SkeletonGraph, canonical_weights, marching_cubes
from .synthetic import Dataset
from .warpfield import WarpConfig

MAGIC = b"RIGFCKPT"
VERSION = 1


class ArtifactError(OSError):
    pass


def _wrap(path, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except OSError as e:
        raise ArtifactError(f"{path}: {e.strerror or e}") from e


# checkpoints

def _graph_to_dict(g: SkeletonGraph | None):
    if g is None:
        return None
    return {
        "n_bones": g.n_bones,
        "edges": [[j, k, s] for (j, k), s in sorted(g.edges.items())],
        "ranges": [[j, k, dataclasses.asdict(r)] for (j, k), r in sorted(g.ranges.items())],
        "alpha": g.alpha, "xi": g.xi, "warning": g.warning,
    }


def _graph_from_dict(d):
    if d is None:
        return None
    edges = {(int(j), int(k)): float(s) for j, k, s in d["edges"]}
    ranges = {(int(j), int(k)): RangeStats(**r) for j, k, r in d["ranges"]}
    return SkeletonGraph(int(d["n_bones"]), edges, ranges, float(d["alpha"]), float(d["xi"]), bool(d["warning"]))


def checkpoint_bytes(model: RigModel, opt: AdamW | None = None, meta: dict | None = None) -> bytes:
    """Deterministic serialisation: magic, version, JSON header, raw little-endian float64 blocks."""
    store = model.store
    names = list(store)
    header = {
        "version": VERSION,
        "field": dataclasses.asdict(model.field_cfg),
        "warp": dataclasses.asdict(model.warp_cfg),
        "n_cameras": model.n_cameras,
        "times": [float(t) for t in model.times],
        "mesh_scale": model.mesh_scale,
        "bone_mask": None if model.skin.bone_mask is None else [bool(b) for b in model.skin.bone_mask],
        "graph": _graph_to_dict(model.graph),
        "blocks": [[n, list(store[n].shape), store.is_frozen(n)] for n in names],
        "optimizer": None,
        "meta": meta or {},
    }
    moments = []
    if opt is not None:
        moments = [n for n in names if n in opt.m]
        header["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                               "weight_decay": opt.weight_decay, "step_count": opt.step_count, "moments": moments}
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    parts += [np.ascontiguousarray(store[n], dtype="<f8").tobytes() for n in names]
    for n in moments:
        parts.append(np.ascontiguousarray(opt.m[n], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(opt.v[n], dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: RigModel, opt: AdamW | None = None, meta: dict | None = None):
    path = Path(path)
    data = checkpoint_bytes(model, opt, meta)
    _wrap(path, path.parent.mkdir, parents=True, exist_ok=True)
    _wrap(path, path.write_bytes, data)
    return path


def load_checkpoint(path):
    """``(model, optimizer or None, meta)`` from a checkpoint file."""
    path = Path(path)
    raw = _wrap(path, path.read_bytes)
    if raw[:8] != MAGIC:
        raise ArtifactError(f"{path}: not a checkpoint")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n])
    off = 20 + n

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(float).reshape(shape)
        off += 8 * count
        return arr

    fc = FieldConfig(**header["field"])
    wc = WarpConfig(**header["warp"])
    model = RigModel(fc, wc, header["n_cameras"])
    for name, shape, frozen in header["blocks"]:
        if name not in model.store:
            model.store.add(name, np.zeros(shape))
        model.store.set(name, take(tuple(shape)))
        if frozen:
            model.store.freeze(name)
    model.times = np.array(header["times"], dtype=float)
    model.mesh_scale = float(header["mesh_scale"])
    if header["bone_mask"] is not None:
        model.skin.bone_mask = np.array(header["bone_mask"], dtype=bool)
    model.graph = _graph_from_dict(header["graph"])
    opt = None
    if header["optimizer"] is not None:
        o = dict(header["optimizer"])
        moments = o.pop("moments")
        opt = AdamW(**o)
        for name in moments:
            shape = tuple(model.store[name].shape)
            opt.m[name] = take(shape).copy()
            opt.v[name] = take(shape).copy()
    return model, opt, header["meta"]


# dataset directories

def _stem(f, v):
    return f"{f:04d}_{v:02d}"


def _camera_dict(c: Camera) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
            "rotation": [float(x) for x in c.rotation], "translation": [float(x) for x in c.translation]}


def save_dataset(data: Dataset, root, extra: dict | None = None) -> Path:
    """Write ``frames/``, ``masks/``, ``flow/``, ``feats/`` and ``cameras.json`` under ``root``."""
    root = Path(root)
    for sub in ("frames", "masks", "flow", "feats"):
        _wrap(root / sub, (root / sub).mkdir, parents=True, exist_ok=True)
    for f in range(data.n_frames):
        for v in range(data.n_views):
            s = _stem(f, v)
            save_png(root / "frames" / f"{s}.png", data.images[f, v])
            mask = (data.masks[f, v] * 255).astype(np.uint8)
            _wrap(root, Image.fromarray(mask, "L").save, root / "masks" / f"{s}.png")
            if data.flow is not None:
                _wrap(root, np.save, root / "flow" / f"{s}.npy", data.flow[f, v])
                if data.flow_valid is not None:
                    _wrap(root, np.save, root / "flow" / f"{s}_valid.npy", data.flow_valid[f, v])
            if data.features is not None:
                _wrap(root, np.save, root / "feats" / f"{s}.npy", data.features[f, v])
    meta = {"times": [float(t) for t in data.times], "views": data.n_views,
            "cameras": [[_camera_dict(c) for c in row] for row in data.cameras]}
    if extra:
        meta.update(extra)
    _wrap(root, (root / "cameras.json").write_text, json.dumps(meta, indent=1, sort_keys=True))
    return root


def load_dataset(root) -> Dataset:
    """Read a dataset directory; missing flow or feature files disable those terms."""
    root = Path(root)
    meta = json.loads(_wrap(root, (root / "cameras.json").read_text))
    times = np.array(meta["times"], dtype=float)
    V = int(meta["views"])
    F = len(times)
    cams = [[Camera(frame=f * V + v, **meta["cameras"][f][v]) for v in range(V)] for f in range(F)]
    imgs, masks, flows, valid, feats = [], [], [], [], []
    for f in range(F):
        for v in range(V):
            s = _stem(f, v)
            imgs.append(load_png(root / "frames" / f"{s}.png"))
            masks.append(np.asarray(_wrap(root, Image.open, root / "masks" / f"{s}.png")) > 127)
            fp = root / "flow" / f"{s}.npy"
            flows.append(np.load(fp) if fp.exists() else None)
            vp = root / "flow" / f"{s}_valid.npy"
            valid.append(np.load(vp) if vp.exists() else None)
            ep = root / "feats" / f"{s}.npy"
            feats.append(np.load(ep) if ep.exists() else None)

    def grid(xs):
        if any(x is None for x in xs):
            return None
        a = np.array(xs)
        return a.reshape((F, V) + a.shape[1:])

    flow = grid(flows)
    fvalid = grid(valid)
    if flow is not None and fvalid is None:
        fvalid = grid(masks).copy()
        fvalid[-1] = False
    return Dataset(times, grid(imgs), grid(masks), cams, flow, fvalid, grid(feats))


def save_png(path, image):
    img = np.clip(np.round(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    _wrap(path, Image.fromarray(img, "RGB").save, path)


def load_png(path) -> np.ndarray:
    with _wrap(path, Image.open, path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


# meshes and export

def write_obj(path, mesh: Mesh):
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    _wrap(path, path.write_text, "\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    v, f = [], []
    for line in _wrap(path, Path(path).read_text).splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            v.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            f.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(np.array(v).reshape(-1, 3), np.array(f, dtype=np.int64).reshape(-1, 3))


def write_skinning_csv(path, weights):
    w = np.asarray(weights, dtype=float)
    head = "vertex," + ",".join(f"bone{b}" for b in range(w.shape[1]))
    rows = [f"{i}," + ",".join(f"{x:.9g}" for x in row) for i, row in enumerate(w)]
    _wrap(path, Path(path).write_text, "\n".join([head] + rows) + "\n")


def posed_mesh(model: RigModel, mesh: Mesh, t: float) -> Mesh:
    """Canonical mesh pushed through the forward warp at time ``t``."""
    X = mesh.vertices
    v = model.skin.forward(X, [t], np.zeros(len(X), dtype=int))
    return Mesh(gt.value(v), mesh.faces)


def skeleton_json(graph: SkeletonGraph) -> str:
    d = _graph_to_dict(graph)
    d["orphans"] = graph.orphans
    return json.dumps(d, indent=2, sort_keys=True)


def export_artifacts(model: RigModel, out, resolution: int = 64, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                     report: EvalReport | None = None, opt: AdamW | None = None) -> dict:
    """Write the canonical mesh with skinning sidecar, posed meshes, skeleton, checkpoint and report."""
    out = Path(out)
    _wrap(out, (out / "posed").mkdir, parents=True, exist_ok=True)
    mesh = marching_cubes(model.field, resolution, bounds)
    files = {"canonical": out / "canonical.obj", "skinning": out / "canonical_skinning.csv",
             "checkpoint": out / "checkpoint.rfck"}
    write_obj(files["canonical"], mesh)
    write_skinning_csv(files["skinning"], canonical_weights(model.skin, mesh.vertices))
    for i, t in enumerate(model.times):
        write_obj(out / "posed" / f"frame_{i:03d}.obj", posed_mesh(model, mesh, float(t)))
    if model.graph is not None:
        files["skeleton"] = out / "skeleton.json"
        _wrap(out, files["skeleton"].write_text, skeleton_json(model.graph))
    save_checkpoint(files["checkpoint"], model, opt)
    if report is not None:
        files["report"] = out / "report.json"
        _wrap(out, files["report"].write_text, report.to_json())
    return files


# config files

def load_config(path, stage: str, preset: str = "desk") -> StageConfig:
    """JSON key-value tree overlaid on a preset; unknown keys are rejected."""
    base = StageConfig.desk(stage) if preset == "desk" else StageConfig.full(stage)
    if path is None:
        return base
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if "stage" in d and d["stage"] != stage:
        raise ConfigError(f"{path}: config is for stage {d['stage']!r}, not {stage!r}")
    return StageConfig.from_dict(d, base)
