import json

import numpy as np
import pytest
from conftest import tiny_config

from rigfield import artifacts as io
from rigfield.artifacts import ArtifactError
from rigfield.neuralfield import FieldConfig
from rigfield.objectives import BlurOracle
from rigfield.pipeline import ConfigError, RigModel, train_extraction
from rigfield.renderer import Camera, render_image, RenderSettings
from rigfield.skeleton import EmptyMesh, Mesh, marching_cubes
from rigfield.warpfield import WarpConfig, warp_forward


@pytest.fixture(scope="module")
def trained(tiny_data):
    model, graph, _ = train_extraction(tiny_data[0], tiny_config(), BlurOracle())
    return model


def test_checkpoint_round_trip_renders_bitwise(trained, tmp_path):
    path = io.save_checkpoint(tmp_path / "m.rfck", trained, trained.optimizer, {"note": "x"})
    model, opt, meta = io.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert model.store.names() == trained.store.names()
    for n in model.store:
        assert np.array_equal(model.store[n], trained.store[n])
        assert model.store.is_frozen(n) == trained.store.is_frozen(n)
    assert opt.step_count == trained.optimizer.step_count
    assert model.graph.edges == trained.graph.edges and model.graph.ranges == trained.graph.ranges
    cam = Camera.orbit(0.4, 0.2, 3.0, width=8, height=8)
    s = RenderSettings(n_samples=16)
    a = render_image(model.field, model.skin, cam, 0.5, settings=s)
    b = render_image(trained.field, trained.skin, cam, 0.5, settings=s)
    for k in ("rgb", "alpha", "depth"):
        assert np.array_equal(a[k], b[k])
    # serialisation is deterministic
    assert io.checkpoint_bytes(model, opt, meta) == path.read_bytes()


def test_bad_checkpoint_files(tmp_path):
    with pytest.raises(ArtifactError, match="missing.rfck"):
        io.load_checkpoint(tmp_path / "missing.rfck")
    (tmp_path / "junk.rfck").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ArtifactError, match="not a checkpoint"):
        io.load_checkpoint(tmp_path / "junk.rfck")


def test_posed_mesh_is_forward_warp(trained):
    mesh = marching_cubes(trained.field, 16)
    t = float(trained.times[1])
    posed = io.posed_mesh(trained, mesh, t)
    assert np.array_equal(posed.faces, mesh.faces)
    for i in (0, len(mesh.vertices) // 2, len(mesh.vertices) - 1):
        assert np.allclose(posed.vertices[i], warp_forward(trained.skin, mesh.vertices[i], t), atol=1e-9)


def test_export_writes_everything(trained, tmp_path):
    files = io.export_artifacts(trained, tmp_path / "out", resolution=16)
    for key in ("canonical", "skinning", "checkpoint", "skeleton"):
        assert files[key].exists()
    assert len(list((tmp_path / "out" / "posed").glob("*.obj"))) == len(trained.times)
    sk = json.loads(files["skeleton"].read_text())
    assert sk["n_bones"] == 2
    rows = files["skinning"].read_text().splitlines()
    w = np.array([[float(x) for x in r.split(",")[1:]] for r in rows[1:]])
    assert np.allclose(w.sum(1), 1.0, atol=1e-6)


def test_export_of_empty_field_raises():
    model = RigModel(FieldConfig.desk(init_radius=1e-3), WarpConfig.desk(n_bones=2), 1)
    with pytest.raises(EmptyMesh):
        io.export_artifacts(model, "/nonexistent-unused", resolution=8)


def test_obj_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mesh = Mesh(rng.normal(size=(10, 3)), rng.integers(0, 10, (6, 3)))
    io.write_obj(tmp_path / "m.obj", mesh)
    back = io.read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-8)


def test_dataset_round_trip(tiny_data, tmp_path):
    data, _ = tiny_data
    io.save_dataset(data, tmp_path / "d", {"scene": "two_bone"})
    back = io.load_dataset(tmp_path / "d")
    assert np.array_equal(back.times, data.times)
    # images are quantised to 8 bits
    assert np.max(np.abs(back.images - data.images)) <= 0.5 / 255 + 1e-12
    assert np.array_equal(back.masks, data.masks)
    assert np.array_equal(back.flow, data.flow)
    for ra, rb in zip(back.cameras, data.cameras):
        for a, b in zip(ra, rb):
            assert np.allclose(a.project(np.zeros((1, 3))), b.project(np.zeros((1, 3))))
    assert json.loads((tmp_path / "d" / "cameras.json").read_text())["scene"] == "two_bone"


def test_dataset_missing_directory_names_path(tmp_path):
    with pytest.raises(ArtifactError, match="nowhere"):
        io.load_dataset(tmp_path / "nowhere")


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"iters": 9, "field": {"beta_init": 0.05}}))
    cfg = io.load_config(p, "extract")
    assert cfg.iters == 9 and cfg.field.beta_init == 0.05
    p.write_text(json.dumps({"iters": 9, "bogus": 1}))
    with pytest.raises(ConfigError, match="bogus"):
        io.load_config(p, "extract")
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        io.load_config(p, "extract")
    with pytest.raises(ConfigError):
        io.load_config(tmp_path / "absent.json", "extract")
