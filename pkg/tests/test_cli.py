import json

import numpy as np
import pytest

from sdfrecon.cli import main
from sdfrecon.ply import load_ply, save_ply
from sdfrecon.scene_io import load_scene
from sdfrecon.synth import make_shape, render_view

TINY = ["--n-views", "4", "--resolution", "8", "--n-points", "400"]


def tiny_config(scene_dir):
    cfg = json.loads((scene_dir / "config.json").read_text())
    cfg.update(geometry_layers=2, geometry_width=8, geometry_skip=None, color_layers=2, color_width=8, pos_freqs=2,
               dir_freqs=1, embedding_dim=2, octree_depth=4, batch_size=16, min_track_len=2, bootstrap_iters=2,
               total_iters=6, refresh_period=2, checkpoint_every=3)
    (scene_dir / "config.json").write_text(json.dumps(cfg))


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--out", str(d), *TINY]) == 0
    tiny_config(d)
    return d


class TestSynth:
    def test_points_on_sphere(self, scene_dir):
        scene = load_scene(scene_dir, with_pixels=False)
        r = np.linalg.norm(scene.point_positions, axis=1)
        assert np.abs(r - 0.5).max() <= 1e-6

    def test_zero_tint_images_match_untinted_render(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--tint", "0", *TINY]) == 0
        scene = load_scene(tmp_path)
        for rec in scene.images:
            img, _, _ = render_view(make_shape("sphere"), rec.camera, np.ones(3), 1.0)
            assert np.abs(rec.pixels - img).max() <= 0.5 / 255 + 1e-12

    def test_sky_fraction_matches_silhouette(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--n-views", "4", "--resolution", "32", "--n-points", "400",
                     "--sky-fraction", "0.5"]) == 0
        scene = load_scene(tmp_path)
        for rec in scene.images:
            _, _, hit = render_view(make_shape("sphere"), rec.camera, np.ones(3), 0.5)
            rows = np.arange(32)[:, None] < 16
            np.testing.assert_array_equal(rec.sky, ~hit & rows)
            frac = rec.sky.mean()
            assert 0.5 - (hit & rows).mean() - 1e-12 <= frac <= 0.5

    def test_invalid_shape(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["synth", "--out", str(tmp_path), "--shape", "torus"])
        assert e.value.code == 1

    @pytest.mark.parametrize("shape", ["box", "two-spheres"])
    def test_other_shapes(self, tmp_path, shape):
        assert main(["synth", "--out", str(tmp_path), "--shape", shape, *TINY]) == 0
        pts = load_scene(tmp_path, with_pixels=False).point_positions
        assert np.abs(make_shape(shape).sdf(pts)).max() <= 1e-9


class TestTrain:
    def test_zero_iterations(self, scene_dir, tmp_path):
        assert main(["train", "--scene", str(scene_dir), "--out", str(tmp_path), "--iters", "0"]) == 0
        assert [p.name for p in tmp_path.glob("ckpt_*.npz")] == ["ckpt_0000000.npz"]

    def test_rerun_identical_log(self, scene_dir, tmp_path):
        for k in "ab":
            assert main(["train", "--scene", str(scene_dir), "--out", str(tmp_path / k), "--seed", "3"]) == 0
        assert (tmp_path / "a/log.csv").read_bytes() == (tmp_path / "b/log.csv").read_bytes()
        assert sorted(p.name for p in (tmp_path / "a").glob("ckpt_*.npz")) == [
            "ckpt_0000000.npz", "ckpt_0000003.npz", "ckpt_0000006.npz"]

    def test_strategy_override(self, scene_dir, tmp_path):
        assert main(["train", "--scene", str(scene_dir), "--out", str(tmp_path), "--strategy", "sphere"]) == 0
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert all(",sphere," in ln for ln in lines[1:])

    def test_missing_scene(self, tmp_path):
        assert main(["train", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def trained(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--scene", str(scene_dir), "--out", str(out)]) == 0
    return out / "ckpt_0000006.npz"


class TestMeshEvalAlign:
    def test_mesh(self, trained, tmp_path):
        assert main(["mesh", "--checkpoint", str(trained), "--out", str(tmp_path / "m.ply"), "--cells-per-voxel",
                     "2"]) == 0
        assert (tmp_path / "m.ply").exists()

    def test_eval_identity(self, scene_dir, tmp_path, capsys):
        gt = scene_dir / "gt_points.ply"
        assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path / "r.json")]) == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        assert all(v == 100.0 for row in rep["rows"].values() for v in row.values())
        assert all(v == 100.0 for v in rep["auc"].values())

    def test_align_identity(self, scene_dir, tmp_path, capsys):
        gt = str(scene_dir / "gt_points.ply")
        assert main(["align", "--source", gt, "--target", gt, "--out", str(tmp_path / "t.json")]) == 0
        doc = json.loads((tmp_path / "t.json").read_text())
        np.testing.assert_allclose(doc["rotation"], np.eye(3), atol=1e-9)
        np.testing.assert_allclose(doc["translation"], 0, atol=1e-9)
        assert "1." in capsys.readouterr().out

    def test_align_numerical_failure(self, tmp_path):
        save_ply(tmp_path / "a.ply", np.zeros((4, 3)))
        save_ply(tmp_path / "b.ply", np.ones((4, 3)))
        assert main(["align", "--source", str(tmp_path / "a.ply"), "--target", str(tmp_path / "b.ply"),
                     "--cutoff", "0.1"]) == 3

    def test_malformed_input_is_data_error(self, tmp_path):
        (tmp_path / "bad.ply").write_text("not a ply\n")
        assert main(["eval", "--pred", str(tmp_path / "bad.ply"), "--gt", str(tmp_path / "bad.ply")]) == 2

    def test_sample_viz(self, scene_dir, trained, tmp_path):
        out = tmp_path / "s.ply"
        assert main(["sample-viz", "--scene", str(scene_dir), "--checkpoint", str(trained), "--out", str(out),
                     "--rays", "20"]) == 0
        d = load_ply(out)
        assert set(np.unique(d.extra["stage"])) <= {0, 1, 2}
        assert len(d.vertices) % 24 == 0
