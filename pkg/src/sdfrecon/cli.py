"""``sdfrecon`` command line: synth, train, mesh, eval, align, sample-viz.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, synth
from .config import SceneConfig
from .field import load_checkpoint
from .geometry import SparseVoxelGrid
from .meshing import TriMesh, marching_cubes, sample_mesh_points
from .ply import PlyError, load_ply
from .sampling import SamplingConfig, SdfCache, export_samples_ply, sample_rays
from .scene_io import SceneFormatError, load_scene
from .trainer import BatchError, NumericalError, RayPool, Trainer

log = logging.getLogger("sdfrecon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def grid_from_extra(extra: dict) -> SparseVoxelGrid:
    return SparseVoxelGrid(extra["grid_origin"], float(extra["grid_voxel_size"]), extra["grid_keys"])


# ------------------------------------------------------------------ commands
def cmd_synth(a) -> int:
    out = synth.synthesize(a.out, a.shape, a.n_views, a.resolution, a.tint, a.sky_fraction, a.seed,
                           n_points=a.n_points)
    print(out)
    return EXIT_OK


def cmd_train(a) -> int:
    root = _require(Path(a.scene), "scene directory")
    cfg = SceneConfig.load(_require(Path(a.config), "config")) if a.config else None
    scene = load_scene(root, cfg)
    cfg = scene.config
    changes = {}
    if a.strategy:
        changes["strategy"] = a.strategy
    if a.seed is not None:
        changes["seed"] = a.seed
    if changes:
        cfg = cfg.replace(**changes)
    tr = Trainer(scene, a.out, cfg)
    results = tr.run(a.iters)
    if results:
        r = results[-1]
        print(f"iteration {tr.state.iteration}: loss {r.loss:.6f} (color {r.color:.6f}, eikonal {r.eikonal:.6f}, "
              f"mask {r.mask:.6f}), inv_s {tr.state.inv_s:.3f}, strategy {r.strategy}")
    else:
        print(f"wrote initial checkpoint to {a.out}")
    return EXIT_OK


def cmd_mesh(a) -> int:
    fld, it, cfg, extra = load_checkpoint(_require(Path(a.checkpoint), "checkpoint"))
    grid = grid_from_extra(extra)
    cpv = a.cells_per_voxel or SceneConfig.from_dict(cfg).cells_per_voxel
    mesh = marching_cubes(fld.sdf_value, grid, cpv, normal_fn=lambda p: fld.sdf(p)[1])
    mesh.save(a.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh)} triangles (iteration {it}) -> {a.out}")
    return EXIT_OK


def _load_points(path: Path, density: float, seed: int) -> np.ndarray:
    d = load_ply(_require(path, "PLY file"))
    if d.faces is not None and len(d.faces):
        return sample_mesh_points(TriMesh(d.vertices, d.faces), density, seed)
    return d.vertices


def cmd_eval(a) -> int:
    pred = _load_points(Path(a.pred), a.density, a.seed)
    gt = _load_points(Path(a.gt), a.density, a.seed)
    if a.sfm:
        gt = bench.visibility_filter(load_ply(_require(Path(a.sfm), "SfM cloud")).vertices, gt, a.voxel_size,
                                     a.dilation)
    if a.align:
        T, rmse = bench.icp_align(pred, gt)
        pred = T.apply(pred)
        log.info("ICP alignment rmse %.6g", rmse)
    report = bench.evaluate(pred, gt, theta_max=a.theta_max)
    if a.out:
        report.save(a.out)
    print(report.table())
    return EXIT_OK


def cmd_align(a) -> int:
    src = load_ply(_require(Path(a.source), "source")).vertices
    dst = load_ply(_require(Path(a.target), "target")).vertices
    T, rmse = bench.icp_align(src, dst, a.max_iterations, a.cutoff)
    doc = {**T.to_dict(), "rmse": rmse}
    if a.out:
        Path(a.out).write_text(json.dumps(doc, indent=2) + "\n")
    with np.printoptions(precision=8, suppress=True):
        print(T.matrix())
    print(f"rmse {rmse:.6g}")
    return EXIT_OK


def cmd_sample_viz(a) -> int:
    fld, it, cfg_dict, extra = load_checkpoint(_require(Path(a.checkpoint), "checkpoint"))
    cfg = SceneConfig.from_dict(cfg_dict)
    strategy = a.strategy or cfg.strategy
    scene = load_scene(_require(Path(a.scene), "scene directory"), cfg)
    grid = grid_from_extra(extra)
    pool = RayPool.from_scene(scene, grid)
    rng = np.random.default_rng(a.seed)
    sel = rng.choice(len(pool), size=min(a.rays, len(pool)), replace=False)
    cache = None
    if strategy == "hybrid":
        cache = SdfCache.build(grid, cfg.octree_depth, cfg.refresh_period)
        cache.refresh(fld.sdf_value, it, force=True)
    half = grid.center_and_extent()[1]
    scfg = SamplingConfig.from_scene_config(cfg, fld.scale, 2.0 * half, True, strategy)
    samples = sample_rays(pool.origins[sel], pool.dirs[sel], scfg, rng,
                          intervals=(pool.t_in[sel], pool.t_out[sel], pool.hit[sel]), cache=cache,
                          sdf_fn=fld.sdf_value)
    n = export_samples_ply(a.out, pool.origins[sel], pool.dirs[sel], samples)
    print(f"{n} samples from {int(samples.valid.sum())} rays ({strategy}) -> {a.out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdfrecon", description="Neural SDF surface reconstruction from posed images.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic mode)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene")
    s.add_argument("--shape", choices=synth.SHAPES, default="sphere")
    s.add_argument("--n-views", type=int, default=16)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--tint", type=float, default=0.1, help="per-image color tint strength")
    s.add_argument("--sky-fraction", type=float, default=1.0, help="image rows (from the top) eligible as sky")
    s.add_argument("--n-points", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a field on a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON config (defaults to <scene>/config.json)")
    s.add_argument("--strategy", choices=["sphere", "voxel", "hybrid"])
    s.add_argument("--iters", type=int, help="iterations to run (default: total_iters)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cells-per-voxel", type=int)
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval", help="precision / recall / F1 report")
    s.add_argument("--pred", required=True, help="predicted mesh or cloud (PLY)")
    s.add_argument("--gt", required=True, help="ground-truth mesh or cloud (PLY)")
    s.add_argument("--sfm", help="SfM cloud (PLY) for visibility filtering of the ground truth")
    s.add_argument("--voxel-size", type=float, default=0.1)
    s.add_argument("--dilation", type=int, default=1)
    s.add_argument("--theta-max", type=float, help="fix the AUC integration limit")
    s.add_argument("--density", type=float, default=1e4, help="mesh sampling density (points per unit area)")
    s.add_argument("--align", action="store_true", help="ICP-align the prediction first")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="report JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("align", help="ICP-align two clouds")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--max-iterations", type=int, default=50)
    s.add_argument("--cutoff", type=float)
    s.add_argument("--out", help="transform JSON path")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("sample-viz", help="export ray samples of a checkpoint as a PLY with stage tags")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=["sphere", "voxel", "hybrid"])
    s.add_argument("--rays", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(args.threads, 1)):
            return args.func(args)
    except UsageError as e:
        print(f"sdfrecon: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, bench.AlignmentError) as e:
        print(f"sdfrecon: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneFormatError, PlyError, BatchError, bench.LadderError, FileNotFoundError, ValueError) as e:
        print(f"sdfrecon: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
