"""Command-line pipeline: gen, labels, distill, eval, nbv, ablate.

All commands are driven by a JSON config (see config.default_config) plus a
few flag overrides. Exit codes: 0 success, 2 validation error, 3 runtime
stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .cameras import make_camera_rig
from .config import ConfigError, RunConfig, load_config
from .consistency import ConsistencyConfig, LabelGenerator, labels_to_csv
from .dataset_io import (DatasetError, load_dataset, save_dataset,
                         write_grid, write_image_png, read_grid)
from .decouple import decouple_images, fit_decoupled
from .metrics import curve_to_csv, evaluate_dataset
from .nbv import (NbvConfig, init_pool, render_uncertainty_map,
                  run_incremental, trajectory_to_csv, uncertainty_heatmap)
from .scene import SceneDataset, perturb_sdf, render_views, tsdf_fuse
from .uncertainty import (TrainConfig, UncertaintyGrid, finetune_stage2,
                          train_stage1, write_loss_trace)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("MVUNCERT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _build_dataset(cfg: RunConfig, threads: int) -> SceneDataset:
    cams = make_camera_rig(cfg.cameras.count,
                           cfg.scene.bounding_sphere.center,
                           cfg.cameras.distance, cfg.cameras.width,
                           cfg.cameras.height, cfg.cameras.fov_deg,
                           cfg.cameras.distribution)
    views = render_views(cfg.scene.gt_sdf, cfg.scene.shading, cams,
                         cfg.scene.bounding_sphere, threads=threads)
    bbox = cfg.recon_bbox()
    if cfg.recon.source == "perturbed":
        recon = perturb_sdf(cfg.scene.gt_sdf, cfg.scene.perturbations,
                            cfg.recon.dims, bbox)
    else:
        recon = tsdf_fuse(views, cfg.recon.dims, bbox, cfg.recon.truncation,
                          depth_noise=cfg.recon.depth_noise, seed=cfg.seed)
    return SceneDataset(views=views, gt_sdf=cfg.scene.gt_sdf,
                        recon_sdf=recon,
                        bounding_sphere=cfg.scene.bounding_sphere)


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    ds = _build_dataset(cfg, _threads(args))
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"dataset written to {out} ({len(ds.views)} views, "
          f"recon {cfg.recon.source} {cfg.recon.dims})")
    return 0


def _sample_label_pixels(cfg: RunConfig, ds: SceneDataset):
    rng = np.random.default_rng(cfg.seed)
    n = cfg.labels.batch
    views = (ds.views if cfg.labels.views is None
             else [ds.view_by_id(v) for v in cfg.labels.views])
    if n == 0 or not views:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    vi = rng.integers(0, len(views), n)
    ids = np.array([views[i].id for i in vi], dtype=np.int64)
    px = np.stack([rng.integers(0, views[0].width, n),
                   rng.integers(0, views[0].height, n)],
                  axis=-1).astype(np.float64)
    return ids, px


def cmd_labels(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.dataset)
    if ds.recon_sdf is None:
        raise DatasetError(f"{args.dataset}: dataset has no recon.sdfg")
    ids, px = _sample_label_pixels(cfg, ds)
    gen = LabelGenerator(ds, ds.recon_sdf, cfg.consistency)
    batch = (gen.labels_for_pixels(ids, px) if len(ids)
             else {"positions": np.zeros((0, 3)), "scores": np.zeros(0),
                   "counts": np.zeros(0, dtype=np.int64)})
    out = Path(args.out or Path(cfg.out_dir) / "labels.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    labels_to_csv(out, batch)
    print(f"{len(batch['scores'])} labels -> {out}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.dataset)
    if ds.recon_sdf is None:
        raise DatasetError(f"{args.dataset}: dataset has no recon.sdfg")
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    grid = UncertaintyGrid(cfg.training.grid_dims, cfg.recon_bbox(),
                           init_value=cfg.training.init_value)
    grid, trace = train_stage1(ds, ds.recon_sdf, grid, cfg.training,
                               cfg.consistency)
    if args.finetune:
        dec = fit_decoupled(ds, ds.recon_sdf,
                            samples_per_view=cfg.decouple.samples_per_view,
                            lambda_reg=cfg.decouple.lambda_reg, seed=cfg.seed)
        processed, vd_maps = decouple_images(ds, dec, ds.recon_sdf)
        img_dir = out / "images_decoupled"
        vd_dir = out / "vd"
        img_dir.mkdir(exist_ok=True)
        vd_dir.mkdir(exist_ok=True)
        for vid, img in processed.items():
            write_image_png(img_dir / f"view_{vid:04d}.png", img)
        for vid, img in vd_maps.items():
            write_image_png(vd_dir / f"view_{vid:04d}.png", img)
        grid, ft_trace = finetune_stage2(ds, ds.recon_sdf, grid, cfg.training,
                                         processed, cfg.consistency)
        trace = trace + [(s + len(trace), l, n) for s, l, n in ft_trace]

    write_grid(out / "uncertainty.uncg", grid, magic=b"UNCG")
    write_loss_trace(out / "loss.csv", trace)
    print(f"uncertainty grid -> {out / 'uncertainty.uncg'} "
          f"({len(trace)} steps)")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.dataset)
    if ds.recon_sdf is None:
        raise DatasetError(f"{args.dataset}: dataset has no recon.sdfg")
    values, bbox, _ = read_grid(args.grid, expect_magic=b"UNCG")
    grid = UncertaintyGrid(values.shape, bbox, values.astype(np.float64))
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, curves = evaluate_dataset(
        ds, grid, penalty=cfg.eval.penalty,
        n_surface_points=cfg.eval.n_surface_points,
        view_ids=cfg.eval.views, seed=cfg.seed)
    with open(out / "report.json", "w") as f:
        json.dump(report.to_json(), f, indent=1, sort_keys=True)
    for flavor, curve in curves.items():
        curve_to_csv(out / f"curve_{flavor}.csv", curve)
    print(f"report -> {out / 'report.json'}: "
          f"ause_3d={report.ause_3d:.4f} cd={report.cd:.4f}")
    return 0


def cmd_nbv(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.dataset)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ncfg = cfg.nbv
    if args.policy:
        ncfg = NbvConfig(**{**ncfg.__dict__, "policy": args.policy})
    pool = init_pool(ds, ncfg.n_regions, seed=ncfg.seed)
    state = run_incremental(ds, pool, ncfg, cfg.training, cfg.consistency,
                            shading=cfg.scene.shading,
                            fuse_bbox=cfg.recon_bbox())
    trajectory_to_csv(out / "trajectory.csv", state)
    if args.heatmaps and state.grid is not None:
        for rec in state.rounds:
            if rec.chosen_view < 0:
                continue
            m = render_uncertainty_map(ds.view_by_id(rec.chosen_view),
                                       state.grid, state.recon,
                                       ds.bounding_sphere)
            write_image_png(out / f"unc_round{rec.round_index:02d}"
                                  f"_view{rec.chosen_view:04d}.png",
                            uncertainty_heatmap(m))
    final = state.rounds[-1]
    print(f"trajectory -> {out / 'trajectory.csv'} "
          f"(final cd={final.cd:.4f}, psnr={final.psnr:.2f})")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        ds = _build_dataset(cfg, _threads(args))
    chash = cfg.config_hash()

    rows = []
    for patch in (1, 7, 11, 15):
        for use_decouple in (False, True):
            ccfg = ConsistencyConfig(
                **{**cfg.consistency.__dict__, "patch_size": patch})
            grid = UncertaintyGrid(cfg.training.grid_dims, cfg.recon_bbox(),
                                   init_value=cfg.training.init_value)
            grid, _ = train_stage1(ds, ds.recon_sdf, grid, cfg.training, ccfg)
            if use_decouple:
                dec = fit_decoupled(
                    ds, ds.recon_sdf,
                    samples_per_view=cfg.decouple.samples_per_view,
                    lambda_reg=cfg.decouple.lambda_reg, seed=cfg.seed)
                processed, _ = decouple_images(ds, dec, ds.recon_sdf)
                grid, _ = finetune_stage2(ds, ds.recon_sdf, grid,
                                          cfg.training, processed, ccfg)
            report, _ = evaluate_dataset(
                ds, grid, penalty=cfg.eval.penalty,
                n_surface_points=cfg.eval.n_surface_points, seed=cfg.seed)
            rows.append((patch, int(use_decouple), report.ause_mse,
                         report.ause_mae, report.ause_3d, report.cd, chash))
            print(f"ablate: K={patch} decouple={use_decouple} "
                  f"ause_3d={report.ause_3d:.4f}")

    with open(out / "ablation.csv", "w") as f:
        f.write("patch_size,decouple,ause_mse,ause_mae,ause_3d,cd,config\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]},{r[2]:.9g},{r[3]:.9g},{r[4]:.9g},"
                    f"{r[5]:.9g},{r[6]}\n")
    print(f"ablation table -> {out / 'ablation.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="mvuncert",
        description="Geometric uncertainty for SDF reconstructions: scene "
                    "generation, distillation, evaluation, NBV planning.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: MVUNCERT_THREADS or 1)")
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="fixed-order reductions (always on in this build)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", help="render views and build the recon field")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("labels", help="dump a pseudo-label batch as CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_labels)

    sp = sub.add_parser("distill", help="train the uncertainty grid")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--finetune", action="store_true",
                    help="decouple view-dependent light and fine-tune")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("eval", help="AUSE / chamfer report for a grid")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("nbv", help="run the incremental NBV loop")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--policy", choices=("uncertainty", "random"),
                    default=None)
    sp.add_argument("--heatmaps", action="store_true")
    sp.set_defaults(func=cmd_nbv)

    sp = sub.add_parser("ablate", help="patch-size / decouple sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime stage failure
        print(f"stage failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
