"""polarsdf command line: render | reconstruct | eval | aop.

All configuration lives in a JSON manifest; --set key=value flags override
individual entries (dotted paths).  Exit codes: 0 success, 2 invalid input,
3 numerical failure.  POLARSDF_THREADS mirrors --threads.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import evalkit, fields, figures, io as pio, optim, render
from .errors import InvalidInputError, NumericalFailure, PolarSDFError
from .polarimetry import aop_map
from .scenes import Scene, sdf_from_spec


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except PolarSDFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarsdf")
    sub = parser.add_subparsers(required=True)

    p_render = sub.add_parser("render", help="render a ground-truth polarized dataset")
    p_render.add_argument("manifest")
    p_render.add_argument("--output", help="override output directory")
    p_render.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_render.add_argument("--threads", type=int, default=_default_threads())
    p_render.set_defaults(func=cmd_render)

    p_rec = sub.add_parser("reconstruct", help="optimize an SDF against a dataset")
    p_rec.add_argument("manifest")
    p_rec.add_argument("--output", help="override output directory")
    p_rec.add_argument("--iterations", type=int, help="override train.iterations")
    p_rec.add_argument("--ablate", choices=["none", "no-Lp", "no-Lg"], default=None,
                       help="disable one loss term; suffixes the output names")
    p_rec.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_rec.add_argument("--threads", type=int, default=_default_threads())
    p_rec.set_defaults(func=cmd_reconstruct)

    p_eval = sub.add_parser("eval", help="evaluate a reconstruction against GT")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", help="field checkpoint (mesh + normal MAE)")
    p_eval.add_argument("--mesh", help="estimated mesh OBJ (chamfer only)")
    p_eval.add_argument("--output", help="directory for report files")
    p_eval.add_argument("--gt-resolution", type=int, default=128)
    p_eval.add_argument("--samples", type=int, default=100000)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_aop = sub.add_parser("aop", help="AoP visualization for one dataset view")
    p_aop.add_argument("--dataset", required=True)
    p_aop.add_argument("--view", type=int, default=0)
    p_aop.add_argument("--output", help="directory for the PNG/PFM pair")
    p_aop.set_defaults(func=cmd_aop)
    return parser


def _default_threads() -> int:
    return int(os.environ.get("POLARSDF_THREADS", "1"))


def _load_manifest(path) -> dict:
    if not os.path.exists(path):
        raise InvalidInputError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"manifest is not valid JSON: {exc}") from exc


def _apply_overrides(man: dict, pairs) -> dict:
    man = copy.deepcopy(man)
    for pair in pairs:
        if "=" not in pair:
            raise InvalidInputError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = man
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return man


def _write_manifest_copy(man: dict, out_dir):
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_render(args) -> int:
    man = _apply_overrides(_load_manifest(args.manifest), args.set)
    pio.validate_render_manifest(man)
    out_dir = args.output or man.get("output_dir")
    if not out_dir:
        raise InvalidInputError("no output directory (set output_dir or --output)")
    scene = Scene.from_spec(man["scene"])
    if len(scene.cameras) == 0:
        raise InvalidInputError("camera list is empty")
    os.makedirs(out_dir, exist_ok=True)
    renders = []
    n_quad = int(man.get("quadrature", render.N_QUADRATURE))
    for i, cam in enumerate(scene.cameras):
        t0 = time.perf_counter()
        renders.append(render.render_scene(scene, cam, n_quad=n_quad,
                                           threads=max(1, args.threads)))
        dt_ms = (time.perf_counter() - t0) * 1e3
        print(f"view {i:03d}: {int(renders[-1].image.mask.sum())} hit px, {dt_ms:.0f} ms")
    pio.save_dataset(out_dir, man["scene"], scene.cameras, renders,
                     seeds={"manifest_seed": man.get("seed", 0)})
    _write_manifest_copy(man, out_dir)
    print(f"dataset written to {out_dir}")
    return 0


def _ablate_suffix(ablate) -> str:
    return {"no-Lp": "_noLp", "no-Lg": "_noLg"}.get(ablate or "none", "")


def cmd_reconstruct(args) -> int:
    man = _apply_overrides(_load_manifest(args.manifest), args.set)
    if args.iterations is not None:
        man.setdefault("train", {})["iterations"] = args.iterations
    if args.ablate == "no-Lp":
        man.setdefault("train", {})["disable_lp"] = True
    elif args.ablate == "no-Lg":
        man.setdefault("train", {})["disable_lg"] = True
    pio.validate_reconstruct_manifest(man)
    out_dir = args.output or man.get("output_dir")
    if not out_dir:
        raise InvalidInputError("no output directory (set output_dir or --output)")
    os.makedirs(out_dir, exist_ok=True)
    dataset = pio.load_dataset(man["dataset"])
    cfg = optim.TrainConfig.from_dict(man.get("train", {}))
    suffix = _ablate_suffix(args.ablate)
    fs, rows = optim.reconstruct(dataset, cfg, out_dir=out_dir)
    ckpt_path = os.path.join(out_dir, f"fields{suffix}.bin")
    fs.save(ckpt_path)
    mesh = fields.marching_cubes(fs)
    mesh_path = os.path.join(out_dir, f"mesh{suffix}.obj")
    pio.save_obj(mesh_path, mesh)
    log_path = os.path.join(out_dir, f"train_log{suffix}.csv")
    optim.write_log_csv(log_path, rows)
    if rows:
        figures.plot_loss_curves(rows, os.path.join(out_dir, f"loss_curves{suffix}.png"))
    _write_manifest_copy(man, out_dir)
    print(f"checkpoint: {ckpt_path}")
    print(f"mesh: {mesh_path}")
    print(f"log: {log_path}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint and not args.mesh:
        raise InvalidInputError("eval needs --checkpoint or --mesh")
    dataset = pio.load_dataset(args.dataset)
    if not dataset.scene_spec.get("primitive"):
        raise InvalidInputError("dataset manifest carries no scene primitive for GT")
    gt_sdf = sdf_from_spec(dataset.scene_spec["primitive"])
    n = args.gt_resolution
    pts = fields.grid_points(n)
    gt_mesh = fields.marching_cubes(gt_sdf(pts), n=n)

    fs = None
    if args.checkpoint:
        fs = fields.FieldSet.load(args.checkpoint)
        est_mesh = fields.marching_cubes(fs)
    else:
        est_mesh = pio.load_obj(args.mesh)

    sym, a_to_b, b_to_a = evalkit.chamfer(est_mesh, gt_mesh, n_samples=args.samples,
                                          seed=args.seed)
    report = evalkit.EvalReport(chamfer_a_to_b=a_to_b, chamfer_b_to_a=b_to_a,
                                chamfer=sym)
    if fs is not None:
        for i, view in enumerate(dataset.views):
            if view.normals is None:
                report.notes.append(f"view {i}: no GT normals, MAE skipped")
                continue
            mae, count = evalkit.normal_mae(fs, view.camera, view.normals, view.mask)
            report.normal_mae_deg.append(mae)
            report.masked_pixels.append(count)
    else:
        report.notes.append("mesh-only evaluation: normal MAE skipped")

    print(report.table())
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        with open(os.path.join(args.output, "eval_report.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(args.output, "eval_report.csv"), "w") as fh:
            fh.write("metric,value\n")
            fh.write(f"chamfer_a_to_b,{a_to_b:.8f}\n")
            fh.write(f"chamfer_b_to_a,{b_to_a:.8f}\n")
            fh.write(f"chamfer_symmetric,{sym:.8f}\n")
            for i, mae in enumerate(report.normal_mae_deg):
                fh.write(f"normal_mae_view_{i},{mae:.6f}\n")
        figures.plot_eval_report(report, os.path.join(args.output, "eval_report.png"))
        print(f"report files in {args.output}")
    return 0


def cmd_aop(args) -> int:
    dataset = pio.load_dataset(args.dataset)
    if not 0 <= args.view < len(dataset.views):
        raise InvalidInputError(f"view {args.view} out of range")
    view = dataset.views[args.view]
    angles, valid = aop_map(view.stokes.sum(axis=2))
    valid &= view.mask
    out_dir = args.output or dataset.path
    os.makedirs(out_dir, exist_ok=True)
    png_path = os.path.join(out_dir, f"aop_view{args.view:03d}.png")
    pfm_path = os.path.join(out_dir, f"aop_view{args.view:03d}.pfm")
    pio.write_rgb_png(png_path, figures.aop_to_rgb(angles, valid))
    pio.write_pfm(pfm_path, angles)
    print(f"aop visualization: {png_path}")
    print(f"aop raw: {pfm_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
