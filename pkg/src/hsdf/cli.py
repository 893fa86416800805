"""Batch command line front end.

Every subcommand reads inputs, writes artifacts into --out, and prints a
short summary; there is no interactive mode. Runs are deterministic for a
fixed seed, and each one drops a run.json (command, merged config, seed,
library versions) next to its outputs so results can be reproduced bit for
bit. Config values layer as defaults < --config JSON file < explicit flags.
HSDF_THREADS caps worker processes for the parallel stages (0 = one per
CPU).

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import os
import platform
import sys
from typing import Callable, NamedTuple

import numpy as np
import scipy

from . import __version__
from .bench import (
    BenchmarkReport,
    BucketResult,
    MetricConfig,
    evaluate_benchmark,
    format_report,
)
from .composite import make_pseudo_pair, write_pair_dir
from .field_ops import CarveGain, highpass_target
from .geometry import (
    CropAlignedCamera,
    Image,
    PerspectiveCamera,
    RigidPose,
    TriangleMesh,
    rotation_angle_deg,
    rotation_from_axis_angle,
)
from .io import (
    load_camera,
    load_obj,
    load_pfm,
    load_png,
    load_sdf,
    read_json,
    save_camera,
    save_label_png,
    save_obj,
    save_pfm,
    save_png,
    save_sdf,
    write_json,
)
from .morphable import FitParams, fit_landmarks, project_landmarks, save_fit_params
from .nets import (
    TrainBatch,
    TrainConfig,
    _loss_only,
    build_net,
    grad_check,
    grad_check_normal_regressor,
    kink_margin,
    load_checkpoint,
    net_input,
    sample_training_points,
    save_checkpoint,
    train_field_head,
    train_normal_regressor,
    write_loss_csv,
)
from .raster import render_all
from .reconstruct import reconstruct
from .synthdata import (
    DatasetConfig,
    build_dataset,
    face_label_bands,
    make_shape,
    make_synthetic_3dmm,
    make_texture,
)

_REQUIRED = object()
_LEVEL_CHOICES = ("base", "base+fine", "base+fine+norm")


class _UsageError(Exception):
    pass


def _spawn_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _write_run(out_dir: str, command: str, cfg: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    info = {
        "command": command,
        "config": {k: v for k, v in cfg.items() if k != "config"},
        "seed": cfg.get("seed"),
        "versions": {
            "hsdf": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    write_json(os.path.join(out_dir, "run.json"), info)


# ----------------------------------------------------------------- fit


def _cmd_fit(cfg: dict) -> None:
    _write_run(cfg["out"], "fit", cfg)
    model = make_synthetic_3dmm(cfg["shapes"], cfg["k_id"], cfg["k_exp"], seed=cfg["seed"])
    camera = PerspectiveCamera(
        300.0, 64.0, 64.0, RigidPose(np.eye(3), np.array([0.0, 0.0, 400.0]))
    )
    cases = []
    for i in range(cfg["cases"]):
        rng = _spawn_rng(cfg["seed"], i)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        true_pose = RigidPose(
            rotation_from_axis_angle(axis, np.radians(rng.uniform(5.0, 25.0))),
            rng.uniform(-8.0, 8.0, 3),
        )
        truth = FitParams(
            rng.uniform(-1.0, 1.0, model.num_id),
            rng.uniform(-1.0, 1.0, model.num_exp),
            true_pose,
            camera,
        )
        observed = project_landmarks(model, truth)
        observed = observed + rng.normal(0.0, cfg["noise_px"], observed.shape)
        init_pose = RigidPose(
            rotation_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.radians(8.0))
            @ true_pose.rotation,
            true_pose.translation + np.array([4.0, -3.0, 10.0]),
        )
        init = FitParams(
            np.zeros(model.num_id), np.zeros(model.num_exp), init_pose, camera
        )
        res = fit_landmarks(model, observed, init)
        hist = np.asarray(res.objective_history)
        cases.append(
            {
                "case": i,
                "rms_px": res.rms_px,
                "iterations": res.iterations,
                "converged": res.converged,
                "rot_err_deg": rotation_angle_deg(
                    res.params.pose.rotation @ true_pose.rotation.T
                ),
                "monotone": bool(np.all(np.diff(hist) <= 1e-12)),
            }
        )
        save_fit_params(os.path.join(cfg["out"], f"fit_{i:04d}.json"), res.params)
    write_json(os.path.join(cfg["out"], "fit.json"), {"cases": cases})
    worst = max(c["rms_px"] for c in cases)
    print(f"fit: {len(cases)} cases, max rms {worst:.4f} px")


def _args_fit(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cases", type=int)
    sp.add_argument("--noise-px", type=float, dest="noise_px")
    sp.add_argument("--shapes", type=int, help="shapes behind the synthetic basis")
    sp.add_argument("--k-id", type=int, dest="k_id")
    sp.add_argument("--k-exp", type=int, dest="k_exp")
    sp.add_argument("--out")


# --------------------------------------------------------------- render


def _posed_shape(shape, n_lat: int, n_lon: int, yaw_deg: float):
    mesh = shape.tessellate(n_lat, n_lon)
    rot = rotation_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.radians(yaw_deg))
    world = TriangleMesh(mesh.vertices @ rot.T, mesh.faces.copy(), uvs=mesh.uvs.copy())
    world.normals = mesh.normals @ rot.T
    return mesh, world


def _cmd_render(cfg: dict) -> None:
    _write_run(cfg["out"], "render", cfg)
    rng = np.random.default_rng(cfg["seed"])
    shape = make_shape(cfg["seed"])
    local, world = _posed_shape(shape, cfg["n_lat"], cfg["n_lon"], cfg["yaw_deg"])
    texture = make_texture(int(rng.integers(0, 4)), rng)
    size = cfg["size"]
    camera = PerspectiveCamera(
        cfg["focal"],
        size / 2.0,
        size / 2.0,
        RigidPose(np.eye(3), np.array([0.0, 0.0, cfg["distance"]])),
    )
    shot = render_all(
        world, camera, texture=texture, face_labels=face_label_bands(local), size=(size, size)
    )
    d = cfg["out"]
    save_png(os.path.join(d, "image.png"), shot["rgb"])
    save_png(os.path.join(d, "mask.png"), shot["mask"])
    save_pfm(os.path.join(d, "depth.pfm"), shot["depth"])
    save_pfm(os.path.join(d, "front_normal.pfm"), shot["front_normal"])
    save_pfm(os.path.join(d, "back_normal.pfm"), shot["back_normal"])
    save_label_png(os.path.join(d, "labels.png"), shot["labels"].pixels[:, :, 0].astype(np.int64))
    save_obj(os.path.join(d, "mesh.obj"), world)
    save_camera(os.path.join(d, "camera.json"), camera)
    cover = float(shot["mask"].pixels.mean())
    print(f"render: {size}x{size}, mask covers {100.0 * cover:.1f}% of the frame")


def _args_render(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--yaw-deg", type=float, dest="yaw_deg")
    sp.add_argument("--n-lat", type=int, dest="n_lat")
    sp.add_argument("--n-lon", type=int, dest="n_lon")
    sp.add_argument("--focal", type=float)
    sp.add_argument("--distance", type=float)
    sp.add_argument("--out")


# ---------------------------------------------------------------- blend


def _cmd_blend(cfg: dict) -> None:
    _write_run(cfg["out"], "blend", cfg)
    from .composite import poisson_blend

    out = poisson_blend(
        load_png(cfg["source"]), load_png(cfg["target"]), load_png(cfg["mask"])
    )
    save_png(os.path.join(cfg["out"], "blended.png"), out)
    print(f"blend: wrote {os.path.join(cfg['out'], 'blended.png')}")


def _args_blend(sp):
    sp.add_argument("--source", help="PNG pasted inside the mask")
    sp.add_argument("--target", help="PNG providing the boundary")
    sp.add_argument("--mask", help="PNG, nonzero = blend region")
    sp.add_argument("--out")


# ----------------------------------------------------------- make-pairs


def _cmd_make_pairs(cfg: dict) -> None:
    _write_run(cfg["out"], "make-pairs", cfg)
    size = cfg["size"]
    rows = []
    for i in range(cfg["n"]):
        rng = _spawn_rng(cfg["seed"], i)
        shape = make_shape(int(rng.integers(0, 2**31 - 1)))
        yaw = float(rng.uniform(-25.0, 25.0))
        delta = float(rng.uniform(2.0, 5.0))
        local, world_a = _posed_shape(shape, 24, 32, yaw)
        _, world_b = _posed_shape(shape, 24, 32, yaw + delta)
        labels = face_label_bands(local)
        camera = PerspectiveCamera(
            200.0, size / 2.0, size / 2.0, RigidPose(np.eye(3), np.array([0.0, 0.0, 430.0]))
        )
        texture = make_texture(int(rng.integers(0, 4)), rng)
        shot_a = render_all(world_a, camera, texture=texture, face_labels=labels, size=(size, size))
        background = make_texture(int(rng.integers(0, 4)), rng, size=size)
        covered = shot_a["mask"].pixels > 0.5
        wild = Image(np.where(covered, shot_a["rgb"].pixels, background.pixels[:, :, :3]))
        shot_b = render_all(world_b, camera, texture=texture, face_labels=labels, size=(size, size))
        res = make_pseudo_pair(wild, shot_a["mask"], world_b, camera, shot_b)
        pair_id = f"pair_{i:04d}"
        rows.append({"pair_id": pair_id, "ok": res.ok, "reason": res.reason})
        if not res.ok:
            continue
        write_pair_dir(
            cfg["out"],
            pair_id,
            res.blended,
            shot_a["mask"],
            res.gt_mesh,
            res.camera,
            shot_b["front_normal"],
            shot_b["back_normal"],
            {"pair_id": pair_id, "yaw_deg": yaw, "delta_deg": delta, "pose_angle": abs(yaw)},
            labels=shot_a["labels"].pixels[:, :, 0].astype(np.int64),
        )
    write_json(os.path.join(cfg["out"], "pairs.json"), {"pairs": rows})
    n_ok = sum(r["ok"] for r in rows)
    print(f"make-pairs: {n_ok}/{len(rows)} pairs composited")


def _args_make_pairs(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--out")


# ---------------------------------------------------- synth-shape/dataset


def _cmd_synth_shape(cfg: dict) -> None:
    _write_run(cfg["out"], "synth-shape", cfg)
    shape = make_shape(cfg["seed"])
    mesh = shape.tessellate(cfg["n_lat"], cfg["n_lon"])
    save_obj(os.path.join(cfg["out"], "mesh.obj"), mesh)
    write_json(os.path.join(cfg["out"], "shape.json"), {"seed": cfg["seed"], **shape.params_dict()})
    print(f"synth-shape: {mesh.num_vertices} vertices, {mesh.num_faces} faces")


def _args_synth_shape(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-lat", type=int, dest="n_lat")
    sp.add_argument("--n-lon", type=int, dest="n_lon")
    sp.add_argument("--out")


def _cmd_synth_dataset(cfg: dict) -> None:
    _write_run(cfg["out"], "synth-dataset", cfg)
    dc = DatasetConfig(
        out_dir=cfg["out"],
        n_train=cfg["n"],
        n_test=cfg["n_test"],
        image_size=cfg["size"],
        grid_dims=cfg["dims"],
        seed=cfg["seed"],
        focal=cfg["focal"],
        distance=cfg["distance"],
        margin=cfg["margin"],
    )
    manifest = build_dataset(dc)
    print(f"synth-dataset: {len(manifest['samples'])} samples under {cfg['out']}")


def _args_synth_dataset(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int, help="training samples")
    sp.add_argument("--n-test", type=int, dest="n_test", help="held-out samples")
    sp.add_argument("--size", type=int, help="image side in pixels")
    sp.add_argument("--dims", type=int, help="gt field grid side")
    sp.add_argument("--focal", type=float)
    sp.add_argument("--distance", type=float)
    sp.add_argument("--margin", type=float)
    sp.add_argument("--out")


# ---------------------------------------------------------------- train


def _field_batch(image, mask, cam, gt, value_field, n, sigma_mm, delta_mm, rng):
    pts, vals, warned = sample_training_points(gt, n, sigma_mm, rng, value_field=value_field)
    return TrainBatch(image, mask, cam, pts, np.clip(vals, -delta_mm, delta_mm) / delta_mm), warned


def _cmd_train(cfg: dict) -> None:
    _write_run(cfg["out"], "train", cfg)
    manifest = read_json(os.path.join(cfg["data"], "manifest.json"))
    entries = [
        s for s in manifest["samples"] if cfg["split"] in ("all", s.get("split", "train"))
    ]
    if not entries:
        raise ValueError(f"no {cfg['split']!r} samples in the manifest")
    levels = cfg["levels"]
    tc = TrainConfig(
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        batch_images=cfg["batch_images"],
        points_per_image=cfg["points"],
        seed=cfg["seed"],
        delta_vox=cfg["delta_vox"],
        fine_delta_vox=cfg["fine_delta_vox"],
        near_sigma_vox=cfg["sigma_vox"],
        lr_decay=cfg["decay"],
    )
    base_batches, fine_batches, normal_samples = [], [], []
    warned = 0
    for idx, s in enumerate(entries):
        d = os.path.join(cfg["data"], "pairs", s["sample_id"])
        image = load_png(os.path.join(d, "image.png"))
        mask = load_png(os.path.join(d, "mask.png"))
        gt = load_sdf(os.path.join(d, "gt.sdf"))
        cam = CropAlignedCamera(gt.box_min.copy(), gt.box_max.copy(), image.width, image.height)
        voxel = float(np.mean((gt.box_max - gt.box_min) / (np.asarray(gt.dims) - 1)))
        rng = _spawn_rng(tc.seed, idx)
        sigma = tc.near_sigma_vox * voxel
        b, w = _field_batch(
            image, mask, cam, gt, None, tc.points_per_image, sigma, tc.delta_vox * voxel, rng
        )
        base_batches.append(b)
        warned += int(w)
        if "fine" in levels:
            b, w = _field_batch(
                image, mask, cam, gt, highpass_target(gt),
                tc.points_per_image, sigma, tc.fine_delta_vox * voxel, rng,
            )
            fine_batches.append(b)
            warned += int(w)
        if levels.endswith("norm"):
            front = load_pfm(os.path.join(d, "front_normal.pfm"))
            back = load_pfm(os.path.join(d, "back_normal.pfm"))
            target = np.concatenate(
                [front.pixels.transpose(2, 0, 1), back.pixels.transpose(2, 0, 1)]
            ).astype(np.float64)
            normal_samples.append((net_input(image, mask), target))

    nets = {}
    summary = {"samples": len(entries), "warned_samples": warned, "levels": levels}
    extractor, head = build_net("hourglass", tc.seed), build_net("head32", tc.seed + 1)
    hist = train_field_head(extractor, head, base_batches, tc)
    write_loss_csv(os.path.join(cfg["out"], "loss_base.csv"), hist)
    nets["base_extractor"], nets["base_head"] = extractor, head
    summary["final_loss_base"] = hist[-1]
    if "fine" in levels:
        extractor, head = build_net("shallow", tc.seed + 2), build_net("head16", tc.seed + 3)
        hist = train_field_head(extractor, head, fine_batches, tc)
        write_loss_csv(os.path.join(cfg["out"], "loss_fine.csv"), hist)
        nets["fine_extractor"], nets["fine_head"] = extractor, head
        summary["final_loss_fine"] = hist[-1]
    if levels.endswith("norm"):
        reg = build_net("normal_regressor", tc.seed + 4)
        hist = train_normal_regressor(reg, normal_samples, tc)
        write_loss_csv(os.path.join(cfg["out"], "loss_normal.csv"), hist)
        nets["normal_regressor"] = reg
        summary["final_loss_normal"] = hist[-1]
    save_checkpoint(
        os.path.join(cfg["out"], "weights.json"),
        nets,
        meta={"levels": levels, "delta_vox": tc.delta_vox, "fine_delta_vox": tc.fine_delta_vox},
    )
    write_json(os.path.join(cfg["out"], "train.json"), summary)
    parts = [f"{k.split('_', 2)[2]}={summary[k]:.4f}" for k in sorted(summary) if k.startswith("final_loss")]
    print(f"train: {len(entries)} samples, final loss " + ", ".join(parts))


def _args_train(sp):
    sp.add_argument("--data", help="dataset directory (manifest.json + pairs/)")
    sp.add_argument("--levels", choices=_LEVEL_CHOICES)
    sp.add_argument("--split", choices=("train", "test", "all"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--batch-images", type=int, dest="batch_images")
    sp.add_argument("--points", type=int, help="supervision points per image")
    sp.add_argument("--delta-vox", type=float, dest="delta_vox")
    sp.add_argument("--fine-delta-vox", type=float, dest="fine_delta_vox")
    sp.add_argument("--sigma-vox", type=float, dest="sigma_vox")
    sp.add_argument("--decay", choices=("linear", "none"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")


# ------------------------------------------------------------- gradcheck


_MARGIN_FLOOR = 1e-4  # several times the worst observed per-step reach


def _screened_batch(extractor, head, size, n_pts, seed, tries=60):
    """Random scene whose residuals sit at 1 and whose rectifier
    pre-activations stay clear of zero, so finite differences see a
    smooth loss. Keeps the largest-margin scene among the tries."""
    best, best_margin = None, -1.0
    for k in range(tries):
        rng = _spawn_rng(seed, k)
        cam = CropAlignedCamera(np.zeros(3), np.full(3, float(size)), size, size)
        img = Image(rng.uniform(0.0, 1.0, (size, size, 3)).astype(np.float32))
        msk = Image((rng.uniform(0.0, 1.0, (size, size, 1)) > 0.4).astype(np.float32))
        pts = rng.uniform(0.2, size - 0.2, (n_pts, 3))
        probe = TrainBatch(img, msk, cam, pts, np.zeros(len(pts)))
        _, pred = _loss_only(extractor, head, probe)
        margin = kink_margin(extractor, head)
        if margin > best_margin:
            best, best_margin = TrainBatch(img, msk, cam, pts, pred - 1.0), margin
    if best_margin <= _MARGIN_FLOOR:
        raise RuntimeError("no rectifier-safe finite-difference scene found")
    return best


def _screened_normal_case(reg, size, seed, tries=60):
    best, best_margin = None, -1.0
    for k in range(tries):
        rng = _spawn_rng(seed, k)
        x = rng.uniform(0.0, 1.0, (4, size, size))
        pred = reg.forward(x)
        margin = kink_margin(reg)
        if margin > best_margin:
            best, best_margin = (x, pred - 1.0), margin
    if best_margin <= _MARGIN_FLOOR:
        raise RuntimeError("no rectifier-safe finite-difference scene found")
    return best


def _cmd_gradcheck(cfg: dict) -> None:
    _write_run(cfg["out"], "gradcheck", cfg)
    seed, size, n_pts = cfg["seed"], cfg["size"], cfg["points"]
    errs = {}
    extractor, head = build_net("hourglass", seed), build_net("head32", seed + 1)
    errs["base"] = grad_check(extractor, head, _screened_batch(extractor, head, size, n_pts, seed))
    extractor, head = build_net("shallow", seed + 2), build_net("head16", seed + 3)
    errs["fine"] = grad_check(extractor, head, _screened_batch(extractor, head, size, n_pts, seed))
    reg = build_net("normal_regressor", seed + 4)
    x, target = _screened_normal_case(reg, size, seed)
    errs["normal_regressor"] = grad_check_normal_regressor(reg, x, target)
    write_json(
        os.path.join(cfg["out"], "gradcheck.json"),
        {"max_rel_err": errs, "threshold": cfg["threshold"]},
    )
    for name in sorted(errs):
        print(f"gradcheck: {name:<16} max rel err {errs[name]:.3e}")
    worst = max(errs.values())
    if not worst < cfg["threshold"]:
        raise RuntimeError(f"analytic gradients off by {worst:.3e} (threshold {cfg['threshold']:g})")


def _args_gradcheck(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int, help="scene side in pixels (divisible by 8)")
    sp.add_argument("--points", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out")


# ------------------------------------------------------------ reconstruct


def _cmd_reconstruct(cfg: dict) -> None:
    _write_run(cfg["out"], "reconstruct", cfg)
    meta, nets = load_checkpoint(cfg["weights"])
    d = cfg["input"]
    image = load_png(os.path.join(d, "image.png"))
    mask = load_png(os.path.join(d, "mask.png"))
    camera = load_camera(os.path.join(d, "camera.json"))
    delta = cfg["delta_vox"] if cfg["delta_vox"] is not None else float(meta.get("delta_vox", 5.0))
    fine_delta = (
        cfg["fine_delta_vox"]
        if cfg["fine_delta_vox"] is not None
        else float(meta.get("fine_delta_vox", 1.0))
    )
    normal_maps = None
    if cfg["use_gt_normals"]:
        normal_maps = (
            load_pfm(os.path.join(d, "front_normal.pfm")),
            load_pfm(os.path.join(d, "back_normal.pfm")),
        )
    res = reconstruct(
        nets,
        image,
        mask,
        camera,
        dims=cfg["dims"],
        levels=cfg["levels"],
        margin=cfg["margin"],
        delta_vox=delta,
        fine_delta_vox=fine_delta,
        gain=CarveGain(cfg["gain"]),
        normal_maps=normal_maps,
    )
    if res.mesh.num_faces:
        save_obj(os.path.join(cfg["out"], "mesh.obj"), res.mesh)
    if cfg["save_field"]:
        save_sdf(os.path.join(cfg["out"], "field.sdf"), res.field)
    write_json(
        os.path.join(cfg["out"], "recon.json"),
        {
            "success": res.success,
            "coverage": res.coverage,
            "num_vertices": res.mesh.num_vertices,
            "num_faces": res.mesh.num_faces,
            "levels": cfg["levels"],
            "dims": cfg["dims"],
        },
    )
    print(
        f"reconstruct: success={res.success} coverage={res.coverage:.3f} "
        f"faces={res.mesh.num_faces}"
    )


def _args_reconstruct(sp):
    sp.add_argument("--weights", help="checkpoint header path")
    sp.add_argument("--input", help="sample directory (image.png, mask.png, camera.json)")
    sp.add_argument("--levels", choices=_LEVEL_CHOICES)
    sp.add_argument("--dims", type=int)
    sp.add_argument("--margin", type=float)
    sp.add_argument("--gain", type=float, help="carving strength, voxels per unit response")
    sp.add_argument("--delta-vox", type=float, dest="delta_vox")
    sp.add_argument("--fine-delta-vox", type=float, dest="fine_delta_vox")
    sp.add_argument(
        "--use-gt-normals",
        action="store_true",
        dest="use_gt_normals",
        help="carve with the input directory's normal maps instead of the regressor",
    )
    sp.add_argument("--save-field", action="store_true", dest="save_field")
    sp.add_argument("--out")


# ----------------------------------------------------------------- eval


def _find_mesh(root: str, sample_id: str, with_pairs: bool):
    names = [f"{sample_id}.obj", os.path.join(sample_id, "mesh.obj")]
    if with_pairs:
        names.append(os.path.join("pairs", sample_id, "mesh.obj"))
    for name in names:
        path = os.path.join(root, name)
        if os.path.exists(path):
            return path
    return None


def _load_pred(root: str, sample_id: str):
    """Predicted mesh, or None when absent or flagged unsuccessful."""
    path = _find_mesh(root, sample_id, with_pairs=False)
    if path is None:
        return None
    flag = os.path.join(os.path.dirname(path), "recon.json")
    if os.path.exists(flag) and not read_json(flag).get("success", True):
        return None
    return load_obj(path)


def _cmd_eval(cfg: dict) -> None:
    _write_run(cfg["out"], "eval", cfg)
    manifest_path = cfg["manifest"] or os.path.join(cfg["gt"], "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValueError(f"no manifest at {manifest_path}; pass --manifest")
    man = read_json(manifest_path)
    entries = man["samples"] if isinstance(man, dict) else man
    entries = [s for s in entries if cfg["split"] in ("all", s.get("split", "test"))]
    if not entries:
        raise ValueError(f"manifest has no {cfg['split']!r} samples")
    pairs = []
    for s in entries:
        sid = s["sample_id"]
        gt_path = _find_mesh(cfg["gt"], sid, with_pairs=True)
        if gt_path is None:
            raise ValueError(f"missing gt mesh for {sid}")
        pairs.append(
            {
                "pred": _load_pred(cfg["pred"], sid),
                "gt": load_obj(gt_path),
                "pose_angle": float(s["pose_angle"]),
            }
        )
    mc = MetricConfig(
        cd_samples=cfg["cd_samples"],
        cr_threshold=cfg["cr_threshold"],
        mne_formula=cfg["mne"],
        alignment=cfg["alignment"],
        seed=cfg["seed"],
    )
    report = evaluate_benchmark(pairs, mc)
    text = format_report(report)
    write_json(os.path.join(cfg["out"], "report.json"), report.to_dict())
    with open(os.path.join(cfg["out"], "report.txt"), "w") as f:
        f.write(text + "\n")
    print(text)


def _args_eval(sp):
    sp.add_argument("--pred", help="directory of predicted meshes")
    sp.add_argument("--gt", help="directory of ground-truth meshes")
    sp.add_argument("--manifest", help="sample list with pose angles (default <gt>/manifest.json)")
    sp.add_argument("--split", choices=("train", "test", "all"))
    sp.add_argument("--cd-samples", type=int, dest="cd_samples")
    sp.add_argument("--cr-threshold", type=float, dest="cr_threshold")
    sp.add_argument("--mne", choices=("norm-diff", "one-minus-cos"))
    sp.add_argument("--alignment", choices=("none", "rigid-icp"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")


# ---------------------------------------------------------------- report


def _cmd_report(cfg: dict) -> None:
    _write_run(cfg["out"], "report", cfg)
    data = read_json(cfg["report"])
    rep = BenchmarkReport(
        buckets=[
            BucketResult(b["label"], b["pairs"], b["successes"], b["cd"], b["mne"], b["cr"])
            for b in data["buckets"]
        ],
        success_rate=data["success_rate"],
    )
    text = format_report(rep)
    with open(os.path.join(cfg["out"], "report.txt"), "w") as f:
        f.write(text + "\n")
    print(text)


def _args_report(sp):
    sp.add_argument("--report", help="report.json produced by eval")
    sp.add_argument("--out")


# -------------------------------------------------------------- plumbing


class _Command(NamedTuple):
    defaults: dict
    add_args: Callable
    handler: Callable
    help: str


_COMMANDS = {
    "fit": _Command(
        {"seed": 0, "cases": 5, "noise_px": 0.5, "shapes": 12, "k_id": 4, "k_exp": 2,
         "out": _REQUIRED},
        _args_fit, _cmd_fit,
        "landmark-fit round trips on a synthetic shape basis",
    ),
    "render": _Command(
        {"seed": 0, "size": 128, "yaw_deg": 0.0, "n_lat": 36, "n_lon": 48, "focal": 200.0,
         "distance": 430.0, "out": _REQUIRED},
        _args_render, _cmd_render,
        "render one shape: image, mask, depth, normal maps, labels",
    ),
    "blend": _Command(
        {"source": _REQUIRED, "target": _REQUIRED, "mask": _REQUIRED, "out": _REQUIRED},
        _args_blend, _cmd_blend,
        "gradient-domain blend of one PNG into another",
    ),
    "make-pairs": _Command(
        {"seed": 0, "n": 2, "size": 96, "out": _REQUIRED},
        _args_make_pairs, _cmd_make_pairs,
        "composite aligned image/mesh training pairs",
    ),
    "synth-shape": _Command(
        {"seed": 0, "n_lat": 36, "n_lon": 48, "out": _REQUIRED},
        _args_synth_shape, _cmd_synth_shape,
        "write one analytic shape as mesh.obj + shape.json",
    ),
    "synth-dataset": _Command(
        {"seed": 0, "n": 10, "n_test": 0, "size": 128, "dims": 64, "focal": 200.0,
         "distance": 430.0, "margin": 0.10, "out": _REQUIRED},
        _args_synth_dataset, _cmd_synth_dataset,
        "render a dataset of posed shapes with exact gt fields",
    ),
    "train": _Command(
        {"data": _REQUIRED, "levels": "base+fine", "split": "train", "epochs": 50, "lr": 1e-3,
         "momentum": 0.9, "batch_images": 4, "points": 2048, "delta_vox": 5.0,
         "fine_delta_vox": 1.0, "sigma_vox": 1.5, "decay": "linear", "seed": 0,
         "out": _REQUIRED},
        _args_train, _cmd_train,
        "fit the implicit heads (and normal regressor) to a dataset",
    ),
    "gradcheck": _Command(
        {"seed": 0, "size": 8, "points": 16, "threshold": 1e-4, "out": _REQUIRED},
        _args_gradcheck, _cmd_gradcheck,
        "finite-difference audit of every network gradient",
    ),
    "reconstruct": _Command(
        {"weights": _REQUIRED, "input": _REQUIRED, "levels": "base+fine+norm", "dims": 64,
         "margin": 0.10, "gain": 1.0, "delta_vox": None, "fine_delta_vox": None,
         "use_gt_normals": False, "save_field": False, "out": _REQUIRED},
        _args_reconstruct, _cmd_reconstruct,
        "single-image field evaluation and surface extraction",
    ),
    "eval": _Command(
        {"pred": _REQUIRED, "gt": _REQUIRED, "manifest": None, "split": "all",
         "cd_samples": 10000, "cr_threshold": None, "mne": "norm-diff", "alignment": "none",
         "seed": 0, "out": _REQUIRED},
        _args_eval, _cmd_eval,
        "benchmark predicted meshes against ground truth",
    ),
    "report": _Command(
        {"report": _REQUIRED, "out": _REQUIRED},
        _args_report, _cmd_report,
        "re-render the text table from a stored report.json",
    ),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsdf",
        description=__doc__.split("\n\n")[0],
        epilog="set HSDF_THREADS to cap worker processes (0 = one per CPU)",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, cmd in _COMMANDS.items():
        sp = sub.add_parser(name, help=cmd.help, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file with values for any flag; flags win")
        cmd.add_args(sp)
    return parser


def _merged_config(name: str, args: argparse.Namespace) -> dict:
    merged = dict(_COMMANDS[name].defaults)
    given = {k: v for k, v in vars(args).items() if k != "command"}
    path = given.pop("config", None)
    if path:
        file_cfg = read_json(path)
        unknown = sorted(set(file_cfg) - set(merged))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(file_cfg)
    merged.update(given)
    missing = sorted(k for k, v in merged.items() if v is _REQUIRED)
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise _UsageError(f"{name} requires {flags}")
    return merged


def run(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 1
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _merged_config(args.command, args)
        _COMMANDS[args.command].handler(cfg)
        return 0
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
