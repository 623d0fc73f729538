"""End-to-end orchestration on synthetic scenes.

Chains the surrogate regressor, tiled threshold-free peak detection,
proposal classification, detection/calibration scoring, and the two spatial
analyses into one seeded, reproducible run. Also provides the
threshold-based deterministic baseline (stopping threshold selected on a
validation scene) that the probabilistic route is compared against.

Detection on a predicted map happens per tile: each patch is sliced from
the padded map over the regressor's output box, peaks are found locally and
reconstructed into the original frame according to the tiling strategy.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .classifier import classify_proposals, save_model, train_forest, train_mlp
from .coords import CoordSet, save_coords
from .detect import NmsConfig, detect_peaks
from .evalmetrics import hungarian_match, score_calibration, score_detection
from .features import FeatureSpec, extract_features
from .spatial import analyze_deterministic, analyze_probabilistic
from .synth import SynthSpec, generate_coords, generate_structures, oracle_regress
from .volume import (
    M_PEAK,
    PatchGrid,
    TilingConfig,
    Volume3D,
    extract_box,
    pad_volume,
    plan_tiling,
    reconstruct_coordinates,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "t_match_um": 4.0,
    "test_scene": {
        "shape": [96, 96, 96],
        "n_cells": 60,
        "n_distractors": 20,
        "sigma_um": 2.0,
        "noise_sd": 0.05,
        "cell_amp_range": [0.75, 1.25],
        "distractor_amp_range": [0.35, 0.8],
        "n_tubes": 2,
        "tube_radius_um": 5.0,
        "margin_um": 4.0,
    },
    "train_scenes": 2,
    "train_scene": {
        "shape": [80, 80, 80],
        "n_cells": 40,
        "n_distractors": 16,
        "sigma_um": 2.0,
        "noise_sd": 0.05,
        "cell_amp_range": [0.75, 1.25],
        "distractor_amp_range": [0.35, 0.8],
        "n_tubes": 0,
        "margin_um": 4.0,
    },
    "tiling": {
        "l_in": [48, 48, 48],
        "conv_margin": [8, 8, 8],
        "peak_margin": [4, 4, 4],
        "strategy": M_PEAK,
    },
    "nms": {"min_distance_um": 4.0, "threshold": 0.0},
    "classifier": {"type": "forest", "n_trees": 128},
    "threshold_grid": 15,
    "spatial": {"replicates": 50, "adjacency_um": 4.0, "cdf_mode": "kde"},
}


def merge_config(overrides: dict | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def _tiling_config(cfg: dict) -> TilingConfig:
    return TilingConfig(
        l_in=tuple(cfg["l_in"]),
        conv_margin=tuple(cfg["conv_margin"]),
        peak_margin=tuple(cfg["peak_margin"]) if cfg["strategy"] == M_PEAK else (0, 0, 0),
        strategy=cfg["strategy"],
    )


def tiled_detect(
    dm: Volume3D,
    tiling: TilingConfig,
    nms: NmsConfig,
    grid: PatchGrid | None = None,
    n_threads: int | None = None,
) -> CoordSet:
    """Patch-wise NMS over a full-volume map, reconstructed to the original frame.

    Patches are independent; with n_threads > 1 (default from the
    PROBCELL_THREADS environment variable) they run on a thread pool and the
    merge stays ordered by patch index, so results do not depend on timing.
    """
    if grid is None:
        grid = plan_tiling(dm.shape, tiling)
    padded = pad_volume(dm, grid)
    vs = np.asarray(dm.voxel_size, dtype=np.float64)
    margin_um = np.asarray(tiling.peak_margin, dtype=np.float64) * vs

    def run_patch(patch):
        local = detect_peaks(extract_box(padded, patch.cnn_box), nms)
        # detect works in the predicted-box frame; reconstruction expects the
        # output-window (core) frame, peak_margin further in
        return local.shifted(-margin_um)

    if n_threads is None:
        n_threads = int(os.environ.get("PROBCELL_THREADS", "1") or "1")
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            per_patch = list(pool.map(run_patch, grid.patches))
    else:
        per_patch = [run_patch(p) for p in grid.patches]
    return reconstruct_coordinates(per_patch, grid, tiling, dm.voxel_size)


def proposals_by_threshold(proposals: CoordSet, threshold: float) -> CoordSet:
    """Detections that survive a stopping threshold.

    Iterative NMS at threshold t keeps exactly the threshold-0 peaks whose
    value exceeds t (weaker candidates never suppress stronger ones), so a
    threshold sweep needs a single detection pass.
    """
    if proposals.dm_value is None:
        raise ValueError("proposals need dm_value for threshold filtering")
    return proposals.select(proposals.dm_value > threshold)


def label_proposals(proposals: CoordSet, gt: CoordSet, t_match_um: float) -> np.ndarray:
    """1 for proposals assigned to a ground-truth cell within t_match, else 0."""
    labels = np.zeros(len(proposals), dtype=np.int64)
    for _, pj, dist in hungarian_match(gt, proposals):
        if dist <= t_match_um:
            labels[pj] = 1
    return labels


def _scene_spec(base: dict, seed: int) -> SynthSpec:
    kwargs = {k: v for k, v in base.items()}
    for key in ("shape", "voxel_size", "cell_amp_range", "distractor_amp_range", "amp_field_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SynthSpec(seed=seed, **kwargs)


def _detect_scene(spec: SynthSpec, tiling: TilingConfig, nms: NmsConfig):
    gt = generate_coords(spec)
    ro = oracle_regress(gt, spec)
    proposals = tiled_detect(ro.dm, tiling, nms)
    return gt, ro, proposals


def _maps(ro) -> list[tuple[str, Volume3D]]:
    return [("dm", ro.dm), ("u_a", ro.aleatoric), ("u_e", ro.epistemic)]


def select_threshold(values: CoordSet, gt: CoordSet, t_match_um: float, n_grid: int):
    """Best-F1 stopping threshold on a validation scene (lowest such threshold)."""
    if values.dm_value is None or len(values) == 0:
        return 0.0, 0.0
    top = float(values.dm_value.max())
    grid = np.linspace(0.0, 0.95 * top, n_grid)
    best = (0.0, -1.0)
    for t in grid:
        report = score_detection(gt, proposals_by_threshold(values, t), t_match_um)
        if report.f1 > best[1]:
            best = (float(t), report.f1)
    return best


def run_pipeline(config: dict | None = None, out_dir=None) -> dict:
    """Run the full synthetic pipeline; returns (and optionally writes) the report.

    When out_dir is given, writes model.json, proposals.csv, report.json and
    records content hashes of the artifacts in the report. Identical config
    and seed produce byte-identical artifacts.
    """
    cfg = merge_config(config)
    seed = int(cfg["seed"])
    t_match = float(cfg["t_match_um"])
    tiling = _tiling_config(cfg["tiling"])
    nms = NmsConfig(**cfg["nms"])
    feature_spec = FeatureSpec()

    # training scenes
    X_parts, y_parts = [], []
    train_stats = []
    for i in range(int(cfg["train_scenes"])):
        spec = _scene_spec(cfg["train_scene"], seed=seed + 1000 + i)
        gt, ro, proposals = _detect_scene(spec, tiling, nms)
        X = extract_features(_maps(ro), proposals, feature_spec)
        y = label_proposals(proposals, gt, t_match)
        X_parts.append(X)
        y_parts.append(y)
        train_stats.append({"n_gt": len(gt), "n_proposals": len(proposals), "n_positive": int(y.sum())})
    X_train = np.concatenate(X_parts, axis=0)
    y_train = np.concatenate(y_parts)

    cls_cfg = cfg["classifier"]
    if cls_cfg["type"] == "forest":
        model = train_forest(X_train, y_train, seed=seed, n_trees=int(cls_cfg.get("n_trees", 128)))
    elif cls_cfg["type"] == "mlp":
        model = train_mlp(X_train, y_train, seed=seed, epochs=int(cls_cfg.get("epochs", 200)))
    else:
        raise ValueError(f"unknown classifier type {cls_cfg['type']!r}")

    # validation scene: stopping threshold for the deterministic baseline
    val_spec = _scene_spec(cfg["train_scene"], seed=seed + 2000)
    val_gt, val_ro, val_proposals = _detect_scene(val_spec, tiling, nms)
    threshold, val_f1 = select_threshold(
        val_proposals, val_gt, t_match, int(cfg["threshold_grid"])
    )

    # test scene
    test_spec = _scene_spec(cfg["test_scene"], seed=seed)
    test_gt, test_ro, test_proposals = _detect_scene(test_spec, tiling, nms)
    classified = classify_proposals(model, _maps(test_ro), test_proposals, feature_spec)
    classified = CoordSet(classified.coords, p=classified.p, dm_value=test_proposals.dm_value)

    positives = classified.select(classified.p >= 0.5)
    det_report = score_detection(test_gt, CoordSet(positives.coords), t_match)
    brier, nll = score_calibration(test_gt, classified, t_match)

    baseline_pred = proposals_by_threshold(test_proposals, threshold)
    baseline_report = score_detection(test_gt, CoordSet(baseline_pred.coords), t_match)

    structure, tissue = generate_structures(test_spec)
    spatial_cfg = cfg["spatial"]
    structures = {"structure": structure}
    det_spatial = analyze_deterministic(
        classified,
        structures,
        tissue,
        adjacency_um=float(spatial_cfg["adjacency_um"]),
        cdf_mode=spatial_cfg["cdf_mode"],
    )
    prob_spatial = analyze_probabilistic(
        classified,
        structures,
        tissue,
        replicates=int(spatial_cfg["replicates"]),
        seed=seed + 3000,
        adjacency_um=float(spatial_cfg["adjacency_um"]),
        cdf_mode=spatial_cfg["cdf_mode"],
    )

    report = {
        "config": cfg,
        "seed": seed,
        "train": train_stats,
        "threshold_baseline": {
            "threshold": threshold,
            "val_f1": val_f1,
            "test": baseline_report.to_dict(),
        },
        "classifier": {
            "type": cls_cfg["type"],
            "n_train": int(X_train.shape[0]),
            "test_detection": det_report.to_dict(),
            "test_brier": brier,
            "test_nll": nll,
            "n_proposals": len(classified),
        },
        "spatial": {
            "deterministic": det_spatial.to_dict(),
            "probabilistic": prob_spatial.to_dict(),
        },
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(model, out_dir / "model.json")
        save_coords(classified, out_dir / "proposals.csv")
        report["artifacts"] = {
            name: _sha256(out_dir / name) for name in ("model.json", "proposals.csv")
        }
        (out_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n"
        )
    return report


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()
