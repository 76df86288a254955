"""Whole-volume prediction and the post-processing comparison table."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .despeckle import despeckle
from .errors import ConfigError, CheckpointError, ShapeMismatchError
from .params import ModelParams, load_model
from .phantom import corrupt_prediction
from .segnet import generator_forward, predict_labels
from .surfmetrics import ScoreMapping, evaluate
from .trainer import load_cases
from .volume_store import LabelVolume, Volume, load_volume, normalize, save_labels

MODES = ("none", "2d", "3d")


def predict_case_labels(G: ModelParams, image: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Argmax labels for every slice of a normalized (D, H, W) image, infer mode."""
    cfg = G.config
    D = image.shape[0]
    if tuple(image.shape[1:]) != tuple(cfg.input_size):
        step = 2 ** cfg.depth
        raise ShapeMismatchError(
            f"slices are {image.shape[1]}x{image.shape[2]} but the generator expects "
            f"{cfg.input_size[0]}x{cfg.input_size[1]}; pad the volume so H and W are multiples of {step}"
        )
    k = cfg.k
    centers = np.clip(np.arange(D)[:, None] + np.arange(-k, k + 1)[None, :], 0, D - 1)
    out = np.empty(image.shape, dtype=np.uint8)
    for lo in range(0, D, chunk):
        x = image[centers[lo:lo + chunk]]
        logits, _ = generator_forward(G, x, "infer")
        out[lo:lo + chunk] = predict_labels(logits)
    return out


def predict_volume(G: ModelParams, volume: Volume) -> LabelVolume:
    norm, _ = normalize(volume)
    return LabelVolume(predict_case_labels(G, norm.voxels), volume.spacing)


def _load_generator(checkpoint) -> ModelParams:
    p = Path(checkpoint)
    if p.is_dir():
        p = p / "generator"
    G = load_model(p)
    if G.kind != "generator":
        raise CheckpointError(f"{checkpoint} holds a {G.kind}, not a generator")
    return G


def predict(checkpoint, volume_path, k: int | None, out_path) -> LabelVolume:
    G = _load_generator(checkpoint)
    if k is not None and k != G.config.k:
        raise ConfigError(f"--k {k} does not match the checkpoint's k = {G.config.k}")
    vol = load_volume(volume_path)
    pred = predict_volume(G, vol)
    save_labels(pred, out_path)
    return pred


def experiment_table(data_dir, checkpoints: dict[int, str], modes=MODES, split: str = "validation",
                     speckles: int = 0, speckle_radius: int = 1, seed: int = 0,
                     mapping: ScoreMapping | None = None) -> str:
    """Mean challenge score per (k, post-processing mode) as CSV text.

    One row per k, one column per mode. With ``speckles > 0`` every
    prediction is first corrupted with that many isolated blobs.
    """
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    cases = load_cases(data_dir, split)
    if not cases:
        raise ConfigError(f"no cases in split {split!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", *modes])
    for k in sorted(checkpoints):
        ckpt = checkpoints[k]
        if not Path(ckpt).exists() and not Path(str(ckpt) + ".json").exists():
            raise CheckpointError(f"missing checkpoint for k={k}: {ckpt}")
        G = _load_generator(ckpt)
        if G.config.k != k:
            raise ConfigError(f"checkpoint {ckpt} has k={G.config.k}, listed as k={k}")
        per_mode = {m: [] for m in modes}
        for ci, case in enumerate(cases):
            pred = LabelVolume(predict_case_labels(G, case.image), case.spacing)
            if speckles:
                pred = corrupt_prediction(pred, speckles, speckle_radius, seed + ci)
            ref = LabelVolume(case.labels, case.spacing)
            for m in modes:
                per_mode[m].append(evaluate(despeckle(pred, m), ref).mean_score)
        w.writerow([k, *(f"{math.fsum(v) / len(v):.6f}" for v in per_mode.values())])
    return buf.getvalue()
