"""Whole-volume prediction, fold ensembling and label/region conversion.

Region maps are ``[3, x, y, z]`` arrays with channels ordered ET, TC, WT.
"""

from __future__ import annotations

import itertools
import os
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tensor, sigmoid
from .data import ED, ET, NCR, VolumeCase, check_labels, uncrop
from .unet import NetworkSpec, atomic_write, forward

REGIONS = ("ET", "TC", "WT")


def labels_to_regions(labels: np.ndarray) -> np.ndarray:
    check_labels(labels)
    et = labels == ET
    tc = et | (labels == NCR)
    wt = tc | (labels == ED)
    return np.stack([et, tc, wt]).astype(np.uint8)


def regions_to_labels(masks: np.ndarray) -> np.ndarray:
    """Layered decode: WT paints 2, TC overpaints 1, ET overpaints 4."""
    m = np.asarray(masks).astype(bool)
    labels = np.zeros(m.shape[1:], dtype=np.uint8)
    labels[m[2]] = ED
    labels[m[1]] = NCR
    labels[m[0]] = ET
    return labels


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold`` per channel."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def ensemble(prob_maps: list[np.ndarray]) -> np.ndarray:
    """Voxelwise mean of probability maps."""
    if not prob_maps:
        raise ValueError("ensemble needs at least one probability map")
    shape = prob_maps[0].shape
    for p in prob_maps[1:]:
        if p.shape != shape:
            raise ValueError(f"probability maps differ in extents: {shape} vs {p.shape}")
    # mean taken relative to the first map: identical inputs come back unchanged
    ref = np.asarray(prob_maps[0], dtype=np.float64)
    dev = np.zeros_like(ref)
    for p in prob_maps[1:]:
        dev += np.asarray(p, dtype=np.float64) - ref
    return ref + dev / len(prob_maps)


def postprocess_et(labels: np.ndarray, min_et_voxels: int = 200) -> np.ndarray:
    """Relabel all ET as NCR when the volume holds fewer than ``min_et_voxels`` ET voxels."""
    out = labels.copy()
    et = out == ET
    if 0 < et.sum() < min_et_voxels:
        out[et] = NCR
    return out


# ---------------------------------------------------------------------------
# sliding window


def gaussian_importance(patch_size, sigma_scale: float = 1 / 8, dtype=np.float64) -> np.ndarray:
    """Separable Gaussian centred on the patch, sigma = ``sigma_scale * patch``, peak 1."""
    w = np.ones(tuple(patch_size), dtype=np.float64)
    for ax, p in enumerate(patch_size):
        x = np.arange(p) - (p - 1) / 2
        g = np.exp(-0.5 * (x / (sigma_scale * p)) ** 2)
        shape = [1, 1, 1]
        shape[ax] = p
        w = w * g.reshape(shape)
    w /= w.max()
    # keep every voxel covered with a strictly positive weight
    w = np.maximum(w, w[w > 0].min())
    return w.astype(dtype)


def tile_starts(length: int, patch: int, step_fraction: float) -> list[int]:
    if length <= patch:
        return [0]
    step = step_fraction * patch
    n = int(np.ceil((length - patch) / step)) + 1
    return sorted(set(int(round(v)) for v in np.linspace(0, length - patch, n)))


def sliding_window(predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray, patch_size,
                   step_fraction: float = 0.5, weight: np.ndarray | None = None) -> np.ndarray:
    """Blend per-window predictions of ``image`` [c, X, Y, Z] into ``[3, X, Y, Z]``.

    ``predict`` maps a ``[c, px, py, pz]`` window to ``[k, px, py, pz]``
    probabilities. Volumes smaller than the patch are zero-padded at the end.
    """
    patch = tuple(int(p) for p in patch_size)
    if not 0 < step_fraction <= 1:
        raise ValueError("step_fraction must lie in (0, 1]")
    spatial = image.shape[1:]
    padded = tuple(max(n, p) for n, p in zip(spatial, patch))
    if padded != spatial:
        img = np.zeros((image.shape[0],) + padded, dtype=image.dtype)
        img[(slice(None),) + tuple(slice(0, n) for n in spatial)] = image
    else:
        img = image
    starts = [tile_starts(n, p, step_fraction) for n, p in zip(padded, patch)]
    windows = list(itertools.product(*starts))
    crop = (slice(None),) + tuple(slice(0, n) for n in spatial)
    if len(windows) == 1:
        s = windows[0]
        sl = (slice(None),) + tuple(slice(a, a + p) for a, p in zip(s, patch))
        return predict(img[sl])[crop]
    w = gaussian_importance(patch) if weight is None else weight
    acc = None
    wsum = np.zeros(padded, dtype=np.float64)
    for s in windows:
        sp = tuple(slice(a, a + p) for a, p in zip(s, patch))
        pred = predict(img[(slice(None),) + sp]).astype(np.float64)
        if acc is None:
            acc = np.zeros((pred.shape[0],) + padded, dtype=np.float64)
        acc[(slice(None),) + sp] += pred * w
        wsum[sp] += w
    return (acc / wsum)[crop]


def network_predictor(spec: NetworkSpec) -> Callable[[np.ndarray], np.ndarray]:
    dt = np.dtype(spec.dtype)

    def predict(window: np.ndarray) -> np.ndarray:
        x = Tensor(window[None].astype(dt, copy=False))
        return sigmoid(forward(spec, x, mode="infer")[0]).data[0]

    return predict


def sliding_window_predict(spec: NetworkSpec, case: VolumeCase, patch_size=None,
                           step_fraction: float = 0.5) -> np.ndarray:
    """Region probabilities for a preprocessed case, restored to its uncropped extents."""
    patch = tuple(patch_size or spec.patch_size)
    prob = sliding_window(network_predictor(spec), case.image, patch, step_fraction)
    prob = np.clip(prob, 0.0, 1.0)
    if case.crop_box is not None:
        prob = uncrop(prob, case.crop_box, 0.0)
    return prob


def predict_labels(prob: np.ndarray, threshold: float = 0.5, min_et_voxels: int | None = 200) -> np.ndarray:
    labels = regions_to_labels(binarize(prob, threshold))
    if min_et_voxels:
        labels = postprocess_et(labels, min_et_voxels)
    return labels


# ---------------------------------------------------------------------------
# probability dumps (.prob3) and ensemble manifests
#
#   PROB3
#   version: 1
#   case_id: <id>
#   extents: X Y Z
#   regions: ET TC WT
#   dtype: float32-le
#   end
#
# followed by 3 x X x Y x Z float32 values, little endian, row-major.
#
# A manifest is a text file with one "<case_id> <path>" line per fold output;
# relative paths resolve against the manifest's directory, '#' starts a comment.

PROB_MAGIC = b"PROB3\n"


class ProbFormatError(ValueError):
    pass


def prob_bytes(case_id: str, prob: np.ndarray) -> bytes:
    if prob.ndim != 4 or prob.shape[0] != 3:
        raise ValueError(f"expected [3, x, y, z] probabilities, got {prob.shape}")
    header = "\n".join([
        "version: 1",
        f"case_id: {case_id}",
        "extents: " + " ".join(str(n) for n in prob.shape[1:]),
        "regions: " + " ".join(REGIONS),
        "dtype: float32-le",
        "end",
    ]) + "\n"
    return PROB_MAGIC + header.encode() + np.ascontiguousarray(prob, dtype="<f4").tobytes()


def save_prob(path, case_id: str, prob: np.ndarray) -> None:
    atomic_write(path, prob_bytes(case_id, prob))


def load_prob(path) -> tuple[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(PROB_MAGIC):
        raise ProbFormatError(f"{path}: missing PROB3 magic")
    end = data.find(b"\nend\n")
    if end < 0:
        raise ProbFormatError(f"{path}: header not terminated")
    fields = {}
    for line in data[len(PROB_MAGIC):end].decode().splitlines():
        k, _, v = line.partition(":")
        fields[k.strip()] = v.strip()
    extents = tuple(int(v) for v in fields["extents"].split())
    if fields.get("regions", "").split() != list(REGIONS) or fields.get("dtype") != "float32-le":
        raise ProbFormatError(f"{path}: unsupported region list or dtype")
    offset = end + len(b"\nend\n")
    count = 3 * int(np.prod(extents))
    if len(data) - offset != 4 * count:
        raise ProbFormatError(f"{path}: payload size mismatch")
    prob = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape((3,) + extents)
    return fields["case_id"], prob.astype(np.float32)


def read_manifest(path) -> dict[str, list[Path]]:
    """case_id -> probability dump paths, in file order."""
    base = Path(path).resolve().parent
    out: dict[str, list[Path]] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected '<case_id> <path>'")
        p = Path(parts[1])
        out.setdefault(parts[0], []).append(p if p.is_absolute() else base / p)
    return out


def write_manifest(path, entries: list[tuple[str, os.PathLike]]) -> None:
    base = Path(path).resolve().parent
    lines = ["# case_id path"]
    for cid, p in entries:
        p = Path(p).resolve()
        try:
            p = p.relative_to(base)
        except ValueError:
            pass
        lines.append(f"{cid} {p}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())
