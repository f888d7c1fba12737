"""Volume I/O, preprocessing, augmentation, patch sampling, folds and synthetic phantoms."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels

CHANNELS = ("T1", "T1Gd", "T2", "T2-FLAIR")
LABEL_VALUES = (0, 1, 2, 4)
BACKGROUND, NCR, ED, ET = 0, 1, 2, 4

VOL4_MAGIC = b"VOL4\n"
VOL4_VERSION = 1


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open box ``[lo, hi)`` inside a volume of extents ``shape``."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    shape: tuple[int, int, int]

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))


@dataclass
class VolumeCase:
    case_id: str
    image: np.ndarray | None  # [4, x, y, z]; None for label-only predictions
    labels: np.ndarray  # [x, y, z] uint8
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    crop_box: BBox | None = None

    def __post_init__(self):
        check_labels(self.labels)
        if self.image is not None:
            if self.image.ndim != 4 or self.image.shape[0] != len(CHANNELS):
                raise ValueError(f"image must be [4, x, y, z], got {self.image.shape}")
            if self.image.shape[1:] != self.labels.shape:
                raise ValueError(f"image extents {self.image.shape[1:]} differ from labels {self.labels.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


def check_labels(labels: np.ndarray) -> None:
    if labels.ndim != 3:
        raise ValueError(f"label map must be 3-D, got shape {labels.shape}")
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise VolumeFormatError(f"invalid label value {int(bad[0])} (allowed: 0, 1, 2, 4)")


# ---------------------------------------------------------------------------
# .vol4 container
#
#   VOL4
#   version: 1
#   case_id: <id>
#   extents: X Y Z
#   spacing: sx sy sz
#   channels: T1 T1Gd T2 T2-FLAIR
#   labels: 0 1 2 4
#   payload: image+labels | labels
#   dtype: float32-le uint8
#   end
#
# followed by the image (4 x X x Y x Z float32, little endian, row-major) when
# present and then the X x Y x Z uint8 label map.


def volume_bytes(case: VolumeCase, labels_only: bool = False) -> bytes:
    if any(ch.isspace() for ch in case.case_id) or not case.case_id:
        raise ValueError(f"case id must be non-empty without whitespace: {case.case_id!r}")
    payload = "labels" if labels_only or case.image is None else "image+labels"
    header = [
        f"version: {VOL4_VERSION}",
        f"case_id: {case.case_id}",
        "extents: " + " ".join(str(n) for n in case.extents),
        "spacing: " + " ".join(repr(float(s)) for s in case.spacing),
        "channels: " + " ".join(CHANNELS),
        "labels: " + " ".join(str(v) for v in LABEL_VALUES),
        f"payload: {payload}",
        "dtype: float32-le uint8",
        "end",
    ]
    parts = [VOL4_MAGIC, ("\n".join(header) + "\n").encode()]
    if payload == "image+labels":
        parts.append(np.ascontiguousarray(case.image, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(case.labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def save_volume(case: VolumeCase, path, labels_only: bool = False) -> None:
    from .unet import atomic_write

    atomic_write(path, volume_bytes(case, labels_only))


def parse_volume(data: bytes) -> VolumeCase:
    if not data.startswith(VOL4_MAGIC):
        raise VolumeFormatError("missing VOL4 magic")
    pos = len(VOL4_MAGIC)
    fields: dict[str, str] = {}
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise VolumeFormatError("header is not terminated by 'end'")
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line == "end":
            break
        key, sep, value = line.partition(":")
        if not sep:
            raise VolumeFormatError(f"malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    try:
        version = int(fields["version"])
        extents = tuple(int(v) for v in fields["extents"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        payload = fields["payload"]
        case_id = fields["case_id"]
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from None
    if version != VOL4_VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    if len(extents) != 3 or min(extents) < 1 or len(spacing) != 3:
        raise VolumeFormatError(f"bad extents {extents} or spacing {spacing}")
    if tuple(fields.get("channels", "").split()) != CHANNELS:
        raise VolumeFormatError(f"unexpected channel list {fields.get('channels')!r}")
    if fields.get("dtype") != "float32-le uint8":
        raise VolumeFormatError(f"unsupported dtype {fields.get('dtype')!r}")
    nvox = extents[0] * extents[1] * extents[2]
    image = None
    if payload == "image+labels":
        nbytes = 4 * len(CHANNELS) * nvox
        if len(data) < pos + nbytes:
            raise VolumeFormatError("truncated image payload")
        image = np.frombuffer(data, dtype="<f4", count=len(CHANNELS) * nvox, offset=pos)
        image = image.reshape((len(CHANNELS),) + extents).astype(np.float32)
        pos += nbytes
    elif payload != "labels":
        raise VolumeFormatError(f"unknown payload kind {payload!r}")
    if len(data) != pos + nvox:
        raise VolumeFormatError(f"label payload has {len(data) - pos} bytes, expected {nvox}")
    labels = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(extents).copy()
    return VolumeCase(case_id, image, labels, spacing)


def load_volume(path) -> VolumeCase:
    with open(path, "rb") as fh:
        return parse_volume(fh.read())


# ---------------------------------------------------------------------------
# preprocessing


def crop_nonzero(case: VolumeCase) -> tuple[VolumeCase, BBox]:
    """Crop to the smallest box holding every voxel where any channel is non-zero."""
    nz = np.any(case.image != 0, axis=0)
    if not nz.any():
        raise ValueError(f"case {case.case_id} has no non-zero voxels")
    lo, hi = [], []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        idx = np.flatnonzero(nz.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]) + 1)
    box = BBox(tuple(lo), tuple(hi), case.extents)
    sl = box.slices
    cropped = replace(case, image=np.ascontiguousarray(case.image[(slice(None),) + sl]),
                      labels=np.ascontiguousarray(case.labels[sl]), crop_box=box)
    return cropped, box


def uncrop(arr: np.ndarray, box: BBox, fill=0) -> np.ndarray:
    """Place ``arr`` (trailing three axes cropped by ``box``) back into the full extents."""
    out = np.full(arr.shape[:-3] + tuple(box.shape), fill, dtype=arr.dtype)
    out[(Ellipsis,) + box.slices] = arr
    return out


def zscore_normalize(case: VolumeCase) -> VolumeCase:
    """Per channel ``(v - mean) / std`` over every voxel of the (cropped) volume."""
    img = case.image.astype(np.float64)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        mu = img[c].mean()
        sd = img[c].std()
        if sd == 0:
            raise ValueError(f"channel {CHANNELS[c]} of case {case.case_id} has zero standard deviation")
        out[c] = (img[c] - mu) / sd
    return replace(case, image=out.astype(case.image.dtype))


def preprocess(case: VolumeCase) -> VolumeCase:
    """Crop to the non-zero box, then z-score each channel."""
    cropped, _ = crop_nonzero(case)
    return zscore_normalize(cropped)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    p_rotation: float = 0.2
    rotation_degrees: tuple[float, float] = (-30.0, 30.0)
    rotation_axes: tuple[str, ...] = ("x", "y", "z")
    p_scale: float = 0.2
    scale_range: tuple[float, float] = (0.7, 1.4)
    p_elastic: float = 0.2
    elastic_max_displacement: tuple[float, float] = (0.0, 2.0)  # voxels
    elastic_sigma: tuple[float, float] = (2.0, 3.0)
    p_brightness: float = 0.15
    brightness_std_fraction: float = 0.1
    p_gamma: float = 0.3
    gamma_range: tuple[float, float] = (0.7, 1.5)

    def __post_init__(self):
        for name in ("p_rotation", "p_scale", "p_elastic", "p_brightness", "p_gamma"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.gamma_range[0] <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ValueError(f"gamma range must satisfy 0 < lo <= hi, got {self.gamma_range}")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.elastic_sigma[0] <= 0 or self.elastic_max_displacement[0] < 0:
            raise ValueError("elastic sigma must be positive and displacement nonnegative")
        if any(a not in ("x", "y", "z") for a in self.rotation_axes):
            raise ValueError(f"rotation axes must be among x, y, z: {self.rotation_axes}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotation=0, p_scale=0, p_elastic=0, p_brightness=0, p_gamma=0)


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    i, j = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}[axis]
    m = np.eye(3)
    m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    return m


def spatial_transform(image: np.ndarray, labels: np.ndarray, matrix: np.ndarray,
                      displacement: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Resample about the volume centre: output voxel ``g`` reads ``c + matrix @ (g - c) + d(g)``.

    Image channels are interpolated trilinearly, labels by nearest neighbour;
    samples outside the volume read 0.
    """
    shape = labels.shape
    centre = (np.array(shape, dtype=np.float64) - 1) / 2
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    rel = grid - centre[:, None, None, None]
    coords = np.einsum("ij,jxyz->ixyz", matrix, rel) + centre[:, None, None, None]
    if displacement is not None:
        coords = coords + displacement
    img = kernels.resample3d(image, coords, 1)
    lbl = kernels.resample3d(labels[None].astype(np.float64), coords, 0)[0]
    return img, lbl.astype(labels.dtype)


def adjust_brightness(image: np.ndarray, shifts) -> np.ndarray:
    out = image.copy()
    for c, s in enumerate(shifts):
        if s != 0:
            out[c] = out[c] + s
    return out


def adjust_gamma(image: np.ndarray, gammas) -> np.ndarray:
    """Per channel: rescale to [0, 1], raise to ``gamma``, rescale back."""
    out = image.copy()
    for c, g in enumerate(gammas):
        if g == 1.0:
            continue
        lo, hi = out[c].min(), out[c].max()
        span = hi - lo
        if span == 0:
            continue
        out[c] = ((out[c] - lo) / span) ** g * span + lo
    return out


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    cfg = cfg or AugmentConfig()
    matrix = np.eye(3)
    spatial = False
    if rng.random() < cfg.p_rotation:
        for axis in cfg.rotation_axes:
            matrix = rotation_matrix(axis, rng.uniform(*cfg.rotation_degrees)) @ matrix
        spatial = True
    if rng.random() < cfg.p_scale:
        # zooming in by s means reading coordinates closer to the centre
        matrix = matrix / rng.uniform(*cfg.scale_range)
        spatial = True
    disp = None
    if rng.random() < cfg.p_elastic:
        sigma = rng.uniform(*cfg.elastic_sigma)
        mag = rng.uniform(*cfg.elastic_max_displacement)
        fields = []
        for _ in range(3):
            f = gaussian_filter(rng.uniform(-1, 1, size=labels.shape), sigma, mode="constant")
            peak = np.abs(f).max()
            fields.append(f * (mag / peak) if peak > 0 else f)
        disp = np.stack(fields)
        spatial = True
    if spatial:
        image, labels = spatial_transform(image, labels, matrix, disp)
    if rng.random() < cfg.p_brightness:
        shifts = [rng.uniform(-1, 1) * cfg.brightness_std_fraction * float(image[c].std())
                  for c in range(image.shape[0])]
        image = adjust_brightness(image, shifts)
    if rng.random() < cfg.p_gamma:
        image = adjust_gamma(image, [rng.uniform(*cfg.gamma_range)] * image.shape[0])
    return image, labels


# ---------------------------------------------------------------------------
# patches and folds


def extract_patch(arr: np.ndarray, start, size) -> np.ndarray:
    """Box of ``size`` at ``start`` over the trailing three axes, zero outside the array."""
    spatial = arr.shape[-3:]
    out = np.zeros(arr.shape[:-3] + tuple(size), dtype=arr.dtype)
    src, dst = [], []
    for s, n, p in zip(start, spatial, size):
        a, b = max(s, 0), min(s + p, n)
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - s, b - s))
    out[(Ellipsis,) + tuple(dst)] = arr[(Ellipsis,) + tuple(src)]
    return out


def sample_patch(case: VolumeCase, rng: np.random.Generator, patch_size,
                 foreground_prob: float = 1 / 3) -> tuple[np.ndarray, np.ndarray]:
    """Random patch; with ``foreground_prob`` it is centred on a random tumor voxel."""
    patch = tuple(int(p) for p in patch_size)
    forced = rng.random() < foreground_prob
    tumor = np.flatnonzero(case.labels) if forced else np.empty(0)
    if forced and tumor.size:
        centre = np.unravel_index(tumor[rng.integers(tumor.size)], case.extents)
        start = [int(c) - p // 2 for c, p in zip(centre, patch)]
    else:
        start = [int(rng.integers(min(0, n - p), max(0, n - p) + 1)) for n, p in zip(case.extents, patch)]
    return extract_patch(case.image, start, patch), extract_patch(case.labels, start, patch)


@dataclass
class FoldSplit:
    folds: list[list[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def validation(self, i: int) -> list[str]:
        return list(self.folds[i])

    def training(self, i: int) -> list[str]:
        return [c for j, f in enumerate(self.folds) if j != i for c in f]


def make_folds(case_ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if k < 1 or len(ids) < k:
        raise ValueError(f"need at least k={k} cases, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return FoldSplit([shuffled[i::k] for i in range(k)])


# ---------------------------------------------------------------------------
# synthetic phantoms

# mean intensity per tissue (brain, ED, NCR, ET) for T1, T1Gd, T2, FLAIR
_TISSUE_INTENSITY = np.array([
    [1.0, 0.85, 0.55, 0.9],
    [1.0, 1.0, 0.45, 2.0],
    [1.0, 1.8, 2.1, 1.4],
    [1.0, 2.0, 1.2, 1.5],
])


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _inside(grid: np.ndarray, centre, radii, rot) -> np.ndarray:
    rel = np.einsum("ij,jxyz->ixyz", rot.T, grid - np.asarray(centre)[:, None, None, None])
    return ((rel / np.asarray(radii)[:, None, None, None]) ** 2).sum(axis=0) <= 1.0


def synth_phantom(seed: int, extents=(32, 32, 32), case_id: str | None = None,
                  noise: float = 0.1) -> VolumeCase:
    """Brain-shaped ellipsoid with a nested tumor: edema around a core of ET shell and NCR centre."""
    ext = tuple(int(e) for e in (extents if not isinstance(extents, int) else (extents,) * 3))
    if min(ext) < 16:
        raise ValueError(f"extents {ext} too small for a nested phantom (need >= 16 per axis)")
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in ext], indexing="ij"))
    centre = (np.array(ext) - 1) / 2
    brain_r = np.array(ext) * rng.uniform(0.38, 0.44, size=3)
    brain = _inside(grid, centre, brain_r, np.eye(3))

    m = min(ext)
    wt_r = m * rng.uniform(0.2, 0.26, size=3)
    room = np.maximum(brain_r - wt_r.max() - 1, 0)
    t_centre = centre + rng.uniform(-0.5, 0.5, size=3) * room
    rot = _random_rotation(rng)
    tc_r = wt_r * rng.uniform(0.55, 0.7, size=3)
    ncr_r = tc_r * rng.uniform(0.35, 0.5, size=3)
    wt = _inside(grid, t_centre, wt_r, rot) & brain
    tc = _inside(grid, t_centre, tc_r, rot) & wt
    ncr = _inside(grid, t_centre, ncr_r, rot) & tc

    labels = np.zeros(ext, dtype=np.uint8)
    labels[wt] = ED
    labels[tc] = ET
    labels[ncr] = NCR

    tissue = np.zeros(ext, dtype=np.intp)
    tissue[labels == ED] = 1
    tissue[labels == NCR] = 2
    tissue[labels == ET] = 3
    image = np.zeros((4,) + ext)
    for c in range(4):
        bias = 1.0 + 0.1 * gaussian_filter(rng.standard_normal(ext), 4.0)
        vals = _TISSUE_INTENSITY[c][tissue] * bias + noise * rng.standard_normal(ext)
        image[c] = np.where(brain, vals, 0.0)
    return VolumeCase(case_id or f"phantom{seed:04d}", image.astype(np.float32), labels)
