"""U-Net variants as explicit block graphs.

:func:`build_network` turns a :class:`ModelPreset` plus a scale configuration
into a :class:`NetworkSpec`: an ordered list of named :class:`Block` entries
(each naming its inputs) and the parameters they own. :func:`forward` walks
that list, so two specs can be compared block by block.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .attention import AxialAttentionParams, axial_decoder_block, init_axial_attention
from .autodiff import Tensor, concat
from .layers import (ConvParams, NormParams, conv3d, conv_norm_act, init_conv,
                     init_norm, transpose_conv3d)

IN_CHANNELS = 4
OUT_REGIONS = 3


@dataclass(frozen=True)
class ModelPreset:
    name: str
    batch_size: int
    norm_kind: str
    encoder_scale: int
    attention: bool


PRESETS: dict[str, ModelPreset] = {
    "BL": ModelPreset("BL", 5, "batch", 1, False),
    "BL+L": ModelPreset("BL+L", 2, "batch", 2, False),
    "BL+GN": ModelPreset("BL+GN", 2, "group", 1, False),
    "BL+AA": ModelPreset("BL+AA", 2, "batch", 1, True),
    "BL+L+GN": ModelPreset("BL+L+GN", 2, "group", 2, False),
}


def get_preset(name: str | ModelPreset) -> ModelPreset:
    if isinstance(name, ModelPreset):
        return name
    key = name.upper().replace(" ", "")
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[key]


@dataclass(frozen=True)
class ScaleConfig:
    """Structural constants. ``full`` is the full-size network, ``desk`` a CPU-sized copy."""

    name: str
    patch_size: tuple[int, int, int]
    levels: int
    channel_start: int
    channel_cap: int
    large_channel_cap: int
    num_groups: int
    attn_heads: int
    attn_head_dim: int
    attn_skip_top: int = 1


FULL = ScaleConfig("full", (128, 128, 128), 5, 32, 320, 512, 32, 4, 16)
DESK = ScaleConfig("desk", (32, 32, 32), 4, 8, 64, 128, 32, 2, 4)
SCALES = {"full": FULL, "desk": DESK}


@dataclass(frozen=True)
class Block:
    name: str
    kind: str  # conv | up | attn | concat | head
    inputs: tuple[str, ...]
    level: int
    in_ch: int
    out_ch: int
    stride: int = 1
    heads: int = 0
    head_dim: int = 0


@dataclass
class NetworkSpec:
    preset: str
    levels: int
    encoder_channels: list[int]
    decoder_channels: list[int]
    norm_kind: str
    num_groups: int
    attention_levels: list[int]
    attention_schedule: dict[int, tuple[int, int]]
    deep_supervision_levels: list[int]
    patch_size: tuple[int, int, int]
    blocks: list[Block]
    seed: int = 0
    dtype: str = "float32"
    attn_skip_top: int = 1
    shared_axes: bool = False
    positional_encoding: bool = False
    in_channels: int = IN_CHANNELS
    out_regions: int = OUT_REGIONS
    convs: dict[str, ConvParams] = field(default_factory=dict, repr=False)
    norms: dict[str, NormParams] = field(default_factory=dict, repr=False)
    attn: dict[str, AxialAttentionParams] = field(default_factory=dict, repr=False)

    @property
    def materialized(self) -> bool:
        return bool(self.convs)

    @property
    def head_names(self) -> list[str]:
        return [f"head{lv}" for lv in self.deep_supervision_levels]

    def config(self) -> dict:
        """Everything needed to rebuild this spec (parameters aside)."""
        return {
            "preset": self.preset,
            "levels": self.levels,
            "encoder_channels": list(self.encoder_channels),
            "decoder_channels": list(self.decoder_channels),
            "norm_kind": self.norm_kind,
            "num_groups": self.num_groups,
            "attention_levels": list(self.attention_levels),
            "attention_schedule": {str(k): list(v) for k, v in sorted(self.attention_schedule.items())},
            "attn_skip_top": self.attn_skip_top,
            "deep_supervision_levels": list(self.deep_supervision_levels),
            "patch_size": list(self.patch_size),
            "seed": self.seed,
            "dtype": self.dtype,
            "shared_axes": self.shared_axes,
            "positional_encoding": self.positional_encoding,
            "in_channels": self.in_channels,
            "out_regions": self.out_regions,
        }

    def config_digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.config(), sort_keys=True).encode()).digest()

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by dotted name, in block order."""
        out: dict[str, Tensor] = {}
        for b in self.blocks:
            if b.name in self.convs:
                cp = self.convs[b.name]
                out[f"{b.name}.weight"] = cp.weights
                if cp.bias is not None:
                    out[f"{b.name}.bias"] = cp.bias
            if b.name in self.norms:
                np_ = self.norms[b.name]
                out[f"{b.name}.norm.gamma"] = np_.gamma
                out[f"{b.name}.norm.beta"] = np_.beta
            if b.name in self.attn:
                ap = self.attn[b.name]
                axes = ("x",) if ap.shared else ("x", "y", "z")
                for axis in axes:
                    for key in ("wq", "wk", "wv", "wo"):
                        out[f"{b.name}.{axis}.{key}"] = ap.weights[axis][key]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for b in self.blocks:
            nrm = self.norms.get(b.name)
            if nrm is not None and nrm.kind == "batch":
                out[f"{b.name}.norm.running_mean"] = nrm.running_mean
                out[f"{b.name}.norm.running_var"] = nrm.running_var
                out[f"{b.name}.norm.stats_initialized"] = np.array([float(nrm.stats_initialized)])
        return out

    def split_parameter_name(self, name: str) -> tuple[str, str]:
        """``"dec1.conv0.norm.gamma"`` -> ``("dec1.conv0", "norm.gamma")``."""
        for suffix in ("weight", "bias", "norm.gamma", "norm.beta"):
            if name.endswith("." + suffix):
                block = name[: -len(suffix) - 1]
                if block in self.convs or block in self.norms:
                    return block, suffix
        block, axis, key = name.rsplit(".", 2)
        if block not in self.attn:
            raise KeyError(f"unknown parameter {name!r}")
        return block, f"{axis}.{key}"

    def set_parameter(self, name: str, value: Tensor) -> None:
        block, rest = self.split_parameter_name(name)
        if rest == "weight":
            self.convs[block].weights = value
        elif rest == "bias":
            self.convs[block].bias = value
        elif rest == "norm.gamma":
            self.norms[block].gamma = value
        elif rest == "norm.beta":
            self.norms[block].beta = value
        else:
            axis, key = rest.split(".")
            ap = self.attn[block]
            ap.weights[axis][key] = value
        return None

    @contextlib.contextmanager
    def substituted(self, name: str, value: Tensor) -> Iterator[None]:
        """Temporarily swap one parameter tensor (used by finite-difference checks)."""
        old = self.parameters()[name]
        self.set_parameter(name, value)
        try:
            yield
        finally:
            self.set_parameter(name, old)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


# ---------------------------------------------------------------------------
# building


def channel_progression(start: int, cap: int, levels: int) -> list[int]:
    return [min(start * 2**lv, cap) for lv in range(levels)]


def _graph(levels, enc, dec, attention_levels, schedule, ds_levels) -> list[Block]:
    blocks: list[Block] = []
    prev, prev_ch = "input", IN_CHANNELS
    for lv in range(levels):
        stride = 1 if lv == 0 else 2
        blocks.append(Block(f"enc{lv}.conv0", "conv", (prev,), lv, prev_ch, enc[lv], stride))
        blocks.append(Block(f"enc{lv}.conv1", "conv", (f"enc{lv}.conv0",), lv, enc[lv], enc[lv]))
        prev, prev_ch = f"enc{lv}.conv1", enc[lv]
    bottom = levels - 1
    if bottom in attention_levels:
        h, d = schedule[bottom]
        blocks.append(Block(f"attn{bottom}", "attn", (prev,), bottom, prev_ch, prev_ch, heads=h, head_dim=d))
        prev = f"attn{bottom}"
    for lv in range(levels - 2, -1, -1):
        blocks.append(Block(f"up{lv}", "up", (prev,), lv, prev_ch, dec[lv], stride=2))
        up = f"up{lv}"
        if lv in attention_levels:
            h, d = schedule[lv]
            blocks.append(Block(f"attn{lv}", "attn", (up,), lv, dec[lv], dec[lv], heads=h, head_dim=d))
            up = f"attn{lv}"
        blocks.append(Block(f"cat{lv}", "concat", (up, f"enc{lv}.conv1"), lv, dec[lv] + enc[lv], dec[lv] + enc[lv]))
        blocks.append(Block(f"dec{lv}.conv0", "conv", (f"cat{lv}",), lv, dec[lv] + enc[lv], dec[lv]))
        blocks.append(Block(f"dec{lv}.conv1", "conv", (f"dec{lv}.conv0",), lv, dec[lv], dec[lv]))
        prev, prev_ch = f"dec{lv}.conv1", dec[lv]
        if lv in ds_levels:
            blocks.append(Block(f"head{lv}", "head", (prev,), lv, dec[lv], OUT_REGIONS))
    return blocks


def build_network(
    preset: str | ModelPreset,
    patch_size=None,
    channel_start: int | None = None,
    channel_cap: int | None = None,
    *,
    levels: int | None = None,
    scale: str | ScaleConfig = "desk",
    seed: int = 0,
    dtype=np.float32,
    materialize: bool = True,
    num_groups: int | None = None,
    attn_heads: int | None = None,
    attn_head_dim: int | None = None,
    attn_skip_top: int | None = None,
    shared_axes: bool = False,
    positional_encoding: bool = False,
) -> NetworkSpec:
    """Build one of the five model variants.

    ``channel_start``/``channel_cap`` set the encoder progression; by default the
    large-encoder presets double the start and use the scale's large cap. The
    decoder always keeps the baseline progression.
    """
    preset = get_preset(preset)
    sc = SCALES[scale] if isinstance(scale, str) else scale
    levels = levels or sc.levels
    if isinstance(patch_size, (int, np.integer)):
        patch_size = (int(patch_size),) * 3
    patch = tuple(int(p) for p in (patch_size or sc.patch_size))
    if levels < 2:
        raise ValueError("a U-Net needs at least two levels")
    if any(p % 2 ** (levels - 1) for p in patch):
        raise ValueError(f"patch size {patch} is not divisible by 2**{levels - 1}")
    base_start = sc.channel_start
    if channel_start is not None and preset.encoder_scale > 1:
        base_start = channel_start // preset.encoder_scale
    elif channel_start is not None:
        base_start = channel_start
    if channel_start is None:
        channel_start = sc.channel_start * preset.encoder_scale
    if channel_cap is None:
        channel_cap = sc.large_channel_cap if preset.encoder_scale > 1 else sc.channel_cap
    base_cap = sc.channel_cap if preset.encoder_scale > 1 else channel_cap
    enc = channel_progression(channel_start, channel_cap, levels)
    dec = channel_progression(base_start, base_cap, levels - 1)

    skip = sc.attn_skip_top if attn_skip_top is None else attn_skip_top
    h0 = attn_heads or sc.attn_heads
    d0 = attn_head_dim or sc.attn_head_dim
    attention_levels = list(range(skip, levels)) if preset.attention else []
    schedule = {lv: (h0 * 2 ** (lv - skip), d0 * 2 ** (lv - skip)) for lv in attention_levels}
    ds_levels = list(range(0, max(levels - 2, 1)))
    groups = sc.num_groups if num_groups is None else num_groups

    spec = NetworkSpec(
        preset=preset.name, levels=levels, encoder_channels=enc, decoder_channels=dec,
        norm_kind=preset.norm_kind, num_groups=groups, attention_levels=attention_levels,
        attention_schedule=schedule, deep_supervision_levels=ds_levels, patch_size=patch,
        blocks=_graph(levels, enc, dec, attention_levels, schedule, ds_levels),
        seed=seed, dtype=np.dtype(dtype).name, attn_skip_top=skip, shared_axes=shared_axes,
        positional_encoding=positional_encoding,
    )
    if materialize:
        materialize_parameters(spec)
    return spec


def spec_from_config(cfg: dict, materialize: bool = True) -> NetworkSpec:
    levels = cfg["levels"]
    enc, dec = cfg["encoder_channels"], cfg["decoder_channels"]
    schedule = {int(k): tuple(v) for k, v in cfg["attention_schedule"].items()}
    spec = NetworkSpec(
        preset=cfg["preset"], levels=levels, encoder_channels=list(enc), decoder_channels=list(dec),
        norm_kind=cfg["norm_kind"], num_groups=cfg["num_groups"],
        attention_levels=list(cfg["attention_levels"]), attention_schedule=schedule,
        deep_supervision_levels=list(cfg["deep_supervision_levels"]),
        patch_size=tuple(cfg["patch_size"]),
        blocks=_graph(levels, enc, dec, cfg["attention_levels"], schedule, cfg["deep_supervision_levels"]),
        seed=cfg["seed"], dtype=cfg["dtype"], attn_skip_top=cfg["attn_skip_top"],
        shared_axes=cfg["shared_axes"], positional_encoding=cfg["positional_encoding"],
    )
    if materialize:
        materialize_parameters(spec)
    return spec


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def materialize_parameters(spec: NetworkSpec) -> None:
    """Initialise every parameter from ``spec.seed``; each block draws from its own stream."""
    dt = np.dtype(spec.dtype)
    for b in spec.blocks:
        rng = _rng_for(spec.seed, b.name)
        if b.kind == "conv":
            spec.convs[b.name] = init_conv(rng, b.out_ch, b.in_ch, 3, dt, stride=b.stride, padding=1)
            spec.norms[b.name] = init_norm(spec.norm_kind, b.out_ch, dt, spec.num_groups)
        elif b.kind == "up":
            # transpose layout: [in_ch, out_ch, 2, 2, 2]
            spec.convs[b.name] = init_conv(rng, b.in_ch, b.out_ch, 2, dt, stride=2, padding=0, bias=False)
            spec.convs[b.name].bias = Tensor(np.zeros(b.out_ch, dtype=dt), requires_grad=True)
        elif b.kind == "head":
            spec.convs[b.name] = init_conv(rng, b.out_ch, b.in_ch, 1, dt)
        elif b.kind == "attn":
            spec.attn[b.name] = init_axial_attention(rng, b.in_ch, b.heads, b.head_dim, dt,
                                                     shared=spec.shared_axes,
                                                     positional_encoding=spec.positional_encoding)


def forward(spec: NetworkSpec, batch: Tensor, mode: str = "train") -> list[Tensor]:
    """Run the network; returns region logits, highest resolution first.

    Train mode returns one output per deep-supervision level, infer mode only
    the full-resolution output.
    """
    if not spec.materialized:
        raise ValueError("network parameters are not materialized")
    if batch.ndim != 5 or batch.shape[1] != spec.in_channels:
        raise ValueError(f"expected [b, {spec.in_channels}, x, y, z], got {batch.shape}")
    if any(s % 2 ** (spec.levels - 1) for s in batch.shape[2:]):
        raise ValueError(f"spatial extents {batch.shape[2:]} are not divisible by 2**{spec.levels - 1}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    env: dict[str, Tensor] = {"input": batch}
    for b in spec.blocks:
        args = [env[i] for i in b.inputs]
        if b.kind == "conv":
            out = conv_norm_act(args[0], spec.convs[b.name], spec.norms[b.name], mode)
        elif b.kind == "up":
            out = transpose_conv3d(args[0], spec.convs[b.name])
        elif b.kind == "attn":
            out = axial_decoder_block(args[0], spec.attn[b.name])
        elif b.kind == "concat":
            out = concat(args, axis=1)
        elif b.kind == "head":
            out = conv3d(args[0], spec.convs[b.name])
        else:
            raise ValueError(f"unknown block kind {b.kind!r}")
        env[b.name] = out
    outs = [env[name] for name in spec.head_names]
    return outs[:1] if mode == "infer" else outs


def parameter_count(obj) -> int:
    """Exact number of trainable scalars of a spec (materialized or not) or a single layer."""
    if isinstance(obj, ConvParams):
        return obj.weights.size + (obj.bias.size if obj.bias is not None else 0)
    if isinstance(obj, NormParams):
        return obj.gamma.size + obj.beta.size
    if isinstance(obj, AxialAttentionParams):
        sets = 1 if obj.shared else 3
        return sets * 4 * obj.channels * obj.heads * obj.head_dim
    total = 0
    for b in obj.blocks:
        if b.kind == "conv":
            total += b.out_ch * b.in_ch * 27 + b.out_ch + 2 * b.out_ch
        elif b.kind == "up":
            total += b.in_ch * b.out_ch * 8 + b.out_ch
        elif b.kind == "head":
            total += b.out_ch * b.in_ch + b.out_ch
        elif b.kind == "attn":
            total += (1 if obj.shared_axes else 3) * 4 * b.in_ch * b.heads * b.head_dim
    return total


def encoder_conv_parameter_count(spec: NetworkSpec) -> int:
    return sum(b.out_ch * b.in_ch * 27 + b.out_ch for b in spec.blocks
               if b.kind == "conv" and b.name.startswith("enc"))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   8s magic "TSGCKPT1" | u32 version | 32s sha256(config json)
#   u32 len + config json
#   u32 entry count, then per entry:
#     u16 len + utf-8 name | u8 ndim | u32 * ndim extents | float32 payload

CKPT_MAGIC = b"TSGCKPT1"
CKPT_VERSION = 1


def checkpoint_bytes(spec: NetworkSpec) -> bytes:
    cfg = json.dumps(spec.config(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(spec.config_digest())
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    entries = [(k, v.data) for k, v in spec.parameters().items()] + list(spec.buffers().items())
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(spec: NetworkSpec, path) -> None:
    atomic_write(path, checkpoint_bytes(spec))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> NetworkSpec:
    view = memoryview(data)
    if bytes(view[:8]) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", view, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(view[12:44])
    (n,) = struct.unpack_from("<I", view, 44)
    cfg = json.loads(bytes(view[48:48 + n]))
    spec = spec_from_config(cfg)
    if spec.config_digest() != digest:
        raise CheckpointError("config digest mismatch")
    pos = 48 + n
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params = spec.parameters()
    buffers = spec.buffers()
    dt = np.dtype(spec.dtype)
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + ln]).decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name in params:
            if params[name].shape != arr.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape}, expected {params[name].shape}")
            params[name].data[...] = arr.astype(dt)
        elif name in buffers:
            block = name.split(".norm.")[0]
            nrm = spec.norms[block]
            if name.endswith("stats_initialized"):
                nrm.stats_initialized = bool(arr[0])
            else:
                buffers[name][...] = arr.astype(buffers[name].dtype)
        else:
            raise CheckpointError(f"unexpected entry {name!r}")
    return spec


def describe(spec: NetworkSpec) -> dict:
    """Summary used by the CLI."""
    d = spec.config()
    d["parameters"] = parameter_count(spec)
    d["blocks"] = [asdict(b) for b in spec.blocks]
    return d
