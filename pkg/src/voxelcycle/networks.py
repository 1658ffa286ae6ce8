"""The three volumetric architectures and their checkpoint format.

All nets are plain parameter dictionaries plus an explicit forward over the
autodiff ops.  The generator and segmentor are 3-level U-Nets (downsampling
factor exactly 8); the discriminator is a fully convolutional patch
classifier whose logit grid scales with the input.  Upsampling is always
nearest-neighbour x2 followed by a 3x3x3 convolution; transposed
convolutions are not available by construction.  The segmentor carries no
normalization parameters anywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from . import ops
from .engine import Tensor, no_grad
from .errors import FormatError, ShapeError

WEIGHT_STDDEV = 0.02


@dataclass(frozen=True)
class LayerSpec:
    name: str
    cin: int
    cout: int
    stride: int = 1
    norm: bool = False
    act: str = "relu"  # relu | leaky | tanh | none


class Network:
    """Named, ordered parameter collection plus a forward definition."""

    kind = "network"

    def __init__(self, base_filters: int):
        if base_filters < 1:
            raise ShapeError(f"base_filters must be positive, got {base_filters}")
        self.base_filters = base_filters
        self.class_count = 0
        self.params: dict[str, Tensor] = {}

    def layer_specs(self) -> list[LayerSpec]:
        raise NotImplementedError

    def init_parameters(self, seed: int) -> "Network":
        """Weights ~ Normal(0, 0.02), biases 0, norm gain 1 / shift 0."""
        rng = np.random.default_rng(seed)
        self.params = {}
        for spec in self.layer_specs():
            w = rng.normal(0.0, WEIGHT_STDDEV, size=(spec.cout, spec.cin, 3, 3, 3))
            self.params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.cout), requires_grad=True)
            if spec.norm:
                self.params[f"{spec.name}.gain"] = Tensor(np.ones(spec.cout),
                                                          requires_grad=True)
                self.params[f"{spec.name}.shift"] = Tensor(np.zeros(spec.cout),
                                                           requires_grad=True)
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def _block(self, spec: LayerSpec, x: Tensor) -> Tensor:
        y = ops.conv3d(x, self.params[f"{spec.name}.weight"],
                       self.params[f"{spec.name}.bias"], stride=spec.stride, pad=1)
        if spec.norm:
            y = ops.instance_norm(y, self.params[f"{spec.name}.gain"],
                                  self.params[f"{spec.name}.shift"])
        if spec.act == "relu":
            y = ops.relu(y)
        elif spec.act == "leaky":
            y = ops.leaky_relu(y, 0.2)
        elif spec.act == "tanh":
            y = ops.tanh(y)
        return y

    def _named(self, name: str, x: Tensor) -> Tensor:
        return self._block(self._spec_map[name], x)

    @property
    def _spec_map(self) -> dict[str, LayerSpec]:
        cached = self.__dict__.get("_spec_map_cache")
        if cached is None:
            cached = {s.name: s for s in self.layer_specs()}
            self.__dict__["_spec_map_cache"] = cached
        return cached

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Expected parameter inventory in deterministic order."""
        shapes: dict[str, tuple[int, ...]] = {}
        for spec in self.layer_specs():
            shapes[f"{spec.name}.weight"] = (spec.cout, spec.cin, 3, 3, 3)
            shapes[f"{spec.name}.bias"] = (spec.cout,)
            if spec.norm:
                shapes[f"{spec.name}.gain"] = (spec.cout,)
                shapes[f"{spec.name}.shift"] = (spec.cout,)
        return shapes

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _require_downsamplable(x: Tensor, what: str, min_extent: int = 8) -> None:
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"{what} expects input of shape (N,1,D,H,W), got {x.shape}")
    for axis, size in zip("DHW", x.shape[2:]):
        if size % 8 != 0:
            raise ShapeError(f"{what}: axis {axis} extent {size} is not divisible by 8")
        if size < min_extent:
            raise ShapeError(f"{what}: axis {axis} extent {size} is below the "
                             f"minimum {min_extent} (normalized bottleneck needs "
                             f"at least 2 voxels per slice)")


class GeneratorNet(Network):
    """U-Net translator: three stride-2 conv downsamplings, nearest-up + conv
    decoder with skip concatenations, tanh output in (-1, 1)."""

    kind = "generator"

    def layer_specs(self) -> list[LayerSpec]:
        f = self.base_filters
        return [
            LayerSpec("enc0a", 1, f, norm=True),
            LayerSpec("enc0b", f, f, norm=True),
            LayerSpec("down1", f, 2 * f, stride=2, norm=True),
            LayerSpec("enc1", 2 * f, 2 * f, norm=True),
            LayerSpec("down2", 2 * f, 4 * f, stride=2, norm=True),
            LayerSpec("enc2", 4 * f, 4 * f, norm=True),
            LayerSpec("down3", 4 * f, 8 * f, stride=2, norm=True),
            LayerSpec("bottleneck", 8 * f, 8 * f, norm=True),
            LayerSpec("up2", 8 * f, 4 * f, norm=True),
            LayerSpec("dec2", 8 * f, 4 * f, norm=True),
            LayerSpec("up1", 4 * f, 2 * f, norm=True),
            LayerSpec("dec1", 4 * f, 2 * f, norm=True),
            LayerSpec("up0", 2 * f, f, norm=True),
            LayerSpec("dec0", 2 * f, 1, norm=False, act="tanh"),
        ]

    def forward(self, x: Tensor) -> Tensor:
        _require_downsamplable(x, "generator", min_extent=16)
        skip0 = self._named("enc0b", self._named("enc0a", x))
        skip1 = self._named("enc1", self._named("down1", skip0))
        skip2 = self._named("enc2", self._named("down2", skip1))
        bottom = self._named("bottleneck", self._named("down3", skip2))
        y = self._named("up2", ops.upsample_nearest3d(bottom))
        y = self._named("dec2", ops.concat_channels(y, skip2))
        y = self._named("up1", ops.upsample_nearest3d(y))
        y = self._named("dec1", ops.concat_channels(y, skip1))
        y = self._named("up0", ops.upsample_nearest3d(y))
        return self._named("dec0", ops.concat_channels(y, skip0))


class SegmentorNet(Network):
    """U-Net segmentor without any normalization layer: max-pool
    downsampling, nearest-up + conv decoder, C-channel logits output."""

    kind = "segmentor"

    def __init__(self, base_filters: int, class_count: int):
        super().__init__(base_filters)
        if class_count < 2:
            raise ShapeError(f"segmentor needs at least 2 classes, got {class_count}")
        self.class_count = class_count

    def layer_specs(self) -> list[LayerSpec]:
        f = self.base_filters
        return [
            LayerSpec("enc0a", 1, f),
            LayerSpec("enc0b", f, f),
            LayerSpec("enc1a", f, 2 * f),
            LayerSpec("enc1b", 2 * f, 2 * f),
            LayerSpec("enc2a", 2 * f, 4 * f),
            LayerSpec("enc2b", 4 * f, 4 * f),
            LayerSpec("bota", 4 * f, 8 * f),
            LayerSpec("botb", 8 * f, 8 * f),
            LayerSpec("up2", 8 * f, 4 * f),
            LayerSpec("dec2", 8 * f, 4 * f),
            LayerSpec("up1", 4 * f, 2 * f),
            LayerSpec("dec1", 4 * f, 2 * f),
            LayerSpec("up0", 2 * f, f),
            LayerSpec("dec0", 2 * f, self.class_count, act="none"),
        ]

    def forward(self, x: Tensor) -> Tensor:
        _require_downsamplable(x, "segmentor")
        skip0 = self._named("enc0b", self._named("enc0a", x))
        skip1 = self._named("enc1b", self._named("enc1a", ops.maxpool3d(skip0)))
        skip2 = self._named("enc2b", self._named("enc2a", ops.maxpool3d(skip1)))
        bottom = self._named("botb", self._named("bota", ops.maxpool3d(skip2)))
        y = self._named("up2", ops.upsample_nearest3d(bottom))
        y = self._named("dec2", ops.concat_channels(y, skip2))
        y = self._named("up1", ops.upsample_nearest3d(y))
        y = self._named("dec1", ops.concat_channels(y, skip1))
        y = self._named("up0", ops.upsample_nearest3d(y))
        return self._named("dec0", ops.concat_channels(y, skip0))


class DiscriminatorNet(Network):
    """PatchGAN classifier: three stride-2 conv blocks (no norm on the
    first) and a 1-channel head emitting one logit per overlapping
    sub-volume."""

    kind = "discriminator"

    def layer_specs(self) -> list[LayerSpec]:
        f = self.base_filters
        return [
            LayerSpec("block0", 1, f, stride=2, norm=False, act="leaky"),
            LayerSpec("block1", f, 2 * f, stride=2, norm=True, act="leaky"),
            LayerSpec("block2", 2 * f, 4 * f, stride=2, norm=True, act="leaky"),
            LayerSpec("head", 4 * f, 1, act="none"),
        ]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"discriminator expects (N,1,D,H,W), got {x.shape}")
        y = x
        for spec in self.layer_specs():
            y = self._block(spec, y)
        return y

    @staticmethod
    def logit_grid_extents(input_spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        """Expected logit grid from the conv shape formula (k=3, pad=1)."""
        sizes = list(input_spatial)
        for _ in range(3):
            sizes = [(s + 2 * 1 - 3) // 2 + 1 for s in sizes]
        sizes = [(s + 2 * 1 - 3) // 1 + 1 for s in sizes]
        return tuple(sizes)


def predict_labels(segmentor: SegmentorNet, x: Tensor) -> np.ndarray:
    """Voxelwise argmax of the segmentor logits, as (N, D, H, W) ints."""
    with no_grad():
        logits = segmentor.forward(x)
    return np.argmax(logits.data, axis=1)


def build_network(kind: str, base_filters: int, class_count: int = 0) -> Network:
    if kind == "generator":
        return GeneratorNet(base_filters)
    if kind == "discriminator":
        return DiscriminatorNet(base_filters)
    if kind == "segmentor":
        return SegmentorNet(base_filters, class_count)
    raise FormatError(f"unknown network kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoint file format ("VXCK")

CHECKPOINT_MAGIC = b"VXCK"
CHECKPOINT_VERSION = 1
_KIND_CODES = {"generator": 0.0, "discriminator": 1.0, "segmentor": 2.0}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    """Serialize named float64 arrays in declaration order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes(order="C"))


def read_entries(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unknown checkpoint version {version}")
        count = struct.unpack("<I", _read_exact(fh, 4, "entry count"))[0]
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "extent"))[0]
                          for _ in range(rank))
            n_values = int(np.prod(shape)) if rank else 1
            payload = _read_exact(fh, 8 * n_values, f"payload of {name}")
            entries[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after final checkpoint entry")
    return entries


def save_checkpoint(net: Network, path, step: int = 0, config_hash: int = 0) -> None:
    entries: dict[str, np.ndarray] = {
        "_meta.kind": np.array([_KIND_CODES[net.kind]]),
        "_meta.base_filters": np.array([float(net.base_filters)]),
        "_meta.class_count": np.array([float(net.class_count)]),
        "_meta.step": np.array([float(step)]),
        "_meta.config_hash": np.array([float(config_hash)]),
    }
    for name, p in net.params.items():
        entries[name] = p.data
    write_entries(path, entries)


def load_checkpoint(path) -> tuple[Network, int, int]:
    """Rebuild a network from a checkpoint; returns (net, step, config_hash)."""
    entries = read_entries(path)
    try:
        kind = _CODE_KINDS[float(entries.pop("_meta.kind").reshape(-1)[0])]
        base_filters = int(entries.pop("_meta.base_filters").reshape(-1)[0])
        class_count = int(entries.pop("_meta.class_count").reshape(-1)[0])
        step = int(entries.pop("_meta.step").reshape(-1)[0])
        config_hash = int(entries.pop("_meta.config_hash").reshape(-1)[0])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing metadata entry {exc}") from exc
    net = build_network(kind, base_filters, class_count)
    shapes = net.parameter_shapes()
    expected = set(shapes)
    found = set(entries)
    if expected != found:
        missing = sorted(expected - found)
        extra = sorted(found - expected)
        raise FormatError(f"checkpoint parameter mismatch: missing {missing}, extra {extra}")
    net.params = {}
    for name, shape in shapes.items():
        arr = entries[name]
        if arr.shape != shape:
            raise FormatError(f"checkpoint entry {name} has dims {arr.shape}, "
                              f"expected {shape}")
        net.params[name] = Tensor(arr, requires_grad=True)
    return net, step, config_hash
