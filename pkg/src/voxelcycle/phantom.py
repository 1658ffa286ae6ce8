"""Procedural dual-modality phantom volumes with shared-anatomy labels.

Anatomy is a handful of ellipsoidal structures placed at jittered octant
anchors of a cubic grid; the class assigned to each anchor is shuffled per
sample so geometry carries no information about class identity.  The two
modality presets render the same classes with *reversed* foreground
intensity orderings, so a translator that merely preserves intensity rank
silently swaps anatomical regions - precisely the failure mode that shape
supervision exists to rule out.

Volumes live in [-1, 1] as float64; label volumes are uint8.  The VVOL
file format and the spec-text round trip are defined here too.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kvconfig
from .errors import FormatError, SpecError

BACKGROUND_MIN_FRACTION = 0.30
MAX_CLASS_COUNT = 6

_ANCHOR_LO = 0.32
_ANCHOR_HI = 0.68


@dataclass(frozen=True)
class PhantomSpec:
    grid: int = 16
    class_count: int = 4
    structure_count: int = 3
    semi_axis_min: float = 2.6
    semi_axis_max: float = 3.4
    jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.grid < 16 or (self.grid & (self.grid - 1)) != 0:
            raise SpecError(f"grid must be a power of two >= 16, got {self.grid}")
        if not 2 <= self.class_count <= MAX_CLASS_COUNT:
            raise SpecError(f"class_count must be in [2, {MAX_CLASS_COUNT}], "
                            f"got {self.class_count}")
        if not 0 <= self.structure_count <= 8:
            raise SpecError(f"structure_count must be in [0, 8] (one octant anchor "
                            f"each), got {self.structure_count}")
        if not 0.5 <= self.semi_axis_min <= self.semi_axis_max:
            raise SpecError(f"semi-axis range [{self.semi_axis_min}, "
                            f"{self.semi_axis_max}] is invalid")
        if self.jitter < 0:
            raise SpecError(f"jitter must be non-negative, got {self.jitter}")
        reach = self.jitter + self.semi_axis_max
        if _ANCHOR_LO * self.grid - reach < 0 or \
                _ANCHOR_HI * self.grid + reach > self.grid - 1:
            raise SpecError(f"structures of semi-axis {self.semi_axis_max} with "
                            f"jitter {self.jitter} cannot fit inside a "
                            f"{self.grid}^3 grid")
        ellipsoid_cap = 4.0 / 3.0 * np.pi * self.semi_axis_max ** 3
        if self.structure_count * ellipsoid_cap > (1 - BACKGROUND_MIN_FRACTION) * self.grid ** 3:
            raise SpecError("structures could cover too much of the grid to keep "
                            f"{BACKGROUND_MIN_FRACTION:.0%} background")

    _SCHEMA = {"grid": int, "class_count": int, "structure_count": int,
               "semi_axis_min": float, "semi_axis_max": float,
               "jitter": float, "seed": int}

    def to_file(self, path) -> None:
        kvconfig.write_kv_file(path, asdict(self))

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        return cls(**kvconfig.coerce(kvconfig.read_kv_file(path), cls._SCHEMA,
                                     "phantom spec"))


@dataclass(frozen=True)
class ModalityParams:
    class_means: tuple[float, ...]
    noise_sigma: float = 0.0
    bias_amplitude: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if not 2 <= len(self.class_means) <= MAX_CLASS_COUNT:
            raise SpecError(f"need 2..{MAX_CLASS_COUNT} class means, "
                            f"got {len(self.class_means)}")
        if any(abs(m) > 1.0 for m in self.class_means):
            raise SpecError(f"class means must lie in [-1, 1], got {self.class_means}")
        if self.noise_sigma < 0 or self.bias_amplitude < 0 or self.blur_sigma < 0:
            raise SpecError("noise/bias/blur parameters must be non-negative")


# Foreground intensity orderings are deliberately reversed between the two
# presets: the rank-preserving voxel map A->B swaps classes 1 and 3, so a
# translator must learn a non-monotone transfer to keep anatomy intact.
_PRESET_MEANS = {
    "A": (-0.90, -0.35, 0.15, 0.65, 0.90, -0.60),
    "B": (-0.95, 0.60, 0.05, -0.50, 0.85, -0.20),
}
_PRESET_TEXTURE = {
    "A": {"noise_sigma": 0.03, "bias_amplitude": 0.04, "blur_sigma": 0.25},
    "B": {"noise_sigma": 0.04, "bias_amplitude": 0.05, "blur_sigma": 0.30},
}
_MODALITY_CODES = {"A": 0, "B": 1}


def modality_preset(name: str, class_count: int) -> ModalityParams:
    if name not in _PRESET_MEANS:
        raise SpecError(f"unknown modality preset {name!r} (choose A or B)")
    return ModalityParams(class_means=_PRESET_MEANS[name][:class_count],
                          **_PRESET_TEXTURE[name])


def generate_anatomy(spec: PhantomSpec, seed: int) -> np.ndarray:
    """Deterministic ellipsoid anatomy; labels in {0..class_count-1}."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((spec.grid,) * 3, dtype=np.uint8)
    if spec.structure_count == 0:
        return labels

    lo, hi = _ANCHOR_LO * spec.grid, _ANCHOR_HI * spec.grid
    octants = np.array([(z, y, x) for z in (lo, hi) for y in (lo, hi) for x in (lo, hi)])
    chosen = rng.permutation(8)[: spec.structure_count]
    classes = np.array([1 + i % (spec.class_count - 1)
                        for i in range(spec.structure_count)])
    rng.shuffle(classes)

    coords = np.indices(labels.shape, dtype=np.float64)
    for anchor_idx, cls in zip(chosen, classes):
        center = octants[anchor_idx] + rng.uniform(-spec.jitter, spec.jitter, size=3)
        semis = rng.uniform(spec.semi_axis_min, spec.semi_axis_max, size=3)
        dist = sum(((coords[i] - center[i]) / semis[i]) ** 2 for i in range(3))
        labels[dist <= 1.0] = cls

    background = float((labels == 0).mean())
    if background < BACKGROUND_MIN_FRACTION:
        raise SpecError(f"background fraction {background:.2f} fell below "
                        f"{BACKGROUND_MIN_FRACTION}")
    return labels


def render_modality(labels: np.ndarray, params: ModalityParams, seed: int) -> np.ndarray:
    """Class means -> blur -> multiplicative bias field -> noise -> clamp."""
    labels = np.asarray(labels)
    if int(labels.max()) >= len(params.class_means):
        raise SpecError(f"label volume holds class {int(labels.max())} but params "
                        f"define only {len(params.class_means)} classes")
    rng = np.random.default_rng(seed)
    vol = np.asarray(params.class_means, dtype=np.float64)[labels]
    if params.blur_sigma > 0:
        vol = ndimage.gaussian_filter(vol, sigma=params.blur_sigma, mode="nearest")
    if params.bias_amplitude > 0:
        coarse = rng.uniform(-1.0, 1.0, size=(4, 4, 4))
        field = ndimage.zoom(coarse, labels.shape[0] / 4.0, order=1, mode="nearest")
        vol = vol * (1.0 + params.bias_amplitude * field)
    if params.noise_sigma > 0:
        vol = vol + rng.normal(0.0, params.noise_sigma, size=vol.shape)
    return np.clip(vol, -1.0, 1.0)


def requantize(volume: np.ndarray, params: ModalityParams) -> np.ndarray:
    """Nearest-class-mean labels; inverts a corruption-free render exactly."""
    means = np.asarray(params.class_means)
    dist = np.abs(volume[..., None] - means[None, None, None, :])
    return np.argmin(dist, axis=-1).astype(np.uint8)


@dataclass
class Dataset:
    samples: list[tuple[np.ndarray, np.ndarray]]
    modality: str
    anatomy_seeds: list[int]
    spec: PhantomSpec

    def __len__(self) -> int:
        return len(self.samples)

    def volumes(self) -> list[np.ndarray]:
        return [v for v, _ in self.samples]

    def labels(self) -> list[np.ndarray]:
        return [l for _, l in self.samples]

    def subset(self, indices) -> "Dataset":
        return Dataset(samples=[self.samples[i] for i in indices],
                       modality=self.modality,
                       anatomy_seeds=[self.anatomy_seeds[i] for i in indices],
                       spec=self.spec)


def _render_seed(anatomy_seed: int, modality: str) -> list[int]:
    return [anatomy_seed, 7919 + _MODALITY_CODES[modality]]


def make_dataset(n: int, spec: PhantomSpec, modality: str, seed_base: int) -> Dataset:
    """n independent (volume, labels) pairs; anatomy seed of sample i is
    seed_base + i, which is the provenance audited for unpairedness."""
    if n < 1:
        raise SpecError(f"dataset size must be >= 1, got {n}")
    params = modality_preset(modality, spec.class_count)
    samples = []
    seeds = []
    for i in range(n):
        anatomy_seed = seed_base + i
        labels = generate_anatomy(spec, anatomy_seed)
        volume = render_modality(labels, params, _render_seed(anatomy_seed, modality))
        samples.append((volume, labels))
        seeds.append(anatomy_seed)
    return Dataset(samples=samples, modality=modality, anatomy_seeds=seeds, spec=spec)


def make_paired_dataset(n: int, spec: PhantomSpec, seed_base: int) -> tuple[Dataset, Dataset]:
    """Same anatomies rendered in both modalities.

    For held-out oracle evaluation only; training data must come from
    disjoint seed ranges per modality.
    """
    ds_a = make_dataset(n, spec, "A", seed_base)
    ds_b = make_dataset(n, spec, "B", seed_base)
    return ds_a, ds_b


def assert_unpaired(ds_a: Dataset, ds_b: Dataset) -> None:
    shared = set(ds_a.anatomy_seeds) & set(ds_b.anatomy_seeds)
    if shared:
        raise SpecError(f"datasets share anatomy seeds {sorted(shared)[:5]}; "
                        "training data must be unpaired")


# ---------------------------------------------------------------------------
# VVOL volume file format

VOLUME_MAGIC = b"VVOL"
VOLUME_VERSION = 1
_DTYPE_INTENSITY = 0
_DTYPE_LABEL = 1


def save_volume(path, array: np.ndarray, class_count: int = 0) -> None:
    """Write an intensity volume (float64) or label volume (uint8)."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise FormatError(f"volumes are 3-D (D,H,W), got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        dtype_code, payload, cc = _DTYPE_INTENSITY, arr.astype("<f8"), 0
        if class_count:
            raise FormatError("intensity volumes carry class_count 0")
    elif np.issubdtype(arr.dtype, np.integer):
        if not 2 <= class_count <= 255:
            raise FormatError(f"label volumes need class_count in [2, 255], "
                              f"got {class_count}")
        if arr.min() < 0 or arr.max() >= class_count:
            raise FormatError("labels out of range for declared class_count")
        dtype_code, payload, cc = _DTYPE_LABEL, arr.astype(np.uint8), class_count
    else:
        raise FormatError(f"unsupported volume dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", VOLUME_VERSION))
        fh.write(struct.pack("<BBB", dtype_code, cc, 3))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(payload.tobytes(order="C"))


def load_volume(path) -> tuple[np.ndarray, int]:
    """Read a VVOL file; returns (array, class_count) with class_count 0 for
    intensity volumes."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"volume file truncated while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != VOLUME_MAGIC:
        raise FormatError("bad volume magic (expected VVOL)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VOLUME_VERSION:
        raise FormatError(f"unknown volume version {version}")
    dtype_code, class_count, rank = struct.unpack("<BBB", take(3, "header"))
    if rank != 3:
        raise FormatError(f"volumes are rank 3, file declares {rank}")
    shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(3))
    count = int(np.prod(shape))
    if dtype_code == _DTYPE_INTENSITY:
        if class_count != 0:
            raise FormatError("intensity volume with nonzero class_count")
        arr = np.frombuffer(take(8 * count, "payload"), dtype="<f8").reshape(shape).copy()
    elif dtype_code == _DTYPE_LABEL:
        if class_count < 2:
            raise FormatError("label volume with class_count < 2")
        arr = np.frombuffer(take(count, "payload"), dtype=np.uint8).reshape(shape).copy()
    else:
        raise FormatError(f"unknown volume dtype code {dtype_code}")
    if pos != len(blob):
        raise FormatError("trailing bytes after volume payload")
    return arr, class_count
