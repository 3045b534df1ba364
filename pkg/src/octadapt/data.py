"""B-scan volume data model, synthetic phantom generation, and persistence.

Volumes are ordered stacks of 2D grayscale B-scans, optionally paired 1:1
with binary retina masks, and tagged with a domain identifier. Two phantom
styles are generated: domain A imitates raw speckled acquisitions (curved
retina band, multiplicative speckle, salt/pepper), domain B imitates a
post-processed export (flattened band, blurred, contrast-stretched).

On-disk format (one file per volume): ``OCTV`` magic, u16 version, u32
header length, JSON header (id, domain, dims, dtype, range tag, mask
count), then raw little-endian image planes followed by mask planes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, FormatError

MIN_DIM = 32  # floor imposed by the 2x-downsampling generator

_MAGIC = b"OCTV"
_VERSION = 1


class RangeTag(str, Enum):
    RAW_U8 = "raw_u8"  # integer intensities in [0, 255]
    NORM = "norm"      # float intensities in [-1, 1]


class Domain(str, Enum):
    A = "A"  # speckled / raw-acquisition style
    B = "B"  # denoised / post-processed style


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A single 2D grayscale B-scan with an explicit value-range tag."""

    values: np.ndarray
    range_tag: RangeTag

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ContractError(f"image must be 2D, got shape {v.shape}")
        if v.shape[0] < MIN_DIM or v.shape[1] < MIN_DIM:
            raise ContractError(
                f"image dims {v.shape} below minimum {MIN_DIM}x{MIN_DIM}")
        if self.range_tag == RangeTag.RAW_U8:
            if v.dtype != np.uint8:
                raise ContractError(f"RAW_U8 image must be uint8, got {v.dtype}")
        else:
            if v.dtype != np.float32:
                raise ContractError(f"NORM image must be float32, got {v.dtype}")
            if v.size and (v.min() < -1.0 or v.max() > 1.0):
                raise ContractError("NORM image values outside [-1, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class SegMask:
    """Per-pixel binary label map: 0 = background, 1 = retina band."""

    labels: np.ndarray

    def __post_init__(self):
        m = self.labels
        if m.ndim != 2:
            raise ContractError(f"mask must be 2D, got shape {m.shape}")
        if m.dtype != np.uint8:
            raise ContractError(f"mask must be uint8, got {m.dtype}")
        if m.size and m.max() > 1:
            raise ContractError("mask labels must be in {0, 1}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def retina_fraction(self) -> float:
        return float(self.labels.mean())


@dataclass(eq=False)
class Volume:
    """Ordered stack of B-scans with optional 1:1 masks and a domain tag."""

    id: str
    bscans: list[ImageTensor]
    domain: Domain
    masks: list[SegMask] | None = None

    def __post_init__(self):
        if not self.bscans:
            raise ContractError("volume must contain at least one B-scan")
        shape = self.bscans[0].values.shape
        tag = self.bscans[0].range_tag
        for b in self.bscans:
            if b.values.shape != shape or b.range_tag != tag:
                raise ContractError("all B-scans must share dims and range tag")
        if self.masks is not None:
            if len(self.masks) != len(self.bscans):
                raise ContractError(
                    f"mask count {len(self.masks)} != B-scan count {len(self.bscans)}")
            for m in self.masks:
                if m.labels.shape != shape:
                    raise ContractError("mask dims must match B-scan dims")

    @property
    def n_bscans(self) -> int:
        return len(self.bscans)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bscans[0].values.shape

    @property
    def range_tag(self) -> RangeTag:
        return self.bscans[0].range_tag


@dataclass(eq=False)
class DomainDataset:
    """Unpaired collection of volumes from one domain and split."""

    domain: Domain
    volumes: list[Volume]
    split: str = "train"

    def __post_init__(self):
        for v in self.volumes:
            if v.domain != self.domain:
                raise ContractError(
                    f"volume {v.id} tagged {v.domain}, dataset is {self.domain}")

    @property
    def n_bscans(self) -> int:
        return sum(v.n_bscans for v in self.volumes)


@dataclass
class PhantomConfig:
    """Deterministic synthetic B-scan volume generator settings.

    Identical configs produce bit-identical volumes: all randomness is
    derived from ``(seed, volume_index)``.
    """

    seed: int = 0
    n_volumes: int = 1
    bscans_per_volume: int = 8
    height: int = 128
    width: int = 128
    layer_count: int = 5
    curvature_amplitude: float = 12.0
    speckle_variance: float = 900.0
    style: str = "A_speckled"
    salt_pepper_fraction: float = 0.01

    def __post_init__(self):
        if self.height < MIN_DIM or self.width < MIN_DIM:
            raise ConfigError(
                f"phantom dims {self.height}x{self.width} below minimum {MIN_DIM}")
        if self.n_volumes < 1 or self.bscans_per_volume < 1:
            raise ConfigError("n_volumes and bscans_per_volume must be >= 1")
        if self.layer_count < 1:
            raise ConfigError("layer_count must be >= 1")
        if self.speckle_variance < 0:
            raise ConfigError("speckle_variance must be >= 0")
        if self.style not in ("A_speckled", "B_flattened"):
            raise ConfigError(f"unknown phantom style {self.style!r}")

    @property
    def domain(self) -> Domain:
        return Domain.A if self.style == "A_speckled" else Domain.B

    @staticmethod
    def for_style(style: str, **kw) -> "PhantomConfig":
        """Per-style defaults: A is heavily speckled, B is clean."""
        defaults = dict(style=style)
        if style == "B_flattened":
            defaults.update(speckle_variance=0.0, salt_pepper_fraction=0.0)
        defaults.update(kw)
        return PhantomConfig(**defaults)


# Alternating sub-layer brightness palette (bright/dark bands inside the
# retina), all well above the domain-A background level.
_LAYER_PALETTE = (235.0, 140.0, 205.0, 125.0, 215.0, 150.0, 225.0, 135.0)
_BACKGROUND_A = 18.0
# Domain-B contrast stretch endpoints: bright, low-contrast export.
_STRETCH_LO, _STRETCH_HI = 110.0, 235.0


def _volume_rng(seed: int, volume_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, volume_index])


def _render_clean_scan(cfg: PhantomConfig, params: dict, scan_idx: int):
    """Noise-free layered band plus its exact mask for one B-scan."""
    h, w = cfg.height, cfg.width
    x = np.arange(w, dtype=np.float64)
    flatten = 1.0 if cfg.style == "A_speckled" else 0.05
    amp = cfg.curvature_amplitude * flatten
    phase = params["phase"] + params["scan_drift"] * scan_idx
    curve = amp * np.sin(2 * np.pi * params["freq"] * x / w + phase)
    curve += 0.5 * amp * np.sin(4 * np.pi * params["freq"] * x / w + params["phase2"])

    center = params["center_frac"] * h + params["center_drift"] * scan_idx
    half = 0.5 * params["thickness_frac"] * h
    top = np.clip(np.round(center + curve - half), 1, h - 3).astype(np.int64)
    bottom = np.clip(np.round(center + curve + half), 2, h - 2).astype(np.int64)
    bottom = np.maximum(bottom, top + 1)

    rows = np.arange(h, dtype=np.int64)[:, None]
    mask = ((rows >= top[None, :]) & (rows <= bottom[None, :])).astype(np.uint8)

    # sub-layer bands parallel to the boundaries
    depth = (rows - top[None, :]) / np.maximum(bottom - top, 1)[None, :]
    layer_idx = np.clip((depth * cfg.layer_count).astype(np.int64),
                        0, cfg.layer_count - 1)
    palette = np.array([_LAYER_PALETTE[i % len(_LAYER_PALETTE)]
                        for i in range(cfg.layer_count)])
    palette = palette + params["palette_jitter"]
    img = np.full((h, w), _BACKGROUND_A, dtype=np.float64)
    img[mask == 1] = palette[layer_idx[mask == 1]]
    return img, mask


def _generate_volume(cfg: PhantomConfig, volume_index: int) -> Volume:
    rng = _volume_rng(cfg.seed, volume_index)
    params = {
        "center_frac": rng.uniform(0.42, 0.55),
        "thickness_frac": rng.uniform(0.28, 0.40),
        "freq": rng.uniform(0.8, 1.6),
        "phase": rng.uniform(0, 2 * np.pi),
        "phase2": rng.uniform(0, 2 * np.pi),
        "scan_drift": rng.uniform(-0.02, 0.02),
        "center_drift": rng.uniform(-0.03, 0.03),
        "palette_jitter": rng.uniform(-8, 8, size=cfg.layer_count),
    }
    rel_std = np.sqrt(cfg.speckle_variance) / 128.0

    bscans, masks = [], []
    for s in range(cfg.bscans_per_volume):
        img, mask = _render_clean_scan(cfg, params, s)
        if rel_std > 0:
            # unit-mean Rayleigh speckle field, rescaled to the target
            # relative std, applied multiplicatively
            ray = rng.rayleigh(scale=np.sqrt(2 / np.pi), size=img.shape)
            ray_rel = (ray - 1.0) / np.sqrt(4 / np.pi - 1.0)
            img = img * np.maximum(1.0 + rel_std * ray_rel, 0.0)
        if cfg.style == "B_flattened":
            img = gaussian_filter(img, sigma=1.5, mode="nearest")
            img = _STRETCH_LO + (_STRETCH_HI - _STRETCH_LO) * img / 255.0
        if cfg.salt_pepper_fraction > 0:
            flips = rng.random(img.shape) < cfg.salt_pepper_fraction
            salt = rng.random(img.shape) < 0.5
            img[flips & salt] = 255.0
            img[flips & ~salt] = 0.0
        raw = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        bscans.append(ImageTensor(raw, RangeTag.RAW_U8))
        masks.append(SegMask(mask))

    vol_id = f"phantom-{cfg.domain.value}-{cfg.seed}-{volume_index:03d}"
    return Volume(id=vol_id, bscans=bscans, masks=masks, domain=cfg.domain)


def generate_phantom(cfg: PhantomConfig) -> list[Volume]:
    """Generate ``cfg.n_volumes`` deterministic phantom volumes with masks."""
    return [_generate_volume(cfg, v) for v in range(cfg.n_volumes)]


def normalize(img: ImageTensor) -> ImageTensor:
    """Map raw [0, 255] intensities to [-1, 1] via v/127.5 - 1."""
    if img.range_tag != RangeTag.RAW_U8:
        raise ContractError("normalize expects a RAW_U8 image")
    vals = (img.values.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)
    return ImageTensor(vals, RangeTag.NORM)


def denormalize(img: ImageTensor) -> ImageTensor:
    """Inverse of :func:`normalize`; exact on all representable intensities."""
    if img.range_tag != RangeTag.NORM:
        raise ContractError("denormalize expects a NORM image")
    vals = np.clip(np.rint((img.values.astype(np.float64) + 1.0) * 127.5), 0, 255)
    return ImageTensor(vals.astype(np.uint8), RangeTag.RAW_U8)


def normalize_volume(vol: Volume) -> Volume:
    return Volume(id=vol.id, bscans=[normalize(b) for b in vol.bscans],
                  masks=vol.masks, domain=vol.domain)


def denormalize_volume(vol: Volume) -> Volume:
    return Volume(id=vol.id, bscans=[denormalize(b) for b in vol.bscans],
                  masks=vol.masks, domain=vol.domain)


_DTYPES = {"uint8": np.dtype("<u1"), "float32": np.dtype("<f4")}


def save_volume(path, vol: Volume) -> None:
    """Write one volume to its self-describing container file."""
    path = Path(path)
    raw = vol.range_tag == RangeTag.RAW_U8
    header = {
        "id": vol.id,
        "domain": vol.domain.value,
        "n_bscans": vol.n_bscans,
        "height": vol.shape[0],
        "width": vol.shape[1],
        "dtype": "uint8" if raw else "float32",
        "range_tag": vol.range_tag.value,
        "n_masks": len(vol.masks) if vol.masks is not None else 0,
    }
    blob = json.dumps(header).encode("utf-8")
    dt = _DTYPES[header["dtype"]]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(blob)))
        f.write(blob)
        for b in vol.bscans:
            f.write(np.ascontiguousarray(b.values, dtype=dt).tobytes())
        if vol.masks is not None:
            for m in vol.masks:
                f.write(np.ascontiguousarray(m.labels, dtype="<u1").tobytes())


def load_volume(path) -> Volume:
    """Read a volume container, validating structure and payload size."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 10 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a volume container (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    if len(data) < 10 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        n = int(header["n_bscans"])
        h, w = int(header["height"]), int(header["width"])
        n_masks = int(header["n_masks"])
        dtype = _DTYPES[header["dtype"]]
        tag = RangeTag(header["range_tag"])
        domain = Domain(header["domain"])
        vol_id = str(header["id"])
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from e
    if n_masks not in (0, n):
        raise FormatError(f"{path}: mask count {n_masks} != B-scan count {n}")

    plane = h * w
    expected = 10 + hlen + n * plane * dtype.itemsize + n_masks * plane
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload size {len(data)} != expected {expected}")

    offset = 10 + hlen
    bscans = []
    for _ in range(n):
        arr = np.frombuffer(data, dtype=dtype, count=plane, offset=offset)
        bscans.append(ImageTensor(arr.reshape(h, w).copy(), tag))
        offset += plane * dtype.itemsize
    masks = None
    if n_masks:
        masks = []
        for _ in range(n_masks):
            arr = np.frombuffer(data, dtype="<u1", count=plane, offset=offset)
            masks.append(SegMask(arr.reshape(h, w).copy()))
            offset += plane
    return Volume(id=vol_id, bscans=bscans, masks=masks, domain=domain)


def save_volumes(directory, volumes: list[Volume]) -> list[Path]:
    """Write one container per volume into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for vol in volumes:
        p = directory / f"{vol.id}.octv"
        save_volume(p, vol)
        paths.append(p)
    return paths


def load_volume_dir(directory) -> list[Volume]:
    """Load every ``*.octv`` file in a directory, sorted by filename."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.octv"))
    return [load_volume(p) for p in paths]
