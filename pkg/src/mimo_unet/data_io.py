"""Synthetic datasets with known heteroscedastic noise, plus the on-disk format.

Inputs are smooth random fields in [0, 1]; the target is a fixed blur plus
pointwise nonlinearity of the input, corrupted by Laplace noise whose
per-pixel scale is a known function of the input.  The true noise-scale
raster is persisted next to every sample so that learned scales can be
checked against ground truth.  An out-of-distribution variant shifts the
field generator's amplitude/sharpness parameters while leaving the noise
model untouched.

On disk a dataset is a manifest.json plus raw little-endian float32 blobs
in C (channel, row, col) order; shapes live only in the manifest and every
blob carries a CRC32.  Class maps use int32 in the same container.  The
manifest is written last via an atomic rename, so partially generated
datasets never load.
"""

from __future__ import annotations

import binascii
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "NOISE_SCALE_MIN",
    "NOISE_SCALE_MAX",
    "SynthTaskConfig",
    "SampleRecord",
    "DatasetManifest",
    "SyntheticDataset",
    "DatasetError",
    "generate_synthetic",
    "load_dataset",
    "write_raster",
    "read_raster",
    "mask_classes",
    "compute_ndvi",
]

NOISE_SCALE_MIN = 1e-3
NOISE_SCALE_MAX = 1.0

_FIELD_KINDS = ("gauss_bumps", "value_noise")
_NOISE_FNS = ("constant", "proportional")

MANIFEST_NAME = "manifest.json"


class DatasetError(RuntimeError):
    """Raised when a dataset on disk is missing, truncated or corrupt."""


# --------------------------------------------------------------------------
# Raster container
# --------------------------------------------------------------------------

def write_raster(path, arr: np.ndarray) -> int:
    """Write a raster blob; returns its CRC32."""
    if arr.dtype == np.int32:
        blob = arr.astype("<i4").tobytes(order="C")
    else:
        blob = arr.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(blob)
    return binascii.crc32(blob)


def read_raster(path, shape, dtype="<f4", crc32=None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"raster file missing: {path}")
    blob = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    expected = int(np.prod(shape, dtype=np.int64)) * itemsize
    if len(blob) != expected:
        raise DatasetError(
            f"raster {path} has {len(blob)} bytes, expected {expected} "
            f"for shape {tuple(shape)}"
        )
    if crc32 is not None and binascii.crc32(blob) != crc32:
        raise DatasetError(f"checksum mismatch in raster {path}")
    return np.frombuffer(blob, dtype=dtype).reshape(shape).copy()


# --------------------------------------------------------------------------
# Generator configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthTaskConfig:
    """Knobs of the synthetic task.

    ``noise_scale_fn`` is either "constant" (scale = noise_scale everywhere)
    or "proportional" (scale = noise_base + noise_gain * blurred input
    magnitude, clipped to the legal range).  ``ood_shift`` != 0 sharpens and
    amplifies the input fields without touching the noise model.
    """

    field_kind: str = "gauss_bumps"
    channels: int = 2
    height: int = 64
    width: int = 64
    noise_scale_fn: str = "proportional"
    noise_scale: float = 0.1
    noise_base: float = 0.05
    noise_gain: float = 0.2
    ood_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.field_kind not in _FIELD_KINDS:
            raise ValueError(f"field_kind must be one of {_FIELD_KINDS}")
        if self.noise_scale_fn not in _NOISE_FNS:
            raise ValueError(f"noise_scale_fn must be one of {_NOISE_FNS}")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.height < 4 or self.width < 4:
            raise ValueError("height and width must be >= 4")
        if self.noise_scale_fn == "constant":
            if not NOISE_SCALE_MIN <= self.noise_scale <= NOISE_SCALE_MAX:
                raise ValueError(
                    f"noise_scale must lie in [{NOISE_SCALE_MIN}, "
                    f"{NOISE_SCALE_MAX}]"
                )
        else:
            if self.noise_base < NOISE_SCALE_MIN or self.noise_gain < 0:
                raise ValueError("noise_base must be >= 1e-3 and gain >= 0")
            if self.noise_base + self.noise_gain > NOISE_SCALE_MAX:
                raise ValueError("noise_base + noise_gain must be <= 1")

    @property
    def kind(self) -> str:
        return "ood" if self.ood_shift != 0.0 else "id"


# --------------------------------------------------------------------------
# Field generators and the target functional
# --------------------------------------------------------------------------

def _box_blur(a: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge padding, (H, W) arrays."""
    h, w = a.shape
    p = np.pad(a, 1, mode="edge")
    out = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + h, dx:dx + w]
    return out / 9.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _gauss_bumps_field(rng, h, w, shift):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    scale = max(h, w)
    for _ in range(8):
        amp = rng.uniform(0.8, 2.0) * (1.0 + shift) * rng.choice([-1.0, 1.0])
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.08, 0.22) * scale / (1.0 + abs(shift))
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return _sigmoid(field)


def _upsample_bilinear(grid: np.ndarray, h, w):
    gy = np.linspace(0, grid.shape[0] - 1, h)
    gx = np.linspace(0, grid.shape[1] - 1, w)
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, grid.shape[0] - 1)
    x1 = np.minimum(x0 + 1, grid.shape[1] - 1)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _value_noise_field(rng, h, w, shift):
    coarse = rng.uniform(-1, 1, (max(2, h // 8) + 1, max(2, w // 8) + 1))
    fine = rng.uniform(-1, 1, (max(2, h // 4) + 1, max(2, w // 4) + 1))
    field = _upsample_bilinear(coarse, h, w) \
        + (0.5 + shift) * _upsample_bilinear(fine, h, w)
    return _sigmoid(2.5 * (1.0 + shift) * field)


def _make_input(cfg: SynthTaskConfig, rng) -> np.ndarray:
    gen = _gauss_bumps_field if cfg.field_kind == "gauss_bumps" else _value_noise_field
    chans = [gen(rng, cfg.height, cfg.width, cfg.ood_shift)
             for _ in range(cfg.channels)]
    return np.stack(chans).astype(np.float32)


def _clean_target(x: np.ndarray) -> np.ndarray:
    """Deterministic nonlinear functional of the input: blur twice, squash."""
    z = _box_blur(_box_blur(x.mean(axis=0).astype(np.float64)))
    return np.tanh(4.0 * (z - 0.5))[None].astype(np.float32)


def _noise_scale_map(cfg: SynthTaskConfig, x: np.ndarray) -> np.ndarray:
    if cfg.noise_scale_fn == "constant":
        b = np.full((1, cfg.height, cfg.width), cfg.noise_scale)
    else:
        local = _box_blur(x.mean(axis=0).astype(np.float64))
        b = (cfg.noise_base + cfg.noise_gain * local)[None]
    return np.clip(b, NOISE_SCALE_MIN, NOISE_SCALE_MAX).astype(np.float32)


# --------------------------------------------------------------------------
# Manifest and generation
# --------------------------------------------------------------------------

@dataclass
class SampleRecord:
    input: str
    input_crc32: int
    target: str
    target_crc32: int
    noise_scale: str
    noise_scale_crc32: int
    class_mask: str | None = None
    class_mask_crc32: int | None = None


@dataclass
class DatasetManifest:
    version: int
    kind: str
    sample_count: int
    input_channels: int
    target_channels: int
    height: int
    width: int
    generator: dict
    samples: list[SampleRecord]
    root: Path = field(default=Path("."), repr=False)

    def to_json(self) -> str:
        payload = asdict(self)
        payload.pop("root")
        return json.dumps(payload, indent=1, sort_keys=True)


def generate_synthetic(cfg: SynthTaskConfig, n: int, out_dir) -> DatasetManifest:
    """Generate n samples under ``out_dir``; bytes are a pure function of
    (cfg, n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(n):
        x = _make_input(cfg, rng)
        y_clean = _clean_target(x)
        b_true = _noise_scale_map(cfg, x)
        noise = rng.laplace(0.0, 1.0, size=y_clean.shape).astype(np.float32)
        y = (y_clean + b_true * noise).astype(np.float32)

        names = (f"{i:05d}_x.bin", f"{i:05d}_y.bin", f"{i:05d}_b.bin")
        crcs = [write_raster(out_dir / name, arr)
                for name, arr in zip(names, (x, y, b_true))]
        records.append(SampleRecord(
            input=names[0], input_crc32=crcs[0],
            target=names[1], target_crc32=crcs[1],
            noise_scale=names[2], noise_scale_crc32=crcs[2],
        ))

    manifest = DatasetManifest(
        version=1,
        kind=cfg.kind,
        sample_count=n,
        input_channels=cfg.channels,
        target_channels=1,
        height=cfg.height,
        width=cfg.width,
        generator=asdict(cfg),
        samples=records,
        root=out_dir,
    )
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(manifest.to_json())
    os.replace(tmp, out_dir / MANIFEST_NAME)
    return manifest


@dataclass
class Sample:
    x: np.ndarray
    y: np.ndarray
    class_mask: np.ndarray | None
    noise_scale: np.ndarray | None


class SyntheticDataset:
    """Loaded dataset; rasters are decoded bit-exact and CRC-verified once."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return self.manifest.sample_count

    @property
    def input_channels(self) -> int:
        return self.manifest.input_channels

    def __getitem__(self, i: int) -> Sample:
        if i in self._cache:
            return self._cache[i]
        m = self.manifest
        rec = m.samples[i]
        in_shape = (m.input_channels, m.height, m.width)
        t_shape = (m.target_channels, m.height, m.width)
        x = read_raster(m.root / rec.input, in_shape, crc32=rec.input_crc32)
        y = read_raster(m.root / rec.target, t_shape, crc32=rec.target_crc32)
        b = None
        if rec.noise_scale:
            b = read_raster(m.root / rec.noise_scale, t_shape,
                            crc32=rec.noise_scale_crc32)
        cm = None
        if rec.class_mask:
            cm = read_raster(m.root / rec.class_mask, t_shape, dtype="<i4",
                             crc32=rec.class_mask_crc32)
        sample = Sample(x=x, y=y, class_mask=cm, noise_scale=b)
        self._cache[i] = sample
        return sample

    def __iter__(self):
        for i in range(len(self)):
            s = self[i]
            yield s.x, s.y, s.class_mask


def load_dataset(manifest_path) -> SyntheticDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    payload = json.loads(manifest_path.read_text())
    if payload.get("version") != 1:
        raise DatasetError(
            f"unsupported dataset version {payload.get('version')!r} "
            f"in {manifest_path}"
        )
    samples = [SampleRecord(**rec) for rec in payload.pop("samples")]
    manifest = DatasetManifest(samples=samples, root=manifest_path.parent,
                               **payload)
    return SyntheticDataset(manifest)


# --------------------------------------------------------------------------
# Masking and spectral utilities
# --------------------------------------------------------------------------

def mask_classes(y: np.ndarray, class_map: np.ndarray, keep) -> np.ndarray:
    """Boolean mask, True where the class label is in ``keep``."""
    keep = set(keep)
    if not keep:
        raise ValueError("keep set must not be empty")
    class_map = np.asarray(class_map)
    if class_map.shape[-2:] != np.asarray(y).shape[-2:]:
        raise ValueError(
            f"class map spatial shape {class_map.shape[-2:]} does not match "
            f"target {np.asarray(y).shape[-2:]}"
        )
    return np.isin(class_map, sorted(keep))


def compute_ndvi(red: np.ndarray, infrared: np.ndarray) -> np.ndarray:
    """Normalized difference vegetation index (IR - R) / (IR + R) in [-1, 1].

    Pixels where both bands are zero map to 0 by convention.
    """
    red = np.asarray(red, dtype=np.float64)
    infrared = np.asarray(infrared, dtype=np.float64)
    if red.shape != infrared.shape:
        raise ValueError("red and infrared rasters must share a shape")
    if (red < 0).any() or (infrared < 0).any():
        raise ValueError("reflectance values must be nonnegative")
    denom = infrared + red
    with np.errstate(divide="ignore", invalid="ignore"):
        ndvi = np.where(denom > 0, (infrared - red) / denom, 0.0)
    return ndvi
