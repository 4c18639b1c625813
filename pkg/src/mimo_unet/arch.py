"""MIMO U-Net: m independent subnetworks sharing one U-Net core.

Each subnetwork owns a thin encoder (the first full-resolution block of a
classic U-Net, with the channel budget split m ways) and a thin decoder
(an upsampling path of constant per-subnetwork width plus two prediction
heads).  The shared core is the downsampling pyramid: it fuses the stacked
encoder features into a single bottleneck representation that every decoder
consumes.  Skip connections are strictly private: decoder i sees only
pooled copies of encoder i's features, so low-level detail of one
subnetwork never leaks into another.

Because the heavy pyramid is shared and the per-subnetwork parts either
have m-independent total size or shrink like 1/m, the total parameter
count stays within a couple percent across m in {1..4} at fixed
base_channels.

One forward pass evaluates all subnetworks: encode each input, run the
core exactly once on the stacked features, decode per subnetwork.
"""

from __future__ import annotations

import binascii
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ArchConfig",
    "SubnetworkOutput",
    "MimoUNet",
    "build_model",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "read_checkpoint_manifest",
]

_ACTIVATIONS = ("relu", "leaky_relu")


@dataclass(frozen=True)
class ArchConfig:
    """Shape of a MIMO U-Net.

    ``base_channels`` is the joint channel budget of the first layer; each
    subnetwork encoder gets ``base_channels // num_subnetworks`` of it and
    leftover channels are dropped.  ``depth`` counts the down/up-sampling
    levels; input spatial dims must be divisible by 2**depth.  depth=0 is a
    degenerate no-pooling variant kept for hand-countable tests.
    ``dropout_p`` > 0 inserts spatial dropout after every block, mirroring
    the architecture for the MC-dropout comparator.
    """

    in_channels: int
    base_channels: int
    depth: int = 4
    num_subnetworks: int = 2
    activation: str = "relu"
    seed: int = 0
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.num_subnetworks < 1:
            raise ValueError("num_subnetworks must be >= 1")
        if self.base_channels < self.num_subnetworks:
            raise ValueError(
                f"base_channels ({self.base_channels}) must be >= "
                f"num_subnetworks ({self.num_subnetworks})"
            )
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def subnet_channels(self) -> int:
        return self.base_channels // self.num_subnetworks

    @property
    def core_in_channels(self) -> int:
        return self.num_subnetworks * self.subnet_channels


@dataclass
class SubnetworkOutput:
    """Raw heads of one subnetwork: f1 (location) and f2 (log-scale)."""

    f1: torch.Tensor
    f2: torch.Tensor


def _activation(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.LeakyReLU()


def _block(in_ch: int, out_ch: int, act: str, dropout_p: float) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        _activation(act),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        _activation(act),
    ]
    if dropout_p > 0:
        layers.append(nn.Dropout2d(dropout_p))
    return nn.Sequential(*layers)


class _Core(nn.Module):
    """Shared downsampling pyramid; counts its own invocations."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        ch = cfg.core_in_channels
        levels = []
        if cfg.depth == 0:
            levels.append(_block(ch, ch, cfg.activation, cfg.dropout_p))
            self.out_channels = ch
        else:
            for _ in range(cfg.depth):
                levels.append(_block(ch, 2 * ch, cfg.activation, cfg.dropout_p))
                ch *= 2
            self.out_channels = ch
        self.levels = nn.ModuleList(levels)
        self.pool = cfg.depth > 0
        self.calls = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        for level in self.levels:
            if self.pool:
                x = F.max_pool2d(x, 2)
            x = level(x)
        return x


class _Decoder(nn.Module):
    """Thin per-subnetwork upsampling path plus the two 1x1 heads."""

    def __init__(self, cfg: ArchConfig, core_out: int):
        super().__init__()
        c = cfg.subnet_channels
        self.depth = cfg.depth
        self.act = _activation(cfg.activation)
        self.reduce = nn.Conv2d(core_out, c, 3, padding=1)
        self.up_convs = nn.ModuleList(
            [nn.Conv2d(2 * c, c, 3, padding=1) for _ in range(cfg.depth)]
        )
        self.drop = nn.Dropout2d(cfg.dropout_p) if cfg.dropout_p > 0 else None
        self.head_f1 = nn.Conv2d(c, 1, 1)
        self.head_f2 = nn.Conv2d(c, 1, 1)

    def forward(self, g: torch.Tensor, skips) -> SubnetworkOutput:
        if len(skips) != self.depth:
            raise ValueError(
                f"expected {self.depth} skip levels, got {len(skips)}"
            )
        u = self.act(self.reduce(g))
        # skips[l] lives at resolution H / 2**l; consume deepest first
        for level in range(self.depth - 1, -1, -1):
            u = F.interpolate(u, scale_factor=2, mode="bilinear",
                              align_corners=False)
            skip = skips[level]
            if skip.shape[-2:] != u.shape[-2:]:
                raise ValueError(
                    f"skip level {level} has spatial size "
                    f"{tuple(skip.shape[-2:])}, expected {tuple(u.shape[-2:])}"
                )
            u = self.act(self.up_convs[level](torch.cat([u, skip], dim=1)))
            if self.drop is not None:
                u = self.drop(u)
        return SubnetworkOutput(f1=self.head_f1(u), f2=self.head_f2(u))


def _ensure_batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), False
    if x.dim() == 4:
        return x, True
    raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got dim {x.dim()}")


class MimoUNet(nn.Module):
    """m encoder/decoder pairs around one shared core.

    Evaluation is a pure function of (parameters, input); the only stateful
    bit is the core call counter used by the single-pass instrumentation.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.subnet_channels
        self.encoders = nn.ModuleList(
            _block(cfg.in_channels, c, cfg.activation, cfg.dropout_p)
            for _ in range(cfg.num_subnetworks)
        )
        self.core = _Core(cfg)
        self.decoders = nn.ModuleList(
            _Decoder(cfg, self.core.out_channels)
            for _ in range(cfg.num_subnetworks)
        )

    @property
    def num_subnetworks(self) -> int:
        return self.cfg.num_subnetworks

    def _check_spatial(self, x: torch.Tensor):
        if x.shape[-3] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, "
                f"got {x.shape[-3]}"
            )
        div = 2 ** self.cfg.depth
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} must be divisible by "
                f"2**depth = {div}"
            )

    def encode(self, i: int, x: torch.Tensor):
        """Run encoder i; returns (h, skips) with one skip per level.

        The skip at level l is h average-pooled down to resolution H / 2**l,
        kept private to decoder i.
        """
        self._check_spatial(x)
        xb, batched = _ensure_batched(x)
        h = self.encoders[i](xb)
        skips = [h]
        for _ in range(1, self.cfg.depth):
            skips.append(F.avg_pool2d(skips[-1], 2))
        skips = skips[: self.cfg.depth]
        if not batched:
            return h.squeeze(0), [s.squeeze(0) for s in skips]
        return h, skips

    def fuse_core(self, hs) -> torch.Tensor:
        """Stack the encoder features channel-wise and run the shared core."""
        hs = [_ensure_batched(h) for h in hs]
        batched = hs[0][1]
        stacked = torch.cat([h for h, _ in hs], dim=1)
        if stacked.shape[1] != self.cfg.core_in_channels:
            raise ValueError(
                f"core expects {self.cfg.core_in_channels} channels, "
                f"got {stacked.shape[1]}"
            )
        g = self.core(stacked)
        return g if batched else g.squeeze(0)

    def decode(self, i: int, g: torch.Tensor, skips) -> SubnetworkOutput:
        gb, batched = _ensure_batched(g)
        sb = [_ensure_batched(s)[0] for s in skips]
        out = self.decoders[i](gb, sb)
        if not batched:
            return SubnetworkOutput(f1=out.f1.squeeze(0), f2=out.f2.squeeze(0))
        return out

    def forward(self, xs) -> list[SubnetworkOutput]:
        if len(xs) != self.num_subnetworks:
            raise ValueError(
                f"expected {self.num_subnetworks} inputs, got {len(xs)}"
            )
        shapes = {tuple(x.shape) for x in xs}
        if len(shapes) != 1:
            raise ValueError(f"inputs must share one shape, got {shapes}")
        encoded = [self.encode(i, x) for i, x in enumerate(xs)]
        g = self.fuse_core([h for h, _ in encoded])
        return [
            self.decode(i, g, skips) for i, (_, skips) in enumerate(encoded)
        ]


def _init_fan_in_uniform(model: nn.Module, gen: torch.Generator):
    # uniform in +-1/sqrt(fan_in) for weights and biases, drawn in module
    # order so the layout alone fixes the draw sequence
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = 1.0 / fan_in**0.5
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)


def build_model(cfg: ArchConfig) -> MimoUNet:
    """Construct a MimoUNet with deterministic seeded initialization."""
    model = MimoUNet(cfg)
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    _init_fan_in_uniform(model, gen)
    return model


def param_count(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --------------------------------------------------------------------------
# Checkpoint container: manifest.json plus one raw little-endian float32
# blob per tensor, shapes recorded in the manifest.
# --------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(model: MimoUNet, directory, kind: str = "mimo",
                    extra: dict | None = None) -> str:
    """Write the model into ``directory``; returns the content hash."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = []
    for idx, (name, tensor) in enumerate(sorted(model.state_dict().items())):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        rel = f"tensors/{idx:04d}.bin"
        blob = arr.tobytes(order="C")
        (directory / rel).write_bytes(blob)
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "file": rel,
            "crc32": binascii.crc32(blob),
        })
    manifest = {
        "version": 1,
        "kind": kind,
        "arch": asdict(model.cfg),
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    payload = json.dumps(manifest, indent=1, sort_keys=True)
    tmp = directory / (CHECKPOINT_MANIFEST + ".tmp")
    tmp.write_text(payload)
    tmp.replace(directory / CHECKPOINT_MANIFEST)
    return checkpoint_hash(directory)


def read_checkpoint_manifest(directory) -> dict:
    path = Path(directory) / CHECKPOINT_MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory) -> MimoUNet:
    """Rebuild a model from a checkpoint directory, verifying every blob."""
    directory = Path(directory)
    manifest = read_checkpoint_manifest(directory)
    cfg = ArchConfig(**manifest["arch"])
    model = MimoUNet(cfg)
    state = {}
    for entry in manifest["tensors"]:
        path = directory / entry["file"]
        blob = path.read_bytes()
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * 4 if entry["shape"] else 4
        if len(blob) != expected:
            raise ValueError(
                f"tensor blob {path} has {len(blob)} bytes, expected {expected}"
            )
        if binascii.crc32(blob) != entry["crc32"]:
            raise ValueError(f"checksum mismatch in tensor blob {path}")
        arr = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model


def checkpoint_hash(directory) -> str:
    """sha256 over the manifest and all tensor blobs, in manifest order."""
    directory = Path(directory)
    manifest_bytes = (directory / CHECKPOINT_MANIFEST).read_bytes()
    digest = hashlib.sha256(manifest_bytes)
    for entry in json.loads(manifest_bytes)["tensors"]:
        digest.update((directory / entry["file"]).read_bytes())
    return digest.hexdigest()
