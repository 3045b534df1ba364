"""Image translation networks: a residual encoder-decoder generator with a
tanh output and an instance-normalized multi-level discriminator that
exposes both a scalar realness score (via global average pooling) and its
last feature map, which doubles as the feature probe for the
feature-weighted cycle loss.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageTensor, RangeTag
from .errors import ConfigError, ContractError, FormatError


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    base_channels: int = 64
    n_downsamples: int = 2
    n_residual_blocks: int = 9
    norm_kind: str = "instance"
    out_activation: str = "tanh"

    def __post_init__(self):
        if self.n_residual_blocks < 1:
            raise ConfigError("n_residual_blocks must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1 or self.n_downsamples < 1:
            raise ConfigError("channel and downsample counts must be >= 1")
        if self.norm_kind != "instance":
            raise ConfigError(f"unsupported norm_kind {self.norm_kind!r}")
        if self.out_activation != "tanh":
            raise ConfigError(f"unsupported out_activation {self.out_activation!r}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    n_levels: int = 4
    base_channels: int = 64

    def __post_init__(self):
        if self.n_levels < 1:
            raise ConfigError("n_levels must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be >= 1")


@dataclass
class DiscriminatorOutput:
    score: torch.Tensor      # (N,) pre-sigmoid realness logits
    features: torch.Tensor   # (N, C, H/2^(n_levels-1), W/2^(n_levels-1))


class ResidualBlock(nn.Module):
    """3x3 conv pair with reflection padding; output = inner(x) + x."""

    def __init__(self, channels: int):
        super().__init__()
        self.inner = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.inner(x)


class Generator(nn.Module):
    """7x7 ingress, stride-2 downsampling, residual trunk, transposed-conv
    upsampling, 7x7 egress with tanh. Spatial dims are preserved end to end
    for inputs divisible by 2^n_downsamples."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.in_channels, c, 7),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        ]
        for _ in range(cfg.n_downsamples):
            layers += [
                nn.Conv2d(c, c * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(c * 2),
                nn.ReLU(inplace=True),
            ]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(cfg.n_residual_blocks)]
        for _ in range(cfg.n_downsamples):
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1,
                                   output_padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        layers += [
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, cfg.in_channels, 7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        div = 2 ** self.cfg.n_downsamples
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ContractError(
                f"input dims {tuple(x.shape[-2:])} not divisible by {div}")
        return self.model(x)


class Discriminator(nn.Module):
    """Stride-2 conv levels with a stride-1 final level, so the feature map
    entering the 1-channel classification conv sits at input/2^(n_levels-1).
    The scalar score is the global average of the classification map."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = cfg.in_channels
        c_out = cfg.base_channels
        for level in range(cfg.n_levels):
            last = level == cfg.n_levels - 1
            layers.append(nn.Conv2d(c_in, c_out,
                                    kernel_size=3 if last else 4,
                                    stride=1 if last else 2, padding=1))
            if level > 0:
                layers.append(nn.InstanceNorm2d(c_out))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            c_in = c_out
            c_out = min(c_out * 2, cfg.base_channels * 8)
        self.levels = nn.Sequential(*layers)
        self.classify = nn.Conv2d(c_in, 1, 3, stride=1, padding=1)

    def forward(self, x) -> DiscriminatorOutput:
        feats = self.levels(x)
        score = self.classify(feats).mean(dim=(1, 2, 3))
        return DiscriminatorOutput(score=score, features=feats)


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_generator(cfg: GeneratorConfig, seed: int | None = None) -> Generator:
    if seed is not None:
        torch.manual_seed(seed)
    g = Generator(cfg)
    _init_weights(g)
    return g


def build_discriminator(cfg: DiscriminatorConfig,
                        seed: int | None = None) -> Discriminator:
    if seed is not None:
        torch.manual_seed(seed)
    d = Discriminator(cfg)
    _init_weights(d)
    return d


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _image_to_tensor(img: ImageTensor) -> torch.Tensor:
    if img.range_tag is not RangeTag.NORM:
        raise ContractError("network input must be NORM range")
    return torch.from_numpy(img.values).unsqueeze(0).unsqueeze(0)


def generator_forward(g: Generator, img: ImageTensor) -> ImageTensor:
    """Single-image inference path; output dims equal input dims and values
    stay in [-1, 1] by construction (tanh)."""
    g.eval()
    with torch.no_grad():
        out = g(_image_to_tensor(img))
    values = out.squeeze(0).squeeze(0).numpy().astype(np.float32, copy=False)
    # tanh guarantees the open interval; clip guards float32 rounding at +-1
    return ImageTensor(values=np.clip(values, -1.0, 1.0),
                       range_tag=RangeTag.NORM)


def discriminator_forward(d: Discriminator, img: ImageTensor) -> DiscriminatorOutput:
    d.eval()
    with torch.no_grad():
        out = d(_image_to_tensor(img))
    if not torch.isfinite(out.score).all():
        raise ContractError("discriminator produced non-finite score")
    return out


def _module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().astype(np.float32, copy=False)
            for name, p in module.state_dict().items()}


def save_network(path, module: nn.Module, cfg, kind: str, extra_meta: dict | None = None):
    meta = {"config": asdict(cfg)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, kind, meta, _module_arrays(module))


def _load_into(module: nn.Module, arrays: dict[str, np.ndarray], where: str):
    state = module.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        raise FormatError(f"{where}: parameter names mismatch "
                          f"(missing {missing}, unexpected {extra})")
    module.load_state_dict(
        {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()})


def load_generator(path) -> Generator:
    ckpt = load_checkpoint(path, expected_kind="generator")
    g = Generator(GeneratorConfig(**ckpt.meta["config"]))
    _load_into(g, ckpt.arrays, str(path))
    return g


def load_discriminator(path) -> Discriminator:
    ckpt = load_checkpoint(path, expected_kind="discriminator")
    d = Discriminator(DiscriminatorConfig(**ckpt.meta["config"]))
    _load_into(d, ckpt.arrays, str(path))
    return d
