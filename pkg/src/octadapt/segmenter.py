"""Frozen retina segmenter used both inside the segmentation-consistency
loss and for all downstream evaluation. The bundled model is a small U-Net
(background/retina); the wrapper interface is checkpoint-pluggable so an
externally trained segmenter can be substituted without touching callers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DomainDataset, ImageTensor, RangeTag, SegMask, Volume, normalize
from .errors import ConfigError, ContractError, FormatError
from .losses import ce_loss, dice_loss

PROB_TOL = 1e-5


@dataclass(frozen=True)
class MiniUNetConfig:
    depth: int = 3
    base_channels: int = 16
    classes: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.classes != 2:
            raise ConfigError("segmenter is binary (background/retina)")


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    # deliberately norm-free: normalization layers would make the segmenter
    # invariant to global intensity shifts, erasing the domain sensitivity
    # the adaptation experiments measure
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class MiniUNet(nn.Module):
    """U-Net with `depth` pooling stages and skip connections; emits
    per-class logits at input resolution."""

    def __init__(self, cfg: MiniUNetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.ingress = _double_conv(1, c)
        downs, ups = [], []
        for _ in range(cfg.depth):
            downs.append(_double_conv(c, c * 2))
            c *= 2
        for _ in range(cfg.depth):
            ups.append(nn.ModuleDict({
                "up": nn.ConvTranspose2d(c, c // 2, 2, stride=2),
                "conv": _double_conv(c, c // 2),
            }))
            c //= 2
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.pool = nn.MaxPool2d(2)
        self.head = nn.Conv2d(c, cfg.classes, 1)

    def forward(self, x):
        div = 2 ** self.cfg.depth
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ContractError(
                f"input dims {tuple(x.shape[-2:])} not divisible by {div}")
        feat = self.ingress(x)
        skips = []
        for down in self.downs:
            skips.append(feat)
            feat = down(self.pool(feat))
        for up in self.ups:
            feat = up["up"](feat)
            feat = up["conv"](torch.cat([skips.pop(), feat], dim=1))
        return self.head(feat)


class TorchSegmenter:
    """Probability-emitting wrapper around MiniUNet. Once frozen, parameters
    are immutable; the training loss path checks the flag and parameters
    carry requires_grad=False so no optimizer can touch them."""

    def __init__(self, module: MiniUNet, frozen: bool = False):
        self.module = module
        self._frozen = False
        if frozen:
            self.freeze()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "TorchSegmenter":
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self

    def probs(self, batch: torch.Tensor) -> torch.Tensor:
        """Softmax class probabilities for a (N,1,H,W) normalized batch;
        differentiable w.r.t. the input."""
        if self._frozen:
            self.module.eval()
        return torch.softmax(self.module(batch), dim=1)

    def predict_probs(self, img: ImageTensor) -> np.ndarray:
        if img.range_tag is not RangeTag.NORM:
            raise ContractError("segmenter input must be NORM range")
        self.module.eval()
        with torch.no_grad():
            p = self.probs(torch.from_numpy(img.values)[None, None])
        return p.squeeze(0).numpy()

    def predict_labels(self, img: ImageTensor) -> SegMask:
        probs = self.predict_probs(img)
        return SegMask(labels=probs.argmax(axis=0).astype(np.uint8))

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype(np.float32, copy=False).tobytes())
        return h.hexdigest()

    def save(self, path):
        arrays = {name: p.detach().cpu().numpy().astype(np.float32, copy=False)
                  for name, p in self.module.state_dict().items()}
        save_checkpoint(path, "segmenter",
                        {"config": asdict(self.module.cfg),
                         "frozen": self._frozen}, arrays)

    @classmethod
    def load(cls, path) -> "TorchSegmenter":
        ckpt = load_checkpoint(path, expected_kind="segmenter")
        module = MiniUNet(MiniUNetConfig(**ckpt.meta["config"]))
        state = module.state_dict()
        if set(state) != set(ckpt.arrays):
            raise FormatError(f"{path}: segmenter parameter names mismatch")
        for k, v in ckpt.arrays.items():
            if tuple(state[k].shape) != v.shape:
                raise FormatError(
                    f"{path}: array {k} shape {v.shape} does not match "
                    f"declared architecture {tuple(state[k].shape)}")
        module.load_state_dict(
            {k: torch.from_numpy(np.ascontiguousarray(v))
             for k, v in ckpt.arrays.items()})
        return cls(module, frozen=bool(ckpt.meta.get("frozen", True)))


def _dataset_batches(dataset: DomainDataset, batch_size: int,
                     rng: np.random.Generator):
    pairs = [(scan, vol.masks[i])
             for vol in dataset.volumes
             for i, scan in enumerate(vol.bscans)]
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        idx = order[start:start + batch_size]
        imgs = np.stack([normalize(pairs[i][0]).values for i in idx])
        masks = np.stack([pairs[i][1].labels for i in idx])
        yield (torch.from_numpy(imgs).unsqueeze(1),
               torch.from_numpy(masks.astype(np.int64)))


def train_reference_segmenter(trainset: DomainDataset,
                              cfg: MiniUNetConfig = MiniUNetConfig(),
                              epochs: int = 6, batch_size: int = 4,
                              lr: float = 2e-3, seed: int = 0) -> TorchSegmenter:
    """Trains the retina segmenter with dice+CE and returns it frozen.
    Deterministic given seed (single-threaded CPU)."""
    if any(vol.masks is None for vol in trainset.volumes):
        raise ContractError("segmenter training requires masks on every volume")
    if not trainset.volumes:
        raise ContractError("segmenter training requires a non-empty dataset")
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    module = MiniUNet(cfg)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    module.train()
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        for imgs, masks in _dataset_batches(trainset, batch_size, rng):
            opt.zero_grad()
            probs = torch.softmax(module(imgs), dim=1)
            loss = dice_loss(probs[:, 1], masks.to(probs.dtype)) + ce_loss(probs, masks)
            loss.backward()
            opt.step()
    return TorchSegmenter(module).freeze()


def segment_volume(s: TorchSegmenter, vol: Volume) -> list[SegMask]:
    """One mask per B-scan; accepts RAW_U8 (normalized internally) or NORM."""
    masks = []
    for scan in vol.bscans:
        img = normalize(scan) if scan.range_tag is RangeTag.RAW_U8 else scan
        masks.append(s.predict_labels(img))
    return masks
