"""CycleGAN training loop: alternating generator/discriminator updates with
a historical replay buffer, epoch-linear gamma/lambda schedules, JSON-lines
loss logging, and resumable checkpoints.

Determinism contract: all stochastic choices inside the loop (batch order,
replay coin flips) derive from (seed, epoch), never from a stream that
advances across epochs, so resuming from an epoch-boundary checkpoint
reproduces the uninterrupted run bit for bit on fixed threading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from itertools import chain
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Domain, DomainDataset, ImageTensor, RangeTag, Volume, normalize, denormalize
from .errors import ConfigError, ContractError, DivergenceError
from .losses import (LossBundle, LossWeights, ScheduleParams, adversarial_loss,
                     feature_weighted_cycle_loss, identity_loss, schedule,
                     segmentation_loss, total_loss)
from .networks import (Discriminator, DiscriminatorConfig, Generator,
                       GeneratorConfig, _init_weights, _load_into,
                       _module_arrays)

SEG_DIRECTIONS = ("both", "A2B", "B2A")
STATE_KIND = "cyclegan_state"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 1
    lr_G: float = 2e-4
    lr_D: float = 2e-4
    seed: int = 0
    replay_capacity: int = 50
    schedule: ScheduleParams | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 10
    device: str = "cpu"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    max_steps_per_epoch: int | None = None
    seg_direction: str = "both"
    weight_cycle_by_d: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # lr 0 is allowed so an optimizer no-op step stays expressible
        if self.lr_G < 0 or self.lr_D < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.replay_capacity < 0:
            raise ConfigError("replay_capacity must be >= 0")
        if self.device not in ("cpu", "accelerator"):
            raise ConfigError(f"unknown device {self.device!r}")
        if self.seg_direction not in SEG_DIRECTIONS:
            raise ConfigError(f"seg_direction must be one of {SEG_DIRECTIONS}")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 1:
            raise ConfigError("max_steps_per_epoch must be >= 1")
        if self.schedule is None:
            object.__setattr__(self, "schedule",
                               ScheduleParams(total_epochs=self.epochs))
        if self.schedule.total_epochs < self.epochs:
            raise ConfigError("schedule.total_epochs must cover all epochs")


class ReplayBuffer:
    """Bounded pool of previously generated images. Each query pushes the
    incoming fakes and, once full, returns a stored one instead with
    probability 0.5 (swapping it out). capacity=0 disables pooling."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self.images)

    def query(self, batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.capacity == 0:
            return batch.detach()
        out = []
        for img in batch.detach():
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif rng.random() < 0.5:
                idx = int(rng.integers(len(self.images)))
                out.append(self.images[idx].clone())
                self.images[idx] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


@dataclass
class TrainState:
    config: TrainConfig
    g_a2b: Generator
    g_b2a: Generator
    d_a: Discriminator
    d_b: Discriminator
    opt_G: torch.optim.Adam
    opt_D: torch.optim.Adam
    replay_a: ReplayBuffer
    replay_b: ReplayBuffer
    epoch: int = 0
    step: int = 0
    replay_rng: np.random.Generator | None = None
    last_d_losses: dict = field(default_factory=dict)

    def begin_epoch(self, epoch: int) -> np.random.Generator:
        """Derives this epoch's RNG streams; returns the batch-order rng."""
        self.epoch = epoch
        self.replay_rng = np.random.default_rng([self.config.seed, epoch, 1])
        return np.random.default_rng([self.config.seed, epoch, 0])


def init_train_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    g_a2b = Generator(cfg.generator)
    g_b2a = Generator(cfg.generator)
    d_a = Discriminator(cfg.discriminator)
    d_b = Discriminator(cfg.discriminator)
    for net in (g_a2b, g_b2a, d_a, d_b):
        _init_weights(net)
    opt_G = torch.optim.Adam(chain(g_a2b.parameters(), g_b2a.parameters()),
                             lr=cfg.lr_G, betas=(0.5, 0.999))
    opt_D = torch.optim.Adam(chain(d_a.parameters(), d_b.parameters()),
                             lr=cfg.lr_D, betas=(0.5, 0.999))
    return TrainState(config=cfg, g_a2b=g_a2b, g_b2a=g_b2a, d_a=d_a, d_b=d_b,
                      opt_G=opt_G, opt_D=opt_D,
                      replay_a=ReplayBuffer(cfg.replay_capacity),
                      replay_b=ReplayBuffer(cfg.replay_capacity))


def _set_requires_grad(nets, flag: bool):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _check_finite(name: str, value: torch.Tensor, state: TrainState):
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite {name}", epoch=state.epoch,
                              step=state.step, component=name)


def train_step(state: TrainState, batch_a: torch.Tensor,
               batch_b: torch.Tensor, s,
               masks_a: torch.Tensor | None = None,
               masks_b: torch.Tensor | None = None) -> tuple[TrainState, LossBundle]:
    """One alternating update: generators first (discriminators held fixed),
    then both discriminators on real vs replayed fakes."""
    cfg = state.config
    if state.replay_rng is None:
        state.replay_rng = np.random.default_rng([cfg.seed, state.epoch, 1])
    gamma_t, lambda_t = schedule(state.epoch, cfg.schedule)
    w = cfg.weights
    zero = torch.zeros(())

    # generator update
    _set_requires_grad([state.d_a, state.d_b], False)
    state.opt_G.zero_grad()
    fake_b = state.g_a2b(batch_a)
    fake_a = state.g_b2a(batch_b)
    rec_a = state.g_b2a(fake_b)
    rec_b = state.g_a2b(fake_a)

    try:
        l_gan_G = adversarial_loss(None, state.d_b(fake_b).score, "generator",
                                   w.adversarial_kind)
        l_gan_F = adversarial_loss(None, state.d_a(fake_a).score, "generator",
                                   w.adversarial_kind)
        l_cyc_fwd = feature_weighted_cycle_loss(state.d_a, batch_a, rec_a,
                                                gamma_t, cfg.weight_cycle_by_d)
        l_cyc_bwd = feature_weighted_cycle_loss(state.d_b, batch_b, rec_b,
                                                gamma_t, cfg.weight_cycle_by_d)
        l_id = (identity_loss(state.g_a2b, state.g_b2a, batch_a, batch_b)
                if w.w_identity > 0 else zero)
        l_seg = zero
        if w.w_seg > 0:
            if cfg.seg_direction in ("both", "B2A"):
                l_seg = l_seg + segmentation_loss(s, state.g_b2a, batch_b,
                                                  masks_b, generated=fake_a)
            if cfg.seg_direction in ("both", "A2B"):
                l_seg = l_seg + segmentation_loss(s, state.g_a2b, batch_a,
                                                  masks_a, generated=fake_b)
        bundle = total_loss(l_gan_G, l_gan_F, l_cyc_fwd, l_cyc_bwd, l_id,
                            l_seg, lambda_t, w)
    except DivergenceError as e:
        raise DivergenceError(str(e), epoch=state.epoch, step=state.step,
                              component=e.component) from e
    bundle.total.backward()
    state.opt_G.step()
    _set_requires_grad([state.d_a, state.d_b], True)

    # discriminator update on real vs replayed fakes
    state.opt_D.zero_grad()
    pool_a = state.replay_a.query(fake_a, state.replay_rng)
    pool_b = state.replay_b.query(fake_b, state.replay_rng)
    l_d_a = adversarial_loss(state.d_a(batch_a).score,
                             state.d_a(pool_a).score, "discriminator",
                             w.adversarial_kind)
    l_d_b = adversarial_loss(state.d_b(batch_b).score,
                             state.d_b(pool_b).score, "discriminator",
                             w.adversarial_kind)
    _check_finite("l_d_A", l_d_a, state)
    _check_finite("l_d_B", l_d_b, state)
    (l_d_a + l_d_b).backward()
    state.opt_D.step()

    state.last_d_losses = {"l_d_A": float(l_d_a.detach()),
                           "l_d_B": float(l_d_b.detach())}
    state.step += 1
    return state, bundle.to_floats()


def _flatten_dataset(dataset: DomainDataset) -> list[tuple[np.ndarray, np.ndarray | None]]:
    pairs = []
    for vol in dataset.volumes:
        for i, scan in enumerate(vol.bscans):
            img = normalize(scan) if scan.range_tag is RangeTag.RAW_U8 else scan
            mask = vol.masks[i].labels if vol.masks is not None else None
            pairs.append((img.values, mask))
    return pairs


def _make_batch(pairs, order, start: int, bs: int):
    n = len(pairs)
    idx = [int(order[(start + j) % len(order)]) for j in range(bs)]
    imgs = np.stack([pairs[i % n][0] for i in idx])
    masks = [pairs[i % n][1] for i in idx]
    batch = torch.from_numpy(imgs).unsqueeze(1)
    if any(m is None for m in masks):
        return batch, None
    return batch, torch.from_numpy(np.stack(masks).astype(np.int64))


@dataclass
class FitResult:
    final_checkpoint: Path
    checkpoints: list[Path]
    log_path: Path
    state: TrainState


def fit(cfg: TrainConfig, dataset_a: DomainDataset, dataset_b: DomainDataset,
        s, out_dir, resume_from=None) -> FitResult:
    """Runs the full loop, appending one JSON line per iteration to
    loss_log.jsonl and checkpointing at the configured cadence plus the end.
    resume_from continues an epoch-boundary checkpoint; given the same seed
    the continued loss sequence equals the uninterrupted run's."""
    if not dataset_a.volumes or not dataset_b.volumes:
        raise ContractError("both datasets must be non-empty")
    if not getattr(s, "frozen", False) and cfg.weights.w_seg > 0:
        raise ContractError("fit requires a frozen segmenter")
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_train_state(resume_from)
        if state.config != cfg:
            raise ContractError("resume config differs from checkpoint config")
    else:
        state = init_train_state(cfg)

    seg_hash_before = _segmenter_hash(s)
    pairs_a = _flatten_dataset(dataset_a)
    pairs_b = _flatten_dataset(dataset_b)
    n_steps = math.ceil(max(len(pairs_a), len(pairs_b)) / cfg.batch_size)
    if cfg.max_steps_per_epoch is not None:
        n_steps = min(n_steps, cfg.max_steps_per_epoch)

    log_path = out_dir / "loss_log.jsonl"
    checkpoints = []
    with open(log_path, "a") as log:
        for epoch in range(state.epoch, cfg.epochs):
            order_rng = state.begin_epoch(epoch)
            order_a = order_rng.permutation(len(pairs_a))
            order_b = order_rng.permutation(len(pairs_b))
            gamma_t, lambda_t = schedule(epoch, cfg.schedule)
            for k in range(n_steps):
                batch_a, masks_a = _make_batch(pairs_a, order_a,
                                               k * cfg.batch_size, cfg.batch_size)
                batch_b, masks_b = _make_batch(pairs_b, order_b,
                                               k * cfg.batch_size, cfg.batch_size)
                state, bundle = train_step(state, batch_a, batch_b, s,
                                           masks_a, masks_b)
                row = {"epoch": epoch, "step": state.step,
                       **bundle.__dict__, **state.last_d_losses,
                       "gamma_t": gamma_t, "lambda_t": lambda_t}
                log.write(json.dumps(row) + "\n")
            state.epoch = epoch + 1
            if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                p = out_dir / f"state_epoch_{epoch + 1:03d}.octc"
                save_train_state(p, state)
                checkpoints.append(p)

    if _segmenter_hash(s) != seg_hash_before:
        raise ContractError("segmenter parameters changed during training")
    final = out_dir / "state_final.octc"
    save_train_state(final, state)
    checkpoints.append(final)
    return FitResult(final_checkpoint=final, checkpoints=checkpoints,
                     log_path=log_path, state=state)


def _segmenter_hash(s) -> str | None:
    return s.parameter_hash() if hasattr(s, "parameter_hash") else None


def _optimizer_payload(prefix: str, opt: torch.optim.Adam):
    sd = opt.state_dict()
    arrays, scalars = {}, {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}/{pid}/{key}"] = (
                    val.detach().cpu().numpy().astype(np.float32, copy=False))
            else:
                scalars.setdefault(str(pid), {})[key] = val
    groups = json.loads(json.dumps(sd["param_groups"]))
    return arrays, {"param_groups": groups, "scalars": scalars}


def _optimizer_restore(opt: torch.optim.Adam, prefix: str,
                       arrays: dict, meta: dict):
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        pid, key = name[len(prefix) + 1:].split("/", 1)
        entry = state.setdefault(int(pid), {})
        t = torch.from_numpy(np.ascontiguousarray(arr))
        entry[key] = t.reshape(()) if key == "step" and t.ndim == 0 else t
    for pid, kv in meta.get("scalars", {}).items():
        state.setdefault(int(pid), {}).update(kv)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def _config_from_meta(meta: dict) -> TrainConfig:
    c = dict(meta["config"])
    c["schedule"] = ScheduleParams(**c["schedule"])
    c["weights"] = LossWeights(**c["weights"])
    c["generator"] = GeneratorConfig(**c["generator"])
    c["discriminator"] = DiscriminatorConfig(**c["discriminator"])
    return TrainConfig(**c)


def save_train_state(path, state: TrainState):
    arrays = {}
    for name, net in (("g_a2b", state.g_a2b), ("g_b2a", state.g_b2a),
                      ("d_a", state.d_a), ("d_b", state.d_b)):
        for pname, arr in _module_arrays(net).items():
            arrays[f"net/{name}/{pname}"] = arr
    opt_meta = {}
    for prefix, opt in (("opt/G", state.opt_G), ("opt/D", state.opt_D)):
        a, m = _optimizer_payload(prefix, opt)
        arrays.update(a)
        opt_meta[prefix] = m
    for name, buf in (("a", state.replay_a), ("b", state.replay_b)):
        for i, img in enumerate(buf.images):
            arrays[f"replay/{name}/{i:04d}"] = img.numpy().astype(np.float32,
                                                                  copy=False)
    meta = {"config": asdict(state.config), "epoch": state.epoch,
            "step": state.step, "optimizers": opt_meta,
            "replay_sizes": {"a": len(state.replay_a), "b": len(state.replay_b)},
            "rng": {"scheme": "per_epoch_derivation", "seed": state.config.seed,
                    "next_epoch": state.epoch}}
    save_checkpoint(path, STATE_KIND, meta, arrays)


def load_train_state(path) -> TrainState:
    ckpt = load_checkpoint(path, expected_kind=STATE_KIND)
    cfg = _config_from_meta(ckpt.meta)
    state = init_train_state(cfg)
    for name, net in (("g_a2b", state.g_a2b), ("g_b2a", state.g_b2a),
                      ("d_a", state.d_a), ("d_b", state.d_b)):
        prefix = f"net/{name}/"
        nets_arrays = {k[len(prefix):]: v for k, v in ckpt.arrays.items()
                       if k.startswith(prefix)}
        _load_into(net, nets_arrays, f"{path}:{name}")
    for prefix, opt in (("opt/G", state.opt_G), ("opt/D", state.opt_D)):
        _optimizer_restore(opt, prefix, ckpt.arrays, ckpt.meta["optimizers"][prefix])
    for name, buf in (("a", state.replay_a), ("b", state.replay_b)):
        n = ckpt.meta["replay_sizes"][name]
        buf.images = [torch.from_numpy(
            np.ascontiguousarray(ckpt.arrays[f"replay/{name}/{i:04d}"]))
            for i in range(n)]
    state.epoch = int(ckpt.meta["epoch"])
    state.step = int(ckpt.meta["step"])
    return state


def adapt_volume(checkpoint, vol: Volume, direction: str) -> Volume:
    """Runs the direction's generator over every B-scan and returns a
    RAW_U8 volume tagged with the target domain; masks carry over."""
    if direction not in ("A2B", "B2A"):
        raise ContractError(f"direction must be A2B or B2A, got {direction!r}")
    state = checkpoint if isinstance(checkpoint, TrainState) else load_train_state(checkpoint)
    source = Domain.A if direction == "A2B" else Domain.B
    target = Domain.B if direction == "A2B" else Domain.A
    if vol.domain is not source:
        raise ContractError(f"volume domain {vol.domain.value} does not match "
                            f"direction {direction}")
    g = state.g_a2b if direction == "A2B" else state.g_b2a
    g.eval()
    out_scans = []
    with torch.no_grad():
        for scan in vol.bscans:
            img = normalize(scan) if scan.range_tag is RangeTag.RAW_U8 else scan
            out = g(torch.from_numpy(img.values)[None, None])
            values = np.clip(out.squeeze(0).squeeze(0).numpy(), -1.0, 1.0)
            out_scans.append(denormalize(
                ImageTensor(values=values.astype(np.float32),
                            range_tag=RangeTag.NORM)))
    return Volume(id=f"{vol.id}-adapted-{direction}", bscans=out_scans,
                  domain=target, masks=vol.masks)


def cycle_loss_epoch_means(log_path) -> dict[int, float]:
    """Mean of (l_cyc_fwd + l_cyc_bwd) per epoch, read back from the log."""
    sums: dict[int, list] = {}
    with open(log_path) as f:
        for line in f:
            row = json.loads(line)
            sums.setdefault(int(row["epoch"]), []).append(
                row["l_cyc_fwd"] + row["l_cyc_bwd"])
    return {e: float(np.mean(v)) for e, v in sorted(sums.items())}
