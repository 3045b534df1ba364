"""Training objective: adversarial, cycle-consistency, identity, and
segmentation-consistency losses, the feature-weighted cycle blend, the
gamma/lambda epoch schedules, and the total composition

    total = L_GAN(G) + L_GAN(F)
          + lambda_t * (L_cyc_fwd + L_cyc_bwd + w_seg * L_seg)
          + w_identity * L_id

All tensor operations are pure and differentiable; scalar bookkeeping
lives in LossBundle.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DivergenceError

_DICE_EPS = 1e-7
_LOG_FLOOR = 1e-12

ADVERSARIAL_KINDS = ("log_bce", "least_squares")


@dataclass(frozen=True)
class ScheduleParams:
    gamma_start: float = 0.0
    gamma_end: float = 0.9
    lambda_start: float = 10.0
    lambda_end: float = 1.0
    total_epochs: int = 50

    def __post_init__(self):
        if not (0.0 <= self.gamma_start <= 1.0 and 0.0 <= self.gamma_end <= 1.0):
            raise ConfigError("gamma must lie in [0, 1]")
        if self.gamma_end < self.gamma_start:
            raise ConfigError("gamma schedule must be non-decreasing")
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lambda_end > self.lambda_start:
            raise ConfigError("lambda schedule must be non-increasing")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    w_identity: float = 5.0
    w_seg: float = 1.0
    adversarial_kind: str = "log_bce"

    def __post_init__(self):
        if self.w_identity < 0 or self.w_seg < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.adversarial_kind not in ADVERSARIAL_KINDS:
            raise ConfigError(
                f"adversarial_kind must be one of {ADVERSARIAL_KINDS}")


@dataclass
class LossBundle:
    l_gan_G: object
    l_gan_F: object
    l_cyc_fwd: object
    l_cyc_bwd: object
    l_id: object
    l_seg: object
    total: object

    def to_floats(self) -> "LossBundle":
        return LossBundle(**{
            k: float(v.detach()) if torch.is_tensor(v) else float(v)
            for k, v in self.__dict__.items()})


def schedule(t: int, p: ScheduleParams) -> tuple[float, float]:
    """Linear interpolation of (gamma_t, lambda_t) over epochs 0..total."""
    if not 0 <= t <= p.total_epochs:
        raise ContractError(f"epoch {t} outside [0, {p.total_epochs}]")
    frac = t / p.total_epochs
    gamma_t = p.gamma_start + (p.gamma_end - p.gamma_start) * frac
    lambda_t = p.lambda_start + (p.lambda_end - p.lambda_start) * frac
    return gamma_t, lambda_t


def _check_scores(*scores):
    for s in scores:
        if s is not None and not torch.isfinite(s).all():
            raise DivergenceError("non-finite discriminator score",
                                  component="adversarial")


def adversarial_loss(d_real_score, d_fake_score, side: str,
                     kind: str = "log_bce") -> torch.Tensor:
    """GAN objective on pre-sigmoid scores.

    log_bce discriminator side: -E[log s(real)] - E[log(1 - s(fake))]
    (the negated minimax equation, minimized). Generator side is the
    non-saturating -E[log s(fake)]. least_squares follows the standard
    raw-score targets: D minimizes ((real-1)^2 + fake^2)/2, G (fake-1)^2.
    """
    if side not in ("generator", "discriminator"):
        raise ContractError(f"unknown side {side!r}")
    if kind not in ADVERSARIAL_KINDS:
        raise ContractError(f"unknown adversarial kind {kind!r}")
    _check_scores(d_real_score, d_fake_score)
    if side == "generator":
        if kind == "log_bce":
            return F.binary_cross_entropy_with_logits(
                d_fake_score, torch.ones_like(d_fake_score))
        return ((d_fake_score - 1.0) ** 2).mean()
    if d_real_score is None:
        raise ContractError("discriminator side requires a real score")
    if kind == "log_bce":
        return (F.binary_cross_entropy_with_logits(
                    d_real_score, torch.ones_like(d_real_score))
                + F.binary_cross_entropy_with_logits(
                    d_fake_score, torch.zeros_like(d_fake_score)))
    return 0.5 * (((d_real_score - 1.0) ** 2).mean()
                  + (d_fake_score ** 2).mean())


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error for one direction."""
    if x.shape != x_reconstructed.shape:
        raise ContractError(f"dims differ: {tuple(x.shape)} vs "
                            f"{tuple(x_reconstructed.shape)}")
    return (x_reconstructed - x).abs().mean()


def identity_loss(g, f, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """||F(x) - x||_1 + ||G(y) - y||_1: each generator fed a sample already
    in its output domain should act as identity."""
    return (f(x) - x).abs().mean() + (g(y) - y).abs().mean()


def dice_loss(pred_probs: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """1 - 2|A n B| / (|A| + |B|) with soft intersection sum(p*t)."""
    if pred_probs.shape != target_mask.shape:
        raise ContractError("dice operands must share dims")
    t = target_mask.to(pred_probs.dtype)
    inter = (pred_probs * t).sum()
    sizes = pred_probs.sum() + t.sum()
    return 1.0 - (2.0 * inter + _DICE_EPS) / (sizes + _DICE_EPS)


def ce_loss(pred_probs: torch.Tensor, target) -> torch.Tensor:
    """Mean per-pixel cross entropy -sum_c t_c log(p_c) on probabilities.
    target is either hard labels (integer map) or a distribution with the
    same layout as pred_probs (class axis 1)."""
    logp = pred_probs.clamp_min(_LOG_FLOOR).log()
    if target.shape == pred_probs.shape:
        return -(target.to(pred_probs.dtype) * logp).sum(dim=1).mean()
    if target.shape != pred_probs.shape[:1] + pred_probs.shape[2:]:
        raise ContractError("ce target dims incompatible with probabilities")
    return F.nll_loss(logp, target.long())


def segmentation_loss(s, g, batch: torch.Tensor,
                      target_masks: torch.Tensor | None = None,
                      generated: torch.Tensor | None = None) -> torch.Tensor:
    """Dice + CE between the frozen segmenter's reading of the generated
    image and a target: the ground-truth mask when given, otherwise the
    segmenter's own hard labels on the ungenerated input (self-consistency).
    Gradients reach only the generator. `generated` short-circuits the
    g(batch) forward when the caller already holds it."""
    if not getattr(s, "frozen", False):
        raise ContractError("segmentation loss requires a frozen segmenter")
    probs = s.probs(g(batch) if generated is None else generated)
    if target_masks is not None:
        target = target_masks.long()
    else:
        with torch.no_grad():
            target = s.probs(batch).argmax(dim=1)
    retina = probs[:, 1]
    return dice_loss(retina, target.to(retina.dtype)) + ce_loss(probs, target)


def feature_weighted_cycle_loss(d_probe, x: torch.Tensor,
                                x_rec: torch.Tensor, gamma_t: float,
                                weight_by_d: bool = False) -> torch.Tensor:
    """Per-sample convex blend gamma*||f_D(rec) - f_D(x)||_1 +
    (1-gamma)*||rec - x||_1, optionally multiplied by the discriminator's
    sigmoid realness of the genuine sample (detached: the weighting never
    trains the discriminator)."""
    if not 0.0 <= gamma_t <= 1.0:
        raise ContractError(f"gamma_t {gamma_t} outside [0, 1]")
    if x.shape != x_rec.shape:
        raise ContractError("cycle operands must share dims")
    out_x = d_probe(x)
    out_rec = d_probe(x_rec)
    dims = tuple(range(1, x.dim()))
    pixel = (x_rec - x).abs().mean(dim=dims)
    feat = (out_rec.features - out_x.features).abs().mean(
        dim=tuple(range(1, out_x.features.dim())))
    blend = gamma_t * feat + (1.0 - gamma_t) * pixel
    if weight_by_d:
        blend = blend * torch.sigmoid(out_x.score).detach()
    return blend.mean()


def total_loss(l_gan_G, l_gan_F, l_cyc_fwd, l_cyc_bwd, l_id, l_seg,
               lambda_t: float, weights: LossWeights) -> LossBundle:
    """Compose the bundle; total stays differentiable when fed tensors."""
    total = (l_gan_G + l_gan_F
             + lambda_t * (l_cyc_fwd + l_cyc_bwd + weights.w_seg * l_seg)
             + weights.w_identity * l_id)
    bundle = LossBundle(l_gan_G=l_gan_G, l_gan_F=l_gan_F,
                        l_cyc_fwd=l_cyc_fwd, l_cyc_bwd=l_cyc_bwd,
                        l_id=l_id, l_seg=l_seg, total=total)
    for name, value in bundle.__dict__.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if v != v or v in (float("inf"), float("-inf")):
            raise DivergenceError(f"non-finite loss component {name}",
                                  component=name)
    return bundle
