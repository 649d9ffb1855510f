"""Gray-box adversarial attacks against the vanilla ViT classifier.

All L-inf attacks keep every iterate inside the epsilon-ball around the
clean image intersected with the [0,1] pixel box. The adversary only ever
sees the final classification head (wrapped in :class:`GrayBoxTarget`);
intermediate heads and the detector are invisible to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ImageBatch
from .errors import ConfigurationError

LINF_FAMILIES = ("fgsm", "bim", "pgd", "autopgd")
FAMILIES = LINF_FAMILIES + ("cw",)


class GrayBoxTarget:
    """The adversary's view: the deployed image->logits classifier only.

    Wraps the vanilla backbone (or any classifier module); nothing about
    intermediate heads or detection leaks through this interface. The model
    is switched to eval mode once, at construction.
    """

    def __init__(self, model: nn.Module):
        model.eval()
        self._model = model

    def logits(self, pixels: torch.Tensor) -> torch.Tensor:
        return self._model(pixels)

    @torch.no_grad()
    def predict(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.logits(pixels).argmax(dim=1)


@dataclass(frozen=True)
class AttackConfig:
    """One attack cell of an evaluation grid.

    The iterative defaults (steps=10, step_size=eps/4) and the CW learning
    rate stand in for unpublished library defaults and are recorded in every
    result manifest.
    """

    family: str
    epsilon: float | None = None  # L-inf budget; ignored by cw
    steps: int | None = None
    step_size: float | None = None  # default eps/4
    random_start: bool = True  # pgd only
    seed: int = 0
    cw_const: float = 2.0
    cw_steps: int = 4000
    cw_lr: float = 0.01

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}")
        if self.family in LINF_FAMILIES:
            if self.epsilon is None or not 0 < self.epsilon <= 1:
                raise ConfigurationError("L-inf attacks need epsilon in (0, 1]")
            if self.steps is not None:
                minimum = 2 if self.family == "autopgd" else 1
                if self.steps < minimum:
                    raise ConfigurationError(f"{self.family} needs steps >= {minimum}")
        else:
            if self.cw_const <= 0:
                raise ConfigurationError("cw_const must be positive")
            if self.cw_steps < 0:
                raise ConfigurationError("cw_steps must be >= 0")

    @property
    def norm(self) -> str:
        return "l2" if self.family == "cw" else "linf"

    def resolved(self) -> "AttackConfig":
        """Fill family-specific defaults (bim/pgd: 10 steps, autopgd: 100)."""
        cfg = self
        if cfg.family in ("bim", "pgd") and cfg.steps is None:
            cfg = replace(cfg, steps=10)
        if cfg.family == "autopgd" and cfg.steps is None:
            cfg = replace(cfg, steps=100)
        if cfg.family in ("bim", "pgd") and cfg.step_size is None:
            cfg = replace(cfg, step_size=cfg.epsilon / 4)
        return cfg

    def label(self) -> str:
        if self.family == "cw":
            return "cw"
        return f"{self.family}_eps{self.epsilon:g}"


def clip_box(pixels: torch.Tensor) -> torch.Tensor:
    """Clamp to the valid image box [0, 1]."""
    return pixels.clamp(0.0, 1.0)


def project_linf(pixels: torch.Tensor, reference: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Component-wise projection onto the L-inf ball around ``reference``."""
    if pixels.shape != reference.shape:
        raise ConfigurationError("projection needs matching shapes")
    return torch.minimum(torch.maximum(pixels, reference - epsilon), reference + epsilon)


def _require_labels(batch: ImageBatch) -> torch.Tensor:
    if batch.labels is None:
        raise ValueError("attacks need labeled batches")
    return batch.labels


def _ce_gradient(target: GrayBoxTarget, pixels: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    x = pixels.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = F.cross_entropy(target.logits(x), labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, [x])
    return grad.detach()


def _per_sample_ce(target: GrayBoxTarget, pixels: torch.Tensor, labels: torch.Tensor):
    """(loss_per_sample, gradient) of the cross-entropy at ``pixels``."""
    x = pixels.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        losses = F.cross_entropy(target.logits(x), labels, reduction="none")
        (grad,) = torch.autograd.grad(losses.sum(), [x])
    return losses.detach(), grad.detach()


def fgsm(target: GrayBoxTarget, batch: ImageBatch, epsilon: float) -> ImageBatch:
    """Single signed-gradient step of size epsilon, clipped to [0,1]."""
    labels = _require_labels(batch)
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    grad = _ce_gradient(target, batch.pixels, labels)
    adv = clip_box(batch.pixels + epsilon * grad.sign())
    return ImageBatch(adv.detach(), labels)


def _iterate_linf(
    target: GrayBoxTarget,
    batch: ImageBatch,
    start: torch.Tensor,
    epsilon: float,
    steps: int,
    step_size: float,
) -> torch.Tensor:
    labels = batch.labels
    reference = batch.pixels
    adv = start
    for _ in range(steps):
        grad = _ce_gradient(target, adv, labels)
        adv = adv + step_size * grad.sign()
        adv = clip_box(project_linf(adv, reference, epsilon))
    return adv.detach()


def bim(
    target: GrayBoxTarget,
    batch: ImageBatch,
    epsilon: float,
    steps: int = 10,
    step_size: float | None = None,
) -> ImageBatch:
    """Iterative FGSM with a per-step projection; no random start."""
    labels = _require_labels(batch)
    if steps < 1:
        raise ValueError("bim needs steps >= 1")
    if step_size is None:
        step_size = epsilon / 4
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    adv = _iterate_linf(target, batch, batch.pixels.detach().clone(), epsilon, steps, step_size)
    return ImageBatch(adv, labels)


def pgd(
    target: GrayBoxTarget,
    batch: ImageBatch,
    epsilon: float,
    steps: int = 10,
    step_size: float | None = None,
    random_start: bool = True,
    seed: int = 0,
) -> ImageBatch:
    """BIM plus a uniform random initialization inside the epsilon-ball."""
    labels = _require_labels(batch)
    if steps < 1:
        raise ValueError("pgd needs steps >= 1")
    if step_size is None:
        step_size = epsilon / 4
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if random_start:
        generator = torch.Generator().manual_seed(seed)
        noise = (
            torch.rand(batch.pixels.shape, generator=generator, dtype=batch.pixels.dtype) * 2 - 1
        ) * epsilon
        start = clip_box(batch.pixels + noise.to(batch.pixels.device))
    else:
        start = batch.pixels.detach().clone()
    adv = _iterate_linf(target, batch, start, epsilon, steps, step_size)
    return ImageBatch(adv, labels)


def auto_pgd(
    target: GrayBoxTarget,
    batch: ImageBatch,
    epsilon: float,
    steps: int = 100,
    seed: int = 0,
    return_details: bool = False,
):
    """Budget-aware PGD with momentum and step halving on stagnation.

    Follows the published schedule: initial step 2*eps, momentum 0.75,
    checkpoint period starting at 0.22*steps and shrinking by 0.03*steps to a
    floor of 0.06*steps; the step is halved (and the search restarted from the
    best iterate) when the loss increased in at most 75% of the last period's
    steps, or when the previous halving brought no improvement. Returns the
    iterate with the highest loss encountered.
    """
    labels = _require_labels(batch)
    if steps < 2:
        raise ValueError("auto_pgd needs steps >= 2")
    x = batch.pixels.detach()
    n = x.shape[0]
    view = (n,) + (1,) * (x.dim() - 1)

    generator = torch.Generator().manual_seed(seed)
    noise = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
    x_adv = clip_box(x + noise.to(x.device))

    period = max(int(0.22 * steps), 1)
    period_decrement = max(int(0.03 * steps), 1)
    period_floor = max(int(0.06 * steps), 1)

    step_size = torch.full(view, 2.0 * epsilon, dtype=x.dtype, device=x.device)
    loss, grad = _per_sample_ce(target, x_adv, labels)
    x_best = x_adv.clone()
    grad_best = grad.clone()
    loss_best = loss.clone()
    loss_best_last_check = loss_best.clone()
    reduced_last_check = torch.ones(n, dtype=torch.bool, device=x.device)
    loss_steps = torch.zeros(steps, n, device=x.device)
    step_history = []
    linf_history = []
    x_prev = x_adv.clone()
    since_checkpoint = 0

    for i in range(steps):
        step_history.append(step_size.flatten().clone())
        momentum = x_adv - x_prev
        x_prev = x_adv.clone()
        a = 0.75 if i > 0 else 1.0
        z = clip_box(project_linf(x_adv + step_size * grad.sign(), x, epsilon))
        x_adv = clip_box(project_linf(x_adv + a * (z - x_adv) + (1 - a) * momentum, x, epsilon))
        linf_history.append((x_adv - x).abs().flatten(1).max(dim=1).values)

        loss, grad = _per_sample_ce(target, x_adv, labels)
        improved = loss > loss_best
        x_best[improved] = x_adv[improved]
        grad_best[improved] = grad[improved]
        loss_best[improved] = loss[improved]
        loss_steps[i] = loss

        since_checkpoint += 1
        if since_checkpoint == period:
            # condition 1: loss rose in at most 75% of the period's steps
            rises = torch.zeros(n, device=x.device)
            for back in range(period):
                if i - back - 1 >= 0:
                    rises += (loss_steps[i - back] > loss_steps[i - back - 1]).float()
            oscillating = rises <= 0.75 * period
            # condition 2: the previous halving brought no improvement
            stalled = (~reduced_last_check) & (loss_best_last_check >= loss_best)
            halve = oscillating | stalled
            reduced_last_check = halve.clone()
            loss_best_last_check = loss_best.clone()
            if halve.any():
                step_size[halve] /= 2.0
                x_adv = torch.where(halve.view(view), x_best, x_adv)
                grad = torch.where(halve.view(view), grad_best, grad)
            period = max(period - period_decrement, period_floor)
            since_checkpoint = 0

    adv_batch = ImageBatch(x_best.detach(), labels)
    if not return_details:
        return adv_batch
    details = {
        "best_loss": loss_best.cpu().numpy(),
        "step_sizes": torch.stack(step_history).cpu().numpy(),  # (steps, B)
        "linf_history": torch.stack(linf_history).cpu().numpy(),  # (steps, B)
    }
    return adv_batch, details


def cw_l2(
    target: GrayBoxTarget,
    batch: ImageBatch,
    cw_const: float = 2.0,
    cw_steps: int = 4000,
    lr: float = 0.01,
    return_details: bool = False,
):
    """Carlini-Wagner L2 with a fixed trade-off constant.

    Minimizes ||x' - x||_2^2 + cw_const * hinge(logit margin) over the tanh
    change of variables, so the output always lies in [0,1]. Returns the
    lowest-distortion successful iterate per sample (the clean image when the
    attack never succeeds). Samples whose loss turns non-finite are aborted
    and stop updating; their count is reported in the details.
    """
    labels = _require_labels(batch)
    x = batch.pixels.detach()
    if cw_steps == 0:
        result = ImageBatch(x.clone(), labels)
        if return_details:
            zeros = np.zeros(len(batch))
            return result, {"l2": zeros, "success": np.zeros(len(batch), bool), "aborted": 0}
        return result

    # tanh-space parametrization keeps iterates strictly inside the box
    x_tanh = torch.atanh((clip_box(x) * 2 - 1) * (1 - 1e-6))
    modifier = torch.zeros_like(x, requires_grad=True)
    optimizer = torch.optim.Adam([modifier], lr=lr)
    num_classes = target.logits(x[:1]).shape[1]
    onehot = F.one_hot(labels, num_classes).bool()

    best_adv = x.clone()
    best_l2 = torch.full((len(batch),), math.inf, device=x.device)
    alive = torch.ones(len(batch), dtype=torch.bool, device=x.device)

    for _ in range(cw_steps):
        adv = (torch.tanh(x_tanh + modifier) + 1) / 2
        logits = target.logits(adv)
        true_logit = logits[onehot]
        other_logit = logits.masked_fill(onehot, -torch.inf).max(dim=1).values
        hinge = (true_logit - other_logit).clamp(min=0)
        l2 = (adv - x).flatten(1).pow(2).sum(dim=1)
        per_sample = l2 + cw_const * hinge

        finite = torch.isfinite(per_sample)
        alive = alive & finite
        if not alive.any():
            break
        with torch.no_grad():
            success = logits.argmax(dim=1) != labels
            better = alive & success & (l2 < best_l2)
            best_l2 = torch.where(better, l2.detach(), best_l2)
            best_adv[better] = adv.detach()[better]

        optimizer.zero_grad()
        (per_sample * alive).sum().backward()
        optimizer.step()

    adv_batch = ImageBatch(best_adv.detach(), labels)
    if not return_details:
        return adv_batch
    succeeded = torch.isfinite(best_l2)
    details = {
        "l2": torch.where(succeeded, best_l2, torch.zeros_like(best_l2)).sqrt().cpu().numpy(),
        "success": succeeded.cpu().numpy(),
        "aborted": int((~alive).sum()),
    }
    return adv_batch, details


@dataclass
class AttackResult:
    adv: ImageBatch
    config: AttackConfig
    success: np.ndarray  # fooled the vanilla classifier
    linf: np.ndarray
    l2: np.ndarray
    details: dict = field(default_factory=dict)


def run_attack(target: GrayBoxTarget, batch: ImageBatch, config: AttackConfig) -> AttackResult:
    """Dispatch one attack config and collect per-sample outcome stats."""
    cfg = config.resolved()
    details: dict = {}
    if cfg.family == "fgsm":
        adv = fgsm(target, batch, cfg.epsilon)
    elif cfg.family == "bim":
        adv = bim(target, batch, cfg.epsilon, cfg.steps, cfg.step_size)
    elif cfg.family == "pgd":
        adv = pgd(target, batch, cfg.epsilon, cfg.steps, cfg.step_size, cfg.random_start, cfg.seed)
    elif cfg.family == "autopgd":
        adv = auto_pgd(target, batch, cfg.epsilon, cfg.steps, cfg.seed)
    elif cfg.family == "cw":
        adv, details = cw_l2(
            target, batch, cfg.cw_const, cfg.cw_steps, cfg.cw_lr, return_details=True
        )
    else:  # pragma: no cover - guarded by AttackConfig
        raise ConfigurationError(cfg.family)
    delta = adv.pixels - batch.pixels
    success = (target.predict(adv.pixels) != batch.labels).cpu().numpy()
    return AttackResult(
        adv=adv,
        config=cfg,
        success=success,
        linf=delta.abs().flatten(1).max(dim=1).values.cpu().numpy(),
        l2=delta.flatten(1).norm(dim=1).cpu().numpy(),
        details=details,
    )
