"""Contrastive objectives and unsupervised encoder pretraining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .augment import contrastive_view
from .encoder import EncoderSpec, SmallResNet, save_checkpoint


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 250
    lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _check_unit_rows(z: torch.Tensor, name: str):
    norms = z.norm(dim=1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-3):
        raise ValueError(f"{name} rows must be L2-normalized")


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Instance-discrimination loss over 2N anchors.

    For each anchor the positive is the other view of the same sample and the
    candidates are the remaining 2N-1 embeddings.
    """
    if z1.shape != z2.shape:
        raise ValueError("view batches must have the same shape")
    n = z1.shape[0]
    if n < 2:
        raise ValueError("nt_xent needs at least 2 samples (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    _check_unit_rows(z1, "z1")
    _check_unit_rows(z2, "z2")

    z = torch.cat([z1, z2], dim=0)
    sim = z @ z.t() / temperature
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    pos_index = torch.arange(2 * n, device=z.device).roll(n)
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    return -log_prob[torch.arange(2 * n, device=z.device), pos_index].mean()


def icont_loss(
    z1: torch.Tensor,
    z2: torch.Tensor,
    labels: torch.Tensor,
    p_scores: torch.Tensor,
    temperature: float = 0.1,
) -> torch.Tensor:
    """Label-aware contrastive loss gated per sample by p in [0, 1].

    Each anchor's positive mask is the convex blend of its instance mask
    (weight 1-p) and the same-label mask (weight p), normalized per anchor,
    inside the same 2N-anchor softmax as nt_xent. With p = 0 everywhere this
    reduces exactly to nt_xent; with p = 1 all same-label views are positives.
    """
    if z1.shape != z2.shape:
        raise ValueError("view batches must have the same shape")
    n = z1.shape[0]
    if n < 2:
        raise ValueError("icont_loss needs a batch of at least 2 samples")
    p = torch.as_tensor(p_scores, dtype=z1.dtype, device=z1.device).reshape(-1)
    if p.shape[0] != n:
        raise ValueError("p_scores length must match the batch")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p_scores must lie in [0, 1]")
    _check_unit_rows(z1, "z1")
    _check_unit_rows(z2, "z2")

    z = torch.cat([z1, z2], dim=0)
    lab = torch.as_tensor(labels, device=z.device).reshape(-1)
    lab2 = torch.cat([lab, lab], dim=0)
    p2 = torch.cat([p, p], dim=0)
    m = 2 * n

    eye = torch.eye(m, dtype=torch.bool, device=z.device)
    inst = torch.zeros(m, m, dtype=z.dtype, device=z.device)
    idx = torch.arange(m, device=z.device)
    inst[idx, idx.roll(n)] = 1.0
    same = (lab2[:, None] == lab2[None, :]).to(z.dtype)
    same = same.masked_fill(eye, 0.0)

    weights = (1.0 - p2)[:, None] * inst + p2[:, None] * same
    weights = weights / weights.sum(dim=1, keepdim=True)

    sim = z @ z.t() / temperature
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(eye, 0.0)
    return -(weights * log_prob).sum(dim=1).mean()


def pretrain(
    images: np.ndarray,
    spec: EncoderSpec,
    config: PretrainConfig,
    out_path=None,
    device: str = "cpu",
    log_fn=None,
) -> SmallResNet:
    """Unsupervised two-view contrastive pretraining; labels are never read.

    With epochs = 0 the randomly initialized encoder is returned (checkpoint
    flagged pretrained=False).
    """
    torch.manual_seed(config.seed)
    model = SmallResNet(spec).to(device)
    history: list[float] = []
    if config.epochs > 0:
        opt = torch.optim.SGD(
            model.parameters(),
            lr=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
        rng = np.random.default_rng(config.seed)
        n = len(images)
        model.train()
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            epoch_loss, n_batches = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                if len(idx) < 2:
                    continue
                batch = images[idx]
                v1 = np.stack([contrastive_view(img, rng) for img in batch])
                v2 = np.stack([contrastive_view(img, rng) for img in batch])
                x1 = torch.from_numpy(v1).permute(0, 3, 1, 2).contiguous().to(device)
                x2 = torch.from_numpy(v2).permute(0, 3, 1, 2).contiguous().to(device)
                z1 = model.project(x1)
                z2 = model.project(x2)
                healthy = (
                    torch.isfinite(z1).all()
                    and torch.isfinite(z2).all()
                    and bool((z1.norm(dim=1) > 0.5).all())
                    and bool((z2.norm(dim=1) > 0.5).all())
                )
                if not healthy:
                    raise RuntimeError(
                        f"pretraining diverged at epoch {epoch}: degenerate embeddings"
                    )
                loss = nt_xent(z1, z2, spec.temperature)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"pretraining diverged at epoch {epoch}: loss={loss.item()}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += loss.item()
                n_batches += 1
            sched.step()
            history.append(epoch_loss / max(n_batches, 1))
            if log_fn:
                log_fn(f"pretrain epoch {epoch}: loss {history[-1]:.4f}")
    model.loss_history = history
    if out_path is not None:
        save_checkpoint(
            out_path,
            model,
            seed=config.seed,
            epochs_trained=config.epochs,
            pretrained=config.epochs > 0,
            loss_history=history,
        )
    return model
