"""Noise-robust training loop with per-epoch alternating detection.

Per epoch: (a) an evaluation pass over the train set on seeded weak views
yields per-sample losses (-> small-loss scores), teacher pseudo-labels,
live features (-> distance scores) and second-view predictions (-> pseudo
imputation confidence); (b) the linear separator is refit from the binarized
small-loss scores on frozen pretrained block features; (c) the scheduler
picks the active detection; (d) one optimization pass of the three-term
objective runs; (e) detection metrics against the hidden oracle are logged.
The oracle reaches only the metrics logger, never a training input.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import augment
from .augment import AugmentPolicy, mixup_batch, strong_view, weak_view, contrastive_view
from .contrastive import icont_loss
from .detectors import (
    CleanScores,
    Origin,
    auroc,
    fit_linear_separator,
    apply_separator,
    knn_clean_scores,
    pearson_corr,
    recall_clean,
    recall_noise,
    small_loss_clean_scores,
    _gmm_low_posterior,
)
from .data import DatasetManifest
from .encoder import SmallResNet
from .features import FeatureMatrix, extract_features
from .schedule import CombinationStrategy, StrategyKind, active_scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    strategy: CombinationStrategy = field(
        default_factory=lambda: CombinationStrategy(StrategyKind.ALTERNATE_MOD2)
    )
    w_block_index: int = 1
    live_w_features: bool = False  # refit W on evolving features (ablation)
    sup_weight: float = 1.0
    ssl_weight: float = 1.0
    cont_weight: float = 1.0
    ssl_weight_mode: str = "noisy_gated"  # "noisy_gated": (1-s)*p, "p_only": p
    mixup_alpha: float = 1.0
    use_mixup: bool = True
    cont_temperature: float = 0.1
    randaugment_n: int = 1
    randaugment_m: int = 6
    knn_k: int = 10
    threshold: float = 0.5
    gmm_min_separation: float = 0.1
    seed: int = 0
    device: str = "cpu"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < epochs")
        for name in ("sup_weight", "ssl_weight", "cont_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ssl_weight_mode not in ("noisy_gated", "p_only"):
            raise ValueError(f"unknown ssl_weight_mode: {self.ssl_weight_mode!r}")
        self.strategy.validate_for(self.epochs)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def soft_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    return -(target_probs * F.log_softmax(logits, dim=1)).sum(dim=1)


def loss_sup(logits: torch.Tensor, target_probs: torch.Tensor, clean_weights: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of s_i * CE(y_i, softmax(logits_i))."""
    w = torch.as_tensor(clean_weights, dtype=logits.dtype, device=logits.device).reshape(-1)
    return (w * soft_cross_entropy(logits, target_probs)).mean()


def loss_ssl(
    teacher_probs: torch.Tensor,
    student_logits: torch.Tensor,
    p_scores: torch.Tensor,
    noisy_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean of p_i * CE(teacher_i, softmax(student_i)); the teacher input is
    gradient-blocked so only the student branch trains."""
    teacher = teacher_probs.detach()
    p = torch.as_tensor(p_scores, dtype=student_logits.dtype, device=student_logits.device).reshape(-1)
    w = p
    if noisy_weights is not None:
        w = w * torch.as_tensor(noisy_weights, dtype=w.dtype, device=w.device).reshape(-1)
    return (w * soft_cross_entropy(student_logits, teacher)).mean()


def guess_label(model: SmallResNet, weak_images: torch.Tensor) -> torch.Tensor:
    """Teacher pass: evaluation-mode softmax with gradients blocked."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = F.softmax(model(weak_images), dim=1)
    if was_training:
        model.train()
    return probs


def pseudo_loss_scores(teacher_probs, student_probs, ids=None, tol: float = 1e-6, max_iter: int = 200) -> CleanScores:
    """Imputation-confidence scores: cross-entropy between each pseudo-label
    and the student prediction, then low-mode mixture posterior."""
    t = np.asarray(teacher_probs, dtype=np.float64)
    s = np.asarray(student_probs, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError("teacher/student batches must align")
    pseudo_losses = -(t * np.log(np.clip(s, 1e-12, None))).sum(axis=1)
    if ids is None:
        ids = np.arange(len(pseudo_losses)).astype(str)
    values, degenerate, _ = _gmm_low_posterior(pseudo_losses, tol=tol, max_iter=max_iter)
    if degenerate:
        logger.warning("pseudo-loss mixture degenerate; treating all imputations as trustworthy")
    return CleanScores(np.asarray(ids), values, Origin.SMALL_LOSS)


def total_loss(
    sup: torch.Tensor,
    ssl: torch.Tensor,
    cont: torch.Tensor,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> torch.Tensor:
    out = weights[0] * sup + weights[1] * ssl + weights[2] * cont
    if not torch.isfinite(out):
        raise RuntimeError(
            f"non-finite training loss: sup={float(sup)}, ssl={float(ssl)}, cont={float(cont)}"
        )
    return out


# ---------------------------------------------------------------------------
# epoch building blocks (shared with the co-training loop)
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _to_torch(batch_hwc: np.ndarray, device) -> torch.Tensor:
    # conv backward on permuted (non-contiguous) views segfaults on some CPU
    # torch builds; always hand the network a contiguous NCHW tensor
    return torch.from_numpy(np.ascontiguousarray(batch_hwc)).permute(0, 3, 1, 2).contiguous().to(device)


def detector_pass(model, images, labels, ids, config: TrainConfig, epoch: int):
    """No-gradient pass on two seeded weak views of every training sample."""
    rng = np.random.default_rng([config.seed, 101, epoch])
    n = len(images)
    losses = np.empty(n, dtype=np.float64)
    teacher = np.empty((n, model.classifier.out_features), dtype=np.float64)
    student2 = np.empty_like(teacher)
    penult = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, n, config.batch_size):
            idx = np.arange(start, min(start + config.batch_size, n))
            v1 = np.stack([weak_view(images[i], rng) for i in idx])
            v2 = np.stack([weak_view(images[i], rng) for i in idx])
            x1 = _to_torch(v1, config.device)
            x2 = _to_torch(v2, config.device)
            logits1, _, pooled1 = model.logits_projection_features(x1)
            logits2 = model(x2)
            y = torch.from_numpy(labels[idx]).to(config.device)
            losses[idx] = F.cross_entropy(logits1, y, reduction="none").cpu().numpy()
            teacher[idx] = F.softmax(logits1, dim=1).cpu().numpy()
            student2[idx] = F.softmax(logits2, dim=1).cpu().numpy()
            penult.append(pooled1.cpu().numpy())
    if was_training:
        model.train()
    penult = np.concatenate(penult, axis=0)
    norms = np.linalg.norm(penult, axis=1, keepdims=True)
    penult = penult / np.maximum(norms, 1e-12)
    z_values, z_uninformative, z_separation = _gmm_low_posterior(
        losses, min_separation=config.gmm_min_separation
    )
    z = CleanScores(ids, z_values, Origin.SMALL_LOSS)
    knn = knn_clean_scores(penult.astype(np.float32), labels, k=min(config.knn_k, n - 1), ids=ids)
    return {
        "losses": losses,
        "teacher_probs": teacher,
        "student_probs2": student2,
        "penult": penult,
        "z": z,
        "knn": knn,
        "z_separation": z_separation,
        "z_uninformative": z_uninformative,
    }


def refit_separator(w_features: FeatureMatrix, z: CleanScores, config: TrainConfig, epoch: int):
    """Binarize Z into a trusted subset and refit the separator; returns
    (scores, fitted) where fitted is False when the subset is single-class."""
    targets = z.binarize(config.threshold)
    if targets.all() or not targets.any():
        return CleanScores(z.ids, np.ones(len(z)), Origin.LINEAR_SEP), False
    sep = fit_linear_separator(
        w_features,
        z,
        threshold=config.threshold,
        meta={"block_index": w_features.block_index, "source": z.origin.value, "epoch": epoch},
    )
    return apply_separator(sep, w_features), True


def optimize_epoch(
    model,
    optimizer,
    images,
    labels,
    targets_onehot,
    active_values: np.ndarray,
    p_values: np.ndarray,
    config: TrainConfig,
    epoch: int,
    ssl_on: bool,
    teacher_probs: np.ndarray | None = None,
    strong_policy: AugmentPolicy | None = None,
) -> dict:
    """One optimization pass of the three-term objective over shuffled batches.

    teacher_probs is the per-sample imputation target (N x C), normally the
    detector pass's evaluation-mode softmax snapshot; it enters the SSL loss
    as a constant (stop-gradient).
    """
    strong_policy = strong_policy or AugmentPolicy(
        kind=augment.STRONG, randaugment_n=config.randaugment_n, randaugment_m=config.randaugment_m
    )
    rng = np.random.default_rng([config.seed, 211, epoch])
    n = len(images)
    order = rng.permutation(n)
    model.train()
    sums = {"sup": 0.0, "ssl": 0.0, "cont": 0.0, "total": 0.0}
    n_batches = 0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        if len(idx) < 2:
            continue
        batch = images[idx]
        weak = np.stack([weak_view(img, rng) for img in batch])
        strong = np.stack([strong_view(img, strong_policy, rng) for img in batch])
        view1 = np.stack([contrastive_view(img, rng) for img in batch])

        s = torch.from_numpy(active_values[idx]).float().to(config.device)
        p = torch.from_numpy(p_values[idx]).float().to(config.device)

        if config.use_mixup:
            mixed, mixed_t, _ = mixup_batch(weak, targets_onehot[idx], config.mixup_alpha, rng)
            x_sup = _to_torch(mixed, config.device)
            t_sup = torch.from_numpy(mixed_t).to(config.device)
        else:
            x_sup = _to_torch(weak, config.device)
            t_sup = torch.from_numpy(targets_onehot[idx]).to(config.device)
        l_sup = loss_sup(model(x_sup), t_sup, s)

        x_strong = _to_torch(strong, config.device)
        logits_strong, proj_strong = model.logits_and_projection(x_strong)
        if ssl_on and config.ssl_weight > 0 and teacher_probs is not None:
            teacher = torch.from_numpy(teacher_probs[idx]).float().to(config.device)
            noisy_w = (1.0 - s) if config.ssl_weight_mode == "noisy_gated" else None
            l_ssl = loss_ssl(teacher, logits_strong, p, noisy_w)
        else:
            l_ssl = torch.zeros((), device=config.device)

        if config.cont_weight > 0:
            proj1 = model.project(_to_torch(view1, config.device))
            l_cont = icont_loss(
                proj1, proj_strong, torch.from_numpy(labels[idx]), p, config.cont_temperature
            )
        else:
            l_cont = torch.zeros((), device=config.device)

        loss = total_loss(l_sup, l_ssl, l_cont, (config.sup_weight, config.ssl_weight, config.cont_weight))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        sums["sup"] += l_sup.item()
        sums["ssl"] += l_ssl.item()
        sums["cont"] += l_cont.item()
        sums["total"] += loss.item()
        n_batches += 1
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


def evaluate_accuracy(model, images, labels, batch_size: int = 256, device: str = "cpu") -> float:
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _to_torch(images[start : start + batch_size], device)
            pred = model(x).argmax(dim=1).cpu().numpy()
            correct += int((pred == labels[start : start + batch_size]).sum())
    if was_training:
        model.train()
    return 100.0 * correct / max(len(images), 1)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _safe_auroc(scores, flags):
    try:
        return auroc(scores, flags)
    except ValueError:
        return None


def _safe_pearson(a, b):
    try:
        return pearson_corr(a, b)
    except ValueError:
        return None


def detection_metrics(
    epoch: int,
    active_name: str,
    z: CleanScores,
    w: CleanScores | None,
    knn: CleanScores,
    active: CleanScores,
    oracle: np.ndarray,
    threshold: float,
) -> dict:
    """Everything the per-epoch log needs to rebuild correlation and
    missed-sample retrieval plots. Uses the oracle; never feeds training."""
    out = {
        "epoch": epoch,
        "active_detector": active_name,
        "auroc_z": _safe_auroc(z, oracle),
        "auroc_w": _safe_auroc(w, oracle) if w is not None else None,
        "auroc_knn": _safe_auroc(knn, oracle),
        "auroc_active": _safe_auroc(active, oracle),
        "pearson_z_w": _safe_pearson(z, w) if w is not None else None,
        "pearson_z_knn": _safe_pearson(z, knn),
        "pearson_w_knn": _safe_pearson(w, knn) if w is not None else None,
    }
    declared = active.binarize(threshold)
    both = oracle.any() and not oracle.all()
    out["recall_clean"] = recall_clean(declared, oracle) if both else None
    out["recall_noise"] = recall_noise(declared, oracle) if both else None
    if w is not None:
        w_clean = w.binarize(threshold)
        z_clean = z.binarize(threshold)
        knn_clean = knn.binarize(threshold)
        missed = oracle & ~w_clean  # clean samples the separator misses
        out["missed_clean_by_w"] = int(missed.sum())
        out["missed_w_retrieved_by_z"] = int((missed & z_clean).sum())
        out["missed_w_retrieved_by_knn"] = int((missed & knn_clean).sum())
    return out


# ---------------------------------------------------------------------------
# single-network training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    final_accuracy: float
    best_accuracy: float
    best_epoch: int
    final_state: dict
    best_state: dict
    scores: dict
    model: SmallResNet


def with_classifier(encoder: SmallResNet, n_classes: int) -> SmallResNet:
    """Copy encoder weights into a model that has a (fresh) classifier head."""
    model = SmallResNet(encoder.spec, num_classes=n_classes)
    model.load_state_dict(encoder.state_dict(), strict=False)
    return model


def _cpu_state(model) -> dict:
    return {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}


def train(
    manifest: DatasetManifest,
    images: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    encoder: SmallResNet,
    config: TrainConfig,
    out_dir=None,
    config_hash: str = "",
    log_fn=None,
) -> TrainResult:
    """Full noise-robust training; deterministic under config.seed."""
    torch.manual_seed(config.seed)
    labels = manifest.noisy_labels
    ids = np.asarray(manifest.image_ids)
    oracle = manifest.oracle_is_clean
    n_classes = len(manifest.class_names)
    model = with_classifier(encoder, n_classes).to(config.device)

    # frozen pretrained features for the separator, extracted once
    frozen = copy.deepcopy(encoder)
    w_features = extract_features(
        frozen, images, ids=ids, block_index=config.w_block_index, device=config.device
    )

    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    sched_rng = np.random.default_rng([config.strategy.seed, config.seed, 307])
    targets_onehot = one_hot(labels, n_classes)

    history: list[dict] = []
    best_acc, best_epoch = -1.0, -1
    best_state = _cpu_state(model)
    scores_out: dict = {}
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / f"metrics_{config_hash or 'run'}.jsonl"
        metrics_path.write_text("")

    w, w_fitted = None, False
    try:
        for epoch in range(config.epochs):
            warmup = epoch < config.warmup_epochs
            det = detector_pass(model, images, labels, ids, config, epoch)
            z, knn = det["z"], det["knn"]
            # the separator refits from the current Z on W-epochs (and
            # whenever it does not exist yet); on Z-epochs it carries over
            if epoch % 2 == 0 or not w_fitted:
                if config.live_w_features:
                    feats = extract_features(
                        model, images, ids=ids, block_index=config.w_block_index, device=config.device
                    )
                else:
                    feats = w_features
                w, w_fitted = refit_separator(feats, z, config, epoch)

            if warmup:
                active = CleanScores(ids, np.ones(len(ids)), Origin.COMBINED)
                p = CleanScores(ids, np.ones(len(ids)), Origin.SMALL_LOSS)
                active_name = "WARMUP"
            else:
                active = active_scores(
                    config.strategy, epoch, z, w if w_fitted else None, sched_rng, config.threshold
                )
                p = pseudo_loss_scores(det["teacher_probs"], det["student_probs2"], ids=ids)
                if active.origin == Origin.SMALL_LOSS:
                    active_name = "Z"
                elif active.origin == Origin.LINEAR_SEP:
                    active_name = "W"
                else:
                    active_name = config.strategy.kind.value
            loss_means = optimize_epoch(
                model,
                optimizer,
                images,
                labels,
                targets_onehot,
                active.values,
                p.values,
                config,
                epoch,
                ssl_on=not warmup,
                teacher_probs=det["teacher_probs"].astype(np.float32),
            )
            scheduler.step()
            acc = evaluate_accuracy(model, test_images, test_labels, device=config.device)
            record = detection_metrics(
                epoch, active_name, z, w, knn, active, oracle, config.threshold
            )
            record.update(
                {
                    "losses": loss_means,
                    "test_accuracy": acc,
                    "lr": scheduler.get_last_lr()[0],
                    "warmup": warmup,
                    "w_fitted": w_fitted,
                    "z_separation": det["z_separation"],
                    "z_uninformative": det["z_uninformative"],
                }
            )
            history.append(record)
            if metrics_path is not None:
                with open(metrics_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(_jsonable(record)) + "\n")
            if log_fn:
                log_fn(
                    f"epoch {epoch} [{active_name}] acc {acc:.2f} "
                    f"auroc_z {record['auroc_z']} auroc_w {record['auroc_w']}"
                )
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = _cpu_state(model)
            if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                torch.save(_cpu_state(model), out_dir / f"model_{config_hash}_epoch{epoch}.pt")
            scores_out = {"small_loss": z, "linear_sep": w, "knn": knn, "pseudo": p, "active": active}
    except KeyboardInterrupt:
        if out_dir is not None:
            torch.save(_cpu_state(model), out_dir / f"model_{config_hash}_interrupt.pt")
        raise

    final_acc = history[-1]["test_accuracy"] if history else 0.0
    return TrainResult(
        history=history,
        final_accuracy=final_acc,
        best_accuracy=best_acc,
        best_epoch=best_epoch,
        final_state=_cpu_state(model),
        best_state=best_state,
        scores=scores_out,
        model=model,
    )


# ---------------------------------------------------------------------------
# plain cross-entropy baselines
# ---------------------------------------------------------------------------


def baseline_train(
    images: np.ndarray,
    labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    encoder: SmallResNet,
    config: TrainConfig,
    n_classes: int,
    use_mixup: bool = False,
    log_fn=None,
) -> dict:
    """Cross-entropy training on the given samples (weak views, optional mixup)."""
    if len(images) == 0:
        raise ValueError("cannot train on an empty sample set")
    torch.manual_seed(config.seed)
    model = with_classifier(encoder, n_classes).to(config.device)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    targets = one_hot(labels, n_classes)
    best_acc = -1.0
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 401, epoch])
        order = rng.permutation(len(images))
        model.train()
        for start in range(0, len(images), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) == 0:
                continue
            weak = np.stack([weak_view(images[i], rng) for i in idx])
            t = targets[idx]
            if use_mixup and len(idx) >= 2:
                weak, t, _ = mixup_batch(weak, t, config.mixup_alpha, rng)
            x = _to_torch(weak, config.device)
            logits = model(x)
            loss = soft_cross_entropy(logits, torch.from_numpy(t).to(config.device)).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"baseline training diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        scheduler.step()
        acc = evaluate_accuracy(model, test_images, test_labels, device=config.device)
        best_acc = max(best_acc, acc)
        history.append({"epoch": epoch, "test_accuracy": acc})
        if log_fn:
            log_fn(f"baseline epoch {epoch}: acc {acc:.2f}")
    return {
        "final_accuracy": history[-1]["test_accuracy"],
        "best_accuracy": best_acc,
        "history": history,
        "model": model,
    }


def ignore_the_noise_baseline(
    manifest: DatasetManifest,
    images: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    scores: CleanScores,
    encoder: SmallResNet,
    config: TrainConfig,
    use_mixup: bool = False,
    log_fn=None,
) -> dict:
    """Train only on detector-declared clean samples; report detection metrics
    next to the resulting accuracy."""
    if len(scores) != len(manifest):
        raise ValueError("scores are not aligned with the manifest")
    keep = scores.binarize(config.threshold)
    if not keep.any():
        raise ValueError("detector declared every sample noisy; nothing to train on")
    oracle = manifest.oracle_is_clean
    result = baseline_train(
        images[keep],
        manifest.noisy_labels[keep],
        test_images,
        test_labels,
        encoder,
        config,
        n_classes=len(manifest.class_names),
        use_mixup=use_mixup,
        log_fn=log_fn,
    )
    both = oracle.any() and not oracle.all()
    return {
        "accuracy": result["final_accuracy"],
        "best_accuracy": result["best_accuracy"],
        "n_kept": int(keep.sum()),
        "auroc": _safe_auroc(scores, oracle) if both else None,
        "recall_clean": recall_clean(keep, oracle) if both else None,
        "recall_noise": recall_noise(keep, oracle) if both else None,
        "origin": scores.origin.value,
    }
