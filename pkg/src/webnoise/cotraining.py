"""Two-network co-training with vote-based detection and co-guessing."""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .detectors import CleanScores, Origin
from .data import DatasetManifest
from .encoder import SmallResNet
from .features import extract_features
from .schedule import active_scores
from .training import (
    TrainConfig,
    _cpu_state,
    _jsonable,
    _to_torch,
    detection_metrics,
    detector_pass,
    evaluate_accuracy,
    one_hot,
    optimize_epoch,
    pseudo_loss_scores,
    refit_separator,
    with_classifier,
)


class CotrainStrategy(str, enum.Enum):
    INDEP = "INDEP"
    DM_STYLE = "DM_STYLE"
    VOTE = "VOTE"
    OURS = "OURS"


def vote_noisy(scores_a: CleanScores, scores_b: CleanScores, threshold: float = 0.5) -> CleanScores:
    """A sample is noisy only when both networks declare it noisy, i.e. the
    voted clean set is the union of the individual clean sets."""
    scores_a.aligned_with(scores_b)
    clean = scores_a.binarize(threshold) | scores_b.binarize(threshold)
    return CleanScores(scores_a.ids, clean.astype(float), Origin.COMBINED)


def co_guess(ensemble_teacher_probs, other_student_probs, ids=None) -> CleanScores:
    """Imputation confidence for one network computed from the *other*
    network's predictions, reducing confirmation bias."""
    return pseudo_loss_scores(ensemble_teacher_probs, other_student_probs, ids=ids)


def ensemble_predict(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    if logits_a.shape != logits_b.shape:
        raise ValueError("logit batches must have the same shape")
    return 0.5 * (F.softmax(logits_a, dim=1) + F.softmax(logits_b, dim=1))


def evaluate_ensemble(model_a, model_b, images, labels, batch_size: int = 256, device: str = "cpu") -> float:
    model_a.eval()
    model_b.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _to_torch(images[start : start + batch_size], device)
            probs = ensemble_predict(model_a(x), model_b(x))
            pred = probs.argmax(dim=1).cpu().numpy()
            correct += int((pred == labels[start : start + batch_size]).sum())
    return 100.0 * correct / max(len(images), 1)


def _vote_or_single(a, a_ok, b, b_ok, threshold):
    if a_ok and b_ok:
        return vote_noisy(a, b, threshold), True
    if a_ok:
        return a, True
    if b_ok:
        return b, True
    return None, False


@dataclass
class CotrainResult:
    strategy: CotrainStrategy
    history: list[dict]
    final_accuracy: dict
    best_accuracy: dict
    states: dict
    models: tuple
    scores: dict


def cotrain(
    manifest: DatasetManifest,
    images: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    encoders: tuple[SmallResNet, SmallResNet],
    config: TrainConfig,
    strategy: CotrainStrategy,
    seeds: tuple[int, int] | None = None,
    out_dir=None,
    config_hash: str = "",
    log_fn=None,
) -> CotrainResult:
    """Train two networks concurrently under the requested interaction scheme.

    INDEP: no interaction except the test-time ensemble. DM_STYLE: each net
    trains on the other's detection, imputation from the ensemble teacher.
    VOTE: both nets share voted (binarized) detections plus the ensemble
    teacher. OURS: VOTE plus co-guessing (each net's imputation confidence is
    computed from the other net's predictions).
    """
    strategy = CotrainStrategy(strategy)
    if seeds is None:
        seeds = (config.seed, config.seed + 1)
    if seeds[0] == seeds[1]:
        raise ValueError("the two networks need distinct seeds")
    cfg = (replace(config, seed=seeds[0]), replace(config, seed=seeds[1]))
    labels = manifest.noisy_labels
    ids = np.asarray(manifest.image_ids)
    oracle = manifest.oracle_is_clean
    n_classes = len(manifest.class_names)
    targets_onehot = one_hot(labels, n_classes)

    models, opts, scheds, w_feats = [], [], [], []
    for k in range(2):
        torch.manual_seed(cfg[k].seed)
        m = with_classifier(encoders[k], n_classes).to(config.device)
        models.append(m)
        opts.append(
            torch.optim.SGD(m.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
        )
        scheds.append(torch.optim.lr_scheduler.CosineAnnealingLR(opts[k], T_max=config.epochs))
        w_feats.append(
            extract_features(
                copy.deepcopy(encoders[k]), images, ids=ids, block_index=config.w_block_index, device=config.device
            )
        )
    sched_rng = np.random.default_rng([config.strategy.seed, config.seed, 709])

    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / f"metrics_{config_hash or 'cotrain'}.jsonl"
        metrics_path.write_text("")

    history: list[dict] = []
    best = {"net_a": -1.0, "net_b": -1.0, "ensemble": -1.0}
    best_states = {"net_a": _cpu_state(models[0]), "net_b": _cpu_state(models[1])}
    scores_out: dict = {}
    w, w_ok = [None, None], [False, False]

    for epoch in range(config.epochs):
        warmup = epoch < config.warmup_epochs
        det = [detector_pass(models[k], images, labels, ids, cfg[k], epoch) for k in range(2)]
        z = [det[k]["z"] for k in range(2)]
        knn = [det[k]["knn"] for k in range(2)]
        for k in range(2):
            if epoch % 2 == 0 or not w_ok[k]:
                w[k], w_ok[k] = refit_separator(w_feats[k], z[k], cfg[k], epoch)

        ens_teacher = 0.5 * (det[0]["teacher_probs"] + det[1]["teacher_probs"])

        if warmup:
            ones = CleanScores(ids, np.ones(len(ids)), Origin.COMBINED)
            active = [ones, ones]
            p = [ones, ones]
            active_name = "WARMUP"
            teachers = [None, None]
        elif strategy == CotrainStrategy.INDEP:
            active = [
                active_scores(config.strategy, epoch, z[k], w[k] if w_ok[k] else None, sched_rng, config.threshold)
                for k in range(2)
            ]
            p = [pseudo_loss_scores(det[k]["teacher_probs"], det[k]["student_probs2"], ids=ids) for k in range(2)]
            active_name = config.strategy.kind.value
            teachers = [det[0]["teacher_probs"], det[1]["teacher_probs"]]
        elif strategy == CotrainStrategy.DM_STYLE:
            active = [
                active_scores(
                    config.strategy, epoch, z[1 - k], w[1 - k] if w_ok[1 - k] else None, sched_rng, config.threshold
                )
                for k in range(2)
            ]
            p = [pseudo_loss_scores(ens_teacher, det[k]["student_probs2"], ids=ids) for k in range(2)]
            active_name = config.strategy.kind.value
            teachers = [ens_teacher, ens_teacher]
        else:  # VOTE and OURS share voted detections and the ensemble teacher
            z_vote, _ = _vote_or_single(z[0], True, z[1], True, config.threshold)
            w_vote, w_vote_ok = _vote_or_single(w[0], w_ok[0], w[1], w_ok[1], config.threshold)
            shared = active_scores(
                config.strategy, epoch, z_vote, w_vote if w_vote_ok else None, sched_rng, config.threshold
            )
            active = [shared, shared]
            if strategy == CotrainStrategy.OURS:
                p = [co_guess(ens_teacher, det[1 - k]["student_probs2"], ids=ids) for k in range(2)]
            else:
                p = [pseudo_loss_scores(ens_teacher, det[k]["student_probs2"], ids=ids) for k in range(2)]
            active_name = config.strategy.kind.value
            teachers = [ens_teacher, ens_teacher]

        losses = []
        for k in range(2):
            losses.append(
                optimize_epoch(
                    models[k],
                    opts[k],
                    images,
                    labels,
                    targets_onehot,
                    active[k].values,
                    p[k].values,
                    cfg[k],
                    epoch,
                    ssl_on=not warmup,
                    teacher_probs=None if teachers[k] is None else teachers[k].astype(np.float32),
                )
            )
            scheds[k].step()

        acc = {
            "net_a": evaluate_accuracy(models[0], test_images, test_labels, device=config.device),
            "net_b": evaluate_accuracy(models[1], test_images, test_labels, device=config.device),
            "ensemble": evaluate_ensemble(models[0], models[1], test_images, test_labels, device=config.device),
        }
        for key in best:
            if acc[key] > best[key]:
                best[key] = acc[key]
                if key in best_states:
                    best_states[key] = _cpu_state(models[0] if key == "net_a" else models[1])

        record = {
            "epoch": epoch,
            "strategy": strategy.value,
            "active_detector": active_name,
            "accuracy": acc,
            "losses": {"net_a": losses[0], "net_b": losses[1]},
            "detection": {
                tag: detection_metrics(epoch, active_name, z[k], w[k], knn[k], active[k], oracle, config.threshold)
                for k, tag in enumerate(("net_a", "net_b"))
            },
        }
        history.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(_jsonable(record)) + "\n")
        if log_fn:
            log_fn(
                f"cotrain[{strategy.value}] epoch {epoch}: "
                f"A {acc['net_a']:.2f} B {acc['net_b']:.2f} ens {acc['ensemble']:.2f}"
            )
        scores_out = {
            "net_a": {"small_loss": z[0], "linear_sep": w[0], "knn": knn[0], "pseudo": p[0]},
            "net_b": {"small_loss": z[1], "linear_sep": w[1], "knn": knn[1], "pseudo": p[1]},
        }

    final = history[-1]["accuracy"] if history else {"net_a": 0.0, "net_b": 0.0, "ensemble": 0.0}
    return CotrainResult(
        strategy=strategy,
        history=history,
        final_accuracy=final,
        best_accuracy=best,
        states={**best_states, "final_a": _cpu_state(models[0]), "final_b": _cpu_state(models[1])},
        models=(models[0], models[1]),
        scores=scores_out,
    )


