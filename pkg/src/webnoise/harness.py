"""Experiment orchestration: each step reads/writes artifacts under
out_dir/<config_hash>/ so every file is reachable from its config."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synth
from .config import ExperimentConfig
from .cotraining import cotrain
from .data import DatasetManifest, build_noisy_dataset, probe_split
from .detectors import (
    CleanScores,
    Origin,
    apply_separator,
    fit_linear_separator,
    knn_clean_scores,
    oracle_scores,
    pearson_corr,
    small_loss_clean_scores,
)
from .encoder import SmallResNet, load_checkpoint
from .features import extract_all_blocks, extract_features, probe_depth_auroc
from .contrastive import pretrain
from .reporting import generate_report, write_csv
from .training import (
    TrainConfig,
    baseline_train,
    ignore_the_noise_baseline,
    train,
    _to_torch,
)

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class RunExists(RuntimeError):
    pass


def _guard(done_path: Path, force: bool):
    if done_path.exists() and not force:
        raise RunExists(f"completed artifacts at {done_path.parent}; pass --force to redo")


def _mark_done(done_path: Path):
    done_path.parent.mkdir(parents=True, exist_ok=True)
    done_path.write_text("done\n")


def run_root(cfg: ExperimentConfig, out_dir) -> Path:
    root = Path(out_dir) / cfg.hash()
    root.mkdir(parents=True, exist_ok=True)
    return root


# ---------------------------------------------------------------------------


def run_build_data(cfg: ExperimentConfig, out_dir, force: bool = False) -> Path:
    root = run_root(cfg, out_dir)
    data_dir = root / "data"
    done = data_dir / "DONE"
    _guard(done, force)
    corpus = synth.make_corpus(
        kind=cfg["dataset.ood_kind"],
        n_train=cfg["dataset.n_train"],
        n_test=cfg["dataset.n_test"],
        n_ood=cfg["dataset.n_ood"],
        n_classes=cfg["dataset.n_classes"],
        size=cfg["dataset.image_size"],
        seed=cfg["dataset.seed"],
    )
    manifest, images = build_noisy_dataset(
        corpus["train_images"],
        corpus["train_labels"],
        corpus["ood_images"],
        cfg.noise_spec(),
        class_names=corpus["class_names"],
        id_source=f"synthetic-shapes/{cfg['dataset.seed']}",
        ood_source=f"{corpus['ood_kind']}/{cfg['dataset.seed']}",
    )
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest.save(data_dir / "manifest.tsv")
    np.savez_compressed(
        data_dir / "arrays.npz",
        images=images,
        test_images=corpus["test_images"],
        test_labels=corpus["test_labels"],
    )
    _mark_done(done)
    return data_dir


def load_data(cfg: ExperimentConfig, out_dir):
    data_dir = run_root(cfg, out_dir) / "data"
    if not (data_dir / "DONE").exists():
        raise FileNotFoundError(f"no built dataset under {data_dir}; run build-data first")
    manifest = DatasetManifest.load(data_dir / "manifest.tsv")
    arrays = np.load(data_dir / "arrays.npz")
    return manifest, arrays["images"], arrays["test_images"], arrays["test_labels"]


def run_pretrain(cfg: ExperimentConfig, out_dir, device: str = "cpu", force: bool = False, log_fn=None) -> Path:
    root = run_root(cfg, out_dir)
    pre_dir = root / "pretrain"
    done = pre_dir / "DONE"
    _guard(done, force)
    _, images, _, _ = load_data(cfg, out_dir)
    pre_dir.mkdir(parents=True, exist_ok=True)
    path = pre_dir / f"encoder_{cfg.hash()}.pt"
    pretrain(images, cfg.encoder_spec(), cfg.pretrain_config(), out_path=path, device=device, log_fn=log_fn)
    _mark_done(done)
    return path


def load_encoder(cfg: ExperimentConfig, out_dir) -> SmallResNet:
    path = run_root(cfg, out_dir) / "pretrain" / f"encoder_{cfg.hash()}.pt"
    if not path.exists():
        raise FileNotFoundError(f"no pretrained encoder at {path}; run pretrain first")
    model, _ = load_checkpoint(path)
    return model


def run_probe(cfg: ExperimentConfig, out_dir, device: str = "cpu", force: bool = False, seed: int | None = None) -> dict:
    root = run_root(cfg, out_dir)
    seed = cfg.seeds()[0] if seed is None else seed
    probe_dir = root / "probe" / f"seed{seed}"
    done = probe_dir / "DONE"
    _guard(done, force)
    manifest, images, _, _ = load_data(cfg, out_dir)
    encoder = load_encoder(cfg, out_dir)
    feats = extract_all_blocks(encoder, images, ids=manifest.image_ids, device=device)
    split = probe_split(manifest, test_fraction=0.1, seed=seed)
    per_block = probe_depth_auroc(feats, manifest.oracle_is_clean, split)
    write_csv(
        probe_dir / f"block_auroc_{cfg.hash()}.csv",
        ["block_index", "auroc"],
        [[b, a] for b, a in sorted(per_block.items())],
    )
    _mark_done(done)
    return per_block


# ---------------------------------------------------------------------------
# detection-quality protocol: score every detector, then train the naive
# ignore-the-noise classifier on each detection
# ---------------------------------------------------------------------------


def _final_model_scores(model, images, labels, ids, config: TrainConfig):
    """Per-sample losses and penultimate features of a trained model on the
    un-augmented training images (evaluation mode)."""
    model.eval()
    losses = np.empty(len(images))
    feats = []
    with torch.no_grad():
        for start in range(0, len(images), config.batch_size):
            stop = min(start + config.batch_size, len(images))
            x = _to_torch(images[start:stop], config.device)
            logits, _, pooled = model.logits_projection_features(x)
            y = torch.from_numpy(labels[start:stop]).to(config.device)
            losses[start:stop] = F.cross_entropy(logits, y, reduction="none").cpu().numpy()
            feats.append(pooled.cpu().numpy())
    feats = np.concatenate(feats)
    feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    z = small_loss_clean_scores(losses, ids=ids, min_separation=config.gmm_min_separation)
    knn = knn_clean_scores(feats.astype(np.float32), labels, k=min(config.knn_k, len(images) - 1), ids=ids)
    return z, knn


def detect_protocol(
    manifest: DatasetManifest,
    images: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    encoder: SmallResNet,
    config: TrainConfig,
    eval_epochs: int | None = None,
    log_fn=None,
) -> dict:
    """Detection-vs-accuracy report: a plain mixup-CE run provides the
    loss-based and distance-based detections, the separator refines each on
    frozen pretrained features, and every detection (plus the no-removal and
    oracle references) drives one naive ignore-the-noise training."""
    labels = manifest.noisy_labels
    ids = np.asarray(manifest.image_ids)
    provider = baseline_train(
        images, labels, test_images, test_labels, encoder, config,
        n_classes=len(manifest.class_names), use_mixup=True, log_fn=log_fn,
    )
    z, knn = _final_model_scores(provider["model"], images, labels, ids, config)
    w_features = extract_features(encoder, images, ids=ids, block_index=config.w_block_index, device=config.device)
    scores: dict[str, CleanScores] = {
        "none": CleanScores(ids, np.ones(len(ids)), Origin.COMBINED),
        "small_loss": z,
        "knn": knn,
    }
    for name, base in (("w_small_loss", z), ("w_knn", knn)):
        sep = fit_linear_separator(w_features, base, threshold=config.threshold)
        scores[name] = apply_separator(sep, w_features)
    scores["oracle"] = oracle_scores(ids, manifest.oracle_is_clean)

    eval_config = config if eval_epochs is None else replace(config, epochs=eval_epochs, warmup_epochs=0)
    table = []
    for name, sc in scores.items():
        row = ignore_the_noise_baseline(
            manifest, images, test_images, test_labels, sc, encoder, eval_config, use_mixup=False, log_fn=log_fn
        )
        row["metric"] = name
        table.append(row)
        if log_fn:
            log_fn(f"ignore-the-noise[{name}]: acc {row['accuracy']:.2f} auroc {row['auroc']}")

    detector_names = ("small_loss", "knn", "w_small_loss", "w_knn")
    pearson = {}
    for i, a in enumerate(detector_names):
        for b in detector_names[i + 1 :]:
            try:
                pearson[f"{a}|{b}"] = pearson_corr(scores[a], scores[b])
            except ValueError:
                pearson[f"{a}|{b}"] = None
    return {
        "table": table,
        "scores": scores,
        "pearson": pearson,
        "provider_accuracy": provider["final_accuracy"],
    }


def run_detect(cfg: ExperimentConfig, out_dir, device: str = "cpu", seed: int | None = None, force: bool = False, log_fn=None) -> dict:
    root = run_root(cfg, out_dir)
    seed = cfg.seeds()[0] if seed is None else seed
    detect_dir = root / "detect" / f"seed{seed}"
    done = detect_dir / "DONE"
    _guard(done, force)
    manifest, images, test_images, test_labels = load_data(cfg, out_dir)
    encoder = load_encoder(cfg, out_dir)
    config = cfg.train_config(seed=seed, device=device)
    result = detect_protocol(manifest, images, test_images, test_labels, encoder, config, log_fn=log_fn)
    detect_dir.mkdir(parents=True, exist_ok=True)
    for name, sc in result["scores"].items():
        sc.to_csv(detect_dir / f"scores_{name}_{cfg.hash()}.csv", config_hash=cfg.hash())
    write_csv(
        detect_dir / f"pearson_{cfg.hash()}.csv",
        ["pair", "pearson"],
        [[pair, val] for pair, val in result["pearson"].items()],
    )
    write_csv(
        detect_dir / f"table1_{cfg.hash()}.csv",
        ["metric", "auroc", "recall_clean", "recall_noise", "accuracy", "n_kept"],
        [
            [r["metric"], r["auroc"], r["recall_clean"], r["recall_noise"], r["accuracy"], r["n_kept"]]
            for r in result["table"]
        ],
    )
    payload = {
        "config_hash": cfg.hash(),
        "seed": seed,
        "noise_ratio": cfg["noise.ratio"],
        "table": result["table"],
        "provider_accuracy": result["provider_accuracy"],
    }
    (detect_dir / f"result_{cfg.hash()}.json").write_text(json.dumps(payload, indent=1))
    _mark_done(done)
    return result


def run_train(cfg: ExperimentConfig, out_dir, device: str = "cpu", seed: int | None = None, force: bool = False, log_fn=None):
    root = run_root(cfg, out_dir)
    seeds = (seed,) if seed is not None else cfg.seeds()
    results = []
    for s in seeds:
        train_dir = root / "train" / f"seed{s}"
        done = train_dir / "DONE"
        _guard(done, force)
        manifest, images, test_images, test_labels = load_data(cfg, out_dir)
        encoder = load_encoder(cfg, out_dir)
        config = cfg.train_config(seed=s, device=device)
        result = train(
            manifest, images, test_images, test_labels, encoder, config,
            out_dir=train_dir, config_hash=cfg.hash(), log_fn=log_fn,
        )
        torch.save(result.final_state, train_dir / f"final_{cfg.hash()}.pt")
        torch.save(result.best_state, train_dir / f"best_{cfg.hash()}.pt")
        for name, sc in result.scores.items():
            if sc is not None:
                sc.to_csv(train_dir / f"scores_{name}_{cfg.hash()}.csv", config_hash=cfg.hash())
        payload = {
            "config_hash": cfg.hash(),
            "seed": s,
            "strategy": config.strategy.kind.value,
            "noise_ratio": cfg["noise.ratio"],
            "final_accuracy": result.final_accuracy,
            "best_accuracy": result.best_accuracy,
            "best_epoch": result.best_epoch,
            "final_detection": {
                k: result.history[-1].get(k)
                for k in ("auroc_z", "auroc_w", "auroc_knn", "pearson_z_w", "pearson_z_knn", "pearson_w_knn")
            },
        }
        (train_dir / f"result_{cfg.hash()}.json").write_text(json.dumps(payload, indent=1))
        _mark_done(done)
        results.append(result)
    return results


def run_cotrain(cfg: ExperimentConfig, out_dir, device: str = "cpu", seed: int | None = None, force: bool = False, log_fn=None):
    root = run_root(cfg, out_dir)
    seeds = (seed,) if seed is not None else cfg.seeds()
    results = []
    for s in seeds:
        co_dir = root / "cotrain" / f"seed{s}"
        done = co_dir / "DONE"
        _guard(done, force)
        manifest, images, test_images, test_labels = load_data(cfg, out_dir)
        encoder = load_encoder(cfg, out_dir)
        config = cfg.train_config(seed=s, device=device)
        result = cotrain(
            manifest, images, test_images, test_labels, (encoder, encoder), config,
            strategy=cfg.cotrain_strategy(), seeds=(s, s + 1000),
            out_dir=co_dir, config_hash=cfg.hash(), log_fn=log_fn,
        )
        payload = {
            "config_hash": cfg.hash(),
            "seed": s,
            "strategy": result.strategy.value,
            "noise_ratio": cfg["noise.ratio"],
            "final_accuracy": result.final_accuracy,
            "best_accuracy": result.best_accuracy,
        }
        (co_dir / f"result_{cfg.hash()}.json").write_text(json.dumps(payload, indent=1))
        _mark_done(done)
        results.append(result)
    return results


def run_report(out_dir, report_dir=None) -> list[str]:
    out_dir = Path(out_dir)
    report_dir = Path(report_dir) if report_dir else out_dir / "report"
    return generate_report(out_dir, report_dir)
