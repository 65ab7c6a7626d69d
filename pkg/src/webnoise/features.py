"""Per-block feature extraction and ID/OOD linear separability probing."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .detectors import _fit_balanced_logistic, auroc
from .encoder import SmallResNet

_MAGIC = b"WNFM1\x00"


@dataclass
class FeatureMatrix:
    """L2-normalized pooled activations of one encoder block."""

    ids: np.ndarray
    block_index: int
    data: np.ndarray  # N x D float32, unit rows

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.ids.shape[0] != self.data.shape[0]:
            raise ValueError("ids/data length mismatch")
        norms = np.linalg.norm(self.data, axis=1)
        if self.data.size and not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("feature rows must be unit-norm")

    def __len__(self):
        return len(self.data)

    # binary container: magic, header (N, D, block_index), float32 payload,
    # trailing utf-8 id table
    def save(self, path):
        n, d = self.data.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IIi", n, d, self.block_index))
            fh.write(np.ascontiguousarray(self.data).tobytes())
            fh.write("\n".join(str(i) for i in self.ids).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError("not a feature matrix file")
            n, d, block = struct.unpack("<IIi", fh.read(12))
            payload = fh.read(n * d * 4)
            data = np.frombuffer(payload, dtype=np.float32).reshape(n, d).copy()
            ids = fh.read().decode("utf-8").split("\n") if n else []
        return cls(np.array(ids), block, data)


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("cannot L2-normalize all-zero activations")
    return mat / norms[:, None]


def extract_features(
    model: SmallResNet,
    images: np.ndarray,
    ids=None,
    block_index: int = 1,
    batch_size: int = 256,
    device: str = "cpu",
) -> FeatureMatrix:
    """Average-pooled, L2-normalized activations at one block, evaluation mode.

    block_index in [0, B-1] addresses residual stages; block_index == B is the
    projection head output.
    """
    n_blocks = model.spec.n_blocks
    if not 0 <= block_index <= n_blocks:
        raise ValueError(f"block_index must be in [0, {n_blocks}]")
    if ids is None:
        ids = np.arange(len(images)).astype(str)
    model = model.to(device)
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            x = x.permute(0, 3, 1, 2).contiguous().float().to(device)
            if block_index == n_blocks:
                feats = model.project(x)
            else:
                fmap = model.forward_blocks(x)[block_index]
                feats = fmap.mean(dim=(2, 3))
            chunks.append(feats.cpu().numpy())
    if was_training:
        model.train()
    raw = np.concatenate(chunks, axis=0)
    return FeatureMatrix(np.asarray(ids), block_index, _normalize_rows(raw.astype(np.float64)).astype(np.float32))


def extract_all_blocks(model, images, ids=None, batch_size: int = 256, device: str = "cpu") -> dict[int, FeatureMatrix]:
    return {
        b: extract_features(model, images, ids=ids, block_index=b, batch_size=batch_size, device=device)
        for b in range(model.spec.n_blocks + 1)
    }


def probe_block_auroc(features: FeatureMatrix, oracle_is_clean, split) -> float:
    """Oracle linear probe: fit on the train indices, AUROC on the held-out ones."""
    train_idx, test_idx = (np.asarray(s) for s in split)
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("train/test probe indices must be disjoint")
    flags = np.asarray(oracle_is_clean, dtype=bool)
    y_train = flags[train_idx].astype(int)
    if np.unique(y_train).size < 2:
        raise ValueError("probe training targets are single-class")
    if np.unique(flags[test_idx].astype(int)).size < 2:
        raise ValueError("probe held-out targets are single-class")
    clf = _fit_balanced_logistic(features.data[train_idx], y_train)
    clean_col = int(np.flatnonzero(clf.classes_ == 1)[0])
    scores = clf.predict_proba(features.data[test_idx])[:, clean_col]
    return auroc(scores, flags[test_idx])


def probe_depth_auroc(features_by_block: dict[int, FeatureMatrix], oracle_is_clean, split) -> dict[int, float]:
    """One held-out AUROC per block (the depth-separability profile)."""
    return {
        block: probe_block_auroc(fm, oracle_is_clean, split)
        for block, fm in sorted(features_by_block.items())
    }
