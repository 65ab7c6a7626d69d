"""Controlled web-noisy dataset construction with a hidden clean/noisy oracle.

A noisy dataset is built by replacing a fraction of a clean labeled source
with images drawn from a disjoint out-of-distribution (OOD) pool while the
original class labels are kept. The per-sample oracle flag records which
samples were replaced; it is for evaluation only and must never reach a
training path.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

SOURCE_ID = "ID"
SOURCE_OOD = "OOD"

MANIFEST_MAGIC = "#webnoise-manifest v1"
# stable field order of a manifest record line
MANIFEST_FIELDS = ("image_id", "ref", "noisy_label", "oracle_is_clean", "source")


@dataclass(frozen=True)
class NoiseSpec:
    """How much OOD corruption to apply and how."""

    noise_ratio: float
    seed: int = 0
    per_class: bool = True

    def __post_init__(self):
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ValueError(f"noise_ratio must be in [0, 1], got {self.noise_ratio}")


@dataclass(frozen=True)
class NoisySample:
    """One training sample; oracle_is_clean is hidden from training paths."""

    image_id: str
    pixels: np.ndarray  # H x W x C, float in [0, 1]
    noisy_label: int
    oracle_is_clean: bool
    source: str  # SOURCE_ID or SOURCE_OOD


@dataclass
class DatasetManifest:
    """Reference table for a built noisy dataset.

    Each entry is (image_id, ref, noisy_label, oracle_is_clean, source) where
    ref points into the originating image store ("id:<offset>" or
    "ood:<offset>"). Pixel data lives outside the manifest.
    """

    image_ids: list[str]
    refs: list[str]
    noisy_labels: np.ndarray  # int array, len N
    oracle_is_clean: np.ndarray  # bool array, len N
    sources: list[str]
    class_names: list[str]
    noise_spec: NoiseSpec
    id_source: str = "id-pool"
    ood_source: str = "ood-pool"
    extra_header: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.image_ids)
        if not (len(self.refs) == len(self.noisy_labels) == len(self.oracle_is_clean) == len(self.sources) == n):
            raise ValueError("manifest columns have inconsistent lengths")
        if len(set(self.image_ids)) != n:
            raise ValueError("duplicate image_ids in manifest")
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        self.oracle_is_clean = np.asarray(self.oracle_is_clean, dtype=bool)
        c = len(self.class_names)
        if self.noisy_labels.size and not ((self.noisy_labels >= 0) & (self.noisy_labels < c)).all():
            raise ValueError("noisy_label out of range")
        for flag, src in zip(self.oracle_is_clean, self.sources):
            if bool(flag) != (src == SOURCE_ID):
                raise ValueError("oracle_is_clean must equal (source == ID)")

    def __len__(self):
        return len(self.image_ids)

    @property
    def labels(self) -> np.ndarray:
        return self.noisy_labels

    def sample(self, i: int, images: np.ndarray) -> NoisySample:
        return NoisySample(
            image_id=self.image_ids[i],
            pixels=images[i],
            noisy_label=int(self.noisy_labels[i]),
            oracle_is_clean=bool(self.oracle_is_clean[i]),
            source=self.sources[i],
        )

    def subset(self, indices) -> "DatasetManifest":
        indices = np.asarray(indices)
        return DatasetManifest(
            image_ids=[self.image_ids[i] for i in indices],
            refs=[self.refs[i] for i in indices],
            noisy_labels=self.noisy_labels[indices],
            oracle_is_clean=self.oracle_is_clean[indices],
            sources=[self.sources[i] for i in indices],
            class_names=list(self.class_names),
            noise_spec=self.noise_spec,
            id_source=self.id_source,
            ood_source=self.ood_source,
            extra_header=dict(self.extra_header),
        )

    # ------------------------------------------------------------------
    # serialization: header block then one tab-separated record per line
    # ------------------------------------------------------------------
    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(MANIFEST_MAGIC + "\n")
        buf.write(f"#noise_ratio={self.noise_spec.noise_ratio!r}\n")
        buf.write(f"#seed={self.noise_spec.seed}\n")
        buf.write(f"#per_class={str(self.noise_spec.per_class).lower()}\n")
        buf.write(f"#classes={','.join(self.class_names)}\n")
        buf.write(f"#id_source={self.id_source}\n")
        buf.write(f"#ood_source={self.ood_source}\n")
        for key in sorted(self.extra_header):
            buf.write(f"#x-{key}={self.extra_header[key]}\n")
        buf.write("#fields=" + ",".join(MANIFEST_FIELDS) + "\n")
        for i in range(len(self)):
            buf.write(
                f"{self.image_ids[i]}\t{self.refs[i]}\t{int(self.noisy_labels[i])}"
                f"\t{int(self.oracle_is_clean[i])}\t{self.sources[i]}\n"
            )
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_MAGIC:
            raise ValueError("not a webnoise manifest")
        header = {}
        extra = {}
        rows = []
        for line in lines[1:]:
            if not line:
                continue
            if line.startswith("#x-"):
                key, _, val = line[3:].partition("=")
                extra[key] = val
            elif line.startswith("#"):
                key, _, val = line[1:].partition("=")
                header[key] = val
            else:
                parts = line.split("\t")
                if len(parts) != len(MANIFEST_FIELDS):
                    raise ValueError(f"malformed manifest record: {line!r}")
                rows.append(parts)
        spec = NoiseSpec(
            noise_ratio=float(header["noise_ratio"]),
            seed=int(header["seed"]),
            per_class=header["per_class"] == "true",
        )
        class_names = header["classes"].split(",") if header.get("classes") else []
        return cls(
            image_ids=[r[0] for r in rows],
            refs=[r[1] for r in rows],
            noisy_labels=np.array([int(r[2]) for r in rows], dtype=np.int64),
            oracle_is_clean=np.array([bool(int(r[3])) for r in rows]),
            sources=[r[4] for r in rows],
            class_names=class_names,
            noise_spec=spec,
            id_source=header.get("id_source", "id-pool"),
            ood_source=header.get("ood_source", "ood-pool"),
            extra_header=extra,
        )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _per_class_counts(labels: np.ndarray, n_classes: int, ratio: float, per_class: bool) -> np.ndarray:
    """Number of samples to corrupt in each class; totals round(ratio * N) exactly."""
    n = len(labels)
    total = int(round(ratio * n))
    counts = np.zeros(n_classes, dtype=np.int64)
    class_sizes = np.bincount(labels, minlength=n_classes)
    if not per_class:
        return counts, total  # caller draws globally
    base = np.floor(ratio * class_sizes).astype(np.int64)
    remainder = total - int(base.sum())
    if remainder > 0:
        frac = ratio * class_sizes - base
        # deterministic: largest fractional parts first, class index breaks ties
        order = np.lexsort((np.arange(n_classes), -frac))
        for c in order[:remainder]:
            base[c] += 1
    counts = np.minimum(base, class_sizes)
    return counts, total


def build_noisy_dataset(
    clean_images: np.ndarray,
    clean_labels: np.ndarray,
    ood_images: np.ndarray,
    spec: NoiseSpec,
    class_names: list[str] | None = None,
    id_source: str = "id-pool",
    ood_source: str = "ood-pool",
) -> tuple[DatasetManifest, np.ndarray]:
    """Corrupt a clean labeled set by swapping pixels with distinct OOD images.

    Labels are kept; exactly round(noise_ratio * N) samples are replaced
    (spread per class when spec.per_class). Returns the manifest plus the
    materialized image array aligned with it.
    """
    clean_images = np.asarray(clean_images)
    clean_labels = np.asarray(clean_labels, dtype=np.int64)
    ood_images = np.asarray(ood_images)
    n = len(clean_images)
    if len(clean_labels) != n:
        raise ValueError("clean_images and clean_labels length mismatch")
    if class_names is None:
        n_classes = int(clean_labels.max()) + 1 if n else 0
        class_names = [f"class{c:02d}" for c in range(n_classes)]
    n_classes = len(class_names)

    needed = int(round(spec.noise_ratio * n))
    if len(ood_images) < needed:
        raise ValueError(
            f"OOD pool too small: need {needed} distinct images, pool has {len(ood_images)}"
        )
    if needed and ood_images.shape[1:] != clean_images.shape[1:]:
        raise ValueError("OOD pool image shape differs from clean set")

    rng = np.random.default_rng(spec.seed)
    if spec.per_class:
        counts, total = _per_class_counts(clean_labels, n_classes, spec.noise_ratio, True)
        corrupt_idx = []
        for c in range(n_classes):
            members = np.flatnonzero(clean_labels == c)
            if counts[c]:
                corrupt_idx.append(rng.choice(members, size=counts[c], replace=False))
        corrupt_idx = np.sort(np.concatenate(corrupt_idx)) if corrupt_idx else np.array([], dtype=np.int64)
    else:
        corrupt_idx = np.sort(rng.choice(n, size=needed, replace=False))
    ood_pick = rng.choice(len(ood_images), size=len(corrupt_idx), replace=False)

    images = clean_images.copy()
    refs = [f"id:{i}" for i in range(n)]
    sources = [SOURCE_ID] * n
    oracle = np.ones(n, dtype=bool)
    for j, i in enumerate(corrupt_idx):
        images[i] = ood_images[ood_pick[j]]
        refs[i] = f"ood:{ood_pick[j]}"
        sources[i] = SOURCE_OOD
        oracle[i] = False

    manifest = DatasetManifest(
        image_ids=[f"img{i:06d}" for i in range(n)],
        refs=refs,
        noisy_labels=clean_labels.copy(),
        oracle_is_clean=oracle,
        sources=sources,
        class_names=class_names,
        noise_spec=spec,
        id_source=id_source,
        ood_source=ood_source,
    )
    return manifest, images


def materialize(manifest: DatasetManifest, clean_images: np.ndarray, ood_images: np.ndarray) -> np.ndarray:
    """Rebuild the aligned pixel array of a manifest from its source pools."""
    out = np.empty((len(manifest),) + tuple(clean_images.shape[1:]), dtype=clean_images.dtype)
    for i, ref in enumerate(manifest.refs):
        pool, _, off = ref.partition(":")
        src = clean_images if pool == "id" else ood_images
        out[i] = src[int(off)]
    return out


def probe_split(manifest: DatasetManifest, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint exhaustive train/held-out index split, stratified by the oracle flag."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_parts, train_parts = [], []
    for stratum in (True, False):
        members = np.flatnonzero(manifest.oracle_is_clean == stratum)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"oracle stratum clean={stratum} has fewer than 2 samples")
        n_test = int(round(test_fraction * len(members)))
        n_test = min(max(n_test, 1), len(members) - 1)
        perm = rng.permutation(members)
        test_parts.append(perm[:n_test])
        train_parts.append(perm[n_test:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    return train_idx, test_idx
