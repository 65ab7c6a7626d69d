"""Per-sample clean/noisy scoring and detection metrics.

Score convention: 1 = clean, everywhere. Sources that think in terms of
"flagged as noisy" are inverted at this boundary.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import LogisticRegression

DEFAULT_THRESHOLD = 0.5
VARIANCE_FLOOR = 1e-6
LOGISTIC_RIDGE = 1e-6
LOGISTIC_TOL = 1e-8
LOGISTIC_MAX_ITER = 1000


class Origin(str, enum.Enum):
    SMALL_LOSS = "SMALL_LOSS"
    KNN = "KNN"
    LINEAR_SEP = "LINEAR_SEP"
    COMBINED = "COMBINED"
    ORACLE = "ORACLE"


@dataclass
class CleanScores:
    """Per-sample scores in [0, 1]; 1 means clean."""

    ids: np.ndarray
    values: np.ndarray
    origin: Origin

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.ids.shape[0] != self.values.shape[0]:
            raise ValueError("ids and values length mismatch")
        if self.values.size and (np.nanmin(self.values) < 0 or np.nanmax(self.values) > 1):
            raise ValueError("scores must lie in [0, 1]")
        self.origin = Origin(self.origin)

    def __len__(self):
        return len(self.values)

    def binarize(self, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
        """Boolean clean mask; scores >= threshold count as clean."""
        return self.values >= threshold

    def aligned_with(self, other: "CleanScores"):
        if len(self) != len(other) or not np.array_equal(self.ids, other.ids):
            raise ValueError("score vectors are not aligned on ids")

    def to_csv(self, path, config_hash: str = ""):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# config={config_hash}\n")
            fh.write("id,value,origin\n")
            for i, v in zip(self.ids, self.values):
                fh.write(f"{i},{float(v)!r},{self.origin.value}\n")

    @classmethod
    def from_csv(cls, path) -> "CleanScores":
        ids, values, origin = [], [], Origin.COMBINED
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("id,"):
                    continue
                sid, val, org = line.split(",")
                ids.append(sid)
                values.append(float(val))
                origin = Origin(org)
        return cls(np.array(ids), np.array(values), origin)


def oracle_scores(ids, oracle_is_clean) -> CleanScores:
    return CleanScores(np.asarray(ids), np.asarray(oracle_is_clean, dtype=float), Origin.ORACLE)


# ---------------------------------------------------------------------------
# two-component 1-D Gaussian mixture (EM with quantile initialization)
# ---------------------------------------------------------------------------


class GaussianMixture1D(BaseEstimator):
    """Two-mode 1-D Gaussian mixture fit by EM.

    Deterministic: means initialize at the 25th/75th percentiles with equal
    weights (the seed parameter is accepted for interface stability but the
    initialization is seed-free). Components are ordered by ascending mean.
    Fitting records the per-iteration log-likelihood trace, which EM
    guarantees to be non-decreasing.
    """

    def __init__(self, tol: float = 1e-6, max_iter: int = 200, variance_floor: float = VARIANCE_FLOOR, seed: int = 0):
        self.tol = tol
        self.max_iter = max_iter
        self.variance_floor = variance_floor
        self.seed = seed

    def _log_pdf(self, x):
        # x: (N,), returns (N, 2) log component densities + log weights
        var = self.variances_
        log_norm = -0.5 * np.log(2 * np.pi * var)
        quad = -0.5 * (x[:, None] - self.means_[None, :]) ** 2 / var[None, :]
        return np.log(self.weights_)[None, :] + log_norm[None, :] + quad

    def fit(self, values):
        x = np.asarray(values, dtype=np.float64).reshape(-1)
        if x.size < 4:
            raise ValueError("need at least 4 values to fit a 2-mode mixture")
        if not np.all(np.isfinite(x)):
            raise ValueError("values must be finite")

        self.degenerate_ = False
        if np.ptp(x) == 0.0:
            self.means_ = np.array([x[0], x[0]])
            self.weights_ = np.array([0.5, 0.5])
            self.variances_ = np.array([self.variance_floor, self.variance_floor])
            self.degenerate_ = True
            self.converged_ = True
            self.n_iter_ = 0
            self.log_likelihood_trace_ = np.array([])
            return self

        q25, q75 = np.percentile(x, [25.0, 75.0])
        if q25 == q75:
            q25, q75 = x.min(), x.max()
        centers = np.array([q25, q75])
        assign = np.abs(x[:, None] - centers[None, :]).argmin(axis=1)
        self.weights_ = np.array([max((assign == k).mean(), 1.0 / x.size) for k in (0, 1)])
        self.weights_ /= self.weights_.sum()
        self.means_ = centers.astype(np.float64)
        self.variances_ = np.empty(2)
        for k in (0, 1):
            members = x[assign == k]
            v = members.var() if members.size else x.var()
            self.variances_[k] = max(v, self.variance_floor)

        trace = []
        self.converged_ = False
        for it in range(self.max_iter):
            log_joint = self._log_pdf(x)
            log_mix = np.logaddexp(log_joint[:, 0], log_joint[:, 1])
            trace.append(float(log_mix.sum()))
            resp = np.exp(log_joint - log_mix[:, None])
            nk = resp.sum(axis=0)
            nk = np.maximum(nk, 1e-12)
            self.weights_ = nk / x.size
            self.means_ = (resp * x[:, None]).sum(axis=0) / nk
            diff2 = (x[:, None] - self.means_[None, :]) ** 2
            self.variances_ = np.maximum((resp * diff2).sum(axis=0) / nk, self.variance_floor)
            if it > 0 and abs(trace[-1] - trace[-2]) < self.tol:
                self.converged_ = True
                break
        self.n_iter_ = len(trace)
        self.log_likelihood_trace_ = np.asarray(trace)

        order = np.argsort(self.means_)
        self.means_ = self.means_[order]
        self.weights_ = self.weights_[order]
        self.variances_ = self.variances_[order]
        return self

    def _check_fitted(self):
        if not hasattr(self, "means_"):
            raise NotFittedError("GaussianMixture1D is not fitted")

    def predict_proba(self, values) -> np.ndarray:
        self._check_fitted()
        x = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.degenerate_:
            out = np.zeros((x.size, 2))
            out[:, 0] = 1.0
            return out
        log_joint = self._log_pdf(x)
        log_mix = np.logaddexp(log_joint[:, 0], log_joint[:, 1])
        return np.exp(log_joint - log_mix[:, None])

    def posterior_low(self, values) -> np.ndarray:
        """Posterior probability of the low-mean component."""
        return self.predict_proba(values)[:, 0]


def fit_gmm_1d(values, tol: float = 1e-6, max_iter: int = 200, seed: int = 0) -> GaussianMixture1D:
    return GaussianMixture1D(tol=tol, max_iter=max_iter, seed=seed).fit(values)


def _gmm_low_posterior(
    raw_values, tol: float = 1e-6, max_iter: int = 200, min_separation: float = 0.0
) -> tuple[np.ndarray, bool, float]:
    """Min-max normalize, fit the 2-mode mixture, return (low-mode posterior,
    uninformative flag, mode separation); degenerate inputs score 1 everywhere.

    min_separation guards the noise-free regime: when the two fitted means
    sit closer than this fraction of the normalized range, the split carries
    no clean/noisy information and every sample counts as clean.
    """
    raw = np.asarray(raw_values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(raw)):
        raise ValueError("values must be finite")
    span = np.ptp(raw)
    if span == 0.0:
        return np.ones_like(raw), True, 0.0
    normed = (raw - raw.min()) / span
    gmm = fit_gmm_1d(normed, tol=tol, max_iter=max_iter)
    separation = float(gmm.means_[1] - gmm.means_[0])
    if gmm.degenerate_ or separation < min_separation:
        return np.ones_like(raw), True, separation
    return gmm.posterior_low(normed), False, separation


def small_loss_clean_scores(
    losses, ids=None, tol: float = 1e-6, max_iter: int = 200, min_separation: float = 0.0
) -> CleanScores:
    """Clean scores from per-sample losses: min-max normalize, fit the 2-mode
    mixture, score = posterior of the low-loss mode."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    if ids is None:
        ids = np.arange(losses.size).astype(str)
    values, _, _ = _gmm_low_posterior(losses, tol=tol, max_iter=max_iter, min_separation=min_separation)
    return CleanScores(ids, values, Origin.SMALL_LOSS)


# ---------------------------------------------------------------------------
# distance detector: fraction of nearest neighbors sharing the noisy label
# ---------------------------------------------------------------------------


def knn_clean_scores(features, noisy_labels, k: int = 10, ids=None) -> CleanScores:
    """Cosine-kNN label agreement on unit-norm rows; self excluded."""
    data = np.asarray(getattr(features, "data", features), dtype=np.float32)
    if ids is None:
        ids = getattr(features, "ids", None)
        if ids is None:
            ids = np.arange(len(data)).astype(str)
    labels = np.asarray(noisy_labels)
    n = len(data)
    if labels.shape[0] != n:
        raise ValueError("labels length mismatch")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k >= n:
        raise ValueError(f"k must be < number of samples ({n})")
    scores = np.empty(n)
    chunk = max(1, min(n, int(4e7) // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sims = data[start:stop] @ data.T
        rows = np.arange(start, stop)
        sims[rows - start, rows] = -np.inf  # exclude self by index
        nbr = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
        scores[start:stop] = (labels[nbr] == labels[rows, None]).mean(axis=1)
    return CleanScores(np.asarray(ids), scores, Origin.KNN)


# ---------------------------------------------------------------------------
# linear separation on frozen contrastive features
# ---------------------------------------------------------------------------


def _fit_balanced_logistic(X, y, ridge: float = LOGISTIC_RIDGE) -> LogisticRegression:
    """Class-balanced logistic regression, quasi-second-order full-batch fit.

    The ridge term exists only for numerical conditioning; C maps the
    mean-loss-plus-ridge objective onto sklearn's parameterization.
    """
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError(
            "pseudo targets collapse to a single class; adjust the binarization threshold"
        )
    clf = LogisticRegression(
        C=1.0 / (ridge * len(y)),
        class_weight="balanced",
        solver="lbfgs",
        tol=LOGISTIC_TOL,
        max_iter=LOGISTIC_MAX_ITER,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # separable data can hit max_iter harmlessly
        clf.fit(X, y)
    return clf


class LinearSeparator(BaseEstimator):
    """Logistic separator over feature rows predicting per-sample cleanliness.

    fit() takes continuous pseudo targets (1 = clean) which are binarized at
    `threshold`; predict_proba()[:, 1] is the clean probability.
    """

    def __init__(self, threshold: float = DEFAULT_THRESHOLD, ridge: float = LOGISTIC_RIDGE):
        self.threshold = threshold
        self.ridge = ridge

    def fit(self, X, pseudo_targets, meta: dict | None = None):
        X = np.asarray(getattr(X, "data", X))
        targets = np.asarray(getattr(pseudo_targets, "values", pseudo_targets), dtype=float)
        if targets.shape[0] != X.shape[0]:
            raise ValueError("features and pseudo_targets length mismatch")
        y = (targets >= self.threshold).astype(int)
        clf = _fit_balanced_logistic(X, y, ridge=self.ridge)
        # orient so class 1 = clean
        clean_col = int(np.flatnonzero(clf.classes_ == 1)[0])
        sign = 1.0 if clean_col == 1 else -1.0
        self.coef_ = sign * clf.coef_[0]
        self.intercept_ = sign * float(clf.intercept_[0])
        if not np.all(np.isfinite(self.coef_)) or not np.isfinite(self.intercept_):
            raise ValueError("separator coefficients are not finite")
        self.meta = dict(meta or {})
        return self

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "coef_"):
            raise NotFittedError("LinearSeparator is not fitted")
        X = np.asarray(getattr(X, "data", X))
        if X.shape[1] != self.coef_.shape[0]:
            raise ValueError(
                f"feature dimension {X.shape[1]} does not match separator ({self.coef_.shape[0]})"
            )
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        d = self.decision_function(X)
        p_clean = 1.0 / (1.0 + np.exp(-d))
        return np.stack([1.0 - p_clean, p_clean], axis=1)


def fit_linear_separator(features, pseudo_targets, threshold: float = DEFAULT_THRESHOLD, meta: dict | None = None) -> LinearSeparator:
    """Fit the separator on the full pseudo-labeled set (no confident-subset
    selection by default; see `confident_subset` for the ablation)."""
    return LinearSeparator(threshold=threshold).fit(features, pseudo_targets, meta=meta)


def confident_subset(pseudo_targets: CleanScores, m: int) -> np.ndarray:
    """Indices of the m most confidently clean plus m most confidently noisy
    samples (optional ablation; full-set training is the default)."""
    order = np.argsort(pseudo_targets.values)
    return np.concatenate([order[:m], order[-m:]])


def apply_separator(separator: LinearSeparator, features, ids=None) -> CleanScores:
    data = np.asarray(getattr(features, "data", features))
    if ids is None:
        ids = getattr(features, "ids", None)
        if ids is None:
            ids = np.arange(len(data)).astype(str)
    scores = separator.predict_proba(data)[:, 1]
    return CleanScores(np.asarray(ids), scores, Origin.LINEAR_SEP)


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------


def _score_values(scores) -> np.ndarray:
    return np.asarray(getattr(scores, "values", scores), dtype=np.float64)


def auroc(scores, oracle_is_clean) -> float:
    """Probability a random clean sample outscores a random noisy one
    (Mann-Whitney statistic; ties count one half)."""
    values = _score_values(scores)
    flags = np.asarray(oracle_is_clean, dtype=bool)
    if values.shape[0] != flags.shape[0]:
        raise ValueError("scores/oracle length mismatch")
    n_pos = int(flags.sum())
    n_neg = int((~flags).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both oracle classes must be present")
    ranks = rankdata(values)
    pos_rank_sum = ranks[flags].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def recall_clean(declared_clean, oracle_is_clean) -> float:
    declared = np.asarray(declared_clean, dtype=bool)
    flags = np.asarray(oracle_is_clean, dtype=bool)
    if not flags.any():
        raise ValueError("no clean samples in oracle")
    return float(declared[flags].mean())


def recall_noise(declared_clean, oracle_is_clean) -> float:
    declared = np.asarray(declared_clean, dtype=bool)
    flags = np.asarray(oracle_is_clean, dtype=bool)
    if flags.all():
        raise ValueError("no noisy samples in oracle")
    return float((~declared)[~flags].mean())


def pearson_corr(a, b) -> float:
    x = _score_values(a)
    y = _score_values(b)
    if x.shape[0] != y.shape[0]:
        raise ValueError("vectors must have equal length")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("pearson correlation undefined for a constant vector")
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / np.sqrt((xc**2).sum() * (yc**2).sum()))
