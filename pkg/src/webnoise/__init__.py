"""Learning image classifiers from web-style noisy labels.

The pipeline: build a controlled noisy dataset, pretrain an encoder with
unsupervised contrastive learning, detect out-of-distribution noise with a
linear separator over the frozen contrastive features, alternate that
detector with a small-loss detector every epoch, and train a three-term
robust objective, optionally with two-network voting co-training.
"""

from .augment import AugmentPolicy, mixup_batch, strong_view, weak_view
from .contrastive import PretrainConfig, icont_loss, nt_xent, pretrain
from .cotraining import CotrainStrategy, co_guess, cotrain, ensemble_predict, vote_noisy
from .data import DatasetManifest, NoiseSpec, NoisySample, build_noisy_dataset, probe_split
from .detectors import (
    CleanScores,
    GaussianMixture1D,
    LinearSeparator,
    Origin,
    apply_separator,
    auroc,
    fit_gmm_1d,
    fit_linear_separator,
    knn_clean_scores,
    pearson_corr,
    recall_clean,
    recall_noise,
    small_loss_clean_scores,
)
from .encoder import EncoderSpec, SmallResNet, load_checkpoint, save_checkpoint
from .features import FeatureMatrix, extract_features, probe_depth_auroc
from .schedule import CombinationStrategy, StrategyKind, active_scores
from .training import (
    TrainConfig,
    TrainResult,
    baseline_train,
    guess_label,
    ignore_the_noise_baseline,
    loss_ssl,
    loss_sup,
    pseudo_loss_scores,
    total_loss,
    train,
)

__version__ = "0.1.0"
