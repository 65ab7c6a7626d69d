import numpy as np
import pytest
import torch

import webnoise.training as training_mod
from webnoise.cli import main
from webnoise.contrastive import PretrainConfig, pretrain
from webnoise.data import NoiseSpec, build_noisy_dataset
from webnoise.detectors import confident_subset, CleanScores, Origin
from webnoise.encoder import EncoderSpec, SmallResNet
from webnoise.synth import make_corpus
from webnoise.training import TrainConfig, train


class TestEncoderSpecInvariants:
    def test_minimum_stages(self):
        with pytest.raises(ValueError, match="2 residual stages"):
            EncoderSpec(widths=(8,))

    def test_projection_dim(self):
        with pytest.raises(ValueError, match="projection_dim"):
            EncoderSpec(widths=(4, 8), projection_dim=1)

    def test_block_dims(self):
        spec = EncoderSpec(widths=(4, 8), projection_dim=6)
        assert spec.block_dims == (4, 8, 6)
        assert spec.n_blocks == 2


class TestConfidentSubset:
    def test_picks_extremes(self):
        scores = CleanScores(np.arange(6).astype(str), np.array([0.9, 0.1, 0.5, 0.99, 0.01, 0.6]), Origin.SMALL_LOSS)
        idx = confident_subset(scores, 2)
        assert set(scores.values[idx]) == {0.01, 0.1, 0.9, 0.99}


class TestPretrainDivergence:
    def test_nan_aborts_with_diagnostic(self):
        images = np.random.default_rng(0).random((24, 16, 16, 3)).astype(np.float32)
        spec = EncoderSpec(widths=(4, 8), projection_dim=4)
        with pytest.raises(RuntimeError, match="diverged"):
            pretrain(images, spec, PretrainConfig(epochs=30, batch_size=24, lr=1e9, seed=0))


@pytest.fixture(scope="module")
def tiny_setup():
    corpus = make_corpus("gradients", n_train=96, n_test=48, n_ood=64, n_classes=4, size=32, seed=6)
    manifest, images = build_noisy_dataset(
        corpus["train_images"], corpus["train_labels"], corpus["ood_images"], NoiseSpec(0.25, seed=3)
    )
    torch.manual_seed(4)
    encoder = SmallResNet(EncoderSpec(widths=(4, 8), projection_dim=8))
    return manifest, images, corpus["test_images"], corpus["test_labels"], encoder


class TestTrainVariants:
    def test_interrupt_writes_checkpoint(self, tiny_setup, tmp_path, monkeypatch):
        manifest, images, test_images, test_labels, encoder = tiny_setup
        calls = {"n": 0}
        original = training_mod.optimize_epoch

        def boom(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] >= 2:
                raise KeyboardInterrupt
            return original(*args, **kwargs)

        monkeypatch.setattr(training_mod, "optimize_epoch", boom)
        cfg = TrainConfig(epochs=4, warmup_epochs=1, batch_size=48, lr=0.05, seed=0)
        with pytest.raises(KeyboardInterrupt):
            train(manifest, images, test_images, test_labels, encoder, cfg, out_dir=tmp_path, config_hash="dead")
        assert (tmp_path / "model_dead_interrupt.pt").exists()

    def test_live_w_features_mode(self, tiny_setup):
        manifest, images, test_images, test_labels, encoder = tiny_setup
        cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=48, lr=0.05, seed=1, live_w_features=True)
        res = train(manifest, images, test_images, test_labels, encoder, cfg)
        assert len(res.history) == 2

    def test_p_only_ssl_weighting(self, tiny_setup):
        manifest, images, test_images, test_labels, encoder = tiny_setup
        cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=48, lr=0.05, seed=1, ssl_weight_mode="p_only")
        res = train(manifest, images, test_images, test_labels, encoder, cfg)
        assert len(res.history) == 2

    def test_strategy_validated_against_epochs(self):
        from webnoise.schedule import CombinationStrategy, StrategyKind

        with pytest.raises(ValueError, match="switch_epoch"):
            TrainConfig(epochs=4, warmup_epochs=1,
                        strategy=CombinationStrategy(StrategyKind.Z_THEN_W, switch_epoch=9))


TINY_CONFIG = """\
[dataset]
n_classes = 4
n_train = 96
n_test = 48
n_ood = 64
seed = 2

[noise]
ratio = 0.25
seed = 5

[encoder]
widths = 4,8
projection_dim = 8

[pretrain]
epochs = 1
batch_size = 48
seed = 4

[train]
epochs = 2
warmup_epochs = 1
batch_size = 48
lr = 0.05
knn_k = 5

[cotrain]
strategy = OURS

[run]
seeds = 1
out_dir = {out}
"""


class TestCliHeavySubcommands:
    @pytest.fixture(scope="class")
    def prepared(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("runs")
        config_path = tmp_path_factory.mktemp("cfg") / "exp.ini"
        config_path.write_text(TINY_CONFIG.format(out=out))
        assert main(["build-data", "--config", str(config_path)]) == 0
        assert main(["pretrain", "--config", str(config_path)]) == 0
        return config_path, out

    def test_detect_cli(self, prepared, capsys):
        config_path, out = prepared
        assert main(["detect", "--config", str(config_path)]) == 0
        captured = capsys.readouterr().out
        assert "oracle" in captured
        from webnoise.config import load_config

        cfg = load_config(config_path)
        table = out / cfg.hash() / "detect" / "seed1" / f"table1_{cfg.hash()}.csv"
        assert table.exists()
        text = table.read_text()
        for metric in ("none", "small_loss", "knn", "w_small_loss", "w_knn", "oracle"):
            assert metric in text

    def test_cotrain_cli_and_report(self, prepared, capsys):
        config_path, out = prepared
        assert main(["cotrain", "--config", str(config_path)]) == 0
        assert main(["report", "--config", str(config_path)]) == 0
        capsys.readouterr()
        assert (out / "report" / "cotrain_table.csv").exists()
