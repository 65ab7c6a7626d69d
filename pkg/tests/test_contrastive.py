import math

import numpy as np
import pytest
import torch

from webnoise.contrastive import PretrainConfig, icont_loss, nt_xent, pretrain
from webnoise.encoder import EncoderSpec


def unit_rows(n, d, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, d, generator=g, dtype=dtype)
    return torch.nn.functional.normalize(z, dim=1)


class TestNtXent:
    def test_identical_embeddings_ln3(self):
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        assert nt_xent(z, z, 1.0).item() == pytest.approx(math.log(3), abs=1e-9)

    def test_antipodal_pairs_closed_form(self):
        # positives identical, every cross-pair similarity -1
        z = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        expected = math.log(1 + 2 * math.exp(-2))
        assert nt_xent(z, z, 1.0).item() == pytest.approx(expected, abs=1e-9)

    def test_rotation_invariance(self):
        z1 = unit_rows(6, 5, seed=1)
        z2 = unit_rows(6, 5, seed=2)
        q, _ = torch.linalg.qr(torch.randn(5, 5, generator=torch.Generator().manual_seed(3), dtype=torch.float64))
        a = nt_xent(z1, z2, 0.5).item()
        b = nt_xent(z1 @ q, z2 @ q, 0.5).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_single_sample_rejected(self):
        z = unit_rows(1, 4)
        with pytest.raises(ValueError, match="at least 2"):
            nt_xent(z, z, 0.5)

    def test_requires_unit_norm(self):
        z = torch.full((3, 4), 0.4, dtype=torch.float64)
        with pytest.raises(ValueError, match="normalized"):
            nt_xent(z, z, 0.5)

    def test_gradient_matches_finite_differences(self):
        # differentiate through normalization so perturbations stay valid
        def value(raw1, raw2):
            z1 = torch.nn.functional.normalize(raw1, dim=1)
            z2 = torch.nn.functional.normalize(raw2, dim=1)
            return nt_xent(z1, z2, 0.5)

        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            raw1 = torch.randn(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
            raw2 = torch.randn(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
            loss = value(raw1, raw2)
            grad1, grad2 = torch.autograd.grad(loss, (raw1, raw2))
            h = 1e-6
            num = torch.zeros_like(raw1)
            with torch.no_grad():
                for i in range(raw1.shape[0]):
                    for j in range(raw1.shape[1]):
                        up = raw1.clone(); up[i, j] += h
                        dn = raw1.clone(); dn[i, j] -= h
                        num[i, j] = (value(up, raw2) - value(dn, raw2)) / (2 * h)
            rel = (grad1 - num).norm() / num.norm()
            assert rel < 1e-4
            assert torch.isfinite(grad2).all()


class TestIcontLoss:
    def test_p_zero_reduces_to_nt_xent(self):
        z1, z2 = unit_rows(5, 4, 1), unit_rows(5, 4, 2)
        labels = torch.tensor([0, 1, 0, 2, 1])
        a = icont_loss(z1, z2, labels, torch.zeros(5), 0.5).item()
        b = nt_xent(z1, z2, 0.5).item()
        assert a == pytest.approx(b, abs=1e-10)

    def test_p_one_same_class_brute_force(self):
        n = 5
        z1, z2 = unit_rows(n, 4, 3), unit_rows(n, 4, 4)
        labels = torch.zeros(n, dtype=torch.long)
        value = icont_loss(z1, z2, labels, torch.ones(n), 0.5).item()

        z = torch.cat([z1, z2])
        sim = z @ z.t() / 0.5
        total = 0.0
        for anchor in range(2 * n):
            cands = [c for c in range(2 * n) if c != anchor]
            denom = torch.logsumexp(sim[anchor, cands], dim=0)
            total += -sum((sim[anchor, c] - denom).item() for c in cands) / len(cands)
        assert value == pytest.approx(total / (2 * n), abs=1e-9)

    def test_zero_p_scaling_noop_and_continuity_at_one(self):
        z1, z2 = unit_rows(6, 4, 5), unit_rows(6, 4, 6)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        zero = torch.zeros(6)
        assert icont_loss(z1, z2, labels, zero, 0.1).item() == icont_loss(z1, z2, labels, 0.7 * zero, 0.1).item()

        def grads(p):
            a = z1.clone().requires_grad_(True)
            loss = icont_loss(a, z2, labels, p, 0.1)
            return torch.autograd.grad(loss, a)[0].flatten()

        g1 = grads(torch.ones(6))
        g2 = grads(torch.full((6,), 0.99))
        cos = torch.dot(g1, g2) / (g1.norm() * g2.norm())
        assert cos > 0.999

    def test_lipschitz_in_p(self):
        z1, z2 = unit_rows(6, 4, 7), unit_rows(6, 4, 8)
        labels = torch.tensor([0, 1, 2, 0, 1, 2])
        p = torch.full((6,), 0.5)
        base = icont_loss(z1, z2, labels, p, 0.1).item()
        for eps in (1e-3, 1e-4):
            bumped = icont_loss(z1, z2, labels, p + eps, 0.1).item()
            assert abs(bumped - base) < 50 * eps

    def test_p_out_of_range_rejected(self):
        z1, z2 = unit_rows(3, 4, 9), unit_rows(3, 4, 10)
        with pytest.raises(ValueError, match="0, 1"):
            icont_loss(z1, z2, torch.zeros(3, dtype=torch.long), torch.tensor([0.0, 0.5, 1.2]), 0.1)

    def test_single_sample_rejected(self):
        z = unit_rows(1, 4)
        with pytest.raises(ValueError):
            icont_loss(z, z, torch.zeros(1, dtype=torch.long), torch.zeros(1), 0.1)


def tiny_images(n=48, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, size, size, 3)).astype(np.float32)


class TestPretrain:
    def test_epochs_zero_flagged_random(self, tmp_path):
        from webnoise.encoder import load_checkpoint

        path = tmp_path / "enc.pt"
        pretrain(tiny_images(), EncoderSpec(widths=(4, 8), projection_dim=4), PretrainConfig(epochs=0, seed=1), out_path=path)
        _, meta = load_checkpoint(path)
        assert meta["pretrained"] is False
        assert meta["epochs_trained"] == 0

    def test_identical_seeds_identical_checkpoints(self):
        spec = EncoderSpec(widths=(4, 8), projection_dim=4)
        cfg = PretrainConfig(epochs=2, batch_size=24, lr=0.1, seed=5)
        m1 = pretrain(tiny_images(), spec, cfg)
        m2 = pretrain(tiny_images(), spec, cfg)
        for (k1, v1), (k2, v2) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert k1 == k2
            assert torch.equal(v1, v2), k1

    def test_loss_history_recorded(self):
        spec = EncoderSpec(widths=(4, 8), projection_dim=4)
        model = pretrain(tiny_images(), spec, PretrainConfig(epochs=3, batch_size=24, seed=2))
        assert len(model.loss_history) == 3
        assert all(np.isfinite(v) for v in model.loss_history)


class TestPretrainSeparability:
    def test_two_class_blobs_become_probe_separable(self):
        # pretraining on a noisy mixture makes the hidden ID/OOD split
        # linearly separable in frozen features
        from webnoise.data import NoiseSpec, build_noisy_dataset, probe_split
        from webnoise.features import extract_all_blocks, probe_depth_auroc
        from webnoise.synth import make_corpus

        corpus = make_corpus("gradients", n_train=300, n_test=40, n_ood=200, n_classes=2, size=32, seed=0)
        manifest, images = build_noisy_dataset(
            corpus["train_images"], corpus["train_labels"], corpus["ood_images"], NoiseSpec(0.4, seed=1)
        )
        spec = EncoderSpec(widths=(8, 16), projection_dim=16)
        model = pretrain(images, spec, PretrainConfig(epochs=30, batch_size=150, lr=0.2, seed=0))
        feats = extract_all_blocks(model, images, ids=manifest.image_ids)
        split = probe_split(manifest, 0.2, seed=0)
        profile = probe_depth_auroc(feats, manifest.oracle_is_clean, split)
        assert max(profile.values()) >= 0.95
