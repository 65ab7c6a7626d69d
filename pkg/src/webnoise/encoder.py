"""Small pre-activation residual encoder with a projection head.

The network exposes the output of each residual stage so that intermediate
representations can be probed; stage outputs are average-pooled and
L2-normalized by the feature extraction code. Block indices run 0..B-1 over
the residual stages and index B addresses the projection head output.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "webnoise-encoder/1"


@dataclass(frozen=True)
class EncoderSpec:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    projection_dim: int = 32
    temperature: float = 0.5  # default contrastive temperature for pretraining

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("encoder needs at least 2 residual stages")
        if self.projection_dim < 2:
            raise ValueError("projection_dim must be >= 2 for L2 normalization")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    @property
    def n_blocks(self) -> int:
        """Number of residual stages; the projection head is block index n_blocks."""
        return len(self.widths)

    @property
    def block_dims(self) -> tuple[int, ...]:
        return tuple(self.widths) + (self.projection_dim,)


class PreActBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        residual = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + residual


class SmallResNet(nn.Module):
    """Stem conv, B pre-activation stages, projection head, optional classifier."""

    def __init__(self, spec: EncoderSpec, num_classes: int | None = None):
        super().__init__()
        self.spec = spec
        self.stem = nn.Conv2d(3, spec.widths[0], 3, stride=1, padding=1, bias=False)
        stages = []
        in_ch = spec.widths[0]
        for i, width in enumerate(spec.widths):
            blocks = []
            for b in range(spec.blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(PreActBlock(in_ch, width, stride))
                in_ch = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.final_bn = nn.BatchNorm2d(spec.widths[-1])
        w = spec.widths[-1]
        self.projection = nn.Sequential(
            nn.Linear(w, w), nn.ReLU(inplace=True), nn.Linear(w, spec.projection_dim)
        )
        self.classifier = nn.Linear(w, num_classes) if num_classes else None
        # forward-pass counter, used by compute-budget checks
        self.n_forward = 0

    def forward_blocks(self, x) -> list[torch.Tensor]:
        """Feature maps at the end of each residual stage."""
        self.n_forward += 1
        out = self.stem(x)
        feats = []
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        return feats

    def pooled(self, x) -> torch.Tensor:
        feats = self.forward_blocks(x)
        out = F.relu(self.final_bn(feats[-1]))
        return out.mean(dim=(2, 3))

    def project(self, x) -> torch.Tensor:
        """L2-normalized projection head output."""
        z = self.projection(self.pooled(x))
        return F.normalize(z, dim=1)

    def forward(self, x) -> torch.Tensor:
        if self.classifier is None:
            raise RuntimeError("model has no classifier head")
        return self.classifier(self.pooled(x))

    def logits_and_projection(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.pooled(x)
        return self.classifier(h), F.normalize(self.projection(h), dim=1)

    def logits_projection_features(self, x):
        """One trunk pass returning logits, normalized projection and pooled features."""
        h = self.pooled(x)
        return self.classifier(h), F.normalize(self.projection(h), dim=1), h


def save_checkpoint(
    path,
    model: SmallResNet,
    seed: int,
    epochs_trained: int,
    pretrained: bool,
    loss_history: list[float] | None = None,
):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(model.spec),
        "seed": seed,
        "epochs_trained": epochs_trained,
        "pretrained": pretrained,
        "loss_history": list(loss_history or []),
        "state_dict": {k: v for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)


def load_checkpoint(path, num_classes: int | None = None) -> tuple[SmallResNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    spec_dict = dict(payload["spec"])
    spec_dict["widths"] = tuple(spec_dict["widths"])
    spec = EncoderSpec(**spec_dict)
    model = SmallResNet(spec, num_classes=num_classes)
    missing, unexpected = model.load_state_dict(payload["state_dict"], strict=False)
    unexpected = [k for k in unexpected if not k.startswith("classifier.")]
    missing = [k for k in missing if not k.startswith("classifier.")]
    if missing or unexpected:
        raise ValueError(f"checkpoint/model mismatch: missing={missing} unexpected={unexpected}")
    meta = {k: payload[k] for k in ("seed", "epochs_trained", "pretrained", "loss_history")}
    return model, meta
