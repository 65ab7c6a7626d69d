"""Experiment configuration: flat key-value file with sections.

Unknown sections or keys are errors (silent config typos are the dominant
reproducibility failure). The config hash is computed over the canonical
resolved key-value map, so formatting and comments never change it.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .data import NoiseSpec
from .encoder import EncoderSpec
from .contrastive import PretrainConfig
from .schedule import CombinationStrategy, StrategyKind
from .training import TrainConfig
from .cotraining import CotrainStrategy


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _parse_intlist(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split(",") if tok.strip())


_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str, "intlist": _parse_intlist}

# section -> key -> (type, default); None default means required
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "dataset": {
        "n_classes": ("int", 10),
        "n_train": ("int", 1000),
        "n_test": ("int", 400),
        "n_ood": ("int", 800),
        "image_size": ("int", 32),
        "ood_kind": ("str", "gradients"),
        "seed": ("int", 1),
    },
    "noise": {
        "ratio": ("float", 0.4),
        "per_class": ("bool", True),
        "seed": ("int", 7),
    },
    "encoder": {
        "widths": ("intlist", (8, 16, 32)),
        "blocks_per_stage": ("int", 1),
        "projection_dim": ("int", 32),
        "temperature": ("float", 0.5),
    },
    "pretrain": {
        "epochs": ("int", 60),
        "batch_size": ("int", 250),
        "lr": ("float", 0.1),
        "weight_decay": ("float", 5e-4),
        "seed": ("int", 3),
    },
    "train": {
        "epochs": ("int", 30),
        "warmup_epochs": ("int", 5),
        "batch_size": ("int", 128),
        "lr": ("float", 0.1),
        "weight_decay": ("float", 5e-4),
        "momentum": ("float", 0.9),
        "strategy": ("str", "ALTERNATE_MOD2"),
        "switch_epoch": ("int", 0),
        "strategy_seed": ("int", 0),
        "w_block_index": ("int", 1),
        "live_w_features": ("bool", False),
        "sup_weight": ("float", 1.0),
        "ssl_weight": ("float", 1.0),
        "cont_weight": ("float", 1.0),
        "ssl_weight_mode": ("str", "noisy_gated"),
        "mixup_alpha": ("float", 1.0),
        "use_mixup": ("bool", True),
        "cont_temperature": ("float", 0.1),
        "randaugment_n": ("int", 1),
        "randaugment_m": ("int", 6),
        "knn_k": ("int", 10),
        "threshold": ("float", 0.5),
        "gmm_min_separation": ("float", 0.1),
    },
    "cotrain": {
        "enabled": ("bool", False),
        "strategy": ("str", "OURS"),
    },
    "run": {
        "seeds": ("intlist", (1, 2, 3)),
        "out_dir": ("str", "runs"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # flattened "section.key" -> parsed value

    def __getitem__(self, dotted: str):
        return self.values[dotted]

    def hash(self) -> str:
        canon = "\n".join(f"{k}={self.values[k]!r}" for k in sorted(self.values))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    # -- typed views -------------------------------------------------------
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(
            noise_ratio=self["noise.ratio"],
            seed=self["noise.seed"],
            per_class=self["noise.per_class"],
        )

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            widths=tuple(self["encoder.widths"]),
            blocks_per_stage=self["encoder.blocks_per_stage"],
            projection_dim=self["encoder.projection_dim"],
            temperature=self["encoder.temperature"],
        )

    def pretrain_config(self, seed: int | None = None) -> PretrainConfig:
        return PretrainConfig(
            epochs=self["pretrain.epochs"],
            batch_size=self["pretrain.batch_size"],
            lr=self["pretrain.lr"],
            weight_decay=self["pretrain.weight_decay"],
            seed=self["pretrain.seed"] if seed is None else seed,
        )

    def strategy(self) -> CombinationStrategy:
        kind = StrategyKind(self["train.strategy"])
        switch = self["train.switch_epoch"] or None
        return CombinationStrategy(kind=kind, switch_epoch=switch, seed=self["train.strategy_seed"])

    def train_config(self, seed: int, device: str = "cpu") -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            warmup_epochs=self["train.warmup_epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            weight_decay=self["train.weight_decay"],
            momentum=self["train.momentum"],
            strategy=self.strategy(),
            w_block_index=self["train.w_block_index"],
            live_w_features=self["train.live_w_features"],
            sup_weight=self["train.sup_weight"],
            ssl_weight=self["train.ssl_weight"],
            cont_weight=self["train.cont_weight"],
            ssl_weight_mode=self["train.ssl_weight_mode"],
            mixup_alpha=self["train.mixup_alpha"],
            use_mixup=self["train.use_mixup"],
            cont_temperature=self["train.cont_temperature"],
            randaugment_n=self["train.randaugment_n"],
            randaugment_m=self["train.randaugment_m"],
            knn_k=self["train.knn_k"],
            threshold=self["train.threshold"],
            gmm_min_separation=self["train.gmm_min_separation"],
            seed=seed,
            device=device,
        )

    def cotrain_strategy(self) -> CotrainStrategy:
        return CotrainStrategy(self["cotrain.strategy"])

    def seeds(self) -> tuple[int, ...]:
        return tuple(self["run.seeds"])


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ, _ = SCHEMA[section][key]
            try:
                values[f"{section}.{key}"] = _PARSERS[typ](raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    for section, keys in SCHEMA.items():
        for key, (typ, default) in keys.items():
            values.setdefault(f"{section}.{key}", default)

    cfg = ExperimentConfig(values)
    # fail fast on cross-field constraints
    cfg.noise_spec()
    cfg.encoder_spec()
    try:
        StrategyKind(values["train.strategy"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        CotrainStrategy(values["cotrain.strategy"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if values["dataset.ood_kind"] not in ("gradients", "related-shapes", "mixed"):
        raise ConfigError(f"unknown dataset.ood_kind: {values['dataset.ood_kind']!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config_text() -> str:
    buf = io.StringIO()
    for section, keys in SCHEMA.items():
        buf.write(f"[{section}]\n")
        for key, (typ, default) in keys.items():
            if typ == "intlist":
                rendered = ",".join(str(v) for v in default)
            elif typ == "bool":
                rendered = str(default).lower()
            else:
                rendered = str(default)
            buf.write(f"{key} = {rendered}\n")
        buf.write("\n")
    return buf.getvalue()
