"""Per-epoch combination of the loss-based detector Z and the separator W."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .detectors import DEFAULT_THRESHOLD, CleanScores, Origin


class StrategyKind(str, enum.Enum):
    Z_ONLY = "Z_ONLY"
    W_ONLY = "W_ONLY"
    AND = "AND"
    OR = "OR"
    Z_THEN_W = "Z_THEN_W"
    W_THEN_Z = "W_THEN_Z"
    ALTERNATE_MOD2 = "ALTERNATE_MOD2"
    RANDOM_EPOCH = "RANDOM_EPOCH"
    RANDOM_SAMPLE = "RANDOM_SAMPLE"


_SUCCESSIVE = (StrategyKind.Z_THEN_W, StrategyKind.W_THEN_Z)


@dataclass(frozen=True)
class CombinationStrategy:
    kind: StrategyKind
    switch_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind in _SUCCESSIVE:
            if self.switch_epoch is None or self.switch_epoch <= 0:
                raise ValueError(f"{self.kind.value} requires switch_epoch > 0")

    def validate_for(self, total_epochs: int):
        if self.kind in _SUCCESSIVE and not 0 < self.switch_epoch < total_epochs:
            raise ValueError(
                f"switch_epoch must lie strictly inside (0, {total_epochs}), got {self.switch_epoch}"
            )


def _all_clean(like: CleanScores) -> CleanScores:
    return CleanScores(like.ids, np.ones(len(like)), Origin.COMBINED)


def active_scores(
    strategy: CombinationStrategy,
    epoch: int,
    z: CleanScores | None,
    w: CleanScores | None,
    rng: np.random.Generator | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> CleanScores:
    """Detection used at this epoch.

    ALTERNATE_MOD2 returns W on even epochs and Z on odd ones. AND marks a
    sample noisy only when both detectors do (clean set = union of clean
    sets); OR marks it noisy when either does. Boolean combinations emit
    {0, 1} values; every other kind passes the chosen detector's continuous
    values through. When a needed detector is missing (warm-up), the
    alternating and random kinds fall back to W if it exists, else all-clean.
    """
    kind = strategy.kind
    if z is not None and w is not None:
        z.aligned_with(w)

    def pick(first: CleanScores | None, second: CleanScores | None) -> CleanScores:
        if first is not None:
            return first
        if second is not None:
            return second
        raise ValueError("no detector scores available")

    def fallback() -> CleanScores:
        # warm-up rule: W if it exists, else everything counts as clean
        if w is not None:
            return w
        if z is not None:
            return _all_clean(z)
        raise ValueError("no detector scores available")

    if kind == StrategyKind.Z_ONLY:
        if z is None:
            raise ValueError("Z_ONLY requires Z scores")
        return z
    if kind == StrategyKind.W_ONLY:
        if w is None:
            raise ValueError("W_ONLY requires W scores")
        return w
    if kind in (StrategyKind.AND, StrategyKind.OR):
        if z is None or w is None:
            return _all_clean(pick(w, z))
        zc = z.binarize(threshold)
        wc = w.binarize(threshold)
        clean = (zc | wc) if kind == StrategyKind.AND else (zc & wc)
        return CleanScores(z.ids, clean.astype(float), Origin.COMBINED)
    if kind in _SUCCESSIVE:
        first, second = (z, w) if kind == StrategyKind.Z_THEN_W else (w, z)
        chosen = first if epoch < strategy.switch_epoch else second
        return pick(chosen, first if chosen is second else second)
    if kind == StrategyKind.ALTERNATE_MOD2:
        if z is None or w is None:
            return fallback()
        return w if epoch % 2 == 0 else z
    if kind == StrategyKind.RANDOM_EPOCH:
        if rng is None:
            raise ValueError("RANDOM_EPOCH requires an rng")
        if z is None or w is None:
            return fallback()
        return w if rng.random() < 0.5 else z
    if kind == StrategyKind.RANDOM_SAMPLE:
        if rng is None:
            raise ValueError("RANDOM_SAMPLE requires an rng")
        if z is None or w is None:
            return fallback()
        use_w = rng.random(len(z)) < 0.5
        values = np.where(use_w, w.values, z.values)
        return CleanScores(z.ids, values, Origin.COMBINED)
    raise ValueError(f"unhandled strategy kind: {kind}")
