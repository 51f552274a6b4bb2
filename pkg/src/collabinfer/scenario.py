"""Synthetic world: labelled images, random device groups, white-patch occlusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "ScenarioCfg",
    "Dataset",
    "RoundState",
    "RoundBatch",
    "gen_dataset",
    "assign_groups",
    "patch_side",
    "corrupt",
    "build_round",
    "build_rounds",
    "scenario_rng",
]

# stream domains, so scenario draws never collide with channel draws
DOMAIN_DATA = 11
DOMAIN_ROUND = 12


@dataclass(frozen=True)
class ScenarioCfg:
    n_devices: int = 16
    n_groups: int = 4
    p_patch: float = 0.8
    patch_scale: float = 0.4
    side: int = 32
    n_classes: int = 10
    noise_sigma: float = 0.15
    contrast: float = 0.2   # spread of class-template intensities around 0.5
    n_train: int = 500     # per class
    n_val: int = 100
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1 or self.n_devices < 1 or self.n_devices % self.n_groups:
            raise ConfigError(
                f"n_groups={self.n_groups} must divide n_devices={self.n_devices}"
            )
        if not 0.0 <= self.p_patch <= 1.0:
            raise ConfigError(f"p_patch must lie in [0, 1], got {self.p_patch}")
        if not 0.0 <= self.patch_scale < 1.0:
            raise ConfigError(f"patch_scale must lie in [0, 1), got {self.patch_scale}")
        if self.n_classes < 2 or self.side < 1:
            raise ConfigError("need at least two classes and a positive image side")

    @property
    def n_pixels(self) -> int:
        return self.side * self.side


@dataclass
class Dataset:
    """Class-balanced splits of flattened images in [0, 1] plus the class means."""

    means: np.ndarray
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"X_{name}"), getattr(self, f"y_{name}")


def scenario_rng(seed: int, domain: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain, *index])


def _class_means(cfg: ScenarioCfg, rng: np.random.Generator) -> np.ndarray:
    # smooth low-contrast templates: a coarse random grid upsampled to the image
    coarse = 8 if cfg.side % 8 == 0 else 1
    half = cfg.contrast / 2
    cells = rng.uniform(0.5 - half, 0.5 + half, size=(cfg.n_classes, coarse, coarse))
    rep = cfg.side // coarse
    means = np.repeat(np.repeat(cells, rep, axis=1), rep, axis=2)
    return means.reshape(cfg.n_classes, cfg.n_pixels)


def _sample(means, labels, sigma, rng):
    x = means[labels] + sigma * rng.standard_normal((labels.size, means.shape[1]))
    return np.clip(x, 0.0, 1.0)


def gen_dataset(cfg: ScenarioCfg, noise_sigma: float | None = None) -> Dataset:
    sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    means = _class_means(cfg, scenario_rng(cfg.seed, DOMAIN_DATA, 0))
    splits = {}
    for k, (name, per_class) in enumerate(
        (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))
    ):
        rng = scenario_rng(cfg.seed, DOMAIN_DATA, k + 1)
        labels = np.repeat(np.arange(cfg.n_classes), per_class)
        rng.shuffle(labels)
        splits[f"X_{name}"] = _sample(means, labels, sigma, rng)
        splits[f"y_{name}"] = labels
    return Dataset(means=means, **splits)


def assign_groups(n_devices: int, n_groups: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random partition into equal groups; returns device -> group."""
    if n_groups < 1 or n_devices % n_groups:
        raise ConfigError(f"n_groups={n_groups} must divide n_devices={n_devices}")
    groups = np.repeat(np.arange(n_groups), n_devices // n_groups)
    return rng.permutation(groups)


def patch_side(patch_scale: float, side: int) -> int:
    # area ratio, so the side scales with the square root
    return int(round(math.sqrt(patch_scale) * side))


def corrupt(x: np.ndarray, patch_scale: float, rng: np.random.Generator,
            side: int | None = None) -> np.ndarray:
    """Paint a white square covering ~``patch_scale`` of the image area."""
    x = np.asarray(x, dtype=np.float64)
    side = side or int(round(math.sqrt(x.size)))
    if side * side != x.size:
        raise ConfigError(f"image of {x.size} pixels is not square")
    p = patch_side(patch_scale, side)
    img = x.reshape(side, side).copy()
    if p > 0:
        r, c = rng.integers(0, side - p + 1, size=2)
        img[r:r + p, c:c + p] = 1.0
    return img.reshape(-1)


@dataclass
class RoundState:
    groups: np.ndarray          # (N,) device -> group
    group_samples: np.ndarray   # (G, P) clean x_g
    group_labels: np.ndarray    # (G,)
    observations: np.ndarray    # (N, P) x_hat_i
    corrupted: np.ndarray       # (N,) bool
    extras: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.group_labels[self.groups]


@dataclass
class RoundBatch:
    """Stacked rounds, leading axis = round."""

    observations: np.ndarray   # (R, N, P)
    labels: np.ndarray         # (R, N)
    groups: np.ndarray         # (R, N)
    corrupted: np.ndarray      # (R, N)
    indices: np.ndarray        # (R,) round indices used for seeding

    def __len__(self):
        return self.labels.shape[0]

    def chunks(self, size: int):
        for a in range(0, len(self), size):
            sl = slice(a, a + size)
            yield RoundBatch(self.observations[sl], self.labels[sl], self.groups[sl],
                             self.corrupted[sl], self.indices[sl])


def build_round(cfg: ScenarioCfg, X: np.ndarray, y: np.ndarray,
                rng: np.random.Generator) -> RoundState:
    groups = assign_groups(cfg.n_devices, cfg.n_groups, rng)
    pick = rng.integers(0, len(y), size=cfg.n_groups)
    xg, yg = X[pick], y[pick]
    corrupted = rng.random(cfg.n_devices) < cfg.p_patch
    obs = xg[groups].copy()
    for i in np.flatnonzero(corrupted):
        obs[i] = corrupt(obs[i], cfg.patch_scale, rng, cfg.side)
    return RoundState(groups, xg, yg, obs, corrupted)


def build_rounds(cfg: ScenarioCfg, X: np.ndarray, y: np.ndarray, seed: int,
                 indices, domain: int = DOMAIN_ROUND) -> RoundBatch:
    """One independently seeded round per index; order-independent."""
    indices = np.asarray(list(indices), dtype=np.int64)
    states = [
        build_round(cfg, X, y, scenario_rng(seed, domain, int(r))) for r in indices
    ]
    return RoundBatch(
        observations=np.stack([s.observations for s in states]) if states else
        np.zeros((0, cfg.n_devices, cfg.n_pixels)),
        labels=np.stack([s.labels for s in states]) if states else
        np.zeros((0, cfg.n_devices), dtype=int),
        groups=np.stack([s.groups for s in states]) if states else
        np.zeros((0, cfg.n_devices), dtype=int),
        corrupted=np.stack([s.corrupted for s in states]) if states else
        np.zeros((0, cfg.n_devices), dtype=bool),
        indices=indices,
    )
