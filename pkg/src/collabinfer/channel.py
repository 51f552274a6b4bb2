"""Sidelink packet-erasure channel.

Payloads are cut into transport blocks (TBs) of ``tbs`` values.  Each TB is
lost independently with probability ``per``; lost positions are replaced by
``fill``.  There are no retransmissions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "ErasureChannelCfg",
    "TransmissionRecord",
    "KIND_QUERY",
    "KIND_FEATURE",
    "n_blocks",
    "segment",
    "keep_mask",
    "transmit",
    "link_rng",
    "round_rng",
]

KIND_QUERY = 1
KIND_FEATURE = 2


@dataclass(frozen=True)
class ErasureChannelCfg:
    tbs: int = 40
    per: float = 0.1
    fill: float = 0.0

    def __post_init__(self):
        if int(self.tbs) != self.tbs or self.tbs < 1:
            raise ConfigError(f"tbs must be a positive integer, got {self.tbs}")
        if not 0.0 <= self.per <= 1.0:
            raise ConfigError(f"per must lie in [0, 1], got {self.per}")

    @property
    def noiseless(self) -> bool:
        return self.per == 0.0


@dataclass(frozen=True)
class TransmissionRecord:
    sent: int
    erased: int
    length: int


def n_blocks(length: int, tbs: int) -> int:
    return math.ceil(length / tbs) if length else 0


def segment(payload, tbs: int) -> list[np.ndarray]:
    if tbs < 1:
        raise ConfigError(f"tbs must be >= 1, got {tbs}")
    payload = np.asarray(payload, dtype=np.float64)
    return [payload[i:i + tbs] for i in range(0, payload.size, tbs)]


def link_rng(seed: int, round_index: int, sender: int, receiver: int,
             kind: int) -> np.random.Generator:
    """Independent stream for one logical link of one round."""
    return np.random.default_rng([seed, round_index, sender, receiver, kind])


def round_rng(seed: int, round_index: int, kind: int, domain: int = 0) -> np.random.Generator:
    """Stream shared by all links of one message kind in one round.

    Used by the vectorised pipeline: it draws the whole (receiver, sender,
    block) array from this stream at once, so each link still owns a fixed
    slice of the draws.
    """
    return np.random.default_rng([seed, domain, round_index, kind, 0x5EED])


def keep_mask(rng: np.random.Generator, links: tuple[int, ...], length: int,
              cfg: ErasureChannelCfg) -> tuple[np.ndarray, np.ndarray]:
    """Block-aligned survival mask for ``links``-shaped messages of ``length``.

    Returns ``(mask, block_ok)`` with shapes ``links + (length,)`` and
    ``links + (n_blocks,)``.  One uniform variate is consumed per TB.
    """
    nb = n_blocks(length, cfg.tbs)
    u = rng.random(links + (nb,))
    block_ok = u >= cfg.per
    mask = np.repeat(block_ok, cfg.tbs, axis=-1)[..., :length]
    return mask, block_ok


def transmit(payload, cfg: ErasureChannelCfg,
             rng: np.random.Generator) -> tuple[np.ndarray, TransmissionRecord]:
    payload = np.asarray(payload, dtype=np.float64)
    if payload.ndim != 1:
        raise ConfigError(f"payload must be a vector, got shape {payload.shape}")
    mask, block_ok = keep_mask(rng, (), payload.size, cfg)
    received = np.where(mask, payload, cfg.fill)
    record = TransmissionRecord(
        sent=block_ok.size, erased=int((~block_ok).sum()), length=payload.size
    )
    return received, record
