"""End-to-end collaborative inference rounds, comm-module training and KPIs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import SplitModel
from .channel import KIND_FEATURE, KIND_QUERY, ErasureChannelCfg, keep_mask, n_blocks, round_rng
from .errors import ConfigError, TrainingError
from .mathcore import RAdam, Var, add, as_var, backward, cross_entropy, einsum, scale
from .scenario import RoundBatch, RoundState, ScenarioCfg, build_rounds
from .semgroup import CommModules, combine_batch, gen_key, gen_query, match_scores, prune_weights

__all__ = [
    "MODES",
    "PipelineCfg",
    "RoundMetrics",
    "ChannelDraws",
    "draw_channels",
    "collaborate",
    "infer_batch",
    "infer_round",
    "train_comm",
    "evaluate",
    "CollaborativeClassifier",
]

log = logging.getLogger(__name__)

MODES = ("semantic", "naive", "local", "noiseless")

# seed domains for channel draws
DOMAIN_TRAIN = 21
DOMAIN_EVAL = 22
# seed domains for scenario rounds
ROUNDS_TRAIN = 31
ROUNDS_EVAL = 32


@dataclass(frozen=True)
class PipelineCfg:
    split: int = 2
    data_channel: ErasureChannelCfg = field(default_factory=lambda: ErasureChannelCfg(per=0.1))
    query_channel: ErasureChannelCfg = field(default_factory=lambda: ErasureChannelCfg(per=0.0))
    rho: float = 0.0
    mode: str = "semantic"
    batch_size: int = 64
    epochs: int = 60
    lr: float = 1e-3
    rounds_per_epoch: int = 320
    hidden: tuple = (256, 128)
    query_size: int = 64
    key_size: int = 1024

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.batch_size < 1 or self.epochs < 0 or self.rounds_per_epoch < 1:
            raise ConfigError("batch_size and rounds_per_epoch must be >= 1, epochs >= 0")

    def effective(self) -> "PipelineCfg":
        """The channels actually used: noiseless zeroes both PERs."""
        if self.mode == "noiseless":
            return replace(
                self,
                data_channel=replace(self.data_channel, per=0.0),
                query_channel=replace(self.query_channel, per=0.0),
            )
        return self

    @property
    def trainable(self) -> bool:
        return self.mode in ("semantic", "noiseless")


@dataclass
class RoundMetrics:
    correct: np.ndarray           # (R, N) bool
    connections: np.ndarray       # (R,) avg sidelink connections per device
    query_tbs: np.ndarray         # (R,) TBs of query multicasts (per-link accounting)
    feature_tbs: np.ndarray       # (R,) TBs of feature unicasts
    predictions: np.ndarray | None = None

    @property
    def n_rounds(self) -> int:
        return self.correct.shape[0]

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean()) if self.correct.size else float("nan")

    @property
    def avg_connections(self) -> float:
        return float(self.connections.mean())

    @property
    def avg_query_tbs(self) -> float:
        return float(self.query_tbs.mean())

    @property
    def avg_feature_tbs(self) -> float:
        return float(self.feature_tbs.mean())

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "avg_connections": self.avg_connections,
            "query_tbs": self.avg_query_tbs,
            "feature_tbs": self.avg_feature_tbs,
            "rounds": self.n_rounds,
        }

    @staticmethod
    def concat(parts: list["RoundMetrics"]) -> "RoundMetrics":
        preds = [p.predictions for p in parts]
        return RoundMetrics(
            np.concatenate([p.correct for p in parts]),
            np.concatenate([p.connections for p in parts]),
            np.concatenate([p.query_tbs for p in parts]),
            np.concatenate([p.feature_tbs for p in parts]),
            None if any(p is None for p in preds) else np.concatenate(preds),
        )


@dataclass
class ChannelDraws:
    """Survival masks for one batch of rounds.

    query_keep: (B, N, N, Q), [b, i, j] = destination i's query reached source j.
    data_keep: (B, N, N, d), [b, i, j] = source j's feature reached destination i.
    A mask is None when that channel is error-free.  Diagonals are always kept
    since a device never transmits to itself.
    """

    query_keep: np.ndarray | None
    data_keep: np.ndarray | None


def draw_channels(cfg: PipelineCfg, n_devices: int, feature_dim: int, seed: int,
                  round_indices, domain: int = DOMAIN_EVAL) -> ChannelDraws:
    cfg = cfg.effective()
    eye = np.eye(n_devices, dtype=bool)

    def draw(ch: ErasureChannelCfg, length: int, kind: int):
        if ch.per == 0.0:
            return None
        masks = []
        for r in round_indices:
            m, _ = keep_mask(round_rng(seed, int(r), kind, domain), (n_devices, n_devices),
                             length, ch)
            m[eye] = True
            masks.append(m)
        return np.stack(masks)

    q = draw(cfg.query_channel, cfg.query_size, KIND_QUERY) if cfg.mode in ("semantic", "noiseless") else None
    d = draw(cfg.data_channel, feature_dim, KIND_FEATURE) if cfg.mode != "local" else None
    return ChannelDraws(q, d)


def _received(features: np.ndarray, keep: np.ndarray, fill: float) -> np.ndarray:
    """(B, N, d) features -> (B, N, N, d) copies as received by each destination."""
    return np.where(keep, features[:, None, :, :], fill)


def collaborate(model: SplitModel, comm: CommModules | None, features, cfg: PipelineCfg,
                draws: ChannelDraws):
    """Fuse features and decode.

    ``features``: (B, N, d) encoder outputs.  ``comm`` may hold tracked Vars.
    Returns ``(logits, weights, keep)``; ``weights`` are the pruned matching
    weights (a Var in the semantic modes), ``keep`` their survival mask.
    """
    cfg = cfg.effective()
    features = np.asarray(features, dtype=np.float64)
    b, n, _ = features.shape
    s = cfg.split
    if cfg.mode == "local":
        return model.decode(features, s), None, np.eye(n, dtype=bool)[None].repeat(b, 0)

    if cfg.mode == "naive":
        weights = as_var(np.full((b, n, n), 1.0 / n))
        keep = np.ones((b, n, n), dtype=bool)
    else:
        if comm is None:
            raise ConfigError(f"mode {cfg.mode!r} needs trained comm modules")
        mu = gen_query(features, comm)
        kappa = gen_key(features, comm)
        if draws.query_keep is None:
            proj = einsum("bjk,qk->bjq", kappa, comm.wa)
            scores = scale(einsum("biq,bjq->bij", mu, proj), 1.0 / np.sqrt(comm.key_size))
        else:
            keepf = draws.query_keep.astype(np.float64)
            q_hat = einsum("biq,bijq->bijq", mu, keepf)
            fill = cfg.query_channel.fill
            if fill != 0.0:
                q_hat = add(q_hat, (1.0 - keepf) * fill)
            scores = match_scores(q_hat, kappa, comm.wa)
        weights, keep = prune_weights(scores, cfg.rho)

    if draws.data_keep is None:
        fused = einsum("bij,bjd->bid", weights, features)
    else:
        fused = combine_batch(weights, _received(features, draws.data_keep, cfg.data_channel.fill))
    return model.decode(fused, s), weights, keep


def _accounting(cfg: PipelineCfg, keep: np.ndarray, feature_dim: int):
    n = keep.shape[-1]
    off = ~np.eye(n, dtype=bool)
    links = (keep & off).sum(axis=(1, 2))
    if cfg.mode == "local":
        links = np.zeros_like(links)
    q_tbs = n * (n - 1) * n_blocks(cfg.query_size, cfg.query_channel.tbs) \
        if cfg.mode in ("semantic", "noiseless") else 0
    f_tbs = links * n_blocks(feature_dim, cfg.data_channel.tbs)
    return (links / n).astype(np.float64), np.full(links.shape, q_tbs, dtype=np.int64), \
        f_tbs.astype(np.int64)


def infer_batch(model: SplitModel, comm: CommModules | None, rounds: RoundBatch,
                cfg: PipelineCfg, seed: int, domain: int = DOMAIN_EVAL) -> RoundMetrics:
    cfg = cfg.effective()
    feats = model.encode(rounds.observations, cfg.split)
    n = feats.shape[1]
    draws = draw_channels(cfg, n, feats.shape[-1], seed, rounds.indices, domain)
    logits, _, keep = collaborate(model, comm, feats, cfg, draws)
    preds = np.argmax(as_var(logits).value, axis=-1)
    conn, q_tbs, f_tbs = _accounting(cfg, keep, feats.shape[-1])
    return RoundMetrics(preds == rounds.labels, conn, q_tbs, f_tbs, preds)


def infer_round(round_state: RoundState, model: SplitModel, comm: CommModules | None,
                cfg: PipelineCfg, seed: int = 0, round_index: int = 0) -> RoundMetrics:
    batch = RoundBatch(
        round_state.observations[None], round_state.labels[None],
        round_state.groups[None], round_state.corrupted[None],
        np.array([round_index]),
    )
    return infer_batch(model, comm, batch, cfg, seed)


def train_comm(model: SplitModel, cfg: PipelineCfg, scenario: ScenarioCfg, X, y,
               seed: int = 0, max_steps: int | None = None,
               comm: CommModules | None = None) -> tuple[CommModules, list[float]]:
    """Train query/key nets and Wa with both channels active.

    Only the comm modules are updated; the backbone is used as a frozen
    constant.  Training is unpruned (``rho`` only applies at inference).
    Returns the modules and the per-epoch mean training loss.
    """
    if not model.frozen:
        raise TrainingError("backbone must be pretrained and frozen before comm training")
    cfg = replace(cfg.effective(), rho=0.0)
    if not cfg.trainable:
        raise ConfigError(f"mode {cfg.mode!r} has nothing to train")
    feature_dim = model.dim(cfg.split)
    if comm is None:
        comm = CommModules.build(feature_dim, cfg.hidden, cfg.query_size, cfg.key_size, seed)
    arrays = comm.named_arrays()
    opt = RAdam(lr=cfg.lr)
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        start = epoch * cfg.rounds_per_epoch
        rounds = build_rounds(scenario, X, y, seed, range(start, start + cfg.rounds_per_epoch),
                              domain=ROUNDS_TRAIN)
        feats = model.encode(rounds.observations, cfg.split)
        total, count = 0.0, 0
        for a in range(0, len(rounds), cfg.batch_size):
            sl = slice(a, a + cfg.batch_size)
            idx = rounds.indices[sl]
            draws = draw_channels(cfg, feats.shape[1], feature_dim, seed, idx, DOMAIN_TRAIN)
            leaves = {k: Var(v, requires_grad=True, name=k) for k, v in arrays.items()}
            logits, _, _ = collaborate(model, comm.with_arrays(leaves), feats[sl], cfg, draws)
            loss = cross_entropy(logits, rounds.labels[sl])
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(loss, leaves.values())
            opt.step(arrays, {k: grads[v] for k, v in leaves.items()})
            total += float(loss.value) * len(idx)
            count += len(idx)
            step += 1
            if max_steps is not None and step >= max_steps:
                history.append(total / count)
                return comm, history
        history.append(total / count)
        log.info("epoch %d loss %.4f", epoch, history[-1])
    return comm, history


def evaluate(model: SplitModel, comm: CommModules | None, cfg: PipelineCfg,
             scenario: ScenarioCfg, X, y, n_rounds: int, seed: int = 0,
             chunk: int = 64) -> RoundMetrics:
    """Held-out KPIs over ``n_rounds`` deterministic rounds."""
    if n_rounds < 1:
        raise ConfigError("n_rounds must be >= 1")
    parts = []
    for a in range(0, n_rounds, chunk):
        rounds = build_rounds(scenario, X, y, seed, range(a, min(a + chunk, n_rounds)),
                              domain=ROUNDS_EVAL)
        parts.append(infer_batch(model, comm, rounds, cfg, seed))
    return RoundMetrics.concat(parts)


class CollaborativeClassifier(ClassifierMixin, BaseEstimator):
    """Estimator over the collaborative pipeline.

    ``fit(X, y)`` takes clean labelled images; training rounds are generated
    from them with the scenario parameters.  ``predict`` takes a stack of
    device observations shaped (rounds, devices, pixels) and returns one
    label per device.
    """

    def __init__(self, backbone: SplitModel | None = None, split: int = 2,
                 mode: str = "semantic", data_per: float = 0.1, query_per: float = 0.0,
                 tbs: int = 40, fill: float = 0.0, rho: float = 0.0, n_devices: int = 16,
                 n_groups: int = 4, p_patch: float = 0.8, patch_scale: float = 0.4,
                 epochs: int = 60, batch_size: int = 64, lr: float = 1e-3,
                 rounds_per_epoch: int = 320, random_state: int = 0):
        self.backbone = backbone
        self.split = split
        self.mode = mode
        self.data_per = data_per
        self.query_per = query_per
        self.tbs = tbs
        self.fill = fill
        self.rho = rho
        self.n_devices = n_devices
        self.n_groups = n_groups
        self.p_patch = p_patch
        self.patch_scale = patch_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.rounds_per_epoch = rounds_per_epoch
        self.random_state = random_state

    def pipeline_cfg(self) -> PipelineCfg:
        return PipelineCfg(
            split=self.split,
            data_channel=ErasureChannelCfg(self.tbs, self.data_per, self.fill),
            query_channel=ErasureChannelCfg(self.tbs, self.query_per, self.fill),
            rho=self.rho, mode=self.mode, batch_size=self.batch_size, epochs=self.epochs,
            lr=self.lr, rounds_per_epoch=self.rounds_per_epoch,
        )

    def scenario_cfg(self, side: int) -> ScenarioCfg:
        return ScenarioCfg(n_devices=self.n_devices, n_groups=self.n_groups,
                           p_patch=self.p_patch, patch_scale=self.patch_scale, side=side,
                           seed=self.random_state)

    def fit(self, X, y):
        if self.backbone is None or not self.backbone.frozen:
            raise ConfigError("CollaborativeClassifier needs a pretrained, frozen backbone")
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        side = int(round(np.sqrt(X.shape[1])))
        cfg = self.pipeline_cfg()
        self.classes_ = np.arange(self.backbone.n_classes)
        self.comm_ = None
        self.history_ = []
        if cfg.trainable:
            self.comm_, self.history_ = train_comm(
                self.backbone, cfg, self.scenario_cfg(side), X, y, seed=self.random_state
            )
        return self

    def _metrics(self, obs, y=None) -> RoundMetrics:
        check_is_fitted(self, "classes_")
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 3:
            raise ConfigError(f"observations must be (rounds, devices, pixels), got {obs.shape}")
        r, n, _ = obs.shape
        labels = np.zeros((r, n), dtype=int) if y is None else np.asarray(y)
        batch = RoundBatch(obs, labels, np.zeros((r, n), dtype=int),
                           np.zeros((r, n), dtype=bool), np.arange(r))
        return infer_batch(self.backbone, self.comm_, batch, self.pipeline_cfg(),
                           self.random_state)

    def predict(self, obs):
        return self._metrics(obs).predictions

    def score(self, obs, y, sample_weight=None):
        return self._metrics(obs, y).accuracy
