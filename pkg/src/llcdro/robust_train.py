"""Warmup ERM followed by confidence-guided refurbishment and top-tau selection.

Training only ever receives :class:`~llcdro.datagen.NoisyData` (features and
noisy labels) plus an optional clean validation split. Anything that needs
ground truth is computed by the caller inside ``on_epoch``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import confidence as conf
from . import model as mdl
from .datagen import NoisyData, augment_strong, augment_weak, feature_scale

log = logging.getLogger(__name__)

STREAMS = {"init_a": 1, "init_b": 2, "shuffle": 3, "augment": 4, "noise": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named sub-stream of a master seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class TrainConfig:
    warmup_epochs: int = 5
    epochs: int = 50
    batch_size: int = 64
    k: int = 20
    tau: float = 70.0
    lr: float = 0.05
    momentum: float = 0.9
    hidden: int = 32
    # augmentation scales are multiples of the per-dimension feature std
    sigma_w: float = 0.05
    sigma_s: float = 0.2
    p_drop: float = 0.2
    use_llc: bool = True
    use_dro: bool = True
    co_training: bool = True
    llc_normalize: bool = True
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-6
    gmm_variance_floor: float = 1e-6
    seed: int = 0
    init_seed_a: Optional[int] = None
    init_seed_b: Optional[int] = None

    def validate(self) -> None:
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.tau <= 100:
            raise ValueError("tau must lie in (0, 100]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if not 0.0 <= self.p_drop <= 1.0 or self.sigma_w < 0 or self.sigma_s < 0:
            raise ValueError("bad augmentation settings")

    @property
    def gmm(self) -> conf.GmmConfig:
        return conf.GmmConfig(self.gmm_max_iter, self.gmm_tol, self.gmm_variance_floor)

    @property
    def n_models(self) -> int:
        return 2 if self.co_training else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: list[mdl.ModelParams]
    opts: list[mdl.OptState]
    epoch: int = 0
    confidences: list[Optional[conf.ConfidenceState]] = field(default_factory=list)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Ensemble (mean) prediction over the trained models."""
        probs = [mdl.predict_proba(p, x) for p in self.params]
        return probs[0] if len(probs) == 1 else sum(probs) / len(probs)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    def snapshot(self) -> "TrainState":
        return TrainState([p.copy() for p in self.params], [o.copy() for o in self.opts],
                          self.epoch, list(self.confidences))


@dataclass
class EpochInfo:
    epoch: int
    phase: str                     # "warmup" or "robust"
    state: TrainState
    w: Optional[np.ndarray]        # confidence used this epoch, averaged over models
    scores: Optional[np.ndarray]
    selected_fraction: float


@dataclass
class TrainResult:
    state: TrainState              # last epoch
    best: TrainState               # best validation epoch
    best_epoch: int
    history: list[dict]


def one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def refurbish(noisy_onehot: np.ndarray, pseudo: np.ndarray, w) -> np.ndarray:
    """w * noisy + (1 - w) * pseudo, row-wise when given batches."""
    noisy_onehot = np.asarray(noisy_onehot, dtype=float)
    pseudo = np.asarray(pseudo, dtype=float)
    w = np.asarray(w, dtype=float)
    if noisy_onehot.ndim == 2:
        w = w[:, None]
    return w * noisy_onehot + (1.0 - w) * pseudo


def pseudo_label(params: list[mdl.ModelParams], x_weak: np.ndarray) -> np.ndarray:
    """Prediction on the weak view; the mean over models when co-training."""
    probs = [mdl.predict_proba(p, x_weak) for p in params]
    if len(probs) == 1:
        return probs[0]
    return sum(probs) / len(probs)


def select_top_tau(losses, tau: float) -> np.ndarray:
    """Indices of the max(1, floor(n * tau / 100)) largest losses, ties to the smaller index."""
    losses = np.asarray(losses, dtype=float)
    n = losses.size
    if n == 0:
        raise ValueError("empty loss list")
    m = max(1, int(np.floor(n * tau / 100.0 + 1e-9)))
    order = np.argsort(-losses, kind="stable")
    return np.sort(order[:m])


def init_state(d: int, c: int, cfg: TrainConfig) -> TrainState:
    seeds = [cfg.init_seed_a, cfg.init_seed_b]
    params, opts = [], []
    for m, name in enumerate(("init_a", "init_b")[: cfg.n_models]):
        rng = np.random.default_rng(seeds[m]) if seeds[m] is not None else stream(cfg.seed, name)
        params.append(mdl.init(d, cfg.hidden, c, rng))
        opts.append(mdl.OptState(cfg.lr, cfg.momentum))
    return TrainState(params, opts, 0, [None] * cfg.n_models)


def _batches(n: int, b: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(n // b if n >= b else 1):
        yield perm[i * b:(i + 1) * b]


def erm_epoch(state: TrainState, data: NoisyData, cfg: TrainConfig,
              shuffle_rng: np.random.Generator, aug_rng: np.random.Generator,
              scale: np.ndarray) -> TrainState:
    """Plain cross-entropy on noisy one-hot labels over one weakly augmented view."""
    targets_all = one_hot(data.noisy_labels, data.n_classes)
    for idx in _batches(len(data), cfg.batch_size, shuffle_rng):
        x = augment_weak(data.features[idx], aug_rng, cfg.sigma_w * scale)
        for m in range(len(state.params)):
            grads = mdl.backward(state.params[m], x, targets_all[idx])
            state.params[m] = mdl.sgd_step(state.params[m], grads, state.opts[m])
    state.epoch += 1
    return state


def robust_train_epoch(state: TrainState, data: NoisyData, w: list[np.ndarray], cfg: TrainConfig,
                       shuffle_rng: np.random.Generator, aug_rng: np.random.Generator,
                       scale: np.ndarray) -> tuple[TrainState, float]:
    """One pass of refurbished-label training with per-batch top-tau selection.

    ``w[m]`` is the per-sample confidence model ``m`` trains with. Models step in
    lockstep on shared weak and strong views; pseudo-labels come from the
    parameters as they stand at the start of each batch and carry no gradient.
    Returns the state and the mean selected fraction.
    """
    if len(w) != len(state.params) or any(len(wm) != len(data) for wm in w):
        raise ValueError("need one confidence vector of length N per model")
    tau = cfg.tau if cfg.use_dro else 100.0
    targets_all = one_hot(data.noisy_labels, data.n_classes)
    fractions = []
    for idx in _batches(len(data), cfg.batch_size, shuffle_rng):
        x = data.features[idx]
        x_weak = augment_weak(x, aug_rng, cfg.sigma_w * scale)
        x_strong = augment_strong(x, aug_rng, cfg.sigma_s * scale, cfg.p_drop)
        pseudo = pseudo_label(state.params, x_weak)
        new_params = []
        for m, params in enumerate(state.params):
            y_star = refurbish(targets_all[idx], pseudo, w[m][idx])
            fr = mdl.forward(params, x_strong)
            losses = -(y_star * np.log(fr.probs + mdl.LOG_EPS)).sum(axis=1)
            mask = np.zeros(len(idx))
            mask[select_top_tau(losses, tau)] = 1.0
            fractions.append(mask.mean())
            grads = mdl.backward(params, x_strong, y_star, mask, fr)
            new_params.append(mdl.sgd_step(params, grads, state.opts[m]))
        state.params = new_params
    state.epoch += 1
    return state, float(np.mean(fractions)) if fractions else 1.0


def per_sample_losses(params: mdl.ModelParams, data: NoisyData) -> np.ndarray:
    probs = mdl.predict_proba(params, data.features)
    return -np.log(probs[np.arange(len(data)), data.noisy_labels] + mdl.LOG_EPS)


def estimate_confidence(params: mdl.ModelParams, data: NoisyData, cfg: TrainConfig,
                        use_llc: Optional[bool] = None) -> conf.ConfidenceState:
    """Confidence from one model: LLC on its penultimate features, or its per-sample loss."""
    if use_llc if use_llc is not None else cfg.use_llc:
        z = mdl.forward(params, data.features).z
        return conf.estimate(z, data.noisy_labels, cfg.k, cfg.gmm, normalize=cfg.llc_normalize)
    return conf.estimate_from_losses(per_sample_losses(params, data), cfg.gmm)


def _val_accuracy(state: TrainState, valid) -> Optional[float]:
    if valid is None:
        return None
    x, y = valid
    return float((state.predict(x) == y).mean())


def train(data: NoisyData, cfg: TrainConfig, valid: Optional[tuple[np.ndarray, np.ndarray]] = None,
          on_epoch: Optional[Callable[[EpochInfo], dict]] = None) -> TrainResult:
    """Warmup ERM, then ``cfg.epochs`` rounds of confidence estimation and robust training.

    ``valid`` is a clean (features, labels) split; the best snapshot maximises its
    accuracy (earliest epoch on ties). Without it the last epoch is also the best.
    """
    if not isinstance(data, NoisyData):
        raise TypeError("train() takes the noisy training view only")
    cfg.validate()
    d, c = data.features.shape[1], data.n_classes
    state = init_state(d, c, cfg)
    shuffle_rng, aug_rng = stream(cfg.seed, "shuffle"), stream(cfg.seed, "augment")
    scale = feature_scale(data.features)

    history: list[dict] = []
    best, best_epoch, best_val = state.snapshot(), 0, -np.inf

    def finish(info: EpochInfo):
        nonlocal best, best_epoch, best_val
        val = _val_accuracy(state, valid)
        rec = {"epoch": info.epoch, "phase": info.phase, "val_accuracy": val,
               "selected_fraction": info.selected_fraction}
        if on_epoch is not None:
            rec.update(on_epoch(info) or {})
        history.append(rec)
        if valid is None or val > best_val:
            best, best_epoch, best_val = state.snapshot(), info.epoch, val

    for _ in range(cfg.warmup_epochs):
        erm_epoch(state, data, cfg, shuffle_rng, aug_rng, scale)
        finish(EpochInfo(state.epoch, "warmup", state, None, None, 1.0))

    for _ in range(cfg.epochs):
        own = [estimate_confidence(p, data, cfg) for p in state.params]
        # each model trains with the confidence its peer produced
        assigned = own[::-1] if cfg.co_training else own
        state.confidences = assigned
        state, frac = robust_train_epoch(state, data, [a.w for a in assigned], cfg,
                                         shuffle_rng, aug_rng, scale)
        w_mean = sum(a.w for a in assigned) / len(assigned)
        s_mean = sum(a.scores for a in assigned) / len(assigned)
        finish(EpochInfo(state.epoch, "robust", state, w_mean, s_mean, frac))

    log.debug("finished %d epochs, best epoch %d", state.epoch, best_epoch)
    return TrainResult(state, best, best_epoch, history)
