"""BiLSTM inverse mapping from (N, p_recov, incidence) to (p_tran, c_rate, R0)."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neuralnet as nn
from .abm import DEFAULT_HORIZON
from .scenario import Scalers, encode_batch, targets

log = logging.getLogger(__name__)

TARGETS = ("p_tran", "c_rate", "r0")
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"penalty weight must be finite and >= 0, got {self.lam}")
        if len(self.weights) != 3 or any(not (w >= 0) for w in self.weights):
            raise ValueError(f"target weights must be three non-negative numbers, got {self.weights}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int | None = 10
    lr: float = 2.77e-4
    dropout: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max epochs must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 (or None to disable early stopping)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainedModel:
    params: dict
    arch: nn.ArchConfig
    scalers: Scalers
    loss_config: LossConfig = field(default_factory=LossConfig)
    horizon: int = DEFAULT_HORIZON
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def consistency_residual(theta_hat, p_recov):
    """R0 * p_recov - p_tran * c_rate, per row."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    return theta_hat[:, 2] * np.asarray(p_recov, dtype=float) - theta_hat[:, 0] * theta_hat[:, 1]


def loss(theta_hat, theta, p_recov, config: LossConfig = LossConfig()) -> float:
    """Weighted squared error summed over targets plus ``lam`` times the squared consistency residual.

    Both terms are averaged over the batch.
    """
    return loss_and_grad(theta_hat, theta, p_recov, config)[0]


def loss_and_grad(theta_hat, theta, p_recov, config: LossConfig = LossConfig()):
    theta_hat = np.atleast_2d(np.asarray(theta_hat, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    p_recov = np.atleast_1d(np.asarray(p_recov, dtype=float))
    if not (np.all(np.isfinite(theta_hat)) and np.all(np.isfinite(theta)) and np.all(np.isfinite(p_recov))):
        raise ValueError("loss inputs must be finite")
    B = theta_hat.shape[0]
    w = np.asarray(config.weights)
    err = theta_hat - theta
    res = consistency_residual(theta_hat, p_recov)
    value = float(np.sum(w * err * err) / B + config.lam * np.sum(res * res) / B)
    grad = 2.0 * w * err / B
    k = 2.0 * config.lam * res / B
    grad[:, 0] -= k * theta_hat[:, 1]
    grad[:, 1] -= k * theta_hat[:, 0]
    grad[:, 2] += k * p_recov
    return value, grad


def batch_loss_and_grads(x, static, mask, y, p_recov, params, arch, loss_config,
                         dropout_rate=0.0, training=False, rng=None):
    theta_hat, cache = nn.forward(x, static, mask, params, arch, dropout_rate, training, rng)
    value, d_theta = loss_and_grad(theta_hat, y, p_recov, loss_config)
    return value, nn.backward(d_theta, cache, params, arch)


def _batched_loss(x, static, mask, y, p_recov, params, arch, loss_config, batch_size):
    """Dropout-free loss over a whole set, batch-size weighted."""
    total = 0.0
    for s in range(0, len(y), batch_size):
        sl = slice(s, s + batch_size)
        th, _ = nn.forward(x[sl], static[sl], mask[sl], params, arch)
        total += loss(th, y[sl], p_recov[sl], loss_config) * len(y[sl])
    return total / len(y)


def train(train_set, val_set, scalers: Scalers, train_cfg: TrainConfig = TrainConfig(),
          loss_cfg: LossConfig = LossConfig(), arch: nn.ArchConfig = nn.ArchConfig(),
          horizon: int = DEFAULT_HORIZON, log_path=None, progress=None) -> TrainedModel:
    """Mini-batch Adam with early stopping on validation loss; best-epoch weights are restored.

    ``history`` rows are ``(epoch, train_loss, val_loss, seconds)``; saved models drop ``seconds``.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(train_cfg.seed)
    params = nn.init_params(arch, rng)
    model = TrainedModel(params, arch, scalers, loss_cfg, horizon,
                         metadata={"seed": train_cfg.seed, "epochs_run": 0, "best_epoch": None,
                                   "best_val_loss": None, "train_config": asdict(train_cfg)})
    if train_cfg.max_epochs == 0:
        return model

    xt, st, mt = encode_batch(train_set, scalers, horizon, allow_padding=True)
    yt = targets(train_set)
    pt = np.array([s.params.p_recov for s in train_set])
    xv, sv, mv = encode_batch(val_set, scalers, horizon, allow_padding=True)
    yv = targets(val_set)
    pv = np.array([s.params.p_recov for s in val_set])

    state = nn.AdamState(lr=train_cfg.lr)
    best_val = np.inf
    best_params = copy.deepcopy(params)
    best_epoch = 0
    since_best = 0
    log_fh = open(log_path, "w", newline="", encoding="utf-8") if log_path else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
    try:
        for epoch in range(1, train_cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(yt))
            total = 0.0
            for s in range(0, len(order), train_cfg.batch_size):
                idx = order[s:s + train_cfg.batch_size]
                value, grads = batch_loss_and_grads(
                    xt[idx], st[idx], mt[idx], yt[idx], pt[idx], params, arch, loss_cfg,
                    train_cfg.dropout, True, rng)
                if not np.isfinite(value):
                    raise FloatingPointError(f"training diverged at epoch {epoch} (loss {value})")
                nn.adam_step(params, grads, state)
                total += value * len(idx)
            train_loss = total / len(yt)
            val_loss = _batched_loss(xv, sv, mv, yv, pv, params, arch, loss_cfg, train_cfg.batch_size)
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            seconds = time.perf_counter() - t0
            model.history.append((epoch, train_loss, val_loss, seconds))
            if writer:
                writer.writerow([epoch, repr(train_loss), repr(val_loss), f"{seconds:.3f}"])
                log_fh.flush()
            log.info("epoch %d train %.6g val %.6g (%.1fs)", epoch, train_loss, val_loss, seconds)
            if progress:
                progress(epoch, train_loss, val_loss, seconds)
            if val_loss < best_val:
                best_val = val_loss
                best_params = copy.deepcopy(params)
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if train_cfg.patience is not None and since_best >= train_cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.params = best_params
    model.metadata.update(epochs_run=len(model.history), best_epoch=best_epoch, best_val_loss=best_val)
    return model


def predict_batch(model: TrainedModel, observations, allow_padding: bool = True) -> np.ndarray:
    """Dropout-free forward pass for a list of observations/scenarios; rows are (p_tran, c_rate, R0)."""
    if model.scalers is None:
        raise ValueError("model has no fitted scalers")
    x, s, m = encode_batch(observations, model.scalers, model.horizon, allow_padding)
    theta, _ = nn.forward(x, s, m, model.params, model.arch)
    return theta


def predict(model: TrainedModel, observation) -> dict:
    """Point estimate for one observation. ``seconds`` is the wall time of scaling + forward pass."""
    t0 = time.perf_counter()
    theta = predict_batch(model, [observation])[0]
    elapsed = time.perf_counter() - t0
    return {"p_tran": float(theta[0]), "c_rate": float(theta[1]), "r0": float(theta[2]), "seconds": elapsed}


# -- persistence -----------------------------------------------------------

def model_to_doc(model: TrainedModel) -> dict:
    doc = nn.params_to_doc(model.params, model.arch)
    doc["model_format_version"] = MODEL_FORMAT_VERSION
    doc["scalers"] = model.scalers.to_dict()
    doc["loss_config"] = {"lam": model.loss_config.lam, "weights": list(model.loss_config.weights)}
    doc["horizon"] = model.horizon
    # wall-clock seconds stay in the training log so saved models are reproducible byte for byte
    doc["history"] = [list(h[:3]) for h in model.history]
    doc["metadata"] = model.metadata
    return doc


def model_from_doc(doc: dict) -> TrainedModel:
    if not isinstance(doc, dict) or doc.get("model_format_version") != MODEL_FORMAT_VERSION:
        raise ValueError("unsupported or missing model_format_version")
    params, arch = nn.params_from_doc(doc)
    try:
        scalers = Scalers.from_dict(doc["scalers"])
        lc = LossConfig(doc["loss_config"]["lam"], tuple(doc["loss_config"]["weights"]))
        history = [tuple(h) for h in doc["history"]]
        return TrainedModel(params, arch, scalers, lc, int(doc["horizon"]), history, doc["metadata"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model document: {exc}") from exc


def canonical_bytes(model: TrainedModel) -> bytes:
    return json.dumps(model_to_doc(model), sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_hash(model: TrainedModel) -> str:
    return hashlib.sha256(canonical_bytes(model)).hexdigest()


def save(model: TrainedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(canonical_bytes(model))


def load(path) -> TrainedModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a valid model file ({exc})") from exc
    return model_from_doc(doc)
