"""Adversarial disentangling autoencoder and the protection transform.

The encoder (dense + ReLU + batchnorm) maps a preprocessed vector to a
128-dim code; the decoder reconstructs the vector from the code and a
scalar condition in [0,1] (the attribute posterior during training, a
non-informative 0.5 when protecting); a small two-layer classifier plays
the adversary on the code. Training alternates momentum-SGD updates of
the adversary (to predict the label) and of the encoder-decoder (to
reconstruct and to fool the just-updated adversary), on the same batch.

Protection runs the frozen model end to end: preprocess, encode with
running batchnorm statistics, decode under the chosen condition. The
hot per-batch step is delegated to the selected backend kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import backend, metrics
from ._kernel_py import (ADV_PARAMS, BN_EPS, DEC_PARAMS, ENC_PARAMS,
                         PROB_CLAMP, adversary_objective,
                         autoencoder_objective)
from .calibration import ScoreSet
from .corpus import Corpus
from .errors import ConfigError, DataError, NumericalError, ParseError
from .preprocess import StandardizerStats, fit_standardizer, preprocess

Z_DIM = 128
ADV_HIDDEN = 64

PARAM_SHAPES = {
    "enc_w": lambda d: (Z_DIM, d),
    "enc_b": lambda d: (Z_DIM,),
    "bn_gamma": lambda d: (Z_DIM,),
    "bn_beta": lambda d: (Z_DIM,),
    "bn_run_mean": lambda d: (Z_DIM,),
    "bn_run_var": lambda d: (Z_DIM,),
    "dec_w": lambda d: (d, Z_DIM + 1),
    "dec_b": lambda d: (d,),
    "adv_w1": lambda d: (ADV_HIDDEN, Z_DIM),
    "adv_b1": lambda d: (ADV_HIDDEN,),
    "adv_w2": lambda d: (ADV_HIDDEN,),
    "adv_b2": lambda d: (1,),
}
TRAINABLE = ENC_PARAMS + DEC_PARAMS + ADV_PARAMS


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for adversarial training.

    `adv_lr` lets the adversary step at its own rate (it faces a much
    easier problem than the encoder-decoder); None means both players
    share `lr`. The first `adv_start_epoch` epochs freeze the adversary
    (with the zero-initialized head this is a pure reconstruction
    warm-up), stepping the encoder-decoder at `warmup_lr` when given.
    lr = 0 freezes parameters (useful for identity checks) and is
    therefore allowed.
    """

    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    bn_momentum: float = 0.1
    adv_lr: float | None = None
    adv_start_epoch: int = 0
    warmup_lr: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.adv_lr is not None and self.adv_lr < 0:
            raise ConfigError("adv_lr must be >= 0")
        if self.adv_start_epoch < 0:
            raise ConfigError("adv_start_epoch must be >= 0")
        if self.warmup_lr is not None and self.warmup_lr < 0:
            raise ConfigError("warmup_lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0,1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError("bn_momentum must lie in (0,1]")

    @property
    def adversary_lr(self) -> float:
        return self.lr if self.adv_lr is None else self.adv_lr


class AeModel:
    """Parameter container plus the preprocessing statistics it was trained with."""

    def __init__(self, dim: int, params: dict, stats: StandardizerStats,
                 config: TrainConfig | None = None):
        self.dim = int(dim)
        for name, shape in PARAM_SHAPES.items():
            if name not in params:
                raise DataError(f"missing parameter tensor {name!r}")
            got = np.asarray(params[name]).shape
            if got != shape(self.dim):
                raise DataError(f"{name}: expected shape {shape(self.dim)}, got {got}")
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64)
                       for k, v in params.items()}
        if not all(np.isfinite(v).all() for v in self.params.values()):
            raise NumericalError("model parameters must be finite")
        if np.any(self.params["bn_run_var"] < BN_EPS):
            raise DataError(f"bn_run_var entries must be >= {BN_EPS}")
        self.stats = stats
        self.config = config
        self.train_log: list = []

    @property
    def z_dim(self) -> int:
        return Z_DIM


def init_model(dim: int, stats: StandardizerStats, seed: int) -> AeModel:
    """Fan-in-scaled uniform init; identity batchnorm.

    The adversary's output head starts at zero: its prediction is then
    exactly 0.5 and, crucially, the fooling gradient into the code is
    exactly zero until the head moves, so a warm-up with a frozen
    adversary trains pure reconstruction.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "enc_w": uniform((Z_DIM, dim), dim),
        "enc_b": uniform((Z_DIM,), dim),
        "bn_gamma": np.ones(Z_DIM),
        "bn_beta": np.zeros(Z_DIM),
        "bn_run_mean": np.zeros(Z_DIM),
        "bn_run_var": np.ones(Z_DIM),
        "dec_w": uniform((dim, Z_DIM + 1), Z_DIM + 1),
        "dec_b": uniform((dim,), Z_DIM + 1),
        "adv_w1": uniform((ADV_HIDDEN, Z_DIM), Z_DIM),
        "adv_b1": uniform((ADV_HIDDEN,), Z_DIM),
        "adv_w2": np.zeros(ADV_HIDDEN),
        "adv_b2": np.zeros(1),
    }
    return AeModel(dim, params, stats)


def encode(model: AeModel, x: np.ndarray, mode: str = "infer",
           update_running: bool = False) -> np.ndarray:
    """Dense + ReLU + batchnorm code of preprocessed input.

    Train mode normalizes with batch statistics (and can fold them into
    the running estimates); infer mode uses the stored running statistics
    and accepts single vectors.
    """
    p = model.params
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DataError(f"expected dim {model.dim}, got {x.shape[-1]}")
    act = np.maximum(x @ p["enc_w"].T + p["enc_b"], 0.0)
    if mode == "infer":
        mu, var = p["bn_run_mean"], p["bn_run_var"]
    elif mode == "train":
        if act.ndim != 2 or act.shape[0] < 2:
            raise DataError("train-mode batchnorm needs a batch of >= 2")
        mu = act.mean(axis=0)
        var = act.var(axis=0)
        if update_running:
            m = model.config.bn_momentum if model.config else 0.1
            p["bn_run_mean"][:] = (1 - m) * p["bn_run_mean"] + m * mu
            p["bn_run_var"][:] = np.maximum(
                (1 - m) * p["bn_run_var"] + m * var, BN_EPS)
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    return p["bn_gamma"] * (act - mu) / np.sqrt(var + BN_EPS) + p["bn_beta"]


def decode(model: AeModel, z: np.ndarray, w) -> np.ndarray:
    """Unit-norm reconstruction from a code and a condition in [0,1]."""
    p = model.params
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.shape[1] != Z_DIM:
        raise DataError(f"code must have length {Z_DIM}")
    w_col = np.broadcast_to(np.asarray(w, dtype=np.float64), (z2.shape[0],))
    zw = np.concatenate([z2, w_col[:, None]], axis=1)
    t = np.tanh(zw @ p["dec_w"].T + p["dec_b"])
    norms = np.linalg.norm(t, axis=1)
    if np.any(norms == 0.0):
        raise NumericalError("decoder produced an all-zero pre-normalization vector")
    out = t / norms[:, None]
    return out[0] if single else out


def adversary_predict(model: AeModel, z: np.ndarray) -> np.ndarray:
    """Adversary's probability that the code belongs to class 1."""
    p = model.params
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != Z_DIM:
        raise DataError(f"code must have length {Z_DIM}")
    h = np.maximum(z @ p["adv_w1"].T + p["adv_b1"], 0.0)
    return expit(h @ p["adv_w2"] + p["adv_b2"][0])


def reconstruction_error(xhat: np.ndarray, x: np.ndarray):
    """1 - cosine similarity, in [0, 2]."""
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    nh = np.linalg.norm(xhat, axis=-1)
    nx = np.linalg.norm(x, axis=-1)
    if np.any(nh == 0.0) or np.any(nx == 0.0):
        raise DataError("reconstruction error undefined for zero vectors")
    cos = np.einsum("...i,...i->...", xhat, x) / (nh * nx)
    out = 1.0 - cos
    return float(out) if out.ndim == 0 else out


def adversary_loss(model: AeModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log of the adversary's true-class probability."""
    loss, _ = adversary_objective(model.params, np.atleast_2d(x),
                                  np.asarray(y), want_grads=False)
    return loss


def autoencoder_loss(model: AeModel, x: np.ndarray, y: np.ndarray, w) -> float:
    """Mean reconstruction error plus the adversary-fooling penalty."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(np.isnan(w)):
        raise DataError("every batch item needs a soft posterior condition")
    x = np.atleast_2d(x)
    loss, _ = autoencoder_objective(model.params, x, np.asarray(y),
                                    np.broadcast_to(w, (x.shape[0],)),
                                    want_grads=False)
    return loss


def init_opt_state(model: AeModel) -> dict:
    """Zeroed momentum buffers for every trainable tensor."""
    return {k: np.zeros_like(model.params[k]) for k in TRAINABLE}


def train_step(model: AeModel, x: np.ndarray, y: np.ndarray, w: np.ndarray,
               opt_state: dict, cfg: TrainConfig):
    """One adversarial update pair on a batch; mutates model and opt_state.

    Returns (adversary_loss, autoencoder_loss) as evaluated before each
    update. Aborts on non-finite losses.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("train_step needs a batch of >= 2 items")
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (x.shape[0],))
    if np.any(np.isnan(w)):
        raise DataError("every batch item needs a soft posterior condition")
    loss_d, loss_ae = backend.train_step_inplace(
        model.params, opt_state, x, np.asarray(y), w,
        cfg.lr, cfg.adversary_lr, cfg.momentum, cfg.bn_momentum)
    if not (np.isfinite(loss_d) and np.isfinite(loss_ae)):
        raise NumericalError(
            f"non-finite training loss (adversary={loss_d}, "
            f"autoencoder={loss_ae}); lower the learning rate")
    for name in TRAINABLE:
        if not np.isfinite(model.params[name]).all():
            raise NumericalError(
                f"parameter tensor {name!r} went non-finite "
                f"(losses: adversary={loss_d}, autoencoder={loss_ae})")
    return loss_d, loss_ae


def train(corpus: Corpus, cfg: TrainConfig,
          val_corpus: Corpus | None = None) -> AeModel:
    """Train on a corpus whose items carry calibrated soft posteriors.

    Preprocessing statistics are fit on this corpus and embedded in the
    returned model. `model.train_log` records per-epoch mean losses and,
    when a validation corpus is given, the adversary's AUC on codes and
    the mean reconstruction error there.
    """
    if np.any(np.isnan(corpus.posteriors)):
        raise DataError("every training item needs posterior_soft set")
    stats = fit_standardizer(corpus)
    X = preprocess(stats, corpus.vectors)
    y = corpus.labels
    w_all = corpus.posteriors

    model = init_model(corpus.dim, stats, cfg.seed)
    model.config = cfg
    opt = init_opt_state(model)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed + 1))

    val = None
    if val_corpus is not None:
        val = (preprocess(stats, val_corpus.vectors), val_corpus.labels,
               val_corpus.posteriors)

    n = len(corpus)
    for epoch in range(cfg.epochs):
        # reconstruction warm-up: adversary frozen until its start epoch,
        # encoder-decoder optionally stepping at its own warm-up rate
        step_cfg = cfg
        if epoch < cfg.adv_start_epoch:
            warm = cfg.lr if cfg.warmup_lr is None else cfg.warmup_lr
            step_cfg = replace(cfg, adv_lr=0.0, lr=warm)
        order = rng.permutation(n)
        d_losses, ae_losses = [], []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss_d, loss_ae = train_step(model, X[idx], y[idx], w_all[idx],
                                         opt, step_cfg)
            d_losses.append(loss_d)
            ae_losses.append(loss_ae)
        entry = {"epoch": epoch,
                 "adversary_loss": float(np.mean(d_losses)),
                 "autoencoder_loss": float(np.mean(ae_losses))}
        if val is not None:
            entry.update(_validation_metrics(model, *val))
        model.train_log.append(entry)
    return model


def _validation_metrics(model, X_val, y_val, w_val):
    z = encode(model, X_val, mode="infer")
    probs = adversary_predict(model, z)
    out = {"val_adversary_auc": metrics.auc(
        ScoreSet(probs[y_val == 1], probs[y_val == 0]))}
    if not np.any(np.isnan(w_val)):
        xhat = decode(model, z, w_val)
        out["val_reconstruction"] = float(
            np.mean(reconstruction_error(xhat, X_val)))
    return out


def protect(model: AeModel, vectors: np.ndarray, w=0.5) -> np.ndarray:
    """Re-encode raw vectors under a chosen condition (default 0.5).

    Preprocessing uses the statistics stored in the model; batchnorm runs
    in inference mode. Thread-safe over a shared model: nothing is
    mutated. `w` may be a scalar or one value per vector.
    """
    w_arr = np.asarray(w, dtype=np.float64)
    if np.any((w_arr < 0.0) | (w_arr > 1.0)):
        raise ConfigError("condition w must lie in [0,1]")
    x = preprocess(model.stats, vectors)
    return decode(model, encode(model, x, mode="infer"), w_arr)


def save(model: AeModel, path) -> None:
    """Write the `veilvec-ae v1` text format (tensors + stats + config echo)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("veilvec-ae v1\n")
        fh.write(f"dim {model.dim}\n")
        if model.config is not None:
            c = model.config
            fh.write(f"config lr {c.lr:.17g}\n")
            fh.write(f"config momentum {c.momentum:.17g}\n")
            fh.write(f"config batch_size {c.batch_size}\n")
            fh.write(f"config epochs {c.epochs}\n")
            fh.write(f"config seed {c.seed}\n")
            fh.write(f"config bn_momentum {c.bn_momentum:.17g}\n")
            if c.adv_lr is not None:
                fh.write(f"config adv_lr {c.adv_lr:.17g}\n")
            fh.write(f"config adv_start_epoch {c.adv_start_epoch}\n")
            if c.warmup_lr is not None:
                fh.write(f"config warmup_lr {c.warmup_lr:.17g}\n")
        tensors = dict(model.params)
        tensors["preprocess_mean"] = model.stats.mean
        tensors["preprocess_std"] = model.stats.stddev
        for name, arr in tensors.items():
            shape = " ".join(str(s) for s in arr.shape)
            fh.write(f"tensor {name} {shape}\n")
            rows = arr if arr.ndim == 2 else arr[None, :]
            for row in rows:
                fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load(path) -> AeModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "veilvec-ae v1":
        raise ParseError("expected 'veilvec-ae v1' header", line=1, path=path)
    dim = None
    config_kv = {}
    tensors = {}
    i = 1
    try:
        while i < len(lines):
            line = lines[i].strip()
            if not line:
                i += 1
                continue
            parts = line.split()
            if parts[0] == "dim":
                dim = int(parts[1])
                i += 1
            elif parts[0] == "config":
                config_kv[parts[1]] = parts[2]
                i += 1
            elif parts[0] == "tensor":
                name = parts[1]
                shape = tuple(int(s) for s in parts[2:])
                n_rows = shape[0] if len(shape) == 2 else 1
                rows = [[float(t) for t in lines[i + 1 + r].split()]
                        for r in range(n_rows)]
                arr = np.asarray(rows)
                tensors[name] = arr.reshape(shape)
                i += 1 + n_rows
            else:
                raise ParseError(f"unexpected line {line!r}", line=i + 1,
                                 path=path)
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed model file: {exc}", line=i + 1, path=path)
    if dim is None:
        raise ParseError("missing 'dim' line", path=path)
    stats = StandardizerStats(tensors.pop("preprocess_mean"),
                              tensors.pop("preprocess_std"))
    config = None
    if config_kv:
        config = TrainConfig(
            lr=float(config_kv["lr"]), momentum=float(config_kv["momentum"]),
            batch_size=int(config_kv["batch_size"]),
            epochs=int(config_kv["epochs"]), seed=int(config_kv["seed"]),
            bn_momentum=float(config_kv["bn_momentum"]),
            adv_lr=(float(config_kv["adv_lr"])
                    if "adv_lr" in config_kv else None),
            adv_start_epoch=int(config_kv.get("adv_start_epoch", 0)),
            warmup_lr=(float(config_kv["warmup_lr"])
                       if "warmup_lr" in config_kv else None))
    return AeModel(dim, tensors, stats, config)
