"""Linear encoder-decoder trained on taxonomy labels.

The encoder ``e = W_enc x + b_enc`` maps generic embeddings into the
instruction-aligned space; the decoder ``x_hat = W_dec e + b_dec`` maps
back. Training minimizes

    L = beta1 * L_contr + beta2 * L_recon

where ``L_contr`` averages over all ordered pairs of a mini-batch (squared
distance for same-label pairs, squared hinge ``max(0, m - D)`` otherwise)
and ``L_recon`` is the mean squared reconstruction norm. Both losses are
linear-model closed forms, so gradients are written out by hand.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigError, ContractError, DimensionMismatch, TrainingDiverged
from .vectorlab import pairwise_sq_distances

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TRANSFORM_BLOCK = 256


@dataclass
class TransformModel:
    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray
    margin_m: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W_enc = np.asarray(self.W_enc, dtype=np.float64)
        self.b_enc = np.asarray(self.b_enc, dtype=np.float64)
        self.W_dec = np.asarray(self.W_dec, dtype=np.float64)
        self.b_dec = np.asarray(self.b_dec, dtype=np.float64)
        d_out, d_in = self.W_enc.shape
        if d_out < 1 or d_in < 1:
            raise ContractError("weight matrices must be non-empty")
        if self.b_enc.shape != (d_out,) or self.W_dec.shape != (d_in, d_out) or self.b_dec.shape != (d_in,):
            raise DimensionMismatch(
                f"inconsistent shapes: W_enc {self.W_enc.shape}, b_enc {self.b_enc.shape}, "
                f"W_dec {self.W_dec.shape}, b_dec {self.b_dec.shape}"
            )
        for name in ("W_enc", "b_enc", "W_dec", "b_dec"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"{name} has non-finite entries")
        if self.margin_m <= 0:
            raise ContractError("margin must be positive")

    @property
    def d_in(self):
        return self.W_enc.shape[1]

    @property
    def d_out(self):
        return self.W_enc.shape[0]

    @classmethod
    def initial(cls, d_in, d_out=None, init="identity", rng=None, **kw):
        d_out = d_in if d_out is None else d_out
        if init == "identity":
            W_enc, W_dec = np.eye(d_out, d_in), np.eye(d_in, d_out)
        elif init == "random":
            rng = rng if rng is not None else np.random.default_rng(0)
            W_enc = rng.uniform(-1, 1, (d_out, d_in)) / np.sqrt(d_in)
            W_dec = rng.uniform(-1, 1, (d_in, d_out)) / np.sqrt(d_out)
        else:
            raise ConfigError(f"unknown init {init!r}")
        return cls(W_enc, np.zeros(d_out), W_dec, np.zeros(d_in), **kw)

    def params(self):
        return {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec}

    def copy(self):
        return TransformModel(self.W_enc.copy(), self.b_enc.copy(), self.W_dec.copy(), self.b_dec.copy(),
                              self.margin_m, self.beta1, self.beta2, dict(self.metadata))


def _rows(x, dim, what):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != dim:
        raise DimensionMismatch(f"{what} expects dim {dim}, got {X.shape[1]}")
    return X, single


def encode(model, x):
    X, single = _rows(x, model.d_in, "encode")
    E = X @ model.W_enc.T + model.b_enc
    return E[0] if single else E


def decode(model, e):
    E, single = _rows(e, model.d_out, "decode")
    X = E @ model.W_dec.T + model.b_dec
    return X[0] if single else X


# -- losses --------------------------------------------------------------------


def _pair_terms(E, y, m):
    """Squared distances, same-label mask and hinge distances for all ordered pairs."""
    y = np.asarray(y)
    if len(E) != len(y):
        raise DimensionMismatch(f"{len(E)} embeddings but {len(y)} labels")
    if len(E) == 0:
        raise ContractError("empty batch")
    D2 = pairwise_sq_distances(E)
    np.fill_diagonal(D2, 0.0)
    same = y[:, None] == y[None, :]
    D = np.sqrt(D2)
    hinge = np.maximum(0.0, m - D)
    return D2, D, same, hinge


def contrastive_loss(E, y, margin=1.0):
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    if margin <= 0:
        raise ContractError("margin must be positive")
    D2, _, same, hinge = _pair_terms(E, y, margin)
    n = len(E)
    return float(np.sum(np.where(same, D2, hinge ** 2)) / n ** 2)


def reconstruction_loss(X_hat, X):
    X_hat = np.atleast_2d(np.asarray(X_hat, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X_hat.shape != X.shape:
        raise DimensionMismatch(f"shape mismatch {X_hat.shape} vs {X.shape}")
    diff = X_hat - X
    return float(np.einsum("ij,ij->", diff, diff) / len(X))


def total_loss(model, X, y):
    """Return ``(L, L_contr, L_recon)`` for one batch."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    E = encode(model, X)
    lc = contrastive_loss(E, y, model.margin_m)
    lr = reconstruction_loss(decode(model, E), X)
    return model.beta1 * lc + model.beta2 * lr, lc, lr


def loss_gradients(model, X, y):
    """Exact gradients of :func:`total_loss` for every parameter, plus the loss triple."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = len(X)
    E = encode(model, X)
    X_hat = decode(model, E)
    D2, D, same, hinge = _pair_terms(E, y, model.margin_m)

    # coefficient of (e_i - e_j) in d f_ij / d e_i, halved
    with np.errstate(divide="ignore", invalid="ignore"):
        push = np.where((D > 0) & (hinge > 0), -hinge / D, 0.0)
    C = np.where(same, 1.0, push)
    gE = (4.0 / n ** 2) * (C.sum(axis=1)[:, None] * E - C @ E) * model.beta1

    R = (2.0 / n) * (X_hat - X) * model.beta2
    grads = {
        "W_dec": R.T @ E,
        "b_dec": R.sum(axis=0),
    }
    gE = gE + R @ model.W_dec
    grads["W_enc"] = gE.T @ X
    grads["b_enc"] = gE.sum(axis=0)

    lc = float(np.sum(np.where(same, D2, hinge ** 2)) / n ** 2)
    diff = X_hat - X
    lr = float(np.einsum("ij,ij->", diff, diff) / n)
    return grads, (model.beta1 * lc + model.beta2 * lr, lc, lr)


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0
    d_out: int = None
    optimizer: str = "adam"
    margin: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    init: str = "identity"

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.margin <= 0 or self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("margin must be positive and betas non-negative")


def stratified_split(y, val_fraction, rng):
    """Per-label shuffle; every label with >=2 members lands in both partitions."""
    train, val = [], []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        if len(idx) >= 2:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(val, dtype=np.int64))


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class _SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def _batched_loss(model, X, y, batch_size):
    """Mean total loss over consecutive blocks, matching the mini-batch pair scope."""
    parts = [total_loss(model, X[s:s + batch_size], y[s:s + batch_size]) for s in range(0, len(X), batch_size)]
    w = np.asarray([min(batch_size, len(X) - s) for s in range(0, len(X), batch_size)], dtype=np.float64)
    return tuple(float(np.dot(w, col) / w.sum()) for col in zip(*parts))


def train_arrays(X, y, cfg=None, taxonomy_hash=""):
    """Fit a :class:`TransformModel` on embeddings ``X`` with integer labels ``y``.

    Returns ``(model, history)``. The returned model is the snapshot with the
    lowest validation loss seen, including the untrained initial state.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractError("X must be 2-d with one label per row")
    if len(X) < 10:
        raise ContractError(f"need at least 10 samples, got {len(X)}")
    if len(np.unique(y)) < 2:
        raise ContractError("need at least two distinct labels")
    if not np.all(np.isfinite(X)):
        raise ContractError("embeddings contain non-finite values")

    rng = np.random.default_rng(cfg.seed)
    tr, va = stratified_split(y, cfg.val_fraction, rng)
    model = TransformModel.initial(X.shape[1], cfg.d_out, cfg.init, rng,
                                   margin_m=cfg.margin, beta1=cfg.beta1, beta2=cfg.beta2)
    params = model.params()
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else _SGD(params, cfg.learning_rate)

    Xv, yv = X[va], y[va]
    best_val = _batched_loss(model, Xv, yv, cfg.batch_size)
    initial_val = best_val
    best, best_epoch, stale = model.copy(), 0, 0
    history = [{"epoch": 0, "train_loss": None, "val_loss": best_val[0], "val_contr": best_val[1], "val_recon": best_val[2]}]
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = tr[rng.permutation(len(tr))]
        seen, acc = 0, 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            grads, (loss, lc, lr_) = loss_gradients(model, X[b], y[b])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {s // cfg.batch_size}: "
                    f"L={loss}, L_contr={lc}, L_recon={lr_}, max|W_enc|={np.abs(model.W_enc).max():.3g}; "
                    f"try a smaller learning_rate"
                )
            opt.step(params, grads)
            acc += loss * len(b)
            seen += len(b)
        val = _batched_loss(model, Xv, yv, cfg.batch_size)
        if not np.isfinite(val[0]):
            raise TrainingDiverged(
                f"non-finite validation loss at epoch {epoch}: L_contr={val[1]}, L_recon={val[2]}, "
                f"max|W_enc|={np.abs(model.W_enc).max():.3g}; try a smaller learning_rate"
            )
        history.append({"epoch": epoch, "train_loss": acc / seen, "val_loss": val[0], "val_contr": val[1], "val_recon": val[2]})
        if val[0] < best_val[0]:
            best_val, best, best_epoch, stale = val, model.copy(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    train_final = _batched_loss(best, X[tr], y[tr], cfg.batch_size)
    best.metadata = {
        "method": "gst",
        "taxonomy_hash": taxonomy_hash,
        "seed": cfg.seed,
        "epochs_run": epoch,
        "best_epoch": best_epoch,
        "initial_val_loss": initial_val[0],
        "final_train_loss": train_final[0],
        "final_val_loss": best_val[0],
        "final_val_contr": best_val[1],
        "final_val_recon": best_val[2],
        "n_train": int(len(tr)),
        "n_val": int(len(va)),
        "train_config": asdict(cfg),
    }
    return best, history


def train(samples, cfg=None, taxonomy_hash=""):
    """Train on a list of annotated samples; see :func:`train_arrays`."""
    from .taxonomy import samples_to_arrays

    X, y = samples_to_arrays(samples)
    return train_arrays(X, y, cfg, taxonomy_hash)


def transform_batch(model, vectors, block=TRANSFORM_BLOCK):
    """Encode every row; output is float32 and bitwise independent of how input is split.

    Rows go through the matrix product in zero-padded blocks of fixed
    height, so each row always sees the same kernel shape.
    """
    V = np.asarray(vectors)
    if V.size == 0:
        return np.zeros((0, model.d_out), dtype=np.float32)
    V = np.atleast_2d(V)
    if V.shape[1] != model.d_in:
        raise DimensionMismatch(f"model expects dim {model.d_in}, got {V.shape[1]}")
    WT = np.ascontiguousarray(model.W_enc.T)
    out = np.empty((len(V), model.d_out), dtype=np.float32)
    buf = np.zeros((block, model.d_in), dtype=np.float64)
    for s in range(0, len(V), block):
        n = min(block, len(V) - s)
        buf[:n] = V[s:s + n]
        if n < block:
            buf[n:] = 0.0
        out[s:s + n] = (buf @ WT + model.b_enc)[:n]
    return out


# -- persistence ---------------------------------------------------------------


def _num(v):
    return format(float(v), ".17g")


def _arr(a):
    a = np.asarray(a)
    if a.ndim == 1:
        return "[" + ",".join(_num(v) for v in a) + "]"
    return "[\n    " + ",\n    ".join(_arr(r) for r in a) + "\n  ]"


def model_dumps(model):
    head = {
        "format_version": FORMAT_VERSION,
        "d_in": model.d_in,
        "d_out": model.d_out,
        "margin_m": model.margin_m,
        "beta1": model.beta1,
        "beta2": model.beta2,
    }
    parts = [f"  {json.dumps(k)}: {json.dumps(v)}" for k, v in head.items()]
    for name in ("W_enc", "b_enc", "W_dec", "b_dec"):
        parts.append(f"  {json.dumps(name)}: {_arr(getattr(model, name))}")
    parts.append(f"  \"metadata\": {json.dumps(model.metadata, sort_keys=True)}")
    return "{\n" + ",\n".join(parts) + "\n}\n"


def model_save(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_dumps(model))


def model_loads(text):
    try:
        d = json.loads(text)
    except ValueError as exc:
        raise ContractError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ContractError("model file must hold a JSON object")
    if d.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported model format_version {d.get('format_version')!r}")
    try:
        model = TransformModel(d["W_enc"], d["b_enc"], d["W_dec"], d["b_dec"],
                               float(d["margin_m"]), float(d["beta1"]), float(d["beta2"]), d.get("metadata", {}))
    except KeyError as exc:
        raise ContractError(f"model file lacks field {exc}") from exc
    except ValueError as exc:
        raise DimensionMismatch(f"model weights are malformed: {exc}") from exc
    if (model.d_in, model.d_out) != (d.get("d_in"), d.get("d_out")):
        raise DimensionMismatch(f"declared dims ({d.get('d_in')}, {d.get('d_out')}) disagree with weights "
                                f"({model.d_in}, {model.d_out})")
    return model


def model_load(path):
    with open(path, encoding="utf-8") as fh:
        return model_loads(fh.read())


def hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- estimator -----------------------------------------------------------------


class GuidedSpaceTransformer(TransformerMixin, BaseEstimator):
    """Label-guided linear embedding transform with an sklearn interface.

    ``fit(X, y)`` trains the encoder-decoder on labelled embeddings;
    ``transform`` applies the encoder and ``inverse_transform`` the decoder.
    """

    def __init__(self, n_components=None, margin=1.0, beta1=1.0, beta2=1.0, learning_rate=1e-3,
                 batch_size=256, max_epochs=200, patience=10, val_fraction=0.2, optimizer="adam",
                 init="identity", random_state=0):
        self.n_components = n_components
        self.margin = margin
        self.beta1 = beta1
        self.beta2 = beta2
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.optimizer = optimizer
        self.init = init
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, val_fraction=self.val_fraction, seed=self.random_state,
            d_out=self.n_components, optimizer=self.optimizer, margin=self.margin, beta1=self.beta1,
            beta2=self.beta2, init=self.init,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.model_, self.history_ = train_arrays(X, y_idx, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return transform_batch(self.model_, X).astype(np.float64)

    def inverse_transform(self, E):
        check_is_fitted(self, "model_")
        return decode(self.model_, check_array(E, dtype=np.float64))
