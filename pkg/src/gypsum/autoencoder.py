"""Per-image spectral autoencoder trained with a spectral-angle loss.

Encoder and decoder each have two ReLU hidden layers and a linear output
layer; the decoder mirrors the encoder widths. Gradients are computed
analytically (plain backprop) and applied with Adam. The reconstruction loss
is the mean angle between each input spectrum and its reconstruction, which
makes training invariant to the relative magnitude of the reconstruction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import PixelMatrix
from .errors import ConfigError, NumericalError

# Cosine clamp: keeps arccos differentiable at perfect reconstruction at the
# price of a loss floor of arccos(1 - 1e-7) ~ 4.5e-4 rad.
COS_MARGIN = 1e-7
NORM_FLOOR = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1

# Layers 0..5; ReLU follows the two hidden layers on each side, the
# embedding (2) and reconstruction (5) layers stay linear.
_RELU_LAYERS = frozenset({0, 1, 3, 4})


@dataclass
class AeConfig:
    input_dim: int
    embed_dim: int
    hidden_dims: tuple[int, int] = (128, 64)
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    min_rel_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if len(self.hidden_dims) != 2:
            raise ConfigError("hidden_dims must hold exactly two layer widths")
        if not self.embed_dim < self.input_dim:
            raise ConfigError(
                f"embedding dim {self.embed_dim} must be below input dim {self.input_dim}"
            )
        if min(self.hidden_dims) < self.embed_dim:
            raise ConfigError("hidden layers must be at least as wide as the embedding")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")

    def layer_dims(self) -> list[tuple[int, int]]:
        w, d = self.input_dim, self.embed_dim
        h1, h2 = self.hidden_dims
        return [(h1, w), (h2, h1), (d, h2), (h2, d), (h1, h2), (w, h1)]


@dataclass
class AeModel:
    config: AeConfig
    weights: list[np.ndarray]  # 6 matrices, shape (out, in)
    biases: list[np.ndarray]  # 6 vectors
    adam_m_w: list[np.ndarray]
    adam_v_w: list[np.ndarray]
    adam_m_b: list[np.ndarray]
    adam_v_b: list[np.ndarray]
    adam_step: int = 0
    loss_history: list[float] = field(default_factory=list)

    def copy(self) -> "AeModel":
        return AeModel(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            adam_m_w=[m.copy() for m in self.adam_m_w],
            adam_v_w=[v.copy() for v in self.adam_v_w],
            adam_m_b=[m.copy() for m in self.adam_m_b],
            adam_v_b=[v.copy() for v in self.adam_v_b],
            adam_step=self.adam_step,
            loss_history=list(self.loss_history),
        )


@dataclass
class Embedding:
    """Per-pixel latent features, rows aligned with the source PixelMatrix."""

    z: np.ndarray
    origin: np.ndarray

    @property
    def p(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]


def init_model(config: AeConfig) -> AeModel:
    """Kaiming-style uniform fan-in init; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for out_dim, in_dim in config.layer_dims():
        bound = np.sqrt(6.0 / in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return AeModel(
        config=config,
        weights=weights,
        biases=biases,
        adam_m_w=[np.zeros_like(w) for w in weights],
        adam_v_w=[np.zeros_like(w) for w in weights],
        adam_m_b=[np.zeros_like(b) for b in biases],
        adam_v_b=[np.zeros_like(b) for b in biases],
    )


def _forward_batch(model: AeModel, X: np.ndarray):
    """Returns (activation inputs per layer, pre-activations per layer, Z, Xhat)."""
    acts_in, pres = [], []
    a = X
    for l in range(6):
        acts_in.append(a)
        pre = a @ model.weights[l].T + model.biases[l]
        pres.append(pre)
        a = np.maximum(pre, 0.0) if l in _RELU_LAYERS else pre
    return acts_in, pres, pres[2], a


def forward(model: AeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode and reconstruct a single spectrum, returning (z, xhat)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.config.input_dim:
        raise ValueError(f"expected a spectrum of length {model.config.input_dim}")
    _, _, z, xhat = _forward_batch(model, x[None, :])
    return z[0], xhat[0]


def _sa_loss_grad(X: np.ndarray, Xhat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean spectral angle over the batch and its gradient w.r.t. Xhat.

    The cosine is clamped to [-(1 - COS_MARGIN), 1 - COS_MARGIN]; where the
    clamp binds the gradient is zero. A row whose reconstruction norm is
    below NORM_FLOOR sits at the cone point of the angle: it contributes
    arccos(0) to the loss and zero gradient.
    """
    nx = np.linalg.norm(X, axis=1)
    if np.any(nx == 0.0):
        raise ValueError("spectral-angle loss requires nonzero input spectra")
    raw_nh = np.linalg.norm(Xhat, axis=1)
    degenerate = raw_nh < NORM_FLOOR
    nh = np.where(degenerate, 1.0, raw_nh)
    u = np.einsum("ij,ij->i", X, Xhat)
    cos = np.where(degenerate, 0.0, u / (nx * nh))
    clipped = np.clip(cos, -1.0 + COS_MARGIN, 1.0 - COS_MARGIN)
    angles = np.arccos(clipped)
    loss = float(angles.mean())

    active = (np.abs(cos) < 1.0 - COS_MARGIN) & ~degenerate
    scale = np.where(active, -1.0 / np.sqrt(1.0 - clipped**2), 0.0)
    # d cos / d Xhat = (X / nx - cos * Xhat / nh) / nh
    dcos = (X / nx[:, None] - cos[:, None] * Xhat / nh[:, None]) / nh[:, None]
    grad = scale[:, None] * dcos / X.shape[0]
    return loss, grad


def sa_loss(x: np.ndarray, xhat: np.ndarray) -> float:
    """Mean spectral angle between inputs and reconstructions (radians)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xhat = np.atleast_2d(np.asarray(xhat, dtype=np.float64))
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    loss, _ = _sa_loss_grad(x, xhat)
    return loss


def backward(model: AeModel, batch: np.ndarray
             ) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss and analytic gradients of the mean spectral-angle loss for a batch.

    ReLU takes subgradient 0 at exactly 0.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    acts_in, pres, _, xhat = _forward_batch(model, X)
    loss, g = _sa_loss_grad(X, xhat)

    grad_w = [None] * 6
    grad_b = [None] * 6
    for l in range(5, -1, -1):
        grad_w[l] = g.T @ acts_in[l]
        grad_b[l] = g.sum(axis=0)
        if l > 0:
            g = g @ model.weights[l]
            if (l - 1) in _RELU_LAYERS:
                g = g * (pres[l - 1] > 0.0)
    return loss, grad_w, grad_b


def _adam_update(model: AeModel, grad_w: list[np.ndarray], grad_b: list[np.ndarray]) -> None:
    model.adam_step += 1
    t = model.adam_step
    lr = model.config.learning_rate
    corr1 = 1.0 - ADAM_BETA1**t
    corr2 = 1.0 - ADAM_BETA2**t
    for params, grads, ms, vs in (
        (model.weights, grad_w, model.adam_m_w, model.adam_v_w),
        (model.biases, grad_b, model.adam_m_b, model.adam_v_b),
    ):
        for theta, g, m, v in zip(params, grads, ms, vs):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            theta -= lr * (m / corr1) / (np.sqrt(v / corr2) + ADAM_EPS)


def train(matrix: PixelMatrix, config: AeConfig) -> AeModel:
    """Minibatch Adam until the epoch-mean loss stops improving.

    Epoch shuffles derive from the config seed, so a fixed seed gives a
    bit-identical model. The short final batch of each epoch is kept. Stops
    when the best epoch loss fails to improve by min_rel_improvement for
    ``patience`` consecutive epochs, or at max_epochs; returns the model
    snapshot from the best epoch.
    """
    if config.input_dim != matrix.w:
        raise ConfigError(f"config input_dim {config.input_dim} != matrix bands {matrix.w}")
    if matrix.p < config.batch_size:
        raise ConfigError(
            f"need at least batch_size={config.batch_size} pixels, got {matrix.p}"
        )
    rng = np.random.default_rng(config.seed)
    model = init_model(config)
    X = matrix.spectra

    best = model.copy()
    best_loss = np.inf
    stale = 0
    for epoch in range(config.max_epochs):
        perm = rng.permutation(matrix.p)
        total = 0.0
        for start in range(0, matrix.p, config.batch_size):
            rows = perm[start:start + config.batch_size]
            loss, grad_w, grad_b = backward(model, X[rows])
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged (non-finite loss) at epoch {epoch}")
            _adam_update(model, grad_w, grad_b)
            total += loss * rows.size
        epoch_loss = total / matrix.p
        model.loss_history.append(epoch_loss)

        if epoch_loss < best_loss * (1.0 - config.min_rel_improvement):
            best = model.copy()
            best_loss = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.loss_history = list(model.loss_history)
    return best


def encode_all(model: AeModel, matrix: PixelMatrix, chunk: int = 65536) -> Embedding:
    """Encoder output for every pixel, rows aligned with the matrix."""
    if matrix.w != model.config.input_dim:
        raise ValueError(f"matrix bands {matrix.w} != model input dim {model.config.input_dim}")
    out = np.empty((matrix.p, model.config.embed_dim))
    for start in range(0, matrix.p, chunk):
        block = matrix.spectra[start:start + chunk]
        a = block
        for l in range(3):
            pre = a @ model.weights[l].T + model.biases[l]
            a = np.maximum(pre, 0.0) if l in _RELU_LAYERS else pre
        out[start:start + block.shape[0]] = a
    return Embedding(z=out, origin=matrix.origin.copy())


def save_model(model: AeModel, path: str) -> None:
    """Checkpoint to .npz; the round-trip is bit-exact."""
    cfg = model.config
    arrays = {
        "version": np.int64(CHECKPOINT_VERSION),
        "adam_step": np.int64(model.adam_step),
        "loss_history": np.asarray(model.loss_history, dtype=np.float64),
        "config_json": np.frombuffer(
            json.dumps({
                "input_dim": cfg.input_dim,
                "embed_dim": cfg.embed_dim,
                "hidden_dims": list(cfg.hidden_dims),
                "learning_rate": cfg.learning_rate,
                "batch_size": cfg.batch_size,
                "max_epochs": cfg.max_epochs,
                "patience": cfg.patience,
                "min_rel_improvement": cfg.min_rel_improvement,
                "seed": cfg.seed,
            }).encode(), dtype=np.uint8),
    }
    for l in range(6):
        arrays[f"w{l}"] = model.weights[l]
        arrays[f"b{l}"] = model.biases[l]
        arrays[f"mw{l}"] = model.adam_m_w[l]
        arrays[f"vw{l}"] = model.adam_v_w[l]
        arrays[f"mb{l}"] = model.adam_m_b[l]
        arrays[f"vb{l}"] = model.adam_v_b[l]
    np.savez(path, **arrays)


def load_model(path: str) -> AeModel:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg_raw = json.loads(bytes(data["config_json"]).decode())
        cfg_raw["hidden_dims"] = tuple(cfg_raw["hidden_dims"])
        config = AeConfig(**cfg_raw)
        return AeModel(
            config=config,
            weights=[data[f"w{l}"] for l in range(6)],
            biases=[data[f"b{l}"] for l in range(6)],
            adam_m_w=[data[f"mw{l}"] for l in range(6)],
            adam_v_w=[data[f"vw{l}"] for l in range(6)],
            adam_m_b=[data[f"mb{l}"] for l in range(6)],
            adam_v_b=[data[f"vb{l}"] for l in range(6)],
            adam_step=int(data["adam_step"]),
            loss_history=[float(v) for v in data["loss_history"]],
        )
