"""Network building blocks on top of the autodiff core.

Provides named-parameter containers with Adam state, the shared backbone used
by every model in the package (a single-layer tanh recurrent encoder that
summarizes the history window, plus time-distributed feedforward heads), the
sinusoidal feature maps for diffusion time and future-step position, a small
training-loop driver with best-validation checkpointing, and the versioned
binary checkpoint format.

Checkpoint layout (little-endian throughout):
  magic "CWGN" | u32 version | u32 tensor count
  per tensor: u16 name length | name utf-8 | u32 rank | u32 dims... | f64 payload
Scalar metadata entries are stored as rank-0 tensors named "meta/<key>".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, TrainingDiverged

CHECKPOINT_MAGIC = b"CWGN"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameters and optimizer


class NetParams:
    """Ordered named parameter tensors plus per-parameter Adam state."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> ad.Tensor:
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = ad.Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractViolation(f"checkpoint is missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            src = np.asarray(arrays[k], dtype=np.float64)
            if src.shape != t.data.shape:
                raise ContractViolation(
                    f"parameter {k!r}: shape {src.shape} != expected {t.data.shape}")
            t.data = src.copy()


def adam_step(net: NetParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over all parameters (missing grads = 0)."""
    for name, p in net.params.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    net.step += 1
    t = net.step
    for name, p in net.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = net.adam_m[name]
        v = net.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def init_uniform(rng: np.random.Generator, n_in: int, n_out: int):
    """Weight and bias drawn uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    limit = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-limit, limit, size=(n_in, n_out))
    b = rng.uniform(-limit, limit, size=(n_out,))
    return w, b


# ---------------------------------------------------------------------------
# feature maps

TAU_EMBED_DIM = 16
POS_EMBED_DIM = 8


def tau_features(tau: np.ndarray) -> np.ndarray:
    """16-dim sinusoidal embedding of diffusion time, tau in [0, 1] shape (B,)."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    freqs = np.pi * (2.0 ** np.arange(TAU_EMBED_DIM // 2))
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def pos_features(t_f: int) -> np.ndarray:
    """8-dim sinusoidal embedding of the future step index, shape (t_f, 8)."""
    t = (np.arange(t_f, dtype=np.float64).reshape(-1, 1) + 0.5) / t_f
    freqs = 2.0 * np.pi * (2.0 ** np.arange(POS_EMBED_DIM // 2))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# shared backbone


def add_encoder_params(net: NetParams, prefix: str, d: int, hidden: int,
                       rng: np.random.Generator) -> None:
    wx, b = init_uniform(rng, d, hidden)
    wh, _ = init_uniform(rng, hidden, hidden)
    net.add(f"{prefix}.wx", wx)
    net.add(f"{prefix}.wh", wh)
    net.add(f"{prefix}.b", b)


def rnn_encode(net: NetParams, prefix: str, c: np.ndarray) -> ad.Tensor:
    """Run the tanh recurrent encoder over a history batch (B, d, T_h) -> (B, H)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 3:
        raise ContractViolation(f"history batch must be (B, d, T_h), got {c.shape}")
    batch, _, t_h = c.shape
    wx = net[f"{prefix}.wx"]
    wh = net[f"{prefix}.wh"]
    b = net[f"{prefix}.b"]
    h = ad.Tensor(np.zeros((batch, wh.data.shape[0])))
    for t in range(t_h):
        x_t = ad.Tensor(c[:, :, t])
        h = ad.tanh(ad.add(ad.add(ad.matmul(x_t, wx), ad.matmul(h, wh)), b))
    return h


def add_mlp_params(net: NetParams, prefix: str, sizes: list[int],
                   rng: np.random.Generator) -> None:
    for i in range(len(sizes) - 1):
        w, b = init_uniform(rng, sizes[i], sizes[i + 1])
        net.add(f"{prefix}.w{i}", w)
        net.add(f"{prefix}.b{i}", b)


def mlp_apply(net: NetParams, prefix: str, x: ad.Tensor, n_layers: int) -> ad.Tensor:
    """Feedforward with tanh on hidden layers and a linear output layer."""
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, net[f"{prefix}.w{i}"]), net[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


class ConditionalStepNet:
    """Shared score / vector-field backbone.

    A recurrent encoder summarizes the history C; a time-distributed MLP maps
    [x_t, last history column, summary, tau embedding, step position] to a
    d-dimensional output per future step.  The same architecture serves both
    the diffusion score network and the flow-matching vector field.
    """

    def __init__(self, d: int, t_h: int, t_f: int, rng: np.random.Generator,
                 enc_hidden: int = 48, hidden: int = 64):
        self.d = d
        self.t_h = t_h
        self.t_f = t_f
        self.enc_hidden = enc_hidden
        self.hidden = hidden
        self.net = NetParams()
        add_encoder_params(self.net, "enc", d, enc_hidden, rng)
        in_dim = d + d + enc_hidden + TAU_EMBED_DIM + POS_EMBED_DIM
        add_mlp_params(self.net, "head", [in_dim, hidden, hidden, d], rng)
        self._pos = pos_features(t_f)

    def encode(self, c: np.ndarray) -> ad.Tensor:
        return rnn_encode(self.net, "enc", c)

    def head(self, x: np.ndarray | ad.Tensor, h: ad.Tensor, c: np.ndarray,
             tau: np.ndarray) -> ad.Tensor:
        """Apply the per-step MLP; x is (B, d, T_f), returns (B, d, T_f)."""
        x = ad.as_tensor(x)
        batch = x.data.shape[0]
        t_f = self.t_f
        x_steps = ad.transpose(x, (0, 2, 1))  # (B, T_f, d)
        h_steps = ad.expand(ad.reshape(h, (batch, 1, self.enc_hidden)), 1, t_f)
        c_last = np.asarray(c, dtype=np.float64)[:, :, -1]
        c_steps = ad.Tensor(np.tile(c_last[:, None, :], (1, t_f, 1)))
        tau_emb = tau_features(tau)
        tau_steps = ad.Tensor(np.tile(tau_emb[:, None, :], (1, t_f, 1)))
        pos_steps = ad.Tensor(np.broadcast_to(self._pos, (batch, t_f, POS_EMBED_DIM)).copy())
        z = ad.concat([x_steps, c_steps, h_steps, tau_steps, pos_steps], axis=2)
        z = ad.reshape(z, (batch * t_f, z.data.shape[2]))
        out = mlp_apply(self.net, "head", z, 3)
        out = ad.reshape(out, (batch, t_f, self.d))
        return ad.transpose(out, (0, 2, 1))

    def forward(self, x, c: np.ndarray, tau: np.ndarray) -> ad.Tensor:
        return self.head(x, self.encode(c), c, tau)

    def forward_np(self, x: np.ndarray, h: ad.Tensor, c: np.ndarray,
                   tau: np.ndarray) -> np.ndarray:
        """Forward-only evaluation with a cached encoder summary."""
        with ad.no_grad():
            return self.head(x, h, c, tau).data

    def meta(self) -> dict[str, float]:
        return {"d": float(self.d), "t_h": float(self.t_h), "t_f": float(self.t_f),
                "enc_hidden": float(self.enc_hidden), "hidden": float(self.hidden)}

    def save(self, path, extra_meta: dict[str, float] | None = None) -> None:
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.net.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["ConditionalStepNet", dict[str, float]]:
        arrays, meta = load_checkpoint(path)
        model = cls(int(meta["d"]), int(meta["t_h"]), int(meta["t_f"]),
                    rng=np.random.default_rng(0),
                    enc_hidden=int(meta["enc_hidden"]), hidden=int(meta["hidden"]))
        model.net.load_state_arrays(arrays)
        return model, meta


# ---------------------------------------------------------------------------
# training-loop driver


@dataclass
class FitConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class FitResult:
    train_losses: list = field(default_factory=list)   # per optimizer step
    val_losses: list = field(default_factory=list)     # per epoch
    best_epoch: int = -1
    aborted: bool = False


def fit(net: NetParams, n_train: int, make_loss, val_loss, cfg: FitConfig,
        rng: np.random.Generator) -> FitResult:
    """Generic mini-batch loop with best-validation checkpointing.

    make_loss(indices) must build and return a scalar loss Tensor for the
    given training-window indices; val_loss() must return a float.  Keeps the
    parameters of the epoch with the lowest validation loss; on a non-finite
    loss or gradient the last good state is restored and training stops.
    """
    result = FitResult()
    best_state = net.state_arrays()
    best_val = val_loss() if cfg.epochs > 0 else np.inf
    result.val_losses.append(best_val)
    result.best_epoch = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        try:
            for start in range(0, n_train, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                net.zero_grad()
                loss = make_loss(idx)
                ad.backward(loss)
                adam_step(net, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
                result.train_losses.append(float(loss.data))
        except (TrainingDiverged, ArithmeticError):
            net.load_state_arrays(best_state)
            result.aborted = True
            break
        v = val_loss()
        result.val_losses.append(v)
        if np.isfinite(v) and v < best_val:
            best_val = v
            best_state = net.state_arrays()
            result.best_epoch = epoch + 1
    net.load_state_arrays(best_state)
    return result


# ---------------------------------------------------------------------------
# checkpoint i/o


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    meta: dict[str, float] | None = None) -> None:
    entries = dict(arrays)
    for key, value in (meta or {}).items():
        entries[f"meta/{key}"] = np.float64(value)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a CWGN checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(dims)
        offset += 8 * size
        if name.startswith("meta/"):
            meta[name[5:]] = float(data)
        else:
            arrays[name] = data.astype(np.float64)
    return arrays, meta
