"""Conditional MLP noise predictor eps(x_t, c, t) with hand-written gradients.

Input to the network is ``[x, time_embedding(t / T), one_hot(c)]``.  The null
condition embeds as all zeros.  Hidden layers use ``tanh``; the output layer
is linear.  Each hidden layer can carry a low-rank adapter pair so the
effective weight is ``W + scale * B @ A``; with adapters enabled only A and
B are trainable.

Everything here is batched along the leading axis.  Single vectors are
accepted and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .schedule import NoiseSchedule, q_sample

NULL_ID = -1


@dataclass(frozen=True)
class Condition:
    """A class label, or the null token when ``class_id`` is None."""

    class_id: int | None = None

    @classmethod
    def null(cls) -> "Condition":
        return cls(None)

    @property
    def is_null(self) -> bool:
        return self.class_id is None

    @property
    def id(self) -> int:
        return NULL_ID if self.class_id is None else int(self.class_id)

    def embedding(self, num_classes: int) -> np.ndarray:
        out = np.zeros(num_classes)
        if self.class_id is not None:
            if not 0 <= self.class_id < num_classes:
                raise ValueError(f"class id {self.class_id} outside [0, {num_classes})")
            out[self.class_id] = 1.0
        return out


def condition_ids(c, n: int) -> np.ndarray:
    """Normalise a condition argument (Condition, int, None or int array) to ``n`` ids."""
    if isinstance(c, Condition):
        return np.full(n, c.id, dtype=np.int64)
    if c is None:
        return np.full(n, NULL_ID, dtype=np.int64)
    ids = np.asarray(c, dtype=np.int64)
    if ids.ndim == 0:
        return np.full(n, int(ids), dtype=np.int64)
    if ids.shape != (n,):
        raise ValueError(f"expected {n} condition ids, got shape {ids.shape}")
    return ids


@dataclass
class DenoiserParams:
    dim: int
    num_classes: int
    num_steps: int
    hidden: tuple[int, ...]
    time_embed: int
    tensors: dict[str, np.ndarray]
    adapter_enabled: bool = False
    adapter_rank: int = 4
    adapter_scale: float = 1.0

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def input_width(self) -> int:
        return self.dim + self.time_embed + self.num_classes

    def trainable_names(self) -> list[str]:
        if self.adapter_enabled:
            return [f"{p}{i}" for i in range(len(self.hidden)) for p in ("A", "B")]
        return [f"{p}{i}" for i in range(self.num_layers) for p in ("W", "b")]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.dim,
            self.num_classes,
            self.num_steps,
            tuple(self.hidden),
            self.time_embed,
            {k: v.copy() for k, v in self.tensors.items()},
            self.adapter_enabled,
            self.adapter_rank,
            self.adapter_scale,
        )

    def effective_weight(self, i: int) -> np.ndarray:
        W = self.tensors[f"W{i}"]
        if self.adapter_enabled and i < len(self.hidden):
            W = W + self.adapter_scale * (self.tensors[f"B{i}"] @ self.tensors[f"A{i}"])
        return W

    def flat_trainable(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.trainable_names()])

    def set_flat_trainable(self, flat: np.ndarray) -> None:
        pos = 0
        for k in self.trainable_names():
            size = self.tensors[k].size
            self.tensors[k] = np.asarray(flat[pos : pos + size], dtype=np.float64).reshape(
                self.tensors[k].shape
            )
            pos += size


def init_params(
    dim: int,
    num_classes: int,
    num_steps: int,
    rng: np.random.Generator,
    hidden: Iterable[int] = (64, 64),
    time_embed: int = 8,
) -> DenoiserParams:
    if time_embed % 2:
        raise ValueError("time_embed must be even")
    if num_classes < 1:
        raise ValueError("need at least one condition class")
    hidden = tuple(int(h) for h in hidden)
    widths = [dim + time_embed + num_classes, *hidden, dim]
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        tensors[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        tensors[f"b{i}"] = np.zeros(fan_out)
    # condition columns start at zero: the conditional branch equals the
    # unconditional one until class-labelled data moves them
    tensors["W0"][:, dim + time_embed :] = 0.0
    return DenoiserParams(dim, num_classes, num_steps, hidden, time_embed, tensors)


def enable_adapters(
    params: DenoiserParams, rng: np.random.Generator, rank: int = 4, scale: float = 1.0
) -> DenoiserParams:
    """Return a copy with fresh adapters on every hidden layer (B = 0, so the function is unchanged)."""
    if rank < 1:
        raise ValueError("adapter rank must be positive")
    out = params.copy()
    for i in range(len(params.hidden)):
        out_w, in_w = params.tensors[f"W{i}"].shape
        out.tensors[f"A{i}"] = rng.normal(0.0, 1.0 / np.sqrt(in_w), size=(rank, in_w))
        out.tensors[f"B{i}"] = np.zeros((out_w, rank))
    out.adapter_enabled = True
    out.adapter_rank = rank
    out.adapter_scale = scale
    return out


def time_embedding(t, num_steps: int, width: int) -> np.ndarray:
    u = np.asarray(t, dtype=np.float64) / num_steps
    freqs = np.pi * 2.0 ** np.arange(width // 2)
    ang = np.multiply.outer(u, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _network_input(params: DenoiserParams, x: np.ndarray, c, t) -> np.ndarray:
    n = x.shape[0]
    ids = condition_ids(c, n)
    if ids.max() >= params.num_classes or ids.min() < NULL_ID:
        raise ValueError(f"condition ids outside [0, {params.num_classes}) or null: {ids}")
    t = np.asarray(t)
    t = np.full(n, t) if t.ndim == 0 else np.broadcast_to(t, (n,))
    onehot = np.zeros((n, params.num_classes))
    mask = ids != NULL_ID
    onehot[np.nonzero(mask)[0], ids[mask]] = 1.0
    return np.concatenate([x, time_embedding(t, params.num_steps, params.time_embed), onehot], axis=1)


def _forward(params: DenoiserParams, x: np.ndarray, c, t):
    h = _network_input(params, x, c, t)
    acts = [h]
    L = params.num_layers
    for i in range(L):
        z = h @ params.effective_weight(i).T + params.tensors[f"b{i}"]
        h = np.tanh(z) if i < L - 1 else z
        acts.append(h)
    return h, acts


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def predict_noise(params: DenoiserParams, x, c, t) -> np.ndarray:
    xb, single = _as_batch(x)
    if xb.shape[1] != params.dim:
        raise ValueError(f"state dimension {xb.shape[1]} != network dimension {params.dim}")
    out, _ = _forward(params, xb, c, t)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite noise prediction")
    return out[0] if single else out


def backprop(params: DenoiserParams, x, c, t, upstream) -> dict[str, np.ndarray]:
    """Gradient of ``sum(predict_noise(x, c, t) * upstream)`` w.r.t. trainable tensors.

    Batched inputs are summed over the batch.
    """
    xb, _ = _as_batch(x)
    ub, _ = _as_batch(upstream)
    if ub.shape != (xb.shape[0], params.dim):
        raise ValueError(f"upstream shape {ub.shape} does not match output shape {(xb.shape[0], params.dim)}")
    _, acts = _forward(params, xb, c, t)
    L = params.num_layers
    grads: dict[str, np.ndarray] = {}
    g = ub
    for i in reversed(range(L)):
        if i < L - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        gW = g.T @ acts[i]
        if params.adapter_enabled:
            if i < L - 1:
                s = params.adapter_scale
                grads[f"A{i}"] = s * params.tensors[f"B{i}"].T @ gW
                grads[f"B{i}"] = s * gW @ params.tensors[f"A{i}"].T
        else:
            grads[f"W{i}"] = gW
            grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = g @ params.effective_weight(i)
    return grads


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def make_optimizer(params: DenoiserParams, **settings) -> OptimizerState:
    opt = OptimizerState(**settings)
    for k in params.trainable_names():
        opt.m[k] = np.zeros_like(params.tensors[k])
        opt.v[k] = np.zeros_like(params.tensors[k])
    return opt


def adam_update(params: DenoiserParams, opt: OptimizerState, grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam step (descent on ``grads``) with decoupled weight decay."""
    names = params.trainable_names()
    if set(grads) != set(names) or set(opt.m) != set(names):
        raise ValueError(f"gradient/optimizer slots {sorted(grads)} do not match trainable {sorted(names)}")
    for k in names:
        if grads[k].shape != params.tensors[k].shape or opt.m[k].shape != params.tensors[k].shape:
            raise ValueError(f"shape mismatch for {k}")
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for k in names:
        g = grads[k]
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[k] / bc1
        v_hat = opt.v[k] / bc2
        p = params.tensors[k]
        params.tensors[k] = p - opt.lr * (m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * p)


def pretrain_step(
    params: DenoiserParams,
    opt: OptimizerState,
    x0: np.ndarray,
    cond: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    cond_dropout_prob: float = 0.1,
) -> float:
    """One epsilon-matching update on a batch; returns the batch MSE before the update."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("pretrain_step needs a non-empty (n, d) batch")
    if not 0.0 <= cond_dropout_prob <= 1.0:
        raise ValueError("cond_dropout_prob must lie in [0, 1]")
    n, d = x0.shape
    ids = condition_ids(cond, n).copy()
    t = rng.integers(1, schedule.T + 1, size=n)
    noise = rng.standard_normal((n, d))
    ids[rng.random(n) < cond_dropout_prob] = NULL_ID
    xt = q_sample(schedule, x0, t, noise)
    pred = predict_noise(params, xt, ids, t)
    resid = pred - noise
    loss = float(np.mean(resid**2))
    grads = backprop(params, xt, ids, t, 2.0 * resid / resid.size)
    adam_update(params, opt, grads)
    return loss


def pretrain(
    params: DenoiserParams,
    x0: np.ndarray,
    cond: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    steps: int,
    batch_size: int = 256,
    cond_dropout_prob: float = 0.1,
    **opt_settings,
) -> list[float]:
    """Minibatch epsilon-matching training in place; returns the loss curve."""
    opt = make_optimizer(params, **opt_settings)
    cond = np.asarray(cond, dtype=np.int64)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(x0), size=batch_size)
        losses.append(pretrain_step(params, opt, x0[idx], cond[idx], schedule, rng, cond_dropout_prob))
    return losses
