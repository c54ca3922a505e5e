"""Layers, multi-head cross-attention, positional encoding, Adam, grad check.

Everything is double precision and seeded; parameter init is
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigurationError(ValueError):
    """Shape or configuration mismatch in a network definition."""


class NumericsError(RuntimeError):
    """A non-finite value where the update rules require finite numbers."""


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine layer y = x @ W.T + b with gradient accumulators."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(_init(rng, (out_dim, in_dim), in_dim), requires_grad=True)
        self.bias = Tensor(_init(rng, (out_dim,), in_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"linear layer expects width {self.in_dim}, got {x.data.shape[-1]}")
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def named_parameters(self, prefix: str = ""):
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


class MLP:
    """Stack of Linear layers with ReLU between them (last layer bare)."""

    def __init__(self, dims, rng: np.random.Generator):
        if len(dims) < 2:
            raise ConfigurationError("MLP needs at least input and output dims")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, x)

    def named_parameters(self, prefix: str = ""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}l{i}."))
        return out


def mlp_forward(layers, x) -> Tensor:
    """Apply a Linear sequence with ReLU between layers.

    Accepts a vector or a matrix of row vectors; rank is preserved.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    vector_in = x.data.ndim == 1
    if vector_in:
        x = ad.reshape(x, (1, x.data.shape[0]))
    for i, layer in enumerate(layers):
        x = layer(x)
        if i + 1 < len(layers):
            x = ad.relu(x)
    if vector_in:
        x = ad.reshape(x, (x.data.shape[1],))
    return x


def softmax(logits) -> np.ndarray:
    """Stable softmax of a 1-D array (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite input")
    e = np.exp(z - z.max())
    return e / e.sum()


def positional_encoding(p, bands: int = 6) -> np.ndarray:
    """Sinusoidal lift of coordinates: (sin(2^l pi p_i), cos(2^l pi p_i)).

    Axis-major ordering; a (..., D) input yields (..., 2*D*bands).
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("positional_encoding requires finite coordinates")
    freqs = (2.0 ** np.arange(bands)) * np.pi            # (L,)
    ang = p[..., :, None] * freqs                        # (..., D, L)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., D, L, 2)
    return enc.reshape(p.shape[:-1] + (2 * p.shape[-1] * bands,))


class AttentionBlock:
    """One transformer block: multi-head cross-attention + feed-forward,
    each wrapped in a residual connection and layer normalization."""

    def __init__(self, width: int, heads: int, ff_mult: int, rng: np.random.Generator):
        if width % heads != 0:
            raise ConfigurationError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = [Linear(width, self.head_dim, rng) for _ in range(heads)]
        self.k_proj = [Linear(width, self.head_dim, rng) for _ in range(heads)]
        self.v_proj = [Linear(width, self.head_dim, rng) for _ in range(heads)]
        self.out_proj = Linear(width, width, rng)
        self.ln1_gain = Tensor(np.ones(width), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(width), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(width), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(width), requires_grad=True)
        ff_dim = ff_mult * width
        self.ff1 = Linear(width, ff_dim, rng)
        self.ff2 = Linear(ff_dim, width, rng)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, scale: bool = True,
                collect_weights=None) -> Tensor:
        s = 1.0 / math.sqrt(self.head_dim) if scale else 1.0
        head_outs = []
        for h in range(self.heads):
            qh = self.q_proj[h](q)
            kh = self.k_proj[h](k)
            vh = self.v_proj[h](v)
            scores = ad.mul_scalar(ad.matmul(qh, ad.transpose(kh)), s)
            attn = ad.softmax_rows(scores)
            if collect_weights is not None:
                collect_weights.append(attn.data.copy())
            head_outs.append(ad.matmul(attn, vh))
        mixed = self.out_proj(ad.concat_cols(head_outs))
        h1 = ad.layer_norm_rows(ad.add(q, mixed), self.ln1_gain, self.ln1_bias)
        ff = self.ff2(ad.relu(self.ff1(h1)))
        return ad.layer_norm_rows(ad.add(h1, ff), self.ln2_gain, self.ln2_bias)

    def named_parameters(self, prefix: str = ""):
        out = {}
        for h in range(self.heads):
            out.update(self.q_proj[h].named_parameters(f"{prefix}h{h}.q."))
            out.update(self.k_proj[h].named_parameters(f"{prefix}h{h}.k."))
            out.update(self.v_proj[h].named_parameters(f"{prefix}h{h}.v."))
        out.update(self.out_proj.named_parameters(f"{prefix}out."))
        out[f"{prefix}ln1.gain"] = self.ln1_gain
        out[f"{prefix}ln1.bias"] = self.ln1_bias
        out[f"{prefix}ln2.gain"] = self.ln2_gain
        out[f"{prefix}ln2.bias"] = self.ln2_bias
        out.update(self.ff1.named_parameters(f"{prefix}ff1."))
        out.update(self.ff2.named_parameters(f"{prefix}ff2."))
        return out


class CrossAttention:
    """Stack of attention blocks; queries are refined, keys/values fixed."""

    def __init__(self, width: int, heads: int, layers: int, ff_mult: int,
                 rng: np.random.Generator, scale: bool = True):
        self.width = width
        self.scale = scale
        self.blocks = [AttentionBlock(width, heads, ff_mult, rng) for _ in range(layers)]

    def forward(self, q: Tensor, k: Tensor, v: Tensor, collect_weights=None) -> Tensor:
        if k.data.shape[0] == 0:
            raise ConfigurationError("cross attention requires at least one key")
        if q.data.shape[1] != self.width or k.data.shape[1] != self.width \
                or v.data.shape[1] != self.width:
            raise ConfigurationError("query/key/value width mismatch")
        for block in self.blocks:
            q = block.forward(q, k, v, scale=self.scale, collect_weights=collect_weights)
        return q

    def named_parameters(self, prefix: str = ""):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}b{i}."))
        return out


def cross_attention_forward(q_set, k_set, v_set, attention: CrossAttention,
                            collect_weights=None) -> Tensor:
    q = q_set if isinstance(q_set, Tensor) else Tensor(q_set)
    k = k_set if isinstance(k_set, Tensor) else Tensor(k_set)
    v = v_set if isinstance(v_set, Tensor) else Tensor(v_set)
    return attention.forward(q, k, v, collect_weights=collect_weights)


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    A parameter whose gradient is entirely zero (or absent) is skipped,
    leaving both the parameter and its moments untouched.
    """

    def __init__(self, params: dict, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None or not g.any():
                continue
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def adam_step(optimizer: Adam):
    """One in-place update from the gradients currently stored on params."""
    optimizer.step()


def grad_check(loss_fn, params: dict, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    `loss_fn` must be a deterministic zero-argument callable returning a
    scalar Tensor built from `params`. Relative error for one entry is
    |ad - fd| / max(1, |ad|, |fd|).
    """
    for t in params.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(1.0, abs(ga[i]), abs(fd))
            worst = max(worst, abs(ga[i] - fd) / denom)
    return worst
