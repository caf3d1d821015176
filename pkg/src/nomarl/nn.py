"""Small numpy neural-network toolkit: dense stacks, embeddings, Adam,
Polyak averaging, parameter noise, gradient checking and checkpoints.

Everything is float64 and batch-major: inputs are ``(batch, features)``
and a dense layer with weight ``W`` of shape ``(out, in)`` computes
``x @ W.T + b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "softmax", "linear")


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation == "softmax" and self.dropout > 0.0:
            raise ValueError("dropout after a softmax output is not supported")


def stack_specs(widths: Sequence[int], hidden_activation="relu", output_activation="linear",
                dropout=0.0) -> List[LayerSpec]:
    """Specs for a chain of widths; dropout follows every hidden layer."""
    specs = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        specs.append(LayerSpec(widths[i], widths[i + 1],
                               output_activation if last else hidden_activation,
                               0.0 if last else dropout))
    return specs


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MLP:
    """Dense feed-forward stack."""

    def __init__(self, specs: Sequence[LayerSpec], rng: Optional[np.random.Generator] = None):
        specs = list(specs)
        for a, b in zip(specs, specs[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        for s in specs[:-1]:
            if s.activation == "softmax":
                raise ValueError("softmax is only allowed on the output layer")
        self.specs = specs
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for s in specs:
            bound = 1.0 / np.sqrt(s.n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(s.n_out, s.n_in)))
            self.biases.append(rng.uniform(-bound, bound, size=s.n_out))

    @property
    def n_in(self) -> int:
        return self.specs[0].n_in

    @property
    def n_out(self) -> int:
        return self.specs[-1].n_out

    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.specs = list(self.specs)
        new.weights = [W.copy() for W in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input of shape (batch, {self.n_in}), got {x.shape}")
        cache = []
        h = x
        for s, W, b in zip(self.specs, self.weights, self.biases):
            z = h @ W.T + b
            if s.activation == "relu":
                a = np.maximum(z, 0.0)
            elif s.activation == "softmax":
                a = softmax(z)
            else:
                a = z
            mask = None
            if train and s.dropout > 0.0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                mask = (rng.random(a.shape) >= s.dropout) / (1.0 - s.dropout)
                a = a * mask
            cache.append((h, z, a, mask))
            h = a
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Return (parameter gradients aligned with ``params()``, input gradient)."""
        if not cache:
            raise ValueError("backward needs the cache of a matching forward call")
        g = np.asarray(grad_out, dtype=float)
        grads = [None] * (2 * len(self.specs))
        for i in range(len(self.specs) - 1, -1, -1):
            s = self.specs[i]
            h, z, a, mask = cache[i]
            if mask is not None:
                g = g * mask
            if s.activation == "relu":
                g = g * (z > 0.0)
            elif s.activation == "softmax":
                g = a * (g - np.sum(g * a, axis=1, keepdims=True))
            grads[2 * i] = g.T @ h
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads, g


class Embedding:
    """Lookup table mapping an integer index to a learned vector."""

    def __init__(self, n_rows: int, dim: int = 3, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.table = rng.normal(0.0, 1.0, size=(n_rows, dim))

    def params(self) -> List[np.ndarray]:
        return [self.table]

    def copy(self) -> "Embedding":
        new = Embedding.__new__(Embedding)
        new.table = self.table.copy()
        return new

    def forward(self, idx):
        return self.table[np.asarray(idx, dtype=np.int64)]

    def backward(self, idx, grad_out):
        g = np.zeros_like(self.table)
        np.add.at(g, np.asarray(idx, dtype=np.int64), grad_out)
        return [g]


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        """In-place update of the registered parameters (gradient descent)."""
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> List[np.ndarray]:
        return self.m + self.v


def polyak_update(target: Sequence[np.ndarray], online: Sequence[np.ndarray], tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    if len(target) != len(online):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        if tau == 1.0:
            t[...] = o
        elif tau > 0.0:
            t *= 1.0 - tau
            t += tau * o


def apply_param_noise(net: MLP, sigma: float, rng: np.random.Generator, layer: int = -1) -> MLP:
    """Copy of ``net`` with N(0, sigma^2) added to one layer's weights and biases.

    Untouched layers share their arrays with ``net``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    noisy = MLP.__new__(MLP)
    noisy.specs = net.specs
    noisy.weights = list(net.weights)
    noisy.biases = list(net.biases)
    if sigma > 0:
        W, b = net.weights[layer], net.biases[layer]
        noisy.weights[layer] = W + rng.normal(0.0, sigma, size=W.shape)
        noisy.biases[layer] = b + rng.normal(0.0, sigma, size=b.shape)
    return noisy


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(params: Sequence[np.ndarray], loss_fn: Callable[[], float],
                      analytic: Sequence[np.ndarray], tolerance: float = 1e-4,
                      n_samples: int = 30, eps: float = 1e-5, abs_floor: float = 1e-6,
                      rng: Optional[np.random.Generator] = None,
                      kink_retries: int = 2) -> GradCheckReport:
    """Compare analytic gradients with central differences on random entries.

    ``loss_fn`` must read the current values of ``params`` (they are
    perturbed in place and restored). When the two one-sided slopes of an
    entry disagree, the step may straddle a ReLU kink: the entry is then
    re-measured with steps 100x smaller (at most ``kink_retries`` times) and
    the measurement whose one-sided slopes agree best is kept.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    checked = 0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            base = loss_fn()
            h = eps
            best = None
            for _ in range(kink_retries + 1):
                flat[i] = orig + h
                up = loss_fn()
                flat[i] = orig - h
                down = loss_fn()
                flat[i] = orig
                right, left = (up - base) / h, (base - down) / h
                mismatch = abs(right - left) / max(abs(right), abs(left), abs_floor)
                if best is None or mismatch < best[0]:
                    best = (mismatch, (up - down) / (2.0 * h))
                if mismatch <= tolerance:
                    break
                h /= 100.0
            numeric = best[1]
            denom = max(abs(numeric), abs(gflat[i]), abs_floor)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
            checked += 1
    return GradCheckReport(worst, checked, tolerance)


# -- checkpoints ---------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"NOMARLCK"
#   uint32    format version
#   uint32    header length in bytes
#   header    UTF-8 JSON; "arrays" lists {"name", "shape"} in storage order
#   payload   each array as row-major little-endian float64, back to back

CHECKPOINT_MAGIC = b"NOMARLCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (header, {name: array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(float)
        offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return header, arrays


def spec_dicts(specs: Sequence[LayerSpec]) -> list:
    return [asdict(s) for s in specs]
