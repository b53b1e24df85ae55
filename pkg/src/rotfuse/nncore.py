"""Dense MLPs with hand-written backward passes, AdamW and a cyclic LR.

Activations are batched ``(rows, cols)`` float64 arrays. Parameters live in
a flat ``dict[str, ndarray]`` so that several MLPs (and both views of a
pair) can reference the same storage; gradients use the same keys.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class ShapeMismatch(ValueError):
    pass


class StaleCache(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(in, hidden..., out)``; ReLU between layers, linear output."""

    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid MLP widths {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def param_names(prefix: str, spec: MlpSpec) -> list[tuple[str, str]]:
    return [(f"{prefix}.W{k}", f"{prefix}.b{k}") for k in range(spec.n_layers)]


def init_params(spec: MlpSpec, rng: np.random.Generator, prefix: str = "mlp") -> dict[str, np.ndarray]:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` and zero biases."""
    params = {}
    for k, (wname, bname) in enumerate(param_names(prefix, spec)):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        bound = math.sqrt(6.0 / fan_in)
        params[wname] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[bname] = np.zeros((1, fan_out))
    return params


@dataclass
class MlpCache:
    prefix: str
    params: dict
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    weights: list[np.ndarray]
    consumed: bool = False


def mlp_forward(spec: MlpSpec, params: dict, x: np.ndarray, prefix: str = "mlp") -> tuple[np.ndarray, MlpCache]:
    """Forward pass over the last axis of ``x``.

    Leading axes broadcast, including against weights that carry an extra
    leading axis (stacked perturbed copies, see :func:`grad_check`).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != spec.widths[0]:
        raise ShapeMismatch(f"{prefix}: expected (*, {spec.widths[0]}), got {x.shape}")
    cache = MlpCache(prefix, params, [], [], [])
    h = x
    last = spec.n_layers - 1
    for k, (wname, bname) in enumerate(param_names(prefix, spec)):
        w = params[wname]
        cache.inputs.append(h)
        cache.weights.append(w)
        z = h @ w + params[bname]
        cache.preacts.append(z)
        h = z if k == last else np.maximum(z, 0.0)
    return h, cache


def mlp_backward(cache: MlpCache, upstream: np.ndarray, grads: dict | None = None) -> tuple[dict, np.ndarray]:
    """Backpropagate ``upstream`` (dL/d output) through a cached 2-D forward pass.

    Parameter gradients are accumulated into ``grads`` (created if None),
    which is how weight sharing between views sums its contributions.
    """
    if cache.consumed:
        raise StaleCache(f"{cache.prefix}: cache already consumed")
    for k, w in enumerate(cache.weights):
        if cache.params.get(f"{cache.prefix}.W{k}") is not w:
            raise StaleCache(f"{cache.prefix}: parameters replaced since forward")
    out = cache.preacts[-1]
    if upstream.shape != out.shape or out.ndim != 2:
        raise ShapeMismatch(f"{cache.prefix}: upstream {upstream.shape} vs output {out.shape}")
    cache.consumed = True
    if grads is None:
        grads = {}
    delta = upstream
    for k in range(len(cache.weights) - 1, -1, -1):
        if k != len(cache.weights) - 1:
            delta = delta * (cache.preacts[k] > 0.0)
        wname, bname = f"{cache.prefix}.W{k}", f"{cache.prefix}.b{k}"
        gw = cache.inputs[k].T @ delta
        gb = delta.sum(axis=0, keepdims=True)
        grads[wname] = grads[wname] + gw if wname in grads else gw
        grads[bname] = grads[bname] + gb if bname in grads else gb
        delta = delta @ cache.weights[k].T
    return grads, delta


# -- optimization ------------------------------------------------------------


@dataclass(frozen=True)
class CyclicLrSchedule:
    """Triangular wave from ``base_lr`` up to a per-cycle decayed peak and back."""

    base_lr: float = 1e-6
    max_lr: float = 1e-3
    steps_per_cycle: int = 100
    decay: float = 0.5

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.steps_per_cycle < 1:
            raise ValueError("steps_per_cycle must be >= 1")

    def peak(self, cycle: int) -> float:
        return self.base_lr + (self.max_lr - self.base_lr) * self.decay**cycle


def cyclic_lr(schedule: CyclicLrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    cycle, offset = divmod(step, schedule.steps_per_cycle)
    x = offset / schedule.steps_per_cycle
    tri = 1.0 - abs(2.0 * x - 1.0)
    return schedule.base_lr + (schedule.peak(cycle) - schedule.base_lr) * tri


@dataclass
class OptimizerState:
    """AdamW moments and step counter. ``weight_decay`` is decoupled."""

    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> None:
    """One AdamW update of ``params`` (entries replaced) and ``state`` (in place)."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        # new arrays rather than in-place updates: caches from earlier forwards go stale
        p = p * (1.0 - lr * state.weight_decay) if state.weight_decay else p
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- gradient checking -------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    fn: Callable[[dict], tuple[float, dict]],
    params: dict,
    h: float = 1e-5,
    names: list[str] | None = None,
    floor: float = 1e-8,
    batched_loss: Callable[[dict], np.ndarray] | None = None,
    chunk: int = 256,
    kink_tol: float | None = None,
    stats: dict | None = None,
) -> float:
    """Worst relative error between ``fn``'s analytic gradient and central differences.

    ``fn(params) -> (loss, grads)``. By default every entry of every named
    parameter is perturbed in place, one at a time, and restored.

    If ``batched_loss`` is given, up to ``chunk`` entries are perturbed at
    once: the parameter is replaced by a ``(K, *shape)`` stack of perturbed
    copies and ``batched_loss`` must return the ``K`` corresponding losses.

    With ``kink_tol``, differences are also taken at ``h / 10``; entries where
    the two disagree by more than ``kink_tol`` (relative) have a ReLU kink
    inside the wider stencil and use the narrower one. ``stats["kinks"]``
    counts them.
    """
    _, grads = fn(params)
    worst = 0.0
    kinks = 0
    for name in names or sorted(params):
        p = params[name]
        analytic = grads.get(name, np.zeros_like(p)).reshape(-1)
        numeric = _numeric_grad(fn, batched_loss, params, name, h, chunk)
        if kink_tol is not None:
            fine = _numeric_grad(fn, batched_loss, params, name, h / 10, chunk)
            kinked = relative_error(numeric, fine, floor) > kink_tol
            numeric = np.where(kinked, fine, numeric)
            kinks += int(kinked.sum())
        err = relative_error(analytic, numeric, floor)
        if err.size:
            worst = max(worst, float(err.max()))
    if stats is not None:
        stats["kinks"] = kinks
    return worst


def _numeric_grad(fn, batched_loss, params, name, h, chunk):
    if batched_loss is None:
        return _numeric_grad_loop(fn, params, name, h)
    return _numeric_grad_batched(batched_loss, params, name, h, chunk)


def _numeric_grad_loop(fn, params, name, h):
    flat = params[name].reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, _ = fn(params)
        flat[i] = orig - h
        fm, _ = fn(params)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    return numeric


def _numeric_grad_batched(batched_loss, params, name, h, chunk):
    p = params[name]
    numeric = np.empty(p.size)
    try:
        for start in range(0, p.size, chunk):
            idx = np.arange(start, min(start + chunk, p.size))
            k = idx.size
            stack = np.broadcast_to(p.reshape(-1), (k, p.size)).copy()
            stack[np.arange(k), idx] += h
            params[name] = stack.reshape((k,) + p.shape)
            fp = np.asarray(batched_loss(params))
            stack[np.arange(k), idx] -= 2.0 * h
            params[name] = stack.reshape((k,) + p.shape)
            fm = np.asarray(batched_loss(params))
            numeric[idx] = (fp - fm) / (2.0 * h)
    finally:
        params[name] = p
    return numeric


# -- checkpoint container ----------------------------------------------------

CHECKPOINT_MAGIC = b"RFCKPT01"


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a deterministic container: magic, JSON header, raw little-endian arrays.

    Byte output depends only on ``meta`` and array contents, so identical
    training runs produce identical files.
    """
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = a.tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a rotfuse checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    return header["meta"], arrays
