"""Adam with classical L2 weight decay, cosine learning-rate schedule, and
EMA parameter averaging.

Parameters live in flat fp64 buffers (see `FlatParamStore`); the update
kernels are numba-compiled single-pass loops so that a step costs one sweep
of memory traffic instead of ten numpy temporaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .autodiff import Param

RNG_ALGORITHM = "philox4x64"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: identical draw sequences across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def rng_metadata(seed: int) -> dict:
    return {"algorithm": RNG_ALGORITHM, "seed": int(seed)}


# ---------------------------------------------------------------------------
# flat parameter storage

class FlatParamStore:
    """All model parameters as views into one contiguous fp64 vector.

    Keeps `Param.data` / `Param.grad` as slices of two flat buffers so the
    optimizer and EMA can run single fused passes.
    """

    def __init__(self):
        self._sizes: list[tuple[str, tuple, int]] = []
        self._pending: list[np.ndarray] = []
        self.values: np.ndarray | None = None
        self.grads: np.ndarray | None = None
        self.params: dict[str, Param] = {}

    def add(self, name: str, init: np.ndarray) -> str:
        if self.values is not None:
            raise RuntimeError("store already finalized")
        if name in {n for n, _, _ in self._sizes}:
            raise ValueError(f"duplicate parameter name: {name}")
        init = np.asarray(init, dtype=np.float64)
        self._sizes.append((name, init.shape, init.size))
        self._pending.append(init.reshape(-1))
        return name

    def finalize(self) -> dict[str, Param]:
        total = sum(s for _, _, s in self._sizes)
        self.values = np.concatenate(self._pending) if total else np.zeros(0)
        self.grads = np.zeros(total)
        self._pending = []
        off = 0
        for name, shape, size in self._sizes:
            p = Param.__new__(Param)
            p.data = self.values[off:off + size].reshape(shape)
            p.grad = self.grads[off:off + size].reshape(shape)
            p.requires_grad = True
            p._parents = ()
            p._vjp = None
            p._g = None
            p.name = name
            self.params[name] = p
            off += size
        return self.params

    def zero_grads(self) -> None:
        self.grads.fill(0.0)

    def copy_values(self) -> np.ndarray:
        return self.values.copy()

    def load_values(self, flat: np.ndarray) -> None:
        if flat.shape != self.values.shape:
            raise ValueError("flat value vector has the wrong size")
        self.values[:] = flat

    def names(self) -> list[str]:
        return [n for n, _, _ in self._sizes]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def zero_grads(params: dict[str, Param]) -> None:
    for p in params.values():
        p.zero_grad()


# ---------------------------------------------------------------------------
# fused kernels

@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2, zero_grads):  # pragma: no cover
    inv_bc1 = 1.0 / bc1
    inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * mi * inv_bc1 / (math.sqrt(vi) * inv_sqrt_bc2 + eps)
        if zero_grads:
            g[i] = 0.0


@njit(cache=True)
def _ema_kernel(t, s, momentum):  # pragma: no cover
    for i in range(t.size):
        t[i] = momentum * t[i] + (1.0 - momentum) * s[i]


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step_flat(values: np.ndarray, grads: np.ndarray, state: AdamState,
                   lr: float = 2e-4, weight_decay: float = 1e-5,
                   zero_grads: bool = False) -> None:
    """One bias-corrected Adam step over flat buffers, in place.

    Weight decay is the classical L2 form, added to the gradient before the
    moment updates. `zero_grads` clears the gradient buffer in the same pass
    (the training loop relies on this instead of a separate memset).
    """
    if values.shape != grads.shape or values.shape != state.m.shape:
        raise ValueError("adam_step_flat: shape mismatch between params, grads and state")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    _adam_kernel(values, grads, state.m, state.v, lr,
                 state.beta1, state.beta2, state.eps, weight_decay, bc1, bc2,
                 zero_grads)


def adam_step(params: dict[str, Param], state: "TreeAdamState",
              lr: float = 2e-4, weight_decay: float = 1e-5) -> None:
    """Adam over a named parameter tree (reference path used in tests and for
    parameters that do not live in a flat store)."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"parameter {name}: grad shape mismatch")
        mv = state.moments.get(name)
        if mv is None:
            mv = (np.zeros_like(p.data), np.zeros_like(p.data))
            state.moments[name] = mv
        m, v = mv
        g = p.grad + weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TreeAdamState:
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# ---------------------------------------------------------------------------
# schedule and EMA

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def ema_update_flat(teacher: np.ndarray, student: np.ndarray, momentum: float) -> None:
    if teacher.shape != student.shape:
        raise ValueError("ema_update_flat: structure mismatch")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    _ema_kernel(teacher, student, momentum)


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, Param] | dict[str, np.ndarray],
               momentum: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise over a tree."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if set(teacher) != set(student):
        raise ValueError("ema_update: teacher/student structure mismatch")
    for name in teacher:
        s = student[name]
        sdata = s.data if isinstance(s, Param) else s
        t = teacher[name]
        if t.shape != sdata.shape:
            raise ValueError(f"ema_update: shape mismatch at {name}")
        t *= momentum
        t += (1.0 - momentum) * sdata
