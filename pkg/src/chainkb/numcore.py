"""Dense float64 primitives, Adam, a finite-difference gradient checker and
seeded RNG streams.

Everything here works on plain ``numpy.ndarray`` objects of dtype float64.
Parameter collections are ``dict[str, np.ndarray]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64

# coordinates whose base pre-activation sits this close to a ReLU kink are skipped
KINK_EPS = 1e-7


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M @ v`` accumulated column by column in ascending index order.

    Each output element is ``((M[i,0]*v[0] + M[i,1]*v[1]) + ...)``, which is
    what a scalar double loop produces, so results compare bit-exactly.
    """
    M = np.asarray(M, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: matrix {M.shape} incompatible with vector {v.shape}")
    out = np.zeros(M.shape[0], dtype=DTYPE)
    for j in range(M.shape[1]):
        out += M[:, j] * v[j]
    return out


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=DTYPE), 0.0)


def relu_grad(v: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return (np.asarray(v, dtype=DTYPE) > 0.0).astype(DTYPE)


# closest doubles to 0 and 1 from inside the open interval
_SIG_LO = float(np.nextafter(0.0, 1.0))
_SIG_HI = float(np.nextafter(1.0, 0.0))


def sigmoid(x):
    """Logistic function in the overflow-free two-branch form.

    Accepts a Python float or an array; returns the same kind. Results are
    clamped to ``[5e-324, 1 - 2**-53]`` so the output stays strictly inside
    (0, 1) even where the exact value is not representable.
    """
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            y = 1.0 / (1.0 + math.exp(-x))
        else:
            z = math.exp(x)
            y = z / (1.0 + z)
        return min(max(y, _SIG_LO), _SIG_HI)
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid_grad_from_output(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    Only names present in ``grads`` are touched. Returns ``(params, state)``
    for convenience.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape} != parameter shape {p.shape} for {name!r}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    failures: list[tuple[str, tuple[int, ...], float, float, float]]
    rel_tol: float

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        return (
            f"checked={self.n_checked} skipped={self.n_skipped} "
            f"max_rel_err={self.max_rel_error:.3e} failing={len(self.failures)}"
        )


def check_gradients(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic_grads: Mapping[str, np.ndarray],
    rel_tol: float = 1e-4,
    step: float = 1e-5,
    abs_floor: float = 1e-5,
    kink_fn: Callable[[dict[str, np.ndarray]], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``kink_fn`` returns the pre-activations (or any array whose sign pattern
    marks a non-differentiable region) for the current params; a coordinate is
    skipped when the base point lies within ``KINK_EPS`` of a kink or when the
    sign pattern differs between the two probe points. Parameters missing
    from ``analytic_grads`` are treated as having zero gradient.
    """
    base = loss_fn(params)
    if not math.isfinite(base):
        raise NonFiniteError("loss is not finite at the base point")
    base_sig = None
    if kink_fn is not None:
        z = np.asarray(kink_fn(params))
        base_sig = z > 0
        base_close = np.abs(z) < KINK_EPS

    failures = []
    max_err = 0.0
    n_checked = n_skipped = 0
    for name in sorted(params):
        p = params[name]
        a = analytic_grads.get(name)
        if a is None:
            a = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp = loss_fn(params)
            sig_p = None if kink_fn is None else np.asarray(kink_fn(params)) > 0
            p[idx] = orig - step
            lm = loss_fn(params)
            sig_m = None if kink_fn is None else np.asarray(kink_fn(params)) > 0
            p[idx] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NonFiniteError(f"loss not finite while probing {name}{idx}")
            if kink_fn is not None:
                straddles = sig_p.shape != sig_m.shape or np.any(sig_p != sig_m)
                if straddles or (np.any(base_close) and np.any(sig_p != base_sig)):
                    n_skipped += 1
                    continue
            numeric = (lp - lm) / (2.0 * step)
            ana = float(a[idx])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), abs_floor)
            n_checked += 1
            max_err = max(max_err, err)
            if err >= rel_tol:
                failures.append((name, idx, ana, numeric, err))
    return GradCheckReport(max_err, n_checked, n_skipped, failures, rel_tol)


# --------------------------------------------------------------------------
# RNG streams


def _key_words(key) -> list[int]:
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Keys are hashed with blake2b (stable across processes, unlike ``hash``),
    so the stream for one item does not depend on how many other items were
    drawn before it.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for k in keys:
        words.extend(_key_words(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    a = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape).astype(DTYPE)
