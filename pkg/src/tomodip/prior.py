"""Smoothed l1/l2 sparsity prior on inter-slice differences and its MM surrogate.

With ``g = D z`` the forward difference along the slice axis, the prior is

    G(z) = gamma * sum_i sqrt(g_i^2 + delta) / (||g||_2 + eps)

Around an anchor ``z0`` the numerator is majorized by the tangent quadratic

    N~(z | z0) = 1/2 sum_i W_i g_i^2 + C,   W_i = 1 / sqrt(g0_i^2 + delta)

and the denominator is frozen at ``M = ||D z0||_2 + eps``, giving the
surrogate ``S(z | z0) = gamma / M * N~(z | z0)``.  Fixing ``M = 1`` instead
yields the smoothed total-variation surrogate.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PriorConfig",
    "SurrogateState",
    "AnchorMismatch",
    "DIFF_OPERATOR_NORM_BOUND",
    "z_gradient",
    "z_gradient_adjoint",
    "smoothed_numerator",
    "eval_fractional",
    "build_surrogate",
    "eval_surrogate",
    "surrogate_gradient",
    "surrogate_gradient_at_anchor",
    "lipschitz_bound",
]

# ||D^T D||_2 <= 4 for the 1-D forward difference.
DIFF_OPERATOR_NORM_BOUND = 4.0


class AnchorMismatch(ValueError):
    """A surrogate was evaluated against a volume of the wrong shape or anchor."""


@dataclass(frozen=True)
class PriorConfig:
    gamma: float = 0.01
    epsilon: float = 1e-6
    delta: float = 1e-6
    axis: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.epsilon <= 0 or self.delta <= 0:
            raise ValueError("epsilon and delta must be positive")


def _digest(z: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class SurrogateState:
    weights: np.ndarray
    m_scalar: float
    c_const: float
    anchor_hash: str
    shape: tuple[int, ...]
    axis: int = 0


def z_gradient(volume: np.ndarray, axis: int = 0) -> np.ndarray:
    """Forward differences ``z[s+1] - z[s]`` along ``axis`` (one fewer entry)."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.shape[axis] < 2:
        raise ValueError("need at least two slices along the difference axis")
    return np.diff(volume, axis=axis)


def z_gradient_adjoint(g: np.ndarray, axis: int = 0) -> np.ndarray:
    """Transpose of :func:`z_gradient`: ``-g_0, g_{s-1} - g_s, ..., g_{S-2}``."""
    g = np.asarray(g, dtype=np.float64)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (1, 1)
    return -np.diff(np.pad(g, pad), axis=axis)


def smoothed_numerator(volume: np.ndarray, delta: float, axis: int = 0) -> float:
    g = z_gradient(volume, axis)
    return float(np.sqrt(g * g + delta).sum())


def eval_fractional(volume: np.ndarray, cfg: PriorConfig) -> float:
    if cfg.gamma == 0:
        return 0.0
    g = z_gradient(volume, cfg.axis)
    num = np.sqrt(g * g + cfg.delta).sum()
    return float(cfg.gamma * num / (np.linalg.norm(g) + cfg.epsilon))


def build_surrogate(z_prev: np.ndarray, cfg: PriorConfig,
                    fixed_denominator: float | None = None) -> SurrogateState:
    """Reweighting, frozen denominator and tangency constant at ``z_prev``.

    ``fixed_denominator`` replaces ``||D z_prev|| + eps`` (``1.0`` gives the
    smoothed-TV variant).
    """
    z_prev = np.asarray(z_prev, dtype=np.float64)
    g = z_gradient(z_prev, cfg.axis)
    root = np.sqrt(g * g + cfg.delta)
    weights = 1.0 / root
    c_const = float(np.sum(root - 0.5 * g * g / root))
    m = float(np.linalg.norm(g) + cfg.epsilon) if fixed_denominator is None else float(fixed_denominator)
    if m <= 0:
        raise ValueError("surrogate denominator must be positive")
    return SurrogateState(weights, m, c_const, _digest(z_prev), z_prev.shape, cfg.axis)


def _check(z: np.ndarray, state: SurrogateState) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != state.shape:
        raise AnchorMismatch(f"volume shape {z.shape} does not match surrogate {state.shape}")
    return z


def eval_surrogate(z: np.ndarray, state: SurrogateState, cfg: PriorConfig) -> float:
    """``gamma / M * (1/2 sum W (Dz)^2 + C)``."""
    z = _check(z, state)
    g = z_gradient(z, state.axis)
    quad = 0.5 * float(np.sum(state.weights * g * g))
    return cfg.gamma / state.m_scalar * (quad + state.c_const)


def surrogate_gradient(z: np.ndarray, state: SurrogateState, cfg: PriorConfig) -> np.ndarray:
    """``gamma / M * D^T (W * D z)``."""
    z = _check(z, state)
    g = z_gradient(z, state.axis)
    return (cfg.gamma / state.m_scalar) * z_gradient_adjoint(state.weights * g, state.axis)


def surrogate_gradient_at_anchor(z_prev: np.ndarray, state: SurrogateState,
                                 cfg: PriorConfig) -> np.ndarray:
    """Same as :func:`surrogate_gradient` but refuses a non-anchor volume."""
    if _digest(np.asarray(z_prev, dtype=np.float64)) != state.anchor_hash:
        raise AnchorMismatch("surrogate was built at a different anchor volume")
    return surrogate_gradient(z_prev, state, cfg)


def lipschitz_bound(state: SurrogateState, cfg: PriorConfig) -> float:
    """Upper bound ``gamma / M * max(W) * ||D^T D||`` on the surrogate Hessian norm."""
    if cfg.gamma == 0:
        return 0.0
    return cfg.gamma / state.m_scalar * float(state.weights.max()) * DIFF_OPERATOR_NORM_BOUND
