"""Classical convolutional sparse coding solvers.

Single-dictionary ISTA and the three-step alternating solver for the
two-modality (common/unique) model.  These are slow but exact, and the
unrolled network is checked against them.

A dictionary is a bank of shape ``(K, s, s, m)``; the signal model is
``x ~ adjoint_conv(bank, U)`` with ``U`` of shape ``(H, W, K)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import ContractError, adjoint_conv, conv_same, soft_threshold

__all__ = [
    "DivergenceError",
    "CSCProblem",
    "MCSCProblem",
    "SolverConfig",
    "lipschitz_upper_bound",
    "csc_objective",
    "ista_csc",
    "mcsc_objective",
    "mcsc_alternating_solve",
    "concat_banks",
]

LIPSCHITZ_FLOOR = 1e-12
SAFETY = 1.01


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, what: str = "objective"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class CSCProblem:
    x: np.ndarray
    bank: np.ndarray
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be nonnegative")
        if self.x.shape[-1] != self.bank.shape[3]:
            raise ContractError(
                f"signal has {self.x.shape[-1]} channels, dictionary atoms have {self.bank.shape[3]}"
            )


@dataclass
class MCSCProblem:
    """Two signals sharing common codes ``C``: ``x ~ d_c C + d_u U``, ``y ~ h_c C + h_v V``."""

    x: np.ndarray
    y: np.ndarray
    d_c: np.ndarray
    d_u: np.ndarray
    h_c: np.ndarray
    h_v: np.ndarray
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be nonnegative")
        if self.x.shape[:-1] != self.y.shape[:-1]:
            raise ContractError(f"x and y differ in spatial size: {self.x.shape} vs {self.y.shape}")
        shapes = {b.shape[:3] for b in (self.d_c, self.d_u, self.h_c, self.h_v)}
        if len(shapes) != 1:
            raise ContractError(f"all four dictionaries must share K and s, got {shapes}")
        if self.d_c.shape != self.d_u.shape or self.d_c.shape[3] != self.x.shape[-1]:
            raise ContractError("x dictionaries do not match x's channel count")
        if self.h_c.shape != self.h_v.shape or self.h_c.shape[3] != self.y.shape[-1]:
            raise ContractError("y dictionaries do not match y's channel count")

    @property
    def K(self) -> int:
        return self.d_c.shape[0]


@dataclass
class SolverConfig:
    inner_iters: int = 50
    outer_iters: int = 10
    step_size: Union[float, str] = "auto"
    tolerance: float = 1e-8
    power_iters: int = 100

    def __post_init__(self):
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ContractError("iteration counts must be >= 1")
        if self.step_size != "auto" and not float(self.step_size) > 0:
            raise ContractError("explicit step size must be positive")


def concat_banks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two dictionaries' atoms along the channel axis (``m`` + ``m`` channels)."""
    return np.concatenate([a, b], axis=3)


def lipschitz_upper_bound(bank, iters: int = 100, seed: int = 0, shape=(64, 64)) -> float:
    """Largest eigenvalue of the Gram operator of ``bank`` on an ``shape`` domain.

    Power iteration on ``U -> adjoint_conv(bank, conv_same(bank, U))``, times a
    1.01 safety factor.  Power iteration approaches the top eigenvalue from
    below, hence the margin.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    bank = np.asarray(bank)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(tuple(shape) + (bank.shape[3],)).astype(bank.dtype)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = adjoint_conv(bank, conv_same(bank, v))
        est = float(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0:
            return LIPSCHITZ_FLOOR
        v = w / norm
    return max(est * SAFETY, LIPSCHITZ_FLOOR)


def csc_objective(p: CSCProblem, U: np.ndarray) -> float:
    if U.shape[-1] != p.bank.shape[0]:
        raise ContractError(f"codes have {U.shape[-1]} channels, dictionary has {p.bank.shape[0]} atoms")
    r = p.x - adjoint_conv(p.bank, U)
    return 0.5 * float(np.vdot(r, r)) + p.lam * float(np.abs(U).sum())


def _step(cfg: SolverConfig, bank: np.ndarray, shape) -> float:
    if cfg.step_size == "auto":
        return 1.0 / lipschitz_upper_bound(bank, iters=cfg.power_iters, shape=shape)
    return float(cfg.step_size)


def _rel_change(prev: float, cur: float) -> float:
    if prev == cur:
        return 0.0
    return abs(prev - cur) / max(abs(prev), 1e-300)


def ista_csc(p: CSCProblem, cfg: SolverConfig, init: Optional[np.ndarray] = None):
    """ISTA for ``1/2 ||x - D U||^2 + lam ||U||_1``.

    Returns ``(U, trace)`` where ``trace[i]`` is the objective after iteration
    ``i + 1``.  ``init`` warm-starts the codes (zeros by default).
    """
    step = _step(cfg, p.bank, p.x.shape[:2])
    thresh = p.lam * step
    K = p.bank.shape[0]
    if init is None:
        U = np.zeros(p.x.shape[:-1] + (K,), dtype=np.result_type(p.x, p.bank))
    else:
        U = np.array(init, copy=True)
    prev = csc_objective(p, U)
    trace = []
    for it in range(cfg.inner_iters):
        res = p.x - adjoint_conv(p.bank, U)
        U = soft_threshold(U + step * conv_same(p.bank, res), thresh)
        obj = csc_objective(p, U)
        if not np.isfinite(obj):
            raise DivergenceError(it + 1)
        trace.append(obj)
        if cfg.tolerance and _rel_change(prev, obj) < cfg.tolerance:
            break
        prev = obj
    return U, trace


def mcsc_objective(p: MCSCProblem, C, U, V) -> float:
    for name, t in (("C", C), ("U", U), ("V", V)):
        if t.shape[-1] != p.K:
            raise ContractError(f"{name} has {t.shape[-1]} channels, expected {p.K}")
    rx = p.x - adjoint_conv(p.d_c, C) - adjoint_conv(p.d_u, U)
    ry = p.y - adjoint_conv(p.h_c, C) - adjoint_conv(p.h_v, V)
    l1 = float(np.abs(C).sum() + np.abs(U).sum() + np.abs(V).sum())
    return 0.5 * float(np.vdot(rx, rx)) + 0.5 * float(np.vdot(ry, ry)) + p.lam * l1


def mcsc_alternating_solve(p: MCSCProblem, cfg: SolverConfig):
    """Block-coordinate solve: update U, then V, then C; repeat ``outer_iters`` times.

    Each block update is ``inner_iters`` ISTA steps warm-started from the
    current codes.  The returned trace holds the objective at the start and
    after every block update.
    """
    K = p.K
    dtype = np.result_type(p.x, p.y, p.d_c)
    C = np.zeros(p.x.shape[:-1] + (K,), dtype=dtype)
    U = np.zeros_like(C)
    V = np.zeros_like(C)
    l_c = concat_banks(p.d_c, p.h_c)
    # one inner budget, no early exit inside a block: the outer loop owns stopping
    inner = SolverConfig(
        inner_iters=cfg.inner_iters,
        step_size=cfg.step_size,
        tolerance=0.0,
        power_iters=cfg.power_iters,
    )
    trace = [mcsc_objective(p, C, U, V)]
    for _ in range(cfg.outer_iters):
        x_hat = p.x - adjoint_conv(p.d_c, C)
        U, _ = ista_csc(CSCProblem(x_hat, p.d_u, p.lam), inner, init=U)
        trace.append(mcsc_objective(p, C, U, V))

        y_hat = p.y - adjoint_conv(p.h_c, C)
        V, _ = ista_csc(CSCProblem(y_hat, p.h_v, p.lam), inner, init=V)
        trace.append(mcsc_objective(p, C, U, V))

        x_tilde = p.x - adjoint_conv(p.d_u, U)
        y_tilde = p.y - adjoint_conv(p.h_v, V)
        stacked = np.concatenate([x_tilde, y_tilde], axis=-1)
        C, _ = ista_csc(CSCProblem(stacked, l_c, p.lam), inner, init=C)
        obj = mcsc_objective(p, C, U, V)
        if not np.isfinite(obj):
            raise DivergenceError(len(trace))
        trace.append(obj)
        if cfg.tolerance and _rel_change(trace[-4], obj) < cfg.tolerance:
            break
    return C, U, V, trace
