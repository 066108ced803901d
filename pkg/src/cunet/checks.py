"""Self-checks: unrolled network vs. the ISTA solver, and analytic vs. numerical gradients.

Both are meant to run in float64 (see :func:`cunet.tensor.set_precision`).
"""

from __future__ import annotations

from typing import Dict, Iterable, Tuple

import numpy as np

from .model import MIF, MIR, CUNetParams, ModelConfig, cfpm_forward, cunet_forward, init_params, tie_to_ista, ufem_forward
from .oracle import CSCProblem, MCSCProblem, SolverConfig, concat_banks, ista_csc, lipschitz_upper_bound, mcsc_alternating_solve
from .train import cunet_backward, mse_loss


def _bank(rng, K, s, c):
    return rng.standard_normal((K, s, s, c)) / s


def chain_equivalence(J: int, seed: int = 0, K: int = 2, s: int = 3, size: int = 8, lam: float = 0.05) -> float:
    """Max-abs gap between tied UFEM/CFPM chains and ``J`` ISTA iterations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    x = rng.uniform(size=(size, size, 1))
    y = rng.uniform(size=(size, size, 1))
    d = _bank(rng, K, s, 1)
    L = lipschitz_upper_bound(d, shape=(size, size))
    cfg = SolverConfig(inner_iters=J, step_size=1.0 / L, tolerance=0.0)
    U_ref, _ = ista_csc(CSCProblem(x, d, lam), cfg)
    U_net = ufem_forward(x, tie_to_ista(d, L, lam, J)).codes[-1]
    worst = max(worst, float(np.abs(U_ref - U_net).max()))

    # warm start continues the same iteration
    U_ref2, _ = ista_csc(CSCProblem(x, d, lam), cfg, init=U_ref)
    U_net2 = ufem_forward(x, tie_to_ista(d, L, lam, J), init=U_net).codes[-1]
    worst = max(worst, float(np.abs(U_ref2 - U_net2).max()))

    dc, hc = _bank(rng, K, s, 1), _bank(rng, K, s, 1)
    lc = concat_banks(dc, hc)
    Lc = lipschitz_upper_bound(lc, shape=(size, size))
    cfg_c = SolverConfig(inner_iters=J, step_size=1.0 / Lc, tolerance=0.0)
    C_ref, _ = ista_csc(CSCProblem(np.concatenate([x, y], axis=-1), lc, lam), cfg_c)
    C_net = cfpm_forward(x, y, tie_to_ista(lc, Lc, lam, J)).codes[-1]
    return max(worst, float(np.abs(C_ref - C_net).max()))


def tied_params(p: MCSCProblem, J: int, shape) -> CUNetParams:
    """CU-Net parameters (MIR head) that replay one alternating cycle of ``p``."""
    lc = concat_banks(p.d_c, p.h_c)
    Lu = lipschitz_upper_bound(p.d_u, shape=shape)
    Lv = lipschitz_upper_bound(p.h_v, shape=shape)
    Lc = lipschitz_upper_bound(lc, shape=shape)
    K, s = p.d_u.shape[0], p.d_u.shape[1]
    cfg = ModelConfig(task=MIR, K=K, s=s, J=J, m=1, outer_passes=1, residual=True)
    return CUNetParams(
        config=cfg,
        ufem_u=tie_to_ista(p.d_u, Lu, p.lam, J),
        ufem_v=tie_to_ista(p.h_v, Lv, p.lam, J),
        cfpm=tie_to_ista(lc, Lc, p.lam, J),
        syn_du=p.d_u.copy(),
        syn_hv=p.h_v.copy(),
        syn_dc=p.d_c.copy(),
        syn_hc=p.h_c.copy(),
        irm_gc=p.d_c.copy(),
        irm_gu=p.d_u.copy(),
    )


def forward_vs_alternating(J: int, seed: int = 0, K: int = 2, s: int = 3, size: int = 8, lam: float = 0.05) -> float:
    """Max-abs gap between a tied forward pass and one cycle of the alternating solver."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(size, size, 1))
    y = rng.uniform(size=(size, size, 1))
    p = MCSCProblem(x, y, _bank(rng, K, s, 1), _bank(rng, K, s, 1), _bank(rng, K, s, 1), _bank(rng, K, s, 1), lam)
    C, U, V, _ = mcsc_alternating_solve(p, SolverConfig(inner_iters=J, outer_iters=1, tolerance=0.0))
    _, tr = cunet_forward(x, y, tied_params(p, J, (size, size)))
    return float(max(np.abs(tr.C - C).max(), np.abs(tr.U - U).max(), np.abs(tr.V - V).max()))


def _kink_distance(trace, params: CUNetParams) -> float:
    """Smallest ``| |a| - theta |`` over all soft-threshold inputs of a forward pass."""
    chains = [("ufem_u", "u"), ("ufem_v", "v"), ("cfpm", "c")]
    best = np.inf
    for pt in trace.passes:
        for branch, attr in chains:
            tr = getattr(pt, attr)
            for j, a in enumerate(tr.pre):
                theta = getattr(params, branch)[j].theta
                best = min(best, float(np.abs(np.abs(a) - theta).min()))
    return best


def gradient_check(
    task: str = MIR,
    seed: int = 0,
    K: int = 2,
    s: int = 3,
    J: int = 2,
    outer_passes: int = 1,
    residual: bool = True,
    eps: float = 1e-6,
    kink_margin: float = 1e-3,
    size: int = 6,
    max_reseeds: int = 500,
) -> Tuple[Dict[str, float], int]:
    """Relative error of the analytic gradient along a random direction, per tensor.

    Problems whose forward pass lands within ``kink_margin`` of a
    soft-threshold kink are re-drawn with the next seed; the default problem
    is kept small so that such a draw is found quickly.  Returns the error
    table and the seed that was finally used.
    """
    cfg = ModelConfig(task=task, K=K, s=s, J=J, m=1, outer_passes=outer_passes, residual=residual)
    for attempt in range(max_reseeds):
        sd = seed + attempt
        params = init_params(cfg, seed=sd, theta0=0.05)
        params = CUNetParams.from_named(cfg, {k: v.astype(np.float64) for k, v in params.named_tensors().items()})
        rng = np.random.default_rng(sd)
        x, y, t = (rng.uniform(size=(1, size, size, 1)) for _ in range(3))
        z, tr = cunet_forward(x, y, params)
        if _kink_distance(tr, params) > kink_margin:
            break
    else:
        raise RuntimeError("could not find a problem away from soft-threshold kinks")
    _, dz = mse_loss(z, t)
    grads = cunet_backward(tr, params, dz)
    errors = {}
    for name, arr in params.named_tensors().items():
        d = rng.standard_normal(arr.shape)
        arr += eps * d
        lp = mse_loss(cunet_forward(x, y, params)[0], t)[0]
        arr -= 2 * eps * d
        lm = mse_loss(cunet_forward(x, y, params)[0], t)[0]
        arr += eps * d
        fd = (lp - lm) / (2 * eps)
        an = float(np.vdot(grads[name], d))
        errors[name] = abs(an - fd) / max(abs(fd), 1e-8)
    return errors, sd


def oracle_check(seed: int = 0, Js: Iterable[int] = (1, 3, 6)) -> Dict[str, float]:
    """Everything ``oracle-check`` reports: worst equivalence residual and worst gradient error."""
    eq = max(max(chain_equivalence(J, seed), forward_vs_alternating(J, seed)) for J in Js)
    grad = 0.0
    for task in (MIR, MIF):
        errs, _ = gradient_check(task, seed)
        grad = max(grad, max(errs.values()))
    return {"max_equivalence_residual": eq, "max_gradient_rel_error": grad}
