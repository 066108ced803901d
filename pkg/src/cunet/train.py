"""Reverse-mode gradients through a recorded forward pass, Adam, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .metrics import psnr
from .model import MIF, ChainTrace, CUNetParams, ForwardTrace, LCSCBlock, cunet_forward
from .tensor import ContractError, adjoint_conv, conv_filter_grad, conv_same

log = logging.getLogger(__name__)

Gradients = Dict[str, np.ndarray]


class TrainingError(RuntimeError):
    pass


class TrainingDivergence(TrainingError):
    """Loss went non-finite.  ``params`` holds the last finite-loss parameters."""

    def __init__(self, msg: str, params: CUNetParams, history: list):
        super().__init__(msg)
        self.params = params
        self.history = history


def mse_loss(z: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. ``z``."""
    z = np.asarray(z)
    target = np.asarray(target)
    if z.shape != target.shape:
        raise ContractError(f"mse_loss: shape mismatch {z.shape} vs {target.shape}")
    diff = z - target
    n = diff.size
    return float(np.vdot(diff, diff)) / n, diff * (2.0 / n)


def _chain_backward(tr: ChainTrace, blocks: List[LCSCBlock], g_out, grads: Gradients, prefix: str, residual_mode: bool):
    """Backprop through one LCSC chain.

    Accumulates bank/threshold gradients into ``grads`` and returns
    ``(grad wrt chain input residual, grad wrt initial codes)``.
    """
    g_res = np.zeros_like(tr.residual)
    gU = g_out
    for j in reversed(range(len(blocks))):
        blk = blocks[j]
        s = blk.D.shape[1]
        # S_theta passes gradient where |a| > theta, i.e. exactly where its output is nonzero
        out = tr.codes[j + 1]
        ga = gU * (out != 0)
        K = out.shape[-1]
        grads[f"{prefix}.{j}.theta"] -= np.einsum("ik,ik->k", np.sign(out).reshape(-1, K), gU.reshape(-1, K))
        grads[f"{prefix}.{j}.E"] += conv_filter_grad(tr.inner_residuals[j], ga, s)
        gr = adjoint_conv(blk.E, ga)
        g_res += gr
        gU_prev = ga
        if residual_mode and (tr.warm or j > 0):
            Uj = tr.codes[j]
            grads[f"{prefix}.{j}.D"] -= conv_filter_grad(gr, Uj, s)
            gU_prev = ga - conv_same(blk.D, gr)
        gU = gU_prev
    return g_res, gU


def cunet_backward(trace: ForwardTrace, params: CUNetParams, dz: np.ndarray) -> Gradients:
    """Gradients of a scalar loss w.r.t. every learnable tensor, keyed like ``named_tensors``."""
    cfg = params.config
    if trace.task != cfg.task or len(trace.passes) != cfg.outer_passes:
        raise ContractError("trace was not produced by these parameters")
    if dz.shape != trace.point4.shape:
        raise ContractError(f"gradient shape {dz.shape} does not match output {trace.point4.shape}")
    named = params.named_tensors()
    grads = {k: np.zeros_like(v) for k, v in named.items()}
    s, m = cfg.s, cfg.m
    res = cfg.residual

    grads["irm_gc"] += conv_filter_grad(dz, trace.C, s)
    grads["irm_gu"] += conv_filter_grad(dz, trace.U, s)
    gC = conv_same(params.irm_gc, dz)
    gU = conv_same(params.irm_gu, dz)
    if cfg.task == MIF:
        grads["irm_gv"] += conv_filter_grad(dz, trace.V, s)
        gV = conv_same(params.irm_gv, dz)
    else:
        gV = np.zeros_like(trace.V)

    for p in reversed(range(len(trace.passes))):
        pt = trace.passes[p]
        g_p, gC = _chain_backward(pt.c, params.cfpm, gC, grads, "cfpm", res)
        # x_tilde = x - syn_du U ; y_tilde = y - syn_hv V
        g_xt = -g_p[..., :m]
        g_yt = -g_p[..., m:]
        grads["syn_du"] += conv_filter_grad(g_xt, pt.u.codes[-1], s)
        grads["syn_hv"] += conv_filter_grad(g_yt, pt.v.codes[-1], s)
        gU = gU + conv_same(params.syn_du, g_xt)
        gV = gV + conv_same(params.syn_hv, g_yt)
        g_xhat, gU = _chain_backward(pt.u, params.ufem_u, gU, grads, "ufem_u", res)
        g_yhat, gV = _chain_backward(pt.v, params.ufem_v, gV, grads, "ufem_v", res)
        if p > 0:
            # x_hat = x - syn_dc C_prev ; y_hat = y - syn_hc C_prev
            C_prev = trace.passes[p - 1].c.codes[-1]
            grads["syn_dc"] -= conv_filter_grad(g_xhat, C_prev, s)
            grads["syn_hc"] -= conv_filter_grad(g_yhat, C_prev, s)
            gC = gC - conv_same(params.syn_dc, g_xhat) - conv_same(params.syn_hc, g_yhat)
    return grads


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: CUNetParams, grads: Gradients, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place; thresholds are clamped to >= 0 afterwards."""
    named = params.named_tensors()
    if set(grads) != set(named):
        raise ContractError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != named[name].shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {named[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter group {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in named.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if name.endswith(".theta"):
            np.maximum(p, 0, out=p)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.9
    decay_every: int = 50
    batch_size: int = 64
    epochs: int = 200
    patch: int = 64
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.decay <= 0 or self.decay_every < 1 or self.batch_size < 1:
            raise ContractError("training hyperparameters must be positive")
        if self.epochs < 0 or self.patch < 1:
            raise ContractError("epochs must be >= 0 and patch >= 1")
        if self.loss != "mse":
            raise ContractError(f"unsupported loss {self.loss!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule ``lr0 * decay ** (epoch // decay_every)``, exact in decimal."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    k = epoch // cfg.decay_every
    return float(Fraction(repr(cfg.lr0)) * Fraction(repr(cfg.decay)) ** k)


def stack_pairs(pairs: Sequence) -> tuple:
    """``(X, Y, Z)`` batch arrays from a sequence of :class:`~cunet.data.SamplePair`."""
    X = np.stack([p.x for p in pairs])
    Y = np.stack([p.y for p in pairs])
    Z = np.stack([p.z for p in pairs])
    return X, Y, Z


def predict(params: CUNetParams, X: np.ndarray, Y: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [cunet_forward(X[i : i + batch_size], Y[i : i + batch_size], params)[0] for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros_like(X)


def mean_psnr(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean([psnr(a, b) for a, b in zip(pred, target)]))


def train(
    cfg: TrainConfig,
    dataset,
    params: CUNetParams,
    val=None,
    state: Optional[AdamState] = None,
    on_epoch: Optional[Callable[[dict, CUNetParams, AdamState], None]] = None,
):
    """Mini-batch Adam on the MSE loss.

    ``dataset`` and ``val`` are sequences of sample pairs (or ``(X, Y, Z)``
    array triples).  Returns ``(params, history)``; ``history`` has one dict
    per epoch with ``epoch, lr, train_loss, val_psnr``.  The input
    ``params`` are not modified.
    """
    X, Y, Z = dataset if isinstance(dataset, tuple) else stack_pairs(dataset)
    if len(X) == 0:
        raise ContractError("empty training set")
    dtype = params.irm_gc.dtype
    X, Y, Z = (a.astype(dtype, copy=False) for a in (X, Y, Z))
    if val is not None and not isinstance(val, tuple):
        val = stack_pairs(val)
    params = params.copy()
    state = state if state is not None else AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: list = []
    good = params.copy()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            z, trace = cunet_forward(X[idx], Y[idx], params)
            loss, dz = mse_loss(z, Z[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", good, history)
            grads = cunet_backward(trace, params, dz)
            adam_step(params, grads, state, lr)
            total += loss * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_psnr": float("nan")}
        if val is not None:
            row["val_psnr"] = mean_psnr(predict(params, val[0].astype(dtype), val[1].astype(dtype)), val[2])
        history.append(row)
        good = params.copy()
        log.info("epoch %d lr %.3g loss %.6g val_psnr %.3f", epoch, lr, row["train_loss"], row["val_psnr"])
        if on_epoch is not None:
            on_epoch(row, params, state)
    return params, history
