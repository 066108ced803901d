"""Unrolled common/unique splitting network: forward pass and parameters.

Every bank has shape ``(K, s, s, c)`` with ``c`` the image-side channel count
(``m``, or ``2m`` for the common-feature branch).  Inside an LCSC block the
``D`` bank synthesizes (``adjoint_conv``, codes -> image) and the ``E`` bank
analyzes (``conv_same``, image -> codes)::

    U_{j+1} = S_theta(U_j + E (r - D U_j))

The synthesis banks (``syn_*``) and reconstruction banks (``irm_*``) are
applied with ``adjoint_conv`` as well, so a dictionary produced by the
classical solver plugs in unchanged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .tensor import ContractError, adjoint_conv, conv_same, get_dtype, soft_threshold

MIR = "mir"
MIF = "mif"
TASKS = (MIR, MIF)


class ForwardDivergenceError(RuntimeError):
    pass


@dataclass
class LCSCBlock:
    D: np.ndarray
    E: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        if self.D.shape != self.E.shape:
            raise ContractError(f"D and E shapes differ: {self.D.shape} vs {self.E.shape}")
        if self.theta.shape != (self.D.shape[0],):
            raise ContractError(f"theta must have shape ({self.D.shape[0]},), got {self.theta.shape}")


@dataclass
class ModelConfig:
    task: str = MIR
    K: int = 64
    s: int = 8
    J: int = 4
    m: int = 1
    outer_passes: int = 1
    residual: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("K", "s", "m", "outer_passes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.J < 0:
            raise ContractError("J must be >= 0")


@dataclass
class CUNetParams:
    config: ModelConfig
    ufem_u: List[LCSCBlock]
    ufem_v: List[LCSCBlock]
    cfpm: List[LCSCBlock]
    syn_du: np.ndarray
    syn_hv: np.ndarray
    syn_dc: np.ndarray
    syn_hc: np.ndarray
    irm_gc: np.ndarray
    irm_gu: np.ndarray
    irm_gv: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.irm_gv is not None) != (self.config.task == MIF):
            raise ContractError("irm_gv must be present exactly when task == 'mif'")

    @property
    def task(self) -> str:
        return self.config.task

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """All learnable arrays by canonical name, in a fixed order (by reference)."""
        out: Dict[str, np.ndarray] = {}
        for branch in ("ufem_u", "ufem_v", "cfpm"):
            for j, blk in enumerate(getattr(self, branch)):
                out[f"{branch}.{j}.D"] = blk.D
                out[f"{branch}.{j}.E"] = blk.E
                out[f"{branch}.{j}.theta"] = blk.theta
        for name in ("syn_du", "syn_hv", "syn_dc", "syn_hc", "irm_gc", "irm_gu", "irm_gv"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    def copy(self) -> "CUNetParams":
        return copy.deepcopy(self)

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: Dict[str, np.ndarray]) -> "CUNetParams":
        expected = set(_tensor_names(config))
        if set(tensors) != expected:
            missing = sorted(expected - set(tensors))
            extra = sorted(set(tensors) - expected)
            raise ContractError(f"tensor names do not match config (missing {missing}, extra {extra})")

        def blocks(branch):
            return [
                LCSCBlock(tensors[f"{branch}.{j}.D"], tensors[f"{branch}.{j}.E"], tensors[f"{branch}.{j}.theta"])
                for j in range(config.J)
            ]

        return cls(
            config=config,
            ufem_u=blocks("ufem_u"),
            ufem_v=blocks("ufem_v"),
            cfpm=blocks("cfpm"),
            **{n: tensors.get(n) for n in ("syn_du", "syn_hv", "syn_dc", "syn_hc", "irm_gc", "irm_gu", "irm_gv")},
        )


def _tensor_names(cfg: ModelConfig) -> List[str]:
    names = [f"{b}.{j}.{p}" for b in ("ufem_u", "ufem_v", "cfpm") for j in range(cfg.J) for p in ("D", "E", "theta")]
    names += ["syn_du", "syn_hv", "syn_dc", "syn_hc", "irm_gc", "irm_gu"]
    if cfg.task == MIF:
        names.append("irm_gv")
    return names


def init_params(cfg: ModelConfig, seed: int = 0, theta0: float = 0.01) -> CUNetParams:
    """Uniform fan-in initialization, ``U[-b, b]`` with ``b = 1/sqrt(s*s*fan_in)``.

    Fan-in is the channel count the bank consumes: ``m`` (or ``2m``) for
    analysis banks, ``K`` for synthesis banks.
    """
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    K, s, m = cfg.K, cfg.s, cfg.m

    def bank(c, fan_in):
        b = 1.0 / np.sqrt(s * s * fan_in)
        return rng.uniform(-b, b, size=(K, s, s, c)).astype(dtype)

    def blocks(c):
        out = []
        for _ in range(cfg.J):
            D = bank(c, K)
            E = bank(c, c)
            out.append(LCSCBlock(D, E, np.full(K, theta0, dtype=dtype)))
        return out

    ufem_u = blocks(m)
    ufem_v = blocks(m)
    cfpm = blocks(2 * m)
    return CUNetParams(
        config=cfg,
        ufem_u=ufem_u,
        ufem_v=ufem_v,
        cfpm=cfpm,
        syn_du=bank(m, K),
        syn_hv=bank(m, K),
        syn_dc=bank(m, K),
        syn_hc=bank(m, K),
        irm_gc=bank(m, K),
        irm_gu=bank(m, K),
        irm_gv=bank(m, K) if cfg.task == MIF else None,
    )


def tie_to_ista(bank: np.ndarray, L: float, lam: float, J: int) -> List[LCSCBlock]:
    """Blocks whose forward pass is exactly ``J`` ISTA iterations with step ``1/L``."""
    if L <= 0:
        raise ContractError("L must be positive")
    bank = np.asarray(bank)
    theta = np.full(bank.shape[0], lam / L, dtype=bank.dtype)
    return [LCSCBlock(bank.copy(), bank / L, theta.copy()) for _ in range(J)]


@dataclass
class ChainTrace:
    """Iterates of one LCSC chain: ``codes[j]`` feeds block ``j``, ``codes[-1]`` is the output."""

    residual: np.ndarray
    codes: List[np.ndarray] = field(default_factory=list)
    inner_residuals: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    warm: bool = False


@dataclass
class PassTrace:
    x_hat: np.ndarray
    y_hat: np.ndarray
    u: ChainTrace
    v: ChainTrace
    x_tilde: np.ndarray
    y_tilde: np.ndarray
    c: ChainTrace


@dataclass
class ForwardTrace:
    task: str
    x: np.ndarray
    y: np.ndarray
    passes: List[PassTrace]
    U: np.ndarray
    V: np.ndarray
    C: np.ndarray
    point1: np.ndarray
    point2: np.ndarray
    point3: Optional[np.ndarray]
    point4: np.ndarray


def _chain_forward(residual, blocks: List[LCSCBlock], K: int, init=None, residual_mode=True) -> ChainTrace:
    warm = init is not None
    if warm:
        U = init
    else:
        U = np.zeros(residual.shape[:-1] + (K,), dtype=residual.dtype)
    tr = ChainTrace(residual=residual, warm=warm)
    for j, blk in enumerate(blocks):
        tr.codes.append(U)
        if residual_mode and (warm or j > 0):
            r = residual - adjoint_conv(blk.D, U)
        else:
            # U == 0 at the first cold-start block, so the feedback term vanishes
            r = residual
        a = U + conv_same(blk.E, r)
        if not np.all(np.isfinite(a)):
            raise ForwardDivergenceError(f"non-finite activation in LCSC block {j}")
        tr.inner_residuals.append(r)
        tr.pre.append(a)
        U = soft_threshold(a, blk.theta)
    tr.codes.append(U)
    return tr


def ufem_forward(residual, blocks: List[LCSCBlock], init=None, residual_mode=True, K=None) -> ChainTrace:
    """Unique-feature chain.  Returns the trace; the codes are ``trace.codes[-1]``.

    ``K`` is only needed when ``blocks`` is empty and there is no ``init``.
    """
    if blocks and residual.shape[-1] != blocks[0].D.shape[3]:
        raise ContractError(f"residual has {residual.shape[-1]} channels, blocks expect {blocks[0].D.shape[3]}")
    if blocks:
        K = blocks[0].D.shape[0]
    elif init is not None:
        K = init.shape[-1]
    elif K is None:
        raise ContractError("K is required for an empty chain")
    return _chain_forward(residual, blocks, K, init, residual_mode)


def cfpm_forward(x_tilde, y_tilde, blocks: List[LCSCBlock], init=None, residual_mode=True, K=None) -> ChainTrace:
    """Common-feature chain on the channel concatenation of the two residuals."""
    if x_tilde.shape != y_tilde.shape:
        raise ContractError(f"x_tilde and y_tilde differ: {x_tilde.shape} vs {y_tilde.shape}")
    p = np.concatenate([x_tilde, y_tilde], axis=-1)
    return ufem_forward(p, blocks, init, residual_mode, K)


def irm_reconstruct(C, U, V, params: CUNetParams):
    """Returns ``(point1, point2, point3, z)``; ``point3`` is None for MIR."""
    K = params.config.K
    for name, t in (("C", C), ("U", U)):
        if t.shape[-1] != K:
            raise ContractError(f"{name} has {t.shape[-1]} channels, expected {K}")
    if params.task == MIR and V is not None:
        raise ContractError("MIR reconstruction takes no unique-y codes")
    if params.task == MIF and V is None:
        raise ContractError("MIF reconstruction needs unique-y codes")
    p1 = adjoint_conv(params.irm_gc, C)
    p2 = adjoint_conv(params.irm_gu, U)
    if V is None:
        return p1, p2, None, p1 + p2
    p3 = adjoint_conv(params.irm_gv, V)
    return p1, p2, p3, p1 + p2 + p3


def cunet_forward(x: np.ndarray, y: np.ndarray, params: CUNetParams):
    """Full forward pass.  ``x``, ``y``: ``(H, W, m)`` or ``(B, H, W, m)``.

    Returns ``(z, trace)``.
    """
    cfg = params.config
    if x.shape != y.shape:
        raise ContractError(f"x and y differ in shape: {x.shape} vs {y.shape}")
    if x.shape[-1] != cfg.m:
        raise ContractError(f"inputs have {x.shape[-1]} channels, model expects m={cfg.m}")
    res = cfg.residual
    passes = []
    x_hat, y_hat = x, y
    U = V = C = None
    for p in range(cfg.outer_passes):
        if p > 0:
            x_hat = x - adjoint_conv(params.syn_dc, C)
            y_hat = y - adjoint_conv(params.syn_hc, C)
        tu = ufem_forward(x_hat, params.ufem_u, U, res, cfg.K)
        tv = ufem_forward(y_hat, params.ufem_v, V, res, cfg.K)
        U, V = tu.codes[-1], tv.codes[-1]
        x_tilde = x - adjoint_conv(params.syn_du, U)
        y_tilde = y - adjoint_conv(params.syn_hv, V)
        tc = cfpm_forward(x_tilde, y_tilde, params.cfpm, C, res, cfg.K)
        C = tc.codes[-1]
        passes.append(PassTrace(x_hat, y_hat, tu, tv, x_tilde, y_tilde, tc))
    p1, p2, p3, z = irm_reconstruct(C, U, V if cfg.task == MIF else None, params)
    trace = ForwardTrace(cfg.task, x, y, passes, U, V, C, p1, p2, p3, z)
    return z, trace


def decompose(trace: ForwardTrace) -> Dict[str, np.ndarray]:
    """Named component images of one forward pass (common, unique parts, final)."""
    if trace is None or trace.point4 is None or trace.point1 is None or trace.point2 is None:
        raise ContractError("incomplete trace")
    out = {"common": trace.point1, "unique_x": trace.point2}
    if trace.task == MIF:
        if trace.point3 is None:
            raise ContractError("incomplete trace: MIF trace lacks point3")
        out["unique_y"] = trace.point3
    out["final"] = trace.point4
    return out
