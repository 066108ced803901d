import numpy as np
import pytest

from cunet.tensor import set_precision


@pytest.fixture(autouse=True)
def f64():
    set_precision("f64")
    yield
    set_precision("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loop_conv(bank, t):
    """Four nested loops over (k, y, x, taps); zero padding, anchor (s-1)//2."""
    K, s, _, C = bank.shape
    a = (s - 1) // 2
    H, W, _ = t.shape
    out = np.zeros((H, W, K))
    for k in range(K):
        for y in range(H):
            for x in range(W):
                acc = 0.0
                for i in range(s):
                    for j in range(s):
                        yy, xx = y + i - a, x + j - a
                        if 0 <= yy < H and 0 <= xx < W:
                            acc += bank[k, i, j, :] @ t[yy, xx, :]
                out[y, x, k] = acc
    return out


def analysis_matrix(bank, H, W):
    """Dense matrix of the correlation ``(H*W*C) -> (H*W*K)``, built from indices alone."""
    K, s, _, C = bank.shape
    a = (s - 1) // 2
    A = np.zeros((H * W * K, H * W * C))
    for y in range(H):
        for x in range(W):
            for k in range(K):
                row = (y * W + x) * K + k
                for i in range(s):
                    for j in range(s):
                        yy, xx = y + i - a, x + j - a
                        if 0 <= yy < H and 0 <= xx < W:
                            col = (yy * W + xx) * C
                            A[row, col : col + C] += bank[k, i, j, :]
    return A


def synthesis_matrix(bank, H, W):
    """Dense dictionary: codes ``(H*W*K)`` -> image ``(H*W*C)``."""
    return analysis_matrix(bank, H, W).T


def soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def fista_lasso(S, x, lam, iters):
    """Accelerated proximal gradient on ``1/2 ||x - S u||^2 + lam ||u||_1``; returns the best objective."""
    L = np.linalg.eigvalsh(S.T @ S).max()
    u = np.zeros(S.shape[1])
    w = u.copy()
    tk = 1.0
    best = np.inf
    for _ in range(iters):
        u_next = soft(w - S.T @ (S @ w - x) / L, lam / L)
        t_next = (1 + np.sqrt(1 + 4 * tk * tk)) / 2
        w = u_next + (tk - 1) / t_next * (u_next - u)
        u, tk = u_next, t_next
        r = x - S @ u
        best = min(best, 0.5 * r @ r + lam * np.abs(u).sum())
    return best
