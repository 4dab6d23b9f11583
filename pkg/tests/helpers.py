"""Shared test utilities: finite-difference oracle and tiny model builders."""

import sys

import numpy as np

from epinmt import model as M
from epinmt import tensor as T

FD_STEP = 1e-4
FD_TOL = 1e-4

# one line per acceptance criterion, replayed in the pytest terminal summary
ACCEPTANCE_RESULTS: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[criterion {number:02d}] {status} {name}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_RESULTS.append(line)
    print(line, file=sys.stderr, flush=True)


def finite_diff(loss_fn, param: T.Tensor, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every entry of param.

    Independent of the reverse pass: only calls loss_fn and perturbs data.
    """
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        lp = loss_fn()
        flat[i] = old - step
        lm = loss_fn()
        flat[i] = old
        gflat[i] = (lp - lm) / (2.0 * step)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grad(loss_fn, params: list[T.Tensor], tol: float = FD_TOL) -> float:
    """Backward pass vs finite differences; returns the worst relative error."""
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        fd = finite_diff(lambda: loss_fn().item(), p)
        worst = max(worst, max_rel_err(p.grad, fd))
    assert worst < tol, f"gradient mismatch: rel err {worst}"
    return worst


def tiny_config(vocab_size=12, **kw) -> M.ModelConfig:
    defaults = dict(d_model=16, n_layers=1, n_heads=2, d_ff=24, max_len=16,
                    vocab_size=vocab_size)
    defaults.update(kw)
    return M.ModelConfig(**defaults)


def tiny_model(seed=0, **kw) -> M.EncoderDecoderModel:
    return M.init_model(tiny_config(**kw), np.random.default_rng(seed))


def random_pair(rng, cfg, lo=4, n=None):
    n = n or int(rng.integers(3, 7))
    src = [int(x) for x in rng.integers(lo, cfg.vocab_size, size=n)]
    tgt = [int(x) for x in rng.integers(lo, cfg.vocab_size, size=n)]
    return src, tgt
