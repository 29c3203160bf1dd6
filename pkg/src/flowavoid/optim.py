"""Adaptive-moment first-order optimizer over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    nonfinite: int = 0

    @classmethod
    def for_params(cls, n: int, lr: float = 1e-3, **kw) -> OptimizerState:
        return cls(np.zeros(n, dtype=np.float32), np.zeros(n, dtype=np.float32), lr=lr, **kw)

    def arrays(self) -> np.ndarray:
        return np.concatenate([self.m, self.v]).astype(np.float32)

    def load_arrays(self, arr: np.ndarray) -> None:
        n = self.m.size
        self.m = np.asarray(arr[:n], dtype=np.float32).copy()
        self.v = np.asarray(arr[n:], dtype=np.float32).copy()

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("step", "lr", "beta1", "beta2", "eps", "nonfinite")}


def adam_step(params: np.ndarray, grads: np.ndarray, opt: OptimizerState):
    """Bias-corrected adaptive-moment update.

    Returns ``(new_params, opt)``.  Non-finite gradients leave the parameters
    untouched and bump ``opt.nonfinite`` instead.
    """
    if params.shape != grads.shape or opt.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {opt.m.shape}")
    opt.step += 1
    if not np.all(np.isfinite(grads)):
        opt.nonfinite += 1
        return params, opt
    g = grads.astype(np.float64)
    m = opt.beta1 * opt.m.astype(np.float64) + (1 - opt.beta1) * g
    v = opt.beta2 * opt.v.astype(np.float64) + (1 - opt.beta2) * g * g
    mhat = m / (1 - opt.beta1**opt.step)
    vhat = v / (1 - opt.beta2**opt.step)
    new = params.astype(np.float64) - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    opt.m = m.astype(opt.m.dtype)
    opt.v = v.astype(opt.v.dtype)
    return new.astype(params.dtype), opt


def clip_global_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grads
    n = float(np.linalg.norm(grads))
    if n > max_norm and np.isfinite(n):
        return grads * (max_norm / n)
    return grads
