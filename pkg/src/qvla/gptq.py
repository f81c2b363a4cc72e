"""Second-order (GPTQ-style) weight quantization.

Weights are ``C_in x C_out`` so the GPTQ "columns" are input-channel rows
here. Each row is rounded against the fixed per-output-channel scales and
its error is pushed into the rows not yet quantized through the upper
Cholesky factor of the damped inverse Hessian.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericError
from .quant import quantize_symmetric, weight_scales_per_channel

DEFAULT_BLOCK = 128
DEFAULT_DAMPING = 0.01


class HessianAccumulator:
    """Running ``H = 2 X^T X`` over calibration batches (kept in float64)."""

    def __init__(self, n_channels: int):
        if n_channels < 1:
            raise ConfigError(f"Hessian needs at least one channel, got {n_channels}")
        self.H = np.zeros((n_channels, n_channels))
        self.n_samples = 0

    @property
    def n_channels(self) -> int:
        return self.H.shape[0]

    def accumulate(self, x) -> "HessianAccumulator":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_channels:
            raise ConfigError(f"batch of shape {x.shape} does not match {self.n_channels} channels")
        if not np.all(np.isfinite(x)):
            raise NumericError("Hessian batch contains non-finite values")
        self.H += 2.0 * (x.T @ x)
        self.n_samples += x.shape[0]
        return self


def _inverse_cholesky_upper(h: np.ndarray, damping: float) -> np.ndarray:
    h = h.copy()
    diag = np.diag(h).copy()
    dead = diag == 0
    h[dead, dead] = 1.0
    h[np.diag_indices_from(h)] += damping * np.mean(np.diag(h))
    try:
        low = scipy.linalg.cholesky(h, lower=True)
        h_inv = scipy.linalg.cho_solve((low, True), np.eye(h.shape[0]))
        return scipy.linalg.cholesky(h_inv, lower=False)
    except np.linalg.LinAlgError:
        raise NumericError(
            f"Cholesky failed with damping {damping}; try a larger damping ratio"
        ) from None


def gptq_quantize(
    w_rot,
    hessian,
    q_max: int,
    block_size: int = DEFAULT_BLOCK,
    damping: float = DEFAULT_DAMPING,
) -> tuple[np.ndarray, np.ndarray]:
    """Quantize rotated weights with Hessian-aware error compensation.

    Args:
        w_rot: ``C_in x C_out`` weights in the rotated basis.
        hessian: :class:`HessianAccumulator` or ``C_in x C_in`` matrix built from
            activations in the same rotated basis.
        q_max: largest integer magnitude.
        block_size: rows handled per lazy-update block.
        damping: fraction of the mean Hessian diagonal added to the diagonal.

    Returns:
        ``(ints, scales)`` with the same layout as RTN.
    """
    h = hessian.H if isinstance(hessian, HessianAccumulator) else np.asarray(hessian, dtype=np.float64)
    w_rot = np.asarray(w_rot, dtype=np.float32)
    if w_rot.ndim != 2 or h.shape != (w_rot.shape[0], w_rot.shape[0]):
        raise ConfigError(f"Hessian {h.shape} does not match weight {w_rot.shape}")
    if block_size < 1 or damping < 0:
        raise ConfigError("GPTQ block size must be positive and damping non-negative")
    scales = weight_scales_per_channel(w_rot, q_max)
    s64 = scales.astype(np.float64)
    u = _inverse_cholesky_upper(h, damping)

    w = w_rot.astype(np.float64)
    n = w.shape[0]
    ints = np.zeros(w.shape, dtype=np.int32)
    for i1 in range(0, n, block_size):
        i2 = min(i1 + block_size, n)
        wb = w[i1:i2].copy()
        err = np.zeros_like(wb)
        ub = u[i1:i2, i1:i2]
        for j in range(i2 - i1):
            q = quantize_symmetric(wb[j], s64, q_max)
            ints[i1 + j] = q
            e = (wb[j] - q * s64) / ub[j, j]
            wb[j:] -= np.outer(ub[j, j:], e)
            err[j] = e
        w[i2:] -= u[i1:i2, i2:].T @ err
    return ints, scales
