"""Block-wise orthogonal rotations with zigzag channel permutation.

A :class:`RotationPlan` maps a linear layer ``Y = X W`` (``W`` is
``C_in x C_out``) to the rotated pair::

    X' = X P R       W' = R^T P^T W       X' W' = X W

where ``P`` reorders input channels and ``R = BlockDiag(R_1, ..., R_K)`` with
``c x c`` orthogonal blocks. Depending on the plan kind a block is the left
singular basis ``U`` of the block's weight rows, the normalized Hadamard
matrix ``H_c``, their product ``U H_c``, or the identity.

The permutation is stored as ``perm`` with ``(X P)[:, i] = X[:, perm[i]]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor_store import Tensor

JACOBI_MAX_BLOCK = 256
_JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 60


class RotationKind(str, enum.Enum):
    IDENTITY = "identity"
    PERMUTE = "permute"
    SVD = "svd"
    HADAMARD = "hadamard"
    SVD_HADAMARD = "svd-hadamard"

    @classmethod
    def parse(cls, value) -> "RotationKind":
        if isinstance(value, cls):
            return value
        aliases = {"none": "identity", "raw": "identity", "svdh": "svd-hadamard", "svd_hadamard": "svd-hadamard"}
        key = str(value).strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown rotation kind {value!r} (choose from {choices})") from None

    @property
    def uses_svd(self) -> bool:
        return self in (RotationKind.SVD, RotationKind.SVD_HADAMARD)

    @property
    def uses_hadamard(self) -> bool:
        return self in (RotationKind.HADAMARD, RotationKind.SVD_HADAMARD)

    @property
    def rotates(self) -> bool:
        return self not in (RotationKind.IDENTITY, RotationKind.PERMUTE)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def make_hadamard(n: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix of order ``n`` (float64).

    Every entry is ``+-1/sqrt(n)`` and the result is orthogonal.
    """
    if not isinstance(n, (int, np.integer)) or not is_power_of_two(int(n)):
        raise ConfigError(f"Hadamard order must be a power of two, got {n!r}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


@dataclass(frozen=True)
class SpectralInfo:
    singular_values: np.ndarray
    left_basis: np.ndarray


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle-method tournament: every pair meets once per sweep, pairs within a round are disjoint
    players = list(range(m + (m % 2)))
    rounds = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        pairs = [(players[i], players[-1 - i]) for i in range(half)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < m and b < m]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(a: np.ndarray, label: str = "") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi SVD.

    Orthogonalizes the columns of ``a`` (``n x m``) by plane rotations
    accumulated in ``V`` so that ``a @ V = M`` has mutually orthogonal
    columns. Returns ``(M, sigma, V)`` with ``sigma[i] = ||M[:, i]||``,
    unsorted. Disjoint column pairs of a round are rotated together.
    """
    m_cols = a.shape[1]
    work = np.array(a, dtype=np.float64, copy=True)
    v = np.eye(m_cols)
    rounds = _round_robin(m_cols)
    # columns below this squared norm are numerically zero and left alone
    floor = (1e-13 * np.linalg.norm(work)) ** 2
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = (np.abs(gamma) > _JACOBI_TOL * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            for mat in (work, v):
                mp, mq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = cs * mp - sn * mq
                mat[:, q] = sn * mp + cs * mq
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {_JACOBI_MAX_SWEEPS} sweeps{label and f' ({label})'}")
    return work, np.linalg.norm(work, axis=0), v


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made non-negative (first one on ties)
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs


def svd_rotation(w_block: np.ndarray, label: str = "") -> tuple[np.ndarray, SpectralInfo]:
    """Left singular basis of a ``c x n_out`` weight block.

    The SVD is taken of the transposed block: one-sided Jacobi on
    ``W_b^T`` yields right singular vectors of ``W_b^T``, i.e. the left
    singular vectors ``U`` of ``W_b``. Columns are sorted by descending
    singular value, so row ``i`` of ``U^T W_b`` has norm ``sigma_i``.
    """
    w = np.asarray(w_block, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1:
        raise ConfigError(f"svd_rotation expects a non-empty 2-D block, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError(f"non-finite weights in SVD block{label and f' ({label})'}")
    c = w.shape[0]
    if c <= JACOBI_MAX_BLOCK:
        a = w.T
        if a.shape[0] > c:
            # W_b^T = Q R with the same right singular vectors as the c x c factor R
            a = np.linalg.qr(a, mode="r")
        _, sigma, u = jacobi_svd(a, label=label)
        order = np.argsort(-sigma, kind="stable")
        sigma, u = sigma[order], u[:, order]
    else:
        try:
            u, s, _ = np.linalg.svd(w, full_matrices=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD failed{label and f' ({label})'}: {exc}") from None
        sigma = np.zeros(c)
        sigma[: s.size] = s
    u = _fix_signs(u)
    return u, SpectralInfo(singular_values=sigma, left_basis=u)


def zigzag_permutation(row_norms, n_blocks: int) -> np.ndarray:
    """Deal norm-sorted channels to blocks in serpentine order.

    Channels are ranked by descending norm (ties by ascending index) and
    rank ``r`` goes to block ``pattern[r % 2K]`` with pattern
    ``0, 1, ..., K-1, K-1, ..., 1, 0``. The permutation lists block 0's
    channels first, each block in dealt order.
    """
    norms = np.asarray(row_norms, dtype=np.float64).reshape(-1)
    n = norms.size
    if n_blocks < 1 or n % n_blocks:
        raise ConfigError(f"{n} channels cannot be split into {n_blocks} equal blocks")
    order = np.argsort(-norms, kind="stable")
    pattern = np.concatenate([np.arange(n_blocks), np.arange(n_blocks)[::-1]])
    block_of_rank = pattern[np.arange(n) % (2 * n_blocks)]
    return np.concatenate([order[block_of_rank == b] for b in range(n_blocks)]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class RotationPlan:
    """Permutation plus K orthogonal ``c x c`` blocks.

    ``blocks`` covers the first ``K * c`` permuted channels; any remainder
    channels (``C_in % c``) are passed through unrotated at the tail.
    """

    kind: RotationKind
    block_size: int
    perm: np.ndarray
    blocks: tuple = ()
    spectra: tuple = field(default=(), compare=False, repr=False)

    @property
    def n_channels(self) -> int:
        return int(self.perm.size)

    @property
    def n_blocks(self) -> int:
        return self.n_channels // self.block_size

    @property
    def remainder(self) -> int:
        return self.n_channels % self.block_size

    def _stack(self) -> np.ndarray:
        return np.stack(self.blocks).astype(np.float32)

    def block_matrix(self) -> np.ndarray:
        """``BlockDiag(R_1, ..., R_K, I_r)`` as a dense float64 matrix."""
        n, c = self.n_channels, self.block_size
        r = np.eye(n)
        if self.kind.rotates:
            for b, blk in enumerate(self.blocks):
                r[b * c : (b + 1) * c, b * c : (b + 1) * c] = blk
        return r

    def permutation_matrix(self) -> np.ndarray:
        n = self.n_channels
        p = np.zeros((n, n))
        p[self.perm, np.arange(n)] = 1.0
        return p

    def full_transform(self) -> np.ndarray:
        """Dense ``T = P R`` such that ``X' = X T``."""
        return self.permutation_matrix() @ self.block_matrix()

    @property
    def rotation_nbytes(self) -> int:
        return 4 * sum(b.size for b in self.blocks) if self.kind.rotates else 0

    @property
    def perm_nbytes(self) -> int:
        return 0 if self.kind is RotationKind.IDENTITY else 4 * self.n_channels

    def to_tensors(self, layer: str) -> dict[str, Tensor]:
        out = {}
        if self.kind is not RotationKind.IDENTITY:
            name = f"rot/{layer}/perm"
            # indices < 2**24 are exact in binary32
            out[name] = Tensor.from_array(name, self.perm.astype(np.float32))
        if self.kind.rotates:
            for k, blk in enumerate(self.blocks):
                name = f"rot/{layer}/block{k}"
                out[name] = Tensor.from_array(name, blk)
        return out

    def meta(self) -> dict:
        return {"kind": self.kind.value, "block_size": self.block_size, "channels": self.n_channels}

    @classmethod
    def from_tensors(cls, layer: str, meta: dict, tensors) -> "RotationPlan":
        kind = RotationKind.parse(meta["kind"])
        c, n = int(meta["block_size"]), int(meta["channels"])
        if kind is RotationKind.IDENTITY:
            perm = np.arange(n, dtype=np.int64)
        else:
            perm = tensors[f"rot/{layer}/perm"].to_array().astype(np.int64)
        blocks = ()
        if kind.rotates:
            blocks = tuple(tensors[f"rot/{layer}/block{k}"].to_array() for k in range(n // c))
        plan = cls(kind, c, perm, blocks)
        _validate_plan(plan)
        return plan


def _validate_plan(plan: RotationPlan) -> None:
    n = plan.n_channels
    if not np.array_equal(np.sort(plan.perm), np.arange(n)):
        raise ConfigError("rotation plan permutation is not a bijection")
    if plan.kind.rotates:
        if len(plan.blocks) != plan.n_blocks:
            raise ConfigError(f"plan has {len(plan.blocks)} blocks, expected {plan.n_blocks}")
        for blk in plan.blocks:
            if blk.shape != (plan.block_size, plan.block_size):
                raise ConfigError(f"rotation block of shape {blk.shape}, expected {plan.block_size}^2")


def identity_plan(n_channels: int, block_size: int = 64) -> RotationPlan:
    return RotationPlan(RotationKind.IDENTITY, block_size, np.arange(n_channels, dtype=np.int64))


def build_plan(w, kind="svd-hadamard", block_size: int = 64, label: str = "") -> RotationPlan:
    """Build the rotation plan for a ``C_in x C_out`` weight matrix.

    The permutation comes from squared input-channel (row) norms only, so
    plans do not depend on calibration data. When ``C_in`` is not a multiple
    of ``block_size`` the ``C_in % block_size`` lowest-norm channels form an
    unrotated tail.
    """
    kind = RotationKind.parse(kind)
    w = np.asarray(w)
    if w.ndim != 2:
        raise ConfigError(f"build_plan expects a 2-D weight, got shape {w.shape}")
    c_in = w.shape[0]
    if block_size < 1:
        raise ConfigError(f"block size must be positive, got {block_size}")
    if kind.uses_hadamard and not is_power_of_two(block_size):
        raise ConfigError(f"block size {block_size} is not a power of two (required by {kind.value})")
    if kind is RotationKind.IDENTITY:
        return identity_plan(c_in, block_size)

    w64 = w.astype(np.float64)
    norms = np.einsum("ij,ij->i", w64, w64)
    n_blocks, rem = divmod(c_in, block_size)
    ranked = np.argsort(-norms, kind="stable")
    head = ranked[: n_blocks * block_size]
    tail = ranked[n_blocks * block_size :]
    if n_blocks:
        head = head[zigzag_permutation(norms[head], n_blocks)]
    perm = np.concatenate([head, tail]).astype(np.int64)

    if not kind.rotates:
        return RotationPlan(kind, block_size, perm)

    had = make_hadamard(block_size) if kind.uses_hadamard else None
    blocks, spectra = [], []
    wp = w64[perm]
    for b in range(n_blocks):
        rows = wp[b * block_size : (b + 1) * block_size]
        if kind.uses_svd:
            u, info = svd_rotation(rows, label=f"{label} block {b}".strip())
            spectra.append(info)
            r = u @ had if had is not None else u
        else:
            r = had
        blocks.append(r.astype(np.float32))
    return RotationPlan(kind, block_size, perm, tuple(blocks), tuple(spectra))


def _check_width(x: np.ndarray, plan: RotationPlan, axis_name: str) -> None:
    if x.ndim != 2:
        raise ConfigError(f"expected a 2-D {axis_name}, got shape {x.shape}")


def apply_to_activation(x, plan: RotationPlan) -> np.ndarray:
    """``X' = X P R`` for a ``tokens x C_in`` activation."""
    x = np.asarray(x, dtype=np.float32)
    _check_width(x, plan, "activation")
    if x.shape[1] != plan.n_channels:
        raise ConfigError(f"activation width {x.shape[1]} does not match plan width {plan.n_channels}")
    if plan.kind is RotationKind.IDENTITY:
        return x
    xp = x[:, plan.perm]
    if not plan.kind.rotates or plan.n_blocks == 0:
        return xp
    n, k, c = x.shape[0], plan.n_blocks, plan.block_size
    full = k * c
    head = np.matmul(xp[:, :full].reshape(n, k, c).transpose(1, 0, 2), plan._stack())
    out = xp.copy() if plan.remainder else np.empty_like(xp)
    out[:, :full] = head.transpose(1, 0, 2).reshape(n, full)
    return out


def apply_to_weight(w, plan: RotationPlan) -> np.ndarray:
    """``W' = R^T P^T W`` for a ``C_in x C_out`` weight."""
    w = np.asarray(w, dtype=np.float32)
    _check_width(w, plan, "weight")
    if w.shape[0] != plan.n_channels:
        raise ConfigError(f"weight rows {w.shape[0]} do not match plan width {plan.n_channels}")
    if plan.kind is RotationKind.IDENTITY:
        return w
    wp = w[plan.perm]
    if not plan.kind.rotates or plan.n_blocks == 0:
        return wp
    k, c = plan.n_blocks, plan.block_size
    full = k * c
    head = np.matmul(plan._stack().transpose(0, 2, 1), wp[:full].reshape(k, c, w.shape[1]))
    out = wp.copy() if plan.remainder else np.empty_like(wp)
    out[:full] = head.reshape(full, w.shape[1])
    return out


def derive_plan(plan: RotationPlan, kind) -> RotationPlan:
    """Re-target an SVD-bearing plan to another kind without a new decomposition.

    The result is bit-identical to :func:`build_plan` on the same weight.
    """
    kind = RotationKind.parse(kind)
    if kind is plan.kind:
        return plan
    if kind is RotationKind.IDENTITY:
        return identity_plan(plan.n_channels, plan.block_size)
    if kind is RotationKind.PERMUTE:
        return RotationPlan(kind, plan.block_size, plan.perm)
    if kind.uses_hadamard and not is_power_of_two(plan.block_size):
        raise ConfigError(f"block size {plan.block_size} is not a power of two (required by {kind.value})")
    had = make_hadamard(plan.block_size) if kind.uses_hadamard else None
    if not kind.uses_svd:
        blocks = tuple(had.astype(np.float32) for _ in range(plan.n_blocks))
        return RotationPlan(kind, plan.block_size, plan.perm, blocks)
    if len(plan.spectra) != plan.n_blocks:
        raise ConfigError(f"cannot derive {kind.value} from a {plan.kind.value} plan without spectra")
    blocks = []
    for info in plan.spectra:
        r = info.left_basis @ had if had is not None else info.left_basis
        blocks.append(r.astype(np.float32))
    return RotationPlan(kind, plan.block_size, plan.perm, tuple(blocks), plan.spectra)
