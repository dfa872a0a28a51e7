"""Reduced non-local attention from regional dominant singular vectors.

A C'xHxW feature map is cut into a grid of sub-regions; each region,
flattened to a C'x(H'W') matrix, is summarised by its left dominant singular
vector, found with a few steps of power iteration. Those vectors serve as
both keys and values for every pixel query:

    O[:, i] = sum_j (Q[:, i] . k_j) k_j        i.e.  O = K (K^T Q)

Several grids ("scales") can contribute keys; their columns are concatenated.
Exact oracles (Jacobi SVD, brute-force non-local) live here as well so the
fast path can be checked against something independent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError
from .tensor import (ConvParams, NormParams, Tensor, add, batch_norm, conv2d, detach,
                     matmul, record_op, relu, reshape, swap_last)

SIGN_RULES = ("max_abs_positive", "none")


@dataclass(frozen=True)
class RegionGrid:
    """``g_h`` x ``g_w`` partition of a feature map into equal sub-regions."""

    g_h: int
    g_w: int

    def __post_init__(self):
        if self.g_h < 1 or self.g_w < 1:
            raise ConfigurationError(f"grid must be positive, got {self.g_h}x{self.g_w}")

    @classmethod
    def parse(cls, text: str) -> "RegionGrid":
        try:
            a, b = text.lower().split("x")
            return cls(int(a), int(b))
        except ValueError as exc:
            raise ConfigurationError(f"bad grid {text!r}, expected e.g. '8x8'") from exc

    @property
    def regions(self) -> int:
        return self.g_h * self.g_w

    def region_size(self, h: int, w: int) -> tuple:
        if h % self.g_h or w % self.g_w:
            raise ConfigurationError(f"grid {self} does not divide a {h}x{w} map")
        return h // self.g_h, w // self.g_w

    def padded_size(self, h: int, w: int) -> tuple:
        return -(-h // self.g_h) * self.g_h, -(-w // self.g_w) * self.g_w

    def __str__(self):
        return f"{self.g_h}x{self.g_w}"


def parse_grids(text: str) -> tuple:
    return tuple(RegionGrid.parse(t) for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class SVNConfig:
    bottleneck_channels: int = 32
    scales: tuple = (RegionGrid(8, 8),)
    power_iters: int = 2
    sign_fix: str = "max_abs_positive"
    zero_tol: float = 1e-12
    # stop gradients through the key-extraction branch
    stop_key_grad: bool = False
    # norm + relu after the channel-reducing 1x1 conv
    conv1_norm_act: bool = True

    def __post_init__(self):
        if self.power_iters < 1:
            raise ConfigurationError("power_iters must be >= 1")
        if self.bottleneck_channels < 1:
            raise ConfigurationError("bottleneck_channels must be >= 1")
        if not self.scales:
            raise ConfigurationError("at least one region grid is required")
        if len(set(self.scales)) != len(self.scales):
            raise ConfigurationError("region grids must be distinct")
        if self.sign_fix not in SIGN_RULES:
            raise ConfigurationError(f"unknown sign rule {self.sign_fix!r}")
        if self.zero_tol <= 0:
            raise ConfigurationError("zero_tol must be positive")

    @property
    def total_keys(self) -> int:
        return sum(g.regions for g in self.scales)


# ---------------------------------------------------------------------------
# exact SVD oracle


@dataclass
class SVDResult:
    """Thin SVD: ``a = u @ diag(s) @ v.T`` with ``s`` sorted descending."""

    s: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def _round_robin(n: int) -> list:
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[k], players[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def svd_oracle(a, max_sweeps: int = 60) -> SVDResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns of a working copy are orthogonalised pairwise; each round of the
    sweep rotates a set of disjoint column pairs at once. The singular values
    are the final column norms.

    Raises
    ------
    NumericError
        If the off-diagonal mass has not vanished after ``max_sweeps`` sweeps.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("svd_oracle expects a matrix")
    m, n = a.shape
    if m < n:
        t = svd_oracle(a.T, max_sweeps)
        return SVDResult(t.s, t.v, t.u)
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix has non-finite entries")

    w = a.copy()
    v = np.eye(n)
    tol = np.sqrt(m) * np.finfo(np.float64).eps
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for i, j in rounds:
            wi, wj = w[:, i], w[:, j]
            alpha = np.einsum("ij,ij->j", wi, wi)
            beta = np.einsum("ij,ij->j", wj, wj)
            gamma = np.einsum("ij,ij->j", wi, wj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            i, j = i[active], j[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (w, v):
                ci, cj = mat[:, i].copy(), mat[:, j]
                mat[:, i] = c * ci - s * cj
                mat[:, j] = s * ci + c * cj
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sv = np.linalg.norm(w, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, w, v = sv[order], w[:, order], v[:, order]
    cutoff = (sv[0] if sv.size else 0.0) * max(m, n) * np.finfo(np.float64).eps
    good = sv > cutoff
    u = np.zeros((m, n))
    u[:, good] = w[:, good] / sv[good]
    if not good.all():
        # complete U with an orthonormal basis of the remaining space
        rng = np.random.default_rng(0)
        basis, _ = np.linalg.qr(np.hstack([u[:, good], rng.standard_normal((m, n))]))
        u[:, ~good] = basis[:, good.sum():n]
        sv = np.where(good, sv, 0.0)
    return SVDResult(sv, u, v)


def rank_k_approx(svd: SVDResult, k: int) -> np.ndarray:
    """Truncated reconstruction from the ``k`` leading singular triplets."""
    if not 1 <= k <= svd.s.size:
        raise ConfigurationError(f"k={k} outside [1, {svd.s.size}]")
    return (svd.u[:, :k] * svd.s[:k]) @ svd.v[:, :k].T


# ---------------------------------------------------------------------------
# power iteration


def _safe_norm(x: np.ndarray, tol: float):
    nrm = np.sqrt(np.einsum("...i,...i->...", x, x))
    ok = nrm >= tol
    return np.where(ok, nrm, 1.0), ok


def _power_iteration_batch(a: np.ndarray, iters: int, zero_tol: float, sign_fix: str,
                           u0: Optional[np.ndarray] = None):
    """Power iteration on a stack of matrices ``a[..., C, M]``.

    Returns the keys ``(..., C)`` and a cache for :func:`_power_iteration_vjp`.
    Any matrix whose iterate collapses below ``zero_tol`` yields a zero key.
    """
    lead = a.shape[:-2]
    c = a.shape[-2]
    u = np.ones(lead + (c,), dtype=a.dtype) if u0 is None else np.broadcast_to(u0, lead + (c,)).astype(a.dtype)
    ok = np.ones(lead, dtype=bool)
    steps = []
    for _ in range(iters):
        nu, ok_u = _safe_norm(u, zero_tol)
        un = u / nu[..., None]
        p = np.matmul(un[..., None, :], a)[..., 0, :]      # A^T u
        np_, ok_p = _safe_norm(p, zero_tol)
        b = p / np_[..., None]
        u = np.matmul(a, b[..., :, None])[..., 0]          # A v
        ok &= ok_u & ok_p
        steps.append((un, nu, b, np_))
    nf, ok_f = _safe_norm(u, zero_tol)
    ok &= ok_f
    out = u / nf[..., None]
    if sign_fix == "max_abs_positive":
        lead_idx = np.argmax(np.abs(out), axis=-1)
        sign = np.sign(np.take_along_axis(out, lead_idx[..., None], axis=-1)[..., 0])
        sign = np.where(sign == 0, 1.0, sign).astype(a.dtype)
    else:
        sign = np.ones(lead, dtype=a.dtype)
    scale = sign * ok
    keys = out * scale[..., None]
    return keys, (steps, out, nf, scale)


def _power_iteration_vjp(a: np.ndarray, cache, gkeys: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``a`` of the unrolled iteration (normalisations included)."""
    steps, out, nf, scale = cache

    def through_norm(y, nrm, gy):
        return (gy - y * np.einsum("...i,...i->...", y, gy)[..., None]) / nrm[..., None]

    gout = gkeys * scale[..., None]
    gu = through_norm(out, nf, gout)
    ga = np.zeros_like(a)
    for un, nu, b, np_ in reversed(steps):
        # u = A b
        ga += gu[..., :, None] * b[..., None, :]
        gb = np.matmul(gu[..., None, :], a)[..., 0, :]
        gp = through_norm(b, np_, gb)
        # p = A^T un
        ga += un[..., :, None] * gp[..., None, :]
        gun = np.matmul(a, gp[..., :, None])[..., 0]
        gu = through_norm(un, nu, gun)
    return ga


def power_iteration(a, iters: int = 2, u0=None, zero_tol: float = 1e-12,
                    sign_fix: str = "max_abs_positive") -> np.ndarray:
    """Left dominant singular vector of ``a`` (C x M) after ``iters`` steps.

    Each step normalises u, sets v = A^T u, normalises v, sets u = A v; the
    final u is normalised and, by default, flipped so that its
    largest-magnitude entry is positive. Returns zeros if any intermediate
    norm drops below ``zero_tol`` (e.g. an all-zero region).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("power_iteration expects a matrix")
    if u0 is not None:
        u0 = np.asarray(u0, dtype=np.float64)
        if u0.shape != (a.shape[0],):
            raise DimensionError(f"u0 must have length {a.shape[0]}")
    keys, _ = _power_iteration_batch(a, iters, zero_tol, sign_fix, u0)
    return keys


# ---------------------------------------------------------------------------
# regions and keys


def partition_regions(f, grid: RegionGrid) -> list:
    """Cut a (C, H, W) map into ``grid.regions`` matrices of shape (C, H'W').

    Regions are listed in row-major grid order; inside a region pixels are
    flattened row-major.
    """
    f = np.asarray(f)
    if f.ndim != 3:
        raise DimensionError("partition_regions expects a (C, H, W) array")
    stacked = _region_stack(f[None], grid)[0]
    return list(stacked)


def _region_stack(f: np.ndarray, grid: RegionGrid) -> np.ndarray:
    """(N, C, H, W) -> (N, S, C, H'W'); the grid must divide (H, W)."""
    n, c, h, w = f.shape
    rh, rw = grid.region_size(h, w)
    blocks = f.reshape(n, c, grid.g_h, rh, grid.g_w, rw).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(n, grid.regions, c, rh * rw)


def _region_unstack(g: np.ndarray, grid: RegionGrid, h: int, w: int) -> np.ndarray:
    n, _, c, _ = g.shape
    rh, rw = h // grid.g_h, w // grid.g_w
    blocks = g.reshape(n, grid.g_h, grid.g_w, c, rh, rw).transpose(0, 3, 1, 4, 2, 5)
    return blocks.reshape(n, c, h, w)


def _pad_to_grid(f: np.ndarray, grid: RegionGrid) -> np.ndarray:
    h, w = f.shape[-2:]
    hp, wp = grid.padded_size(h, w)
    if (hp, wp) == (h, w):
        return f
    return np.pad(f, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))


def _keys_forward(f: np.ndarray, cfg: SVNConfig):
    banks, caches = [], []
    for grid in cfg.scales:
        regions = _region_stack(_pad_to_grid(f, grid), grid)
        keys, cache = _power_iteration_batch(regions, cfg.power_iters, cfg.zero_tol, cfg.sign_fix)
        banks.append(np.swapaxes(keys, 1, 2))
        caches.append((regions, cache))
    return np.concatenate(banks, axis=2), caches


def extract_keys(f, cfg: SVNConfig) -> np.ndarray:
    """Key/value bank (C', S_total) for a (C', H, W) map, or (N, C', S_total) for NCHW.

    Columns follow ``cfg.scales`` order, regions row-major within each grid.
    Maps a grid does not divide are zero-padded on the bottom/right first.
    """
    f = np.asarray(f)
    single = f.ndim == 3
    if single:
        f = f[None]
    if f.ndim != 4:
        raise DimensionError("extract_keys expects (C, H, W) or (N, C, H, W)")
    bank, _ = _keys_forward(f, cfg)
    return bank[0] if single else bank


def keys_op(f: Tensor, cfg: SVNConfig) -> Tensor:
    """Differentiable :func:`extract_keys` on an NCHW tensor -> (N, C', S_total)."""
    fd = f.data
    n, c, h, w = fd.shape
    bank, caches = _keys_forward(fd, cfg)

    def _backward(gbank, needs):
        gf = np.zeros_like(fd)
        col = 0
        for grid, (regions, cache) in zip(cfg.scales, caches):
            s = grid.regions
            gkeys = np.swapaxes(gbank[:, :, col:col + s], 1, 2)
            gregions = _power_iteration_vjp(regions, cache, gkeys)
            hp, wp = grid.padded_size(h, w)
            gf += _region_unstack(gregions, grid, hp, wp)[:, :, :h, :w]
            col += s
        return (gf,)

    return record_op("extract_keys", [f], bank, _backward)


# ---------------------------------------------------------------------------
# non-local operations


def reduced_nonlocal(q, bank) -> np.ndarray:
    """O = bank @ (bank^T @ Q): dot-product attention with no normaliser.

    Works on single matrices (C', N) / (C', S) or stacks with matching
    leading dimensions.
    """
    q = np.asarray(q)
    bank = np.asarray(bank)
    if q.shape[-2] != bank.shape[-2]:
        raise ConfigurationError(f"query rows {q.shape[-2]} != bank rows {bank.shape[-2]}")
    return np.matmul(bank, np.matmul(np.swapaxes(bank, -1, -2), q))


def standard_nonlocal(q, k, v, normalizer: str = "none") -> np.ndarray:
    """Query-key-value aggregation with dot-product similarity.

    ``normalizer`` is ``"none"`` (plain sum), ``"mean"`` (divide by the number
    of keys) or ``"softmax"`` (softmax of the scores over keys, per query).
    """
    q, k, v = (np.asarray(t) for t in (q, k, v))
    if q.shape[-2] != k.shape[-2]:
        raise ConfigurationError(f"queries have {q.shape[-2]} rows, keys {k.shape[-2]}")
    if k.shape[-1] != v.shape[-1]:
        raise ConfigurationError(f"{k.shape[-1]} keys but {v.shape[-1]} values")
    scores = np.matmul(np.swapaxes(k, -1, -2), q)   # (N2, N1)
    if normalizer == "none":
        weights = scores
    elif normalizer == "mean":
        weights = scores / k.shape[-1]
    elif normalizer == "softmax":
        z = np.exp(scores - scores.max(axis=-2, keepdims=True))
        weights = z / z.sum(axis=-2, keepdims=True)
    else:
        raise ConfigurationError(f"unknown normalizer {normalizer!r}")
    return np.matmul(v, weights)


# ---------------------------------------------------------------------------
# the full residual module


@dataclass
class SVNWeights:
    conv1: ConvParams                 # C -> C' (1x1)
    conv2: ConvParams                 # C' -> C (1x1)
    norm1: Optional[NormParams] = None


def svn_module_forward(x: Tensor, weights: SVNWeights, cfg: SVNConfig,
                       training: bool = True) -> Tensor:
    """x + Conv2(attention(F)) with F = Conv1(x) the C'-channel bottleneck."""
    if weights.conv1.out_channels != cfg.bottleneck_channels:
        raise ConfigurationError("conv1 width does not match bottleneck_channels")
    f = conv2d(x, weights.conv1)
    if weights.norm1 is not None:
        f = relu(batch_norm(f, weights.norm1, training))
    n, c, h, w = f.shape
    q = reshape(f, (n, c, h * w))
    bank = keys_op(detach(f) if cfg.stop_key_grad else f, cfg)
    att = matmul(bank, matmul(swap_last(bank), q))
    out = conv2d(reshape(att, (n, c, h, w)), weights.conv2)
    return add(x, out)
