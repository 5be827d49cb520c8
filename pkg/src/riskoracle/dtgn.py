"""Differential time-varying graph network.

Per interval the overall affinity mixes the (attention-weighted) static
similarity with the similarity of last week's traffic profiles at the same
time of day. Its normalised form is averaged over a perspective's look-back
intervals and drives a stack of graph convolutions over united feature
tuples (volume, speed, risk and their lagged differences).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import AffinityError, ContractError, DimensionError, SamplingError
from .grid import (AttentionWeights, UrbanGrid, attend_static, js_matrix,
                   normalize_rows_t, sparsify)
from .nn import BatchNorm, batch_norm, init_param, zeros_param

PROFILE_DAYS = 7
TUPLE_WIDTH = 5  # volume, speed, risk, d-volume, d-speed
EXT_DIM = 8
# "interval": inference normalises over the m nodes of each interval, as in
# training; "running": inference uses the running estimates.
BN_INFERENCE = ("interval", "running")
N_WEATHER = 3


# --- affinity and Laplacian --------------------------------------------------

def traffic_profiles(volume, speed, t: int, day_len: int) -> np.ndarray:
    """m x 14 profile: volumes then speeds at interval ``t``'s time of day on each of the previous 7 days."""
    if t < PROFILE_DAYS * day_len:
        raise AffinityError(f"interval {t} lacks a week of history for traffic profiles")
    idx = [t - k * day_len for k in range(PROFILE_DAYS, 0, -1)]
    prof = np.concatenate([np.asarray(volume)[idx].T, np.asarray(speed)[idx].T], axis=1)
    if not np.all(np.isfinite(prof)):
        raise ContractError("traffic profiles contain missing readings; run co-sensing first")
    return prof


def dynamic_term(profiles) -> np.ndarray:
    """exp(-JS) between normalised traffic profiles, zero diagonal."""
    D = np.exp(-js_matrix(np.clip(profiles, 0.0, None)))
    np.fill_diagonal(D, 0.0)
    return D


def static_term(S_star, grid: UrbanGrid | None = None) -> np.ndarray:
    """exp(-JS) between s* rows; adjacent cells are pinned to 1 when ``grid`` is given."""
    A = np.exp(-js_matrix(S_star))
    if grid is not None:
        A[grid.adjacency > 0] = 1.0
    np.fill_diagonal(A, 0.0)
    return A


def overall_affinity(S_star, profiles, gamma: float, rho: float, grid: UrbanGrid | None = None):
    """Static plus gamma-weighted dynamic affinity, sparsified after the sum."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    A = static_term(S_star, grid)
    if gamma:
        A = A + gamma * dynamic_term(profiles)
    return sparsify(A, rho)


def _check_affinity(A):
    if A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"affinity must be square, got {A.shape}")
    if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=0, atol=1e-12):
        raise ContractError("affinity matrix is not symmetric")
    if np.any(A < 0):
        raise ContractError("affinity matrix has negative entries")


def laplacian(A) -> np.ndarray:
    """Phi^-1/2 (A + I) Phi^-1/2 with Phi the row sums of A + I; batches over leading axes."""
    A = np.asarray(A, dtype=np.float64)
    _check_affinity(A)
    B = A + np.eye(A.shape[-1])
    d = B.sum(axis=-1)
    return B / np.sqrt(d[..., :, None] * d[..., None, :])


def laplacian_t(A: T.Tensor) -> T.Tensor:
    """Differentiable :func:`laplacian` over a ``... x m x m`` tensor."""
    B = A + np.eye(A.shape[-1])
    d = T.tsum(B, axis=-1, keepdims=True)                       # ... x m x 1
    dt = T.reshape(d, d.shape[:-2] + (1, d.shape[-2]))          # ... x 1 x m
    return B * T.power(d * dt, -0.5)


def mean_laplacian(Ls) -> np.ndarray:
    Ls = [np.asarray(L) for L in Ls]
    if not Ls:
        raise ContractError("mean_laplacian needs at least one matrix")
    if any(L.shape != Ls[0].shape for L in Ls):
        raise DimensionError("Laplacians differ in shape")
    return np.mean(Ls, axis=0)


def sparsify_masks(values, rho: float) -> np.ndarray:
    """Batched :func:`grid.sparsify_mask` over ``n x m x m`` symmetric matrices.

    Same rule: keep the ceil(rho * pairs) largest unordered pairs, ties to the
    lexicographically smaller pair. Uses a partition instead of a full sort.
    """
    V = np.asarray(values)
    n, m = V.shape[0], V.shape[-1]
    iu, ju = np.triu_indices(m, k=1)
    P = iu.size
    keep = min(P, math.ceil(rho * P - 1e-9))
    masks = np.zeros(V.shape, dtype=np.float64)
    if keep == 0:
        return masks
    if keep == P:
        masks[:] = 1.0
        masks[:, np.arange(m), np.arange(m)] = 0.0
        return masks
    flat = V[:, iu, ju]
    thr = -np.partition(-flat, keep - 1, axis=1)[:, keep - 1:keep]
    above = flat > thr
    tied = flat == thr
    # triu order is lexicographic, so cumulative counts take the smallest pairs first
    need = keep - above.sum(axis=1, keepdims=True)
    chosen = above | (tied & (np.cumsum(tied, axis=1) <= need))
    masks[:, iu, ju] = chosen
    masks[:, ju, iu] = chosen
    return masks


class AffinityBuilder:
    """Laplacians L* for the look-back intervals of each sample.

    The static term is rebuilt from the current attention weights so s* is
    learned end to end; the dynamic term per interval is cached.
    """

    def __init__(self, grid: UrbanGrid, S, volume, speed, day_len: int, gamma: float = 0.5,
                 rho: float = 0.1, static_only: bool = False, attention: AttentionWeights | None = None):
        self.grid, self.S = grid, np.asarray(S, dtype=np.float64)
        self.volume, self.speed = volume, speed
        self.day_len, self.gamma, self.rho = day_len, gamma, rho
        self.static_only = static_only
        self.attention = attention or AttentionWeights(self.S.shape[1])
        self._dyn: dict = {}
        self._adj = grid.adjacency
        self._fixed = None
        if static_only:
            # static ablation: L from the sparsified raw static affinity
            A = sparsify(static_term(self.S, grid), rho)
            self._fixed = laplacian(A)

    def parameters(self):
        return [] if self.static_only else self.attention.parameters()

    def dyn(self, t: int) -> np.ndarray:
        D = self._dyn.get(t)
        if D is None:
            # float32 halves the cache; the term is a constant input
            D = dynamic_term(traffic_profiles(self.volume, self.speed, t, self.day_len))
            D = D.astype(np.float32)
            self._dyn[t] = D
        return D.astype(np.float64)

    def static_tensor(self) -> T.Tensor:
        s_star = attend_static(self.S, self.attention)
        P = normalize_rows_t(s_star)
        E = T.exp(-T.pairwise_js(P))
        adj = self._adj
        off = 1.0 - adj - np.eye(adj.shape[0])
        return E * off + adj

    def static_star(self) -> np.ndarray:
        return self.S * self.attention().data

    def laplacians(self, interval_sets, differentiable: bool = True):
        """Mean Laplacian per set; ``interval_sets`` is ``b x p x kappa`` interval ids.

        Returns a ``b x p x m x m`` tensor (constant when not differentiable).
        """
        idx = np.asarray(interval_sets)
        b, p, k = idx.shape
        m = self.grid.m
        if self._fixed is not None:
            return T.Tensor(np.broadcast_to(self._fixed, (b, p, m, m)).copy())
        # consecutive targets share look-back intervals; build each once
        uniq, inv = np.unique(idx.reshape(-1), return_inverse=True)
        avg = np.zeros((b * p, uniq.size))
        np.add.at(avg, (np.repeat(np.arange(b * p), k), inv), 1.0 / k)
        dyn = np.stack([self.dyn(int(t)) for t in uniq])              # u x m x m
        As = self.static_tensor() if differentiable else T.Tensor(self.static_term_data())
        total = As.data[None] + self.gamma * dyn
        masks = sparsify_masks(total, self.rho)
        if differentiable:
            A = (T.reshape(As, (1, m, m)) + self.gamma * dyn) * masks
            L = laplacian_t(A)
        else:
            L = T.Tensor(laplacian(total * masks))
        return T.reshape(T.einsum("pu,uij->pij", T.Tensor(avg), L), (b, p, m, m))

    def static_term_data(self) -> np.ndarray:
        return static_term(self.static_star(), self.grid)


# --- features ---------------------------------------------------------------

def differential(volume, speed, t: int) -> np.ndarray:
    """m x 2 lagged differences (volume, speed) between ``t`` and ``t - 1``."""
    if t < 1:
        raise SamplingError("differential features need t >= 1", earliest=1)
    v, s = np.asarray(volume), np.asarray(speed)
    return np.column_stack([v[t] - v[t - 1], s[t] - s[t - 1]])


def united_tuple(volume, speed, risk, t: int, use_differential: bool = True) -> np.ndarray:
    """m x 5 tuple [volume, speed, risk, d-volume, d-speed] at interval ``t``."""
    v, s, r = np.asarray(volume), np.asarray(speed), np.asarray(risk)
    if not (np.all(np.isfinite(v[t])) and np.all(np.isfinite(s[t]))):
        raise ContractError(f"interval {t} has missing readings; run co-sensing first")
    theta = differential(v, s, t) if use_differential else np.zeros((v.shape[1], 2))
    return np.column_stack([v[t], s[t], r[t], theta])


def perspective_inputs(volume, speed, risk, intervals, use_differential: bool = True) -> np.ndarray:
    """Concatenate the tuples of ``intervals`` along features: m x (5 * kappa)."""
    return np.concatenate([united_tuple(volume, speed, risk, t, use_differential)
                           for t in intervals], axis=1)


# --- network ----------------------------------------------------------------

class ExternalEmbedder:
    """Interval-of-day, day-of-week and weather-code tables plus a temperature vector."""

    def __init__(self, day_len: int, dim: int = EXT_DIM, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tod = init_param((day_len, dim), rng)
        self.dow = init_param((7, dim), rng)
        self.weather = init_param((N_WEATHER, dim), rng)
        self.temp = init_param((dim,), rng)
        self.dim = dim

    def parameters(self):
        return [self.tod, self.dow, self.weather, self.temp]

    def __call__(self, tod, dow, weather, temperature) -> T.Tensor:
        """b x dim embedding of per-sample external factors."""
        temp = T.Tensor(np.asarray(temperature, dtype=np.float64).reshape(-1, 1))
        return (T.take_rows(self.tod, tod) + T.take_rows(self.dow, dow)
                + T.take_rows(self.weather, weather) + temp * self.temp)


class DtgnStack:
    """Encoder plus ``layers`` graph convolutions of width ``width`` for one perspective."""

    def __init__(self, n_in: int, width: int = 64, layers: int = 4, ext_dim: int = EXT_DIM,
                 bn_every: int = 2, slope: float = 0.2, bn_inference: str = "interval", seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        if layers < 1 or width < 1:
            raise DimensionError("DTGN needs at least one layer of positive width")
        self.n_in, self.width, self.n_layers = n_in, width, layers
        if bn_inference not in BN_INFERENCE:
            raise ValueError(f"bn_inference must be one of {BN_INFERENCE}")
        self.ext_dim, self.bn_every, self.slope = ext_dim, bn_every, slope
        self.bn_inference = bn_inference
        self.w_enc = init_param((n_in, width), rng)
        self.b_enc = zeros_param(width)
        self.w = [init_param((width, width), rng) for _ in range(layers)]
        self.w_ext = [init_param((width + ext_dim, width), rng) for _ in range(layers)]
        self.bn = {n: BatchNorm(width) for n in range(layers)
                   if bn_every and (n + 1) % bn_every == 0}

    def weights(self):
        return [self.w_enc, *self.w, *self.w_ext]

    def parameters(self):
        ps = [self.w_enc, self.b_enc, *self.w, *self.w_ext]
        for n in sorted(self.bn):
            ps.extend(self.bn[n].parameters())
        return ps

    def state_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}w_enc": self.w_enc.data, f"{prefix}b_enc": self.b_enc.data}
        for n in range(self.n_layers):
            out[f"{prefix}w{n}"] = self.w[n].data
            out[f"{prefix}w_ext{n}"] = self.w_ext[n].data
        for n, bn in self.bn.items():
            out[f"{prefix}bn{n}_gamma"] = bn.gamma.data
            out[f"{prefix}bn{n}_beta"] = bn.beta.data
            out[f"{prefix}bn{n}_mean"] = bn.running_mean
            out[f"{prefix}bn{n}_var"] = bn.running_var
        return out

    def load_arrays(self, prefix: str, arrays: dict) -> None:
        self.w_enc.data[...] = arrays[f"{prefix}w_enc"]
        self.b_enc.data[...] = arrays[f"{prefix}b_enc"]
        for n in range(self.n_layers):
            self.w[n].data[...] = arrays[f"{prefix}w{n}"]
            self.w_ext[n].data[...] = arrays[f"{prefix}w_ext{n}"]
        for n, bn in self.bn.items():
            bn.gamma.data[...] = arrays[f"{prefix}bn{n}_gamma"]
            bn.beta.data[...] = arrays[f"{prefix}bn{n}_beta"]
            bn.running_mean = np.array(arrays[f"{prefix}bn{n}_mean"], dtype=np.float64)
            bn.running_var = np.array(arrays[f"{prefix}bn{n}_var"], dtype=np.float64)


def dtgn_forward(stack: DtgnStack, H0, L, external=None, training: bool = False) -> T.Tensor:
    """Feature map of one perspective.

    ``H0`` is ``m x n_in`` or ``b x m x n_in``; ``L`` the matching mean
    Laplacian(s); ``external`` a ``dim`` or ``b x dim`` embedding (zeros when
    omitted). Returns ``m x w`` or ``b x m x w``.
    """
    H0 = H0 if isinstance(H0, T.Tensor) else T.Tensor(H0)
    L = L if isinstance(L, T.Tensor) else T.Tensor(L)
    if not np.all(np.isfinite(H0.data)):
        raise ContractError("DTGN input has missing values; run co-sensing first")
    single = H0.ndim == 2
    if single:
        H0 = T.reshape(H0, (1,) + H0.shape)
        L = T.reshape(L, (1,) + L.shape)
    b, m, f = H0.shape
    if f != stack.n_in:
        raise DimensionError(f"DTGN expects {stack.n_in} input features, got {f}")
    if L.shape != (b, m, m):
        raise DimensionError(f"Laplacian shape {L.shape} does not match {b} x {m} nodes")
    if external is None:
        external = T.Tensor(np.zeros((b, stack.ext_dim)))
    external = external if isinstance(external, T.Tensor) else T.Tensor(external)
    if external.ndim == 1:
        external = T.reshape(external, (1, external.shape[0]))
    ext_nodes = T.reshape(external, (b, 1, stack.ext_dim)) * np.ones((1, m, 1))

    H = T.einsum("bmf,fw->bmw", H0, stack.w_enc) + stack.b_enc
    for n in range(stack.n_layers):
        H = T.bmm(L, H)
        H = T.leaky_relu(T.einsum("bmw,wv->bmv", H, stack.w[n]), stack.slope)
        H = T.einsum("bmc,cw->bmw", T.concat([H, ext_nodes], axis=2), stack.w_ext[n])
        if n in stack.bn:
            H = batch_norm(H, stack.bn[n], training,
                           batch_stats=training or stack.bn_inference == "interval")
    if single:
        H = T.reshape(H, (m, stack.width))
    return H
