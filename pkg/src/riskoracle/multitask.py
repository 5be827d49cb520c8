"""Task heads over the fused perspectives, joint loss and hierarchical selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .grid import UrbanGrid
from .nn import init_param, zeros_param


def _per_node(O: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Shared 1x1 map over the channel axis: ``[b x] m x c`` -> ``[b x] m``."""
    if O.shape[-1] != w.shape[0]:
        raise DimensionError(f"head expects {w.shape[0]} channels, got {O.shape[-1]}")
    if O.ndim == 2:
        return T.reshape(T.matmul(O, w) + b, (O.shape[0],))
    return T.reshape(T.einsum("bmc,co->bmo", O, w) + b, O.shape[:2])


def fuse(O_hc, O_dp, O_dt) -> T.Tensor:
    maps = [x if isinstance(x, T.Tensor) else T.Tensor(x) for x in (O_hc, O_dp, O_dt)]
    if len({m.shape for m in maps}) != 1:
        raise DimensionError(f"perspective maps differ in shape: {[m.shape for m in maps]}")
    return T.concat(maps, axis=-1)


def head_risk(O: T.Tensor, w, b, slope: float = 0.2) -> T.Tensor:
    return T.leaky_relu(_per_node(O, w, b), slope)


def head_vol(O: T.Tensor, w, b) -> T.Tensor:
    return T.relu(_per_node(O, w, b))


def head_count(O: T.Tensor, w, b, w_fc, b_fc) -> T.Tensor:
    """Per-node count scores mapped from m nodes to q rectangles, then ReLU."""
    z = _per_node(O, w, b)
    if z.shape[-1] != w_fc.shape[0]:
        raise DimensionError(f"W_fc expects {w_fc.shape[0]} nodes, got {z.shape[-1]}")
    z2 = z if z.ndim == 2 else T.reshape(z, (1, z.shape[0]))
    out = T.relu(T.matmul(z2, w_fc) + b_fc)
    return out if z.ndim == 2 else T.reshape(out, (w_fc.shape[1],))


def integrate_risk(O_count, O_risk, w_fc_star, slope: float = 0.2) -> T.Tensor:
    """LeakyReLU(W_fc* O_count + O_risk)."""
    O_count = O_count if isinstance(O_count, T.Tensor) else T.Tensor(O_count)
    O_risk = O_risk if isinstance(O_risk, T.Tensor) else T.Tensor(O_risk)
    q, m = w_fc_star.shape
    if O_count.shape[-1] != q or O_risk.shape[-1] != m:
        raise DimensionError(f"integrate_risk: count {O_count.shape}, risk {O_risk.shape}, W_fc* {w_fc_star.shape}")
    c2 = O_count if O_count.ndim == 2 else T.reshape(O_count, (1, q))
    back = T.matmul(c2, w_fc_star)
    if O_count.ndim == 1:
        back = T.reshape(back, (m,))
    return T.leaky_relu(back + O_risk, slope)


class MultitaskHeads:
    """Risk, volume and count heads plus the count-to-risk integration map."""

    def __init__(self, channels: int, m: int, q: int, slope: float = 0.2, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.channels, self.m, self.q, self.slope = channels, m, q, slope
        self.w_risk, self.b_risk = init_param((channels, 1), rng), zeros_param(1)
        self.w_vol, self.b_vol = init_param((channels, 1), rng), zeros_param(1)
        self.w_count, self.b_count = init_param((channels, 1), rng), zeros_param(1)
        self.w_fc, self.b_fc = init_param((m, q), rng), zeros_param(q)
        self.w_fc_star = init_param((q, m), rng)

    NAMES = ("w_risk", "b_risk", "w_vol", "b_vol", "w_count", "b_count", "w_fc", "b_fc", "w_fc_star")

    def parameters(self):
        return [getattr(self, n) for n in self.NAMES]

    def weights(self):
        return [self.w_risk, self.w_vol, self.w_count, self.w_fc, self.w_fc_star]

    def __call__(self, O: T.Tensor, count_pathway: bool = True) -> dict:
        risk = head_risk(O, self.w_risk, self.b_risk, self.slope)
        vol = head_vol(O, self.w_vol, self.b_vol)
        if count_pathway:
            count = head_count(O, self.w_count, self.b_count, self.w_fc, self.b_fc)
            risk_star = integrate_risk(count, risk, self.w_fc_star, self.slope)
        else:
            lead = O.shape[:-2]
            count = T.Tensor(np.zeros(lead + (self.q,)))
            risk_star = T.leaky_relu(risk, self.slope)
        return {"risk_star": risk_star, "risk": risk, "vol": vol, "count": count}

    def init_biases(self, risk_mean: float, vol_mean: float, count_mean) -> None:
        """Start every head at its training label mean.

        Negative risk labels pass two LeakyReLUs, so the matching bias is
        ``mean / slope**2``; otherwise the first epochs only move the mean.
        """
        self.b_risk.data[...] = risk_mean / self.slope ** 2 if risk_mean < 0 else risk_mean
        self.b_vol.data[...] = vol_mean
        self.b_count.data[...] = 0.0
        self.b_fc.data[...] = count_mean

    def state_arrays(self, prefix: str = "") -> dict:
        return {prefix + n: getattr(self, n).data for n in self.NAMES}

    def load_arrays(self, arrays: dict, prefix: str = "") -> None:
        for n in self.NAMES:
            getattr(self, n).data[...] = arrays[prefix + n]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.8
    lambda2: float = 1.0
    lambda3: float = 1e-4

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


def total_loss(outputs: dict, labels: dict, lam: LossWeights, weights=()) -> tuple:
    """mse(risk*) + l1 mse(vol) + l2 mse(count) + l3 sum of squared weights.

    Returns ``(loss tensor, {term: float})``.
    """
    for key in ("risk", "vol", "count"):
        if labels.get(key) is None:
            raise ContractError(f"missing {key} labels")
    mse_risk = T.mean(T.square(outputs["risk_star"] - labels["risk"]))
    mse_vol = T.mean(T.square(outputs["vol"] - labels["vol"]))
    mse_count = T.mean(T.square(outputs["count"] - labels["count"]))
    loss = mse_risk + lam.lambda1 * mse_vol + lam.lambda2 * mse_count
    l2 = T.parameters_l2(weights)
    if lam.lambda3:
        loss = loss + lam.lambda3 * l2
    terms = {"risk": mse_risk.item(), "vol": mse_vol.item(), "count": mse_count.item(),
             "l2": float(np.asarray(l2.data))}
    return loss, terms


# --- selection --------------------------------------------------------------

def k_from_count(O_count, grid: UrbanGrid) -> np.ndarray:
    """Nearest integer (halves up) clamped to [0, cells in the rectangle]."""
    c = np.asarray(O_count, dtype=np.float64)
    if c.shape[-1] != grid.q:
        raise DimensionError(f"{c.shape[-1]} counts for {grid.q} rectangles")
    k = np.floor(np.clip(c, 0.0, None) + 0.5).astype(np.int64)
    return np.minimum(k, grid.rect_sizes)


def hars_select(risk, k, grid: UrbanGrid) -> np.ndarray:
    """Per rectangle, the ``k_i`` highest-risk cells (ties to the smaller id); sorted ids."""
    risk = np.asarray(risk, dtype=np.float64)
    k = np.asarray(k, dtype=np.int64)
    if risk.shape != (grid.m,) or k.shape != (grid.q,):
        raise DimensionError(f"hars_select: risk {risk.shape}, k {k.shape} for grid m={grid.m}, q={grid.q}")
    if np.any(k < 0) or np.any(k > grid.rect_sizes):
        raise ValueError("k outside [0, rectangle size]")
    picked = []
    for members, ki in zip(grid.rect_members, k):
        if ki:
            order = np.lexsort((members, -risk[members]))
            picked.append(members[order[:ki]])
    if not picked:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(picked))


@dataclass
class Forecast:
    interval: int
    risk: np.ndarray
    vol: np.ndarray
    count: np.ndarray
    k: np.ndarray
    selected: np.ndarray

    @property
    def K(self) -> int:
        return int(self.k.sum())

    def to_json(self) -> dict:
        return {"interval": int(self.interval), "risk": [float(x) for x in self.risk],
                "vol": [float(x) for x in self.vol], "count": [float(x) for x in self.count],
                "selected": [int(x) for x in self.selected], "K": self.K}

    @classmethod
    def from_json(cls, rec: dict, grid: UrbanGrid | None = None) -> "Forecast":
        count = np.array(rec["count"], dtype=np.float64)
        selected = np.array(rec["selected"], dtype=np.int64)
        if grid is not None:
            k = np.bincount(grid.rect_of[selected], minlength=grid.q) if selected.size else np.zeros(grid.q, np.int64)
        else:
            k = np.array([rec["K"]])
        return cls(rec["interval"], np.array(rec["risk"]), np.array(rec["vol"]), count, k, selected)


def make_forecast(interval: int, risk_star, vol, count, grid: UrbanGrid, k=None) -> Forecast:
    k = k_from_count(count, grid) if k is None else np.asarray(k, dtype=np.int64)
    return Forecast(interval, np.asarray(risk_star, dtype=np.float64), np.asarray(vol, dtype=np.float64),
                    np.asarray(count, dtype=np.float64), k, hars_select(risk_star, k, grid))
