"""Co-sensing of missing speeds and volumes with a spatiotemporal deep FM.

Each record (subregion, interval) is described by three fields: the static
road attributes, the dynamic traffic readings (the *other* quantity at the
subregion itself and at its most proximal subregions under the static
affinity) and the timestamp. Speeds are thus filled from volumes and volumes
from speeds. Continuous inputs
enter a field embedding as ``value * learned vector``; the timestamp field is
a sum of interval-of-day and day-of-week embeddings. A compressed
interaction network (CIN) and a two-layer deep module feed one linear head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import CityData
from .errors import DimensionError, FeatureError, StateError, TrainingError
from .nn import init_param, zeros_param
from .optim import Adam

log = logging.getLogger(__name__)

KINDS = ("speed", "volume")
N_FIELDS = 3


def other(kind: str) -> str:
    return "volume" if kind == "speed" else "speed"


def proximity_order(A_s) -> np.ndarray:
    """For each subregion, the others sorted by decreasing affinity, ties by id."""
    A = np.asarray(A_s)
    m = A.shape[0]
    ids = np.arange(m)
    order = np.empty((m, m - 1), dtype=np.int64)
    for i in range(m):
        others = np.delete(ids, i)
        order[i] = others[np.lexsort((others, -A[i, others]))]
    return order


@dataclass
class FeatureScaler:
    """Column scaling of static attributes and z-scores of the two readings."""

    static_scale: np.ndarray
    mean: dict
    std: dict

    @classmethod
    def fit(cls, city: CityData, intervals=None) -> "FeatureScaler":
        rows = slice(None) if intervals is None else intervals
        mean, std = {}, {}
        for kind in KINDS:
            vals = getattr(city, kind)[rows]
            vals = vals[np.isfinite(vals)]
            mean[kind] = float(vals.mean()) if vals.size else 0.0
            std[kind] = float(vals.std()) if vals.size > 1 else 1.0
            std[kind] = std[kind] or 1.0
        scale = city.static.max(axis=0)
        scale[scale == 0] = 1.0
        return cls(static_scale=scale, mean=mean, std=std)

    def z(self, kind, x):
        return (x - self.mean[kind]) / self.std[kind]

    def unz(self, kind, x):
        return x * self.std[kind] + self.mean[kind]


@dataclass
class FieldInputs:
    """A batch of records: raw inputs of the three fields."""

    static: np.ndarray      # B x d
    dynamic: np.ndarray     # B x (2 + p): own source z-score, missing flag, neighbours
    tod: np.ndarray         # B
    dow: np.ndarray         # B
    cells: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    times: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self):
        return len(self.tod)

    def take(self, idx) -> "FieldInputs":
        return FieldInputs(self.static[idx], self.dynamic[idx], self.tod[idx], self.dow[idx],
                           self.cells[idx] if len(self.cells) else self.cells,
                           self.times[idx] if len(self.times) else self.times)


def neighbour_values(order_row, observed_row, values_row, p: int):
    """Values at the first ``p`` observed subregions of ``order_row``."""
    picked = order_row[observed_row[order_row]][:p]
    if len(picked) < p:
        raise FeatureError(f"only {len(picked)} observed neighbours, need {p}")
    return values_row[picked], picked


def build_features(cell: int, t: int, city: CityData, order, kind: str, scaler: FeatureScaler,
                   p: int = 3) -> FieldInputs:
    """Field inputs for one record predicting ``kind``; raises FeatureError when under-observed."""
    src = other(kind)
    src_vals = getattr(city, src)
    src_mask = getattr(city, f"{src}_mask")
    vals, _ = neighbour_values(order[cell], ~src_mask[t], src_vals[t], p)
    own_missing = bool(src_mask[t, cell])
    own = 0.0 if own_missing else scaler.z(src, src_vals[t, cell])
    dyn = np.concatenate([[own, float(own_missing)], scaler.z(src, vals)])
    return FieldInputs(static=(city.static[cell] / scaler.static_scale)[None, :],
                       dynamic=dyn[None, :], tod=np.atleast_1d(city.interval_of_day(t)),
                       dow=np.atleast_1d(city.day_of_week(t)),
                       cells=np.array([cell]), times=np.array([t]))


def build_feature_batch(city: CityData, order, kind: str, scaler: FeatureScaler, times,
                        cells_by_time, p: int = 3) -> tuple:
    """Vectorised :func:`build_features` over many records.

    ``cells_by_time[k]`` lists the subregions wanted at ``times[k]``. Returns
    ``(inputs, skipped)`` where skipped records lacked ``p`` observed neighbours.
    """
    src = other(kind)
    src_vals = getattr(city, src)
    src_mask = getattr(city, f"{src}_mask")
    static = city.static / scaler.static_scale
    parts, skipped = [], 0
    for t, cells in zip(times, cells_by_time):
        cells = np.asarray(cells, dtype=np.int64)
        if cells.size == 0:
            continue
        obs = ~src_mask[t]
        ordered_obs = obs[order[cells]]                       # n x (m-1)
        first = np.argsort(~ordered_obs, axis=1, kind="stable")[:, :p]
        ok = np.take_along_axis(ordered_obs, first, axis=1).all(axis=1)
        skipped += int((~ok).sum())
        cells, first = cells[ok], first[ok]
        if cells.size == 0:
            continue
        nb = np.take_along_axis(order[cells], first, axis=1)
        miss = src_mask[t, cells]
        own = np.where(miss, 0.0, scaler.z(src, np.nan_to_num(src_vals[t, cells])))
        dyn = np.column_stack([own, miss.astype(np.float64), scaler.z(src, src_vals[t, nb])])
        parts.append((static[cells], dyn, np.full(cells.size, city.interval_of_day(t)),
                      np.full(cells.size, city.day_of_week(t)), cells,
                      np.full(cells.size, t)))
    if not parts:
        d = city.static.shape[1]
        empty = FieldInputs(np.empty((0, d)), np.empty((0, 2 + p)), np.empty(0, np.int64),
                            np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))
        return empty, skipped
    cols = list(zip(*parts))
    return FieldInputs(*(np.concatenate(c) for c in cols)), skipped


class CinStack:
    """Compressed interaction network over ``F`` field embeddings.

    Layer k maps the Hadamard products of its input rows with the base rows
    through a (H_{k-1} * F) x H_k compression matrix.
    """

    def __init__(self, n_fields: int, layer_sizes=(16, 16), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_fields = n_fields
        self.layer_sizes = tuple(layer_sizes)
        self.weights = []
        prev = n_fields
        for h in self.layer_sizes:
            self.weights.append(init_param((prev * n_fields, h), rng))
            prev = h

    def parameters(self):
        return list(self.weights)

    def layers(self, X0: T.Tensor) -> list:
        """Per-layer outputs X^k, each B x H_k x D."""
        if X0.ndim != 3 or X0.shape[1] != self.n_fields:
            raise DimensionError(f"CIN expects B x {self.n_fields} x D input, got {X0.shape}")
        B, F, D = X0.shape
        out, prev = [], X0
        for W in self.weights:
            Z = T.einsum("bhd,bfd->bhfd", prev, X0)
            Z = T.reshape(Z, (B, prev.shape[1] * F, D))
            prev = T.einsum("bzd,zo->bod", Z, W)
            out.append(prev)
        return out


def cin_forward(X0: T.Tensor, stack: CinStack, per_layer: bool = False):
    """Sum-pooled CIN outputs, concatenated (length sum(H_k)) or per layer."""
    X0 = X0 if isinstance(X0, T.Tensor) else T.Tensor(X0)
    squeeze = X0.ndim == 2
    if squeeze:
        X0 = T.reshape(X0, (1,) + X0.shape)
    pooled = [T.tsum(X, axis=2) for X in stack.layers(X0)]
    if squeeze:
        pooled = [T.reshape(p, (p.shape[1],)) for p in pooled]
    if per_layer:
        return pooled
    return T.concat(pooled, axis=-1)


class StdfmModel:
    """Deep FM over three spatiotemporal fields predicting one reading kind."""

    def __init__(self, kind: str, n_static: int, day_len: int, p: int = 3, dim: int = 8,
                 cin_layers=(16, 16), hidden=(32, 32), seed: int = 0):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self.kind, self.p, self.dim, self.day_len = kind, p, dim, day_len
        self.n_static = n_static
        self.cin_layers, self.hidden = tuple(cin_layers), tuple(hidden)
        rng = np.random.default_rng(seed)
        self.v_static = init_param((n_static, dim), rng)
        self.v_dynamic = init_param((2 + p, dim), rng)
        self.e_tod = init_param((day_len, dim), rng)
        self.e_dow = init_param((7, dim), rng)
        self.cin = CinStack(N_FIELDS, cin_layers, rng)
        self.deep_w, self.deep_b = [], []
        prev = N_FIELDS * dim
        for h in hidden:
            self.deep_w.append(init_param((prev, h), rng))
            self.deep_b.append(zeros_param(h))
            prev = h
        head_in = sum(cin_layers) + prev + N_FIELDS * dim
        self.w_out = init_param((head_in, 1), rng)
        self.b_out = zeros_param(1)
        self.scaler: FeatureScaler | None = None
        self.clip_max: float | None = None
        self.trained = False
        self.history: list = []

    def parameters(self):
        return ([self.v_static, self.v_dynamic, self.e_tod, self.e_dow]
                + self.cin.parameters() + self.deep_w + self.deep_b + [self.w_out, self.b_out])

    def embed(self, x: FieldInputs) -> T.Tensor:
        es = T.matmul(T.Tensor(x.static), self.v_static)
        ed = T.matmul(T.Tensor(x.dynamic), self.v_dynamic)
        et = T.take_rows(self.e_tod, x.tod) + T.take_rows(self.e_dow, x.dow)
        return T.stack([es, ed, et], axis=1)

    def forward(self, x: FieldInputs) -> T.Tensor:
        X0 = self.embed(x)
        B = X0.shape[0]
        pooled = cin_forward(X0, self.cin)
        flat = T.reshape(X0, (B, N_FIELDS * self.dim))
        h = flat
        for W, b in zip(self.deep_w, self.deep_b):
            h = T.relu(T.matmul(h, W) + b)
        z = T.concat([pooled, h, flat], axis=1)
        return T.reshape(T.matmul(z, self.w_out) + self.b_out, (B,))

    # persistence ---------------------------------------------------------
    def state_arrays(self) -> dict:
        names = ["v_static", "v_dynamic", "e_tod", "e_dow"]
        arrays = {n: getattr(self, n).data for n in names}
        arrays.update({f"cin_{k}": w.data for k, w in enumerate(self.cin.weights)})
        arrays.update({f"deep_w{k}": w.data for k, w in enumerate(self.deep_w)})
        arrays.update({f"deep_b{k}": b.data for k, b in enumerate(self.deep_b)})
        arrays.update({"w_out": self.w_out.data, "b_out": self.b_out.data})
        if self.scaler is not None:
            arrays["static_scale"] = self.scaler.static_scale
        return arrays

    def meta(self) -> dict:
        return {"kind": self.kind, "p": self.p, "dim": self.dim, "day_len": self.day_len,
                "n_static": self.n_static, "cin_layers": list(self.cin_layers),
                "hidden": list(self.hidden), "trained": self.trained, "clip_max": self.clip_max,
                "mean": self.scaler.mean if self.scaler else None,
                "std": self.scaler.std if self.scaler else None}

    @classmethod
    def from_state(cls, arrays: dict, meta: dict) -> "StdfmModel":
        model = cls(meta["kind"], meta["n_static"], meta["day_len"], meta["p"], meta["dim"],
                    meta["cin_layers"], meta["hidden"])
        for name in ("v_static", "v_dynamic", "e_tod", "e_dow", "w_out", "b_out"):
            getattr(model, name).data[...] = arrays[name]
        for k, w in enumerate(model.cin.weights):
            w.data[...] = arrays[f"cin_{k}"]
        for k, (w, b) in enumerate(zip(model.deep_w, model.deep_b)):
            w.data[...] = arrays[f"deep_w{k}"]
            b.data[...] = arrays[f"deep_b{k}"]
        if meta.get("mean") is not None:
            model.scaler = FeatureScaler(arrays["static_scale"], meta["mean"], meta["std"])
        model.trained, model.clip_max = meta["trained"], meta["clip_max"]
        return model


def stdfm_predict(model: StdfmModel, x: FieldInputs) -> np.ndarray:
    """Predictions in the original units of the model's reading kind."""
    if not model.trained or model.scaler is None:
        raise StateError(f"{model.kind} model has not been trained")
    if len(x) == 0:
        return np.empty(0)
    out = []
    for lo in range(0, len(x), 4096):
        out.append(model.forward(x.take(slice(lo, lo + 4096))).data)
    return model.scaler.unz(model.kind, np.concatenate(out))


def _intersection_records(city: CityData, intervals):
    both = ~city.volume_mask & ~city.speed_mask
    times = [t for t in intervals if both[t].any()]
    return times, [np.flatnonzero(both[t]) for t in times]


def stdfm_train(city: CityData, order, kind: str, train_intervals, eval_intervals, *,
                p: int = 3, dim: int = 8, cin_layers=(16, 16), hidden=(32, 32),
                epochs: int = 12, batch_size: int = 256, lr: float = 3e-3,
                max_records: int = 40_000, patience: int = 3, drop_own: float = 0.1,
                seed: int = 0) -> StdfmModel:
    """Fit one model on records where speed and volume are both observed.

    Squared error with Adam; the epoch with the lowest eval error is kept.
    A ``drop_own`` fraction of training records hide their own other-kind
    reading so the model also serves doubly-missing records.
    """
    rng = np.random.default_rng(seed)
    scaler = FeatureScaler.fit(city, list(train_intervals))
    times, cells = _intersection_records(city, train_intervals)
    train_x, _ = build_feature_batch(city, order, kind, scaler, times, cells, p)
    if len(train_x) == 0:
        raise TrainingError("no record has both speed and volume observed")
    target = getattr(city, kind)
    train_y = scaler.z(kind, target[train_x.times, train_x.cells])
    if len(train_x) > max_records:
        keep = np.sort(rng.choice(len(train_x), max_records, replace=False))
        train_x, train_y = train_x.take(keep), train_y[keep]
    drop = rng.random(len(train_x)) < drop_own
    train_x.dynamic[drop, 0] = 0.0
    train_x.dynamic[drop, 1] = 1.0

    etimes, ecells = _intersection_records(city, eval_intervals)
    eval_x, _ = build_feature_batch(city, order, kind, scaler, etimes, ecells, p)
    if len(eval_x) > max_records // 4:
        keep = np.sort(rng.choice(len(eval_x), max_records // 4, replace=False))
        eval_x = eval_x.take(keep)
    eval_y = scaler.z(kind, target[eval_x.times, eval_x.cells]) if len(eval_x) else None

    model = StdfmModel(kind, city.static.shape[1], city.day_len, p, dim, cin_layers, hidden, seed)
    model.scaler = scaler
    observed = target[list(train_intervals)]
    model.clip_max = float(1.5 * np.nanmax(observed))
    opt = Adam(model.parameters(), lr=lr)
    best, best_state, stale = np.inf, None, 0
    n = len(train_x)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            pred = model.forward(train_x.take(idx))
            loss = T.mean(T.square(pred - train_y[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / n
        if eval_y is not None:
            eval_loss = float(np.mean((model.forward(eval_x).data - eval_y) ** 2))
        else:
            eval_loss = train_loss
        model.history.append({"epoch": epoch, "train": train_loss, "eval": eval_loss})
        log.info("stdfm[%s] epoch %d train %.4f eval %.4f", kind, epoch, train_loss, eval_loss)
        if eval_loss < best - 1e-9:
            best, stale = eval_loss, 0
            best_state = [w.data.copy() for w in model.parameters()]
        else:
            stale += 1
            if stale >= patience:
                break
    for w, saved in zip(model.parameters(), best_state):
        w.data[...] = saved
    model.trained = True
    return model


@dataclass
class FillReport:
    filled: dict = field(default_factory=lambda: {k: 0 for k in KINDS})
    unfillable: dict = field(default_factory=lambda: {k: 0 for k in KINDS})


def fill_missing(models: dict, city: CityData, order) -> tuple:
    """Return a copy of ``city`` with masked readings predicted and masks cleared.

    Observed readings are never touched. Records without enough observed
    neighbours stay masked and are counted in the report. Every prediction
    uses only originally observed readings.
    """
    out = city.copy()
    report = FillReport()
    for kind in KINDS:
        model = models[kind]
        if not model.trained:
            raise StateError(f"{kind} model has not been trained")
        mask = getattr(city, f"{kind}_mask")
        times = [t for t in range(city.n_intervals) if mask[t].any()]
        cells = [np.flatnonzero(mask[t]) for t in times]
        x, skipped = build_feature_batch(city, order, kind, model.scaler, times, cells, model.p)
        pred = np.clip(stdfm_predict(model, x), 0.0, model.clip_max)
        vals = getattr(out, kind)
        vals[x.times, x.cells] = pred
        getattr(out, f"{kind}_mask")[x.times, x.cells] = False
        report.filled[kind] = len(x)
        report.unfillable[kind] = skipped
        if skipped:
            log.warning("%d %s records could not be filled", skipped, kind)
    return out, report


def save_models(path, models: dict) -> None:
    arrays, meta = {}, {}
    for kind, model in models.items():
        arrays.update({f"{kind}/{k}": v for k, v in model.state_arrays().items()})
        meta[kind] = model.meta()
    checkpoint.save(path, "stdfm", arrays, meta)


def load_models(path) -> dict:
    arrays, meta = checkpoint.load(path, "stdfm")
    models = {}
    for kind, m in meta.items():
        sub = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(kind + "/")}
        models[kind] = StdfmModel.from_state(sub, m)
    return models
