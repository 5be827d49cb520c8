"""End-to-end training, prediction, evaluation and ablations."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, cosense, metrics
from . import data as D
from . import tensor as T
from .dtgn import BN_INFERENCE, TUPLE_WIDTH, AffinityBuilder, DtgnStack, ExternalEmbedder, dtgn_forward
from .errors import ConfigError, SamplingError
from .grid import AttentionWeights, static_affinity
from .multitask import LossWeights, MultitaskHeads, fuse, make_forecast, total_loss
from .optim import Adam

log = logging.getLogger(__name__)

ABLATIONS = ("no_pkde", "no_cosense", "static_affinity_only", "no_differential", "no_multitask")
SPLITS = ("train", "eval", "validation")
PERSPECTIVES = ("closeness", "period", "trend")


@dataclass
class RunConfig:
    seed: int | None = None
    manifest: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None
    interval_minutes: int = 30
    layers: int = 4
    width: int = 64
    kappa: int = 3
    gamma: float = 0.5
    rho: float = 0.1
    lambda1: float = 0.8
    lambda2: float = 1.0
    lambda3: float = 1e-4
    slope: float = 0.2
    bn_inference: str = "interval"
    lr: float = 3e-3
    epochs: int = 15
    batch_size: int = 16
    patience: int = 5
    M: int = 20
    ablate: tuple = ()
    acc1_hours: tuple = metrics.HIGH_FREQUENCY_HOURS
    split: str = "validation"
    cosense_epochs: int = 8
    cosense_p: int = 3

    def __post_init__(self):
        self.ablate = tuple(sorted(set(self.ablate or ())))
        self.acc1_hours = tuple(tuple(h) for h in self.acc1_hours)

    def validate(self, require_seed: bool = True) -> "RunConfig":
        if require_seed and not isinstance(self.seed, int):
            raise ConfigError("a seed is required")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; choose from {list(ABLATIONS)}")
        if self.interval_minutes not in (10, 30):
            raise ConfigError("interval_minutes must be 10 or 30")
        for name in ("layers", "width", "kappa", "epochs", "batch_size", "M", "cosense_p"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must lie in (0, 1]")
        for name in ("gamma", "lambda1", "lambda2", "lambda3", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.bn_inference not in BN_INFERENCE:
            raise ConfigError(f"bn_inference must be one of {BN_INFERENCE}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        for path in (self.manifest,):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{path} does not exist")
        return self

    def has(self, ablation: str) -> bool:
        return ablation in self.ablate

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablate"] = list(self.ablate)
        d["acc1_hours"] = [list(h) for h in self.acc1_hours]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("ablate"), str):
            d["ablate"] = [d["ablate"]]
        return cls(**d)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> RunConfig:
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# --- data preparation ----------------------------------------------------------

def earliest_target(day_len: int, kappa: int = 3) -> int:
    """First interval whose trend look-back still has a week of profile history."""
    return D.earliest_sample(day_len, kappa) + 7 * day_len


@dataclass
class Prepared:
    raw: D.CityData
    city: D.CityData                  # filled readings
    splits: dict                      # name -> target intervals
    units: np.ndarray                 # n x m x 5 united tuples
    risk_labels: np.ndarray
    vol_labels: np.ndarray
    count_labels: np.ndarray
    ext: dict
    stats: dict
    count_profile: np.ndarray         # day_len x q mean training rect counts
    frequency: np.ndarray             # m training accident counts
    enhanced: D.EnhancedLabels | None = None
    cosense_models: dict | None = None
    fill_report: object = None

    @property
    def day_len(self) -> int:
        return self.city.day_len


def target_splits(n_intervals: int, day_len: int, kappa: int = 3) -> dict:
    first = earliest_target(day_len, kappa)
    if n_intervals - first < 3:
        raise SamplingError(f"{n_intervals} intervals leave no targets; earliest usable interval is {first}",
                            earliest=first)
    targets = np.arange(first, n_intervals)
    parts = D.split(targets.size)
    return {name: targets[list(r)] for name, r in zip(SPLITS, parts)}


def _fill_with_means(city: D.CityData, train_end: int) -> D.CityData:
    out = city.copy()
    for kind in cosense.KINDS:
        vals = getattr(out, kind)
        mask = getattr(out, f"{kind}_mask")
        hist = vals[:train_end]
        overall = float(np.nanmean(hist))
        obs = np.isfinite(hist)
        counts = obs.sum(axis=0)
        cell_mean = np.where(counts > 0, np.nansum(hist, axis=0) / np.maximum(counts, 1), overall)
        vals[mask] = np.broadcast_to(cell_mean, vals.shape)[mask]
        mask[:] = False
    return out


def train_cosense(city: D.CityData, cfg: RunConfig, train_end: int, eval_end: int, order=None) -> dict:
    order = cosense.proximity_order(static_affinity(city.grid, city.static)) if order is None else order
    return {kind: cosense.stdfm_train(city, order, kind, range(0, train_end), range(train_end, eval_end),
                                      p=cfg.cosense_p, epochs=cfg.cosense_epochs, seed=cfg.seed)
            for kind in cosense.KINDS}


def prepare(city: D.CityData, cfg: RunConfig, cosense_models: dict | None = None) -> Prepared:
    """Fill readings, transform labels and scale inputs using training-period statistics only."""
    if city.interval_seconds != cfg.interval_minutes * 60:
        raise ConfigError(f"config says {cfg.interval_minutes}-minute intervals, "
                          f"data has {city.interval_seconds // 60}")
    day_len = city.day_len
    splits = target_splits(city.n_intervals, day_len, cfg.kappa)
    train_end = int(splits["train"][-1]) + 1
    eval_end = int(splits["eval"][-1]) + 1

    report = None
    if not city.has_missing:
        filled = city.copy()
    elif cfg.has("no_cosense"):
        filled = _fill_with_means(city, train_end)
    else:
        order = cosense.proximity_order(static_affinity(city.grid, city.static))
        if cosense_models is None:
            cosense_models = train_cosense(city, cfg, train_end, eval_end, order)
        filled, report = cosense.fill_missing(cosense_models, city, order)
        if filled.has_missing:
            # records without enough observed neighbours fall back to training means
            filled = _fill_with_means(filled, train_end)

    hist = slice(0, train_end)
    stats = {}
    for kind in cosense.KINDS:
        vals = getattr(filled, kind)[hist]
        stats[f"{kind}_mean"] = float(vals.mean())
        stats[f"{kind}_std"] = float(vals.std()) or 1.0
    stats["temp_mean"] = float(filled.temperature[hist].mean())
    stats["temp_std"] = float(filled.temperature[hist].std()) or 1.0
    stats["vol_max"] = float(filled.volume[hist].max()) or 1.0

    vz = (filled.volume - stats["volume_mean"]) / stats["volume_std"]
    sz = (filled.speed - stats["speed_mean"]) / stats["speed_std"]
    units = np.zeros((city.n_intervals, city.grid.m, TUPLE_WIDTH))
    units[:, :, 0], units[:, :, 1], units[:, :, 2] = vz, sz, city.risk
    if not cfg.has("no_differential"):
        units[1:, :, 3] = vz[1:] - vz[:-1]
        units[1:, :, 4] = sz[1:] - sz[:-1]

    enhanced = None
    if cfg.has("no_pkde"):
        risk_labels = city.risk.copy()
    else:
        train_risk = city.risk[hist]
        eps = D.risk_indicator(D.weekly_totals(train_risk, day_len))
        nz = train_risk[train_risk > 0]
        if nz.size == 0:
            raise SamplingError("no accident in the training period", earliest=None)
        enhanced = D.pkde_enhance(train_risk, eps, float(nz.min()), float(nz.max()))
        risk_labels = enhanced.apply(city.risk)
        stats.update({"pkde_b1": enhanced.b1, "pkde_b2": enhanced.b2,
                      "r_min": float(nz.min()), "r_max": float(nz.max())})

    rect = city.rect_counts()
    tod = np.asarray(city.interval_of_day(np.arange(city.n_intervals)), dtype=np.int64)
    dow = np.asarray(city.day_of_week(np.arange(city.n_intervals)), dtype=np.int64)
    profile = np.zeros((day_len, city.grid.q))
    for k in range(day_len):
        sel = tod[hist] == k
        if sel.any():
            profile[k] = rect[hist][sel].mean(axis=0)
    ext = {"tod": tod, "dow": dow, "weather": np.clip(city.weather, 0, 2).astype(np.int64),
           "temp": (filled.temperature - stats["temp_mean"]) / stats["temp_std"]}
    return Prepared(raw=city, city=filled, splits=splits, units=units, risk_labels=risk_labels,
                    vol_labels=filled.volume / stats["vol_max"], count_labels=rect, ext=ext,
                    stats=stats, count_profile=profile, frequency=city.accidents[hist].sum(axis=0),
                    enhanced=enhanced, cosense_models=cosense_models, fill_report=report)


# --- model ---------------------------------------------------------------------

class RiskOracleModel:
    """Affinity attention, three perspective stacks with their external embedders, and heads."""

    def __init__(self, cfg: RunConfig, prep: Prepared):
        rng = np.random.default_rng(cfg.seed)
        city = prep.city
        self.cfg = cfg
        self.attention = AttentionWeights(city.static.shape[1])
        self.builder = AffinityBuilder(city.grid, city.static, city.volume, city.speed, city.day_len,
                                       gamma=cfg.gamma, rho=cfg.rho,
                                       static_only=cfg.has("static_affinity_only"),
                                       attention=self.attention)
        n_in = TUPLE_WIDTH * cfg.kappa
        self.stacks = [DtgnStack(n_in, cfg.width, cfg.layers, slope=cfg.slope,
                                 bn_inference=cfg.bn_inference, seed=rng)
                       for _ in PERSPECTIVES]
        self.embedders = [ExternalEmbedder(city.day_len, rng=rng) for _ in PERSPECTIVES]
        self.heads = MultitaskHeads(3 * cfg.width, city.grid.m, city.grid.q, cfg.slope, seed=rng)
        tr = prep.splits["train"]
        self.heads.init_biases(float(prep.risk_labels[tr].mean()), float(prep.vol_labels[tr].mean()),
                               prep.count_labels[tr].mean(axis=0))
        self.count_pathway = not cfg.has("no_multitask")

    def parameters(self):
        ps = list(self.builder.parameters())
        for s, e in zip(self.stacks, self.embedders):
            ps += s.parameters() + e.parameters()
        return ps + self.heads.parameters()

    def weights(self):
        ws = []
        for s in self.stacks:
            ws += s.weights()
        return ws + self.heads.weights()

    def forward(self, prep: Prepared, targets, training: bool = False) -> dict:
        samples = [D.temporal_sample(int(t), prep.day_len, self.cfg.kappa) for t in targets]
        sets = np.array([s.perspectives() for s in samples])            # b x 3 x kappa
        L = self.builder.laplacians(sets, differentiable=training)
        targets = np.asarray(targets)
        maps = []
        for p, (stack, emb) in enumerate(zip(self.stacks, self.embedders)):
            idx = sets[:, p, :]                                          # b x kappa
            H0 = prep.units[idx]                                         # b x kappa x m x 5
            H0 = np.transpose(H0, (0, 2, 1, 3)).reshape(len(targets), prep.city.grid.m, -1)
            e = emb(prep.ext["tod"][targets], prep.ext["dow"][targets],
                    prep.ext["weather"][targets], prep.ext["temp"][targets])
            Lp = T.getitem(L, (slice(None), p))
            maps.append(dtgn_forward(stack, H0, Lp, e, training))
        return self.heads(fuse(*maps), count_pathway=self.count_pathway)

    # persistence -------------------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = {"attention": self.attention.scores.data}
        for name, s, e in zip(PERSPECTIVES, self.stacks, self.embedders):
            arrays.update(s.state_arrays(f"{name}/"))
            for k in ("tod", "dow", "weather", "temp"):
                arrays[f"{name}/ext_{k}"] = getattr(e, k).data
        arrays.update(self.heads.state_arrays("heads/"))
        return arrays

    def load_arrays(self, arrays: dict) -> None:
        self.attention.scores.data[...] = arrays["attention"]
        for name, s, e in zip(PERSPECTIVES, self.stacks, self.embedders):
            s.load_arrays(f"{name}/", arrays)
            for k in ("tod", "dow", "weather", "temp"):
                getattr(e, k).data[...] = arrays[f"{name}/ext_{k}"]
        self.heads.load_arrays(arrays, "heads/")


def loss_weights(cfg: RunConfig) -> LossWeights:
    if cfg.has("no_multitask"):
        return LossWeights(0.0, 0.0, cfg.lambda3)
    return LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3)


def batch_labels(prep: Prepared, targets) -> dict:
    return {"risk": prep.risk_labels[targets], "vol": prep.vol_labels[targets],
            "count": prep.count_labels[targets]}


def _batches(targets, size):
    for lo in range(0, len(targets), size):
        yield targets[lo:lo + size]


def evaluate_loss(model: RiskOracleModel, prep: Prepared, targets, batch_size: int = 32) -> float:
    lam = loss_weights(model.cfg)
    total = 0.0
    for chunk in _batches(targets, batch_size):
        out = model.forward(prep, chunk, training=False)
        loss, _ = total_loss(out, batch_labels(prep, chunk), lam, model.weights())
        total += loss.item() * len(chunk)
    return total / len(targets)


@dataclass
class TrainResult:
    model: RiskOracleModel
    prep: Prepared
    history: list = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0


def _snapshot(model):
    arrays = model.state_arrays()
    return {k: np.array(v, copy=True) for k, v in arrays.items()}


def train(cfg: RunConfig, city: D.CityData, prep: Prepared | None = None,
          cosense_models: dict | None = None) -> TrainResult:
    """Chronological minibatch passes over the training targets; keeps the best-eval epoch."""
    cfg.validate()
    start = time.perf_counter()
    prep = prep if prep is not None else prepare(city, cfg, cosense_models)
    model = RiskOracleModel(cfg, prep)
    opt = Adam(model.parameters(), lr=cfg.lr)
    lam = loss_weights(cfg)
    best, best_state, best_epoch, stale = np.inf, None, 0, 0
    history = []
    train_targets = prep.splits["train"]
    for epoch in range(cfg.epochs):
        running, terms_sum = 0.0, {}
        for chunk in _batches(train_targets, cfg.batch_size):
            out = model.forward(prep, chunk, training=True)
            loss, terms = total_loss(out, batch_labels(prep, chunk), lam, model.weights())
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(chunk)
            for k, v in terms.items():
                terms_sum[k] = terms_sum.get(k, 0.0) + v * len(chunk)
        train_loss = running / len(train_targets)
        eval_loss = evaluate_loss(model, prep, prep.splits["eval"])
        history.append({"epoch": epoch, "train_loss": train_loss, "eval_loss": eval_loss,
                        **{f"train_{k}": v / len(train_targets) for k, v in terms_sum.items()}})
        log.info("epoch %d train %.4f eval %.4f", epoch, train_loss, eval_loss)
        if eval_loss < best:
            best, best_state, best_epoch, stale = eval_loss, _snapshot(model), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_arrays(best_state)
    return TrainResult(model, prep, history, best_epoch, time.perf_counter() - start)


# --- prediction and evaluation --------------------------------------------------------

def predict(model: RiskOracleModel, prep: Prepared, targets, batch_size: int = 32) -> list:
    grid = prep.city.grid
    forecasts = []
    for chunk in _batches(np.asarray(targets), batch_size):
        out = model.forward(prep, chunk, training=False)
        risk, vol, count = out["risk_star"].data, out["vol"].data, out["count"].data
        for b, t in enumerate(chunk):
            if model.count_pathway:
                k = None
            else:
                k = np.floor(prep.count_profile[prep.ext["tod"][t]] + 0.5).astype(np.int64)
                k = np.minimum(k, grid.rect_sizes)
            forecasts.append(make_forecast(int(t), risk[b], vol[b] * prep.stats["vol_max"],
                                           count[b], grid, k))
    return forecasts


def frequency_baseline(prep: Prepared, targets, Ks, M: int) -> dict:
    """Rank cells by training-period accident counts; top-K_t per interval and top-M."""
    freq = prep.frequency
    order = np.lexsort((np.arange(freq.size), -freq))
    actual = metrics.actual_cells(prep.raw.accidents[targets])
    at_k = [None if K == 0 else metrics.hit_rate(order[:K], a) for K, a in zip(Ks, actual)]
    at_m = [metrics.hit_rate(order[:M], a) for a in actual]
    return {"acc_at_K": metrics._mean(at_k), "acc_at_M": metrics._mean(at_m)}


def evaluate(forecasts, prep: Prepared, cfg: RunConfig) -> dict:
    targets = np.array([f.interval for f in forecasts])
    actual = metrics.actual_cells(prep.raw.accidents[targets])
    risk = np.array([f.risk for f in forecasts])
    acc_m, rates_m = metrics.acc_at_m(risk, actual, cfg.M, per_interval=True)
    acc_k, rates_k = metrics.acc_at_k(forecasts, actual, per_interval=True)
    tod = prep.ext["tod"][targets]
    sec = prep.city.interval_seconds
    Ks = [f.K for f in forecasts]
    report = {
        "split": cfg.split,
        "ablate": list(cfg.ablate),
        "seed": cfg.seed,
        "n_intervals": int(targets.size),
        "M": cfg.M,
        "acc_at_M": acc_m,
        "acc_at_K": acc_k,
        "acc1_at_M": metrics.acc1(rates_m, tod, sec, cfg.acc1_hours),
        "acc1_at_K": metrics.acc1(rates_k, tod, sec, cfg.acc1_hours),
        "mse_transformed": metrics.mse_transformed(risk, prep.risk_labels[targets]),
        "mse_raw": metrics.mse_raw(risk, prep.raw.risk[targets]),
        "mean_K": float(np.mean(Ks)),
        "baseline": frequency_baseline(prep, targets, Ks, cfg.M),
        "per_interval": [{"interval": int(t), "K": k, "acc_at_M": a, "acc_at_K": b}
                         for t, k, a, b in zip(targets, Ks, rates_m, rates_k)],
    }
    return report


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult) -> None:
    model, prep = result.model, result.prep
    arrays = model.state_arrays()
    if prep.cosense_models:
        for kind, m in prep.cosense_models.items():
            arrays.update({f"cosense/{kind}/{k}": v for k, v in m.state_arrays().items()})
    meta = {"config": model.cfg.to_dict(), "history": result.history, "best_epoch": result.best_epoch,
            "stats": prep.stats,
            "cosense": {k: m.meta() for k, m in (prep.cosense_models or {}).items()}}
    checkpoint.save(path, "riskoracle-model", arrays, meta)


def load_checkpoint(path, city: D.CityData) -> TrainResult:
    arrays, meta = checkpoint.load(path, "riskoracle-model")
    cfg = RunConfig.from_dict(meta["config"])
    models = None
    if meta.get("cosense"):
        models = {}
        for kind, m in meta["cosense"].items():
            pre = f"cosense/{kind}/"
            models[kind] = cosense.StdfmModel.from_state(
                {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}, m)
    prep = prepare(city, cfg, models)
    model = RiskOracleModel(cfg, prep)
    model.load_arrays(arrays)
    return TrainResult(model, prep, meta["history"], meta["best_epoch"])


# --- orchestration ---------------------------------------------------------------

def run(cfg: RunConfig, city: D.CityData, out_dir=None, cosense_models=None) -> tuple:
    """Train, predict on ``cfg.split`` and evaluate; optionally write all artefacts."""
    result = train(cfg, city, cosense_models=cosense_models)
    targets = result.prep.splits[cfg.split]
    forecasts = predict(result.model, result.prep, targets)
    report = evaluate(forecasts, result.prep, cfg)
    out_dir = out_dir or cfg.out_dir
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.json", result)
        metrics.write_metrics(out / "metrics.json", report)
        metrics.write_forecasts(out / "forecasts.jsonl", forecasts)
        metrics.export_heatmap(forecasts[-1], city.grid, out / "heatmap")
    return report, result, forecasts


def ablate(cfg: RunConfig, city: D.CityData, names=ABLATIONS[:1] + ABLATIONS[2:], out_dir=None) -> dict:
    """Full model plus one run per single ablation; co-sensing is fitted once and shared."""
    prep_models = None
    if city.has_missing:
        splits = target_splits(city.n_intervals, city.day_len, cfg.kappa)
        prep_models = train_cosense(city, cfg, int(splits["train"][-1]) + 1, int(splits["eval"][-1]) + 1)
    reports = {}
    for name in ("full",) + tuple(names):
        sub = cfg.replace(ablate=() if name == "full" else (name,))
        sub_out = Path(out_dir) / name if out_dir else None
        reports[name], _, _ = run(sub, city, sub_out, prep_models)
    if out_dir:
        summary = {k: {"acc_at_K": r["acc_at_K"], "acc_at_M": r["acc_at_M"],
                       "mse_transformed": r["mse_transformed"]} for k, r in reports.items()}
        metrics.write_metrics(Path(out_dir) / "ablation.json", summary)
    return reports
