"""Experiment drivers behind the command-line interface.

Each experiment has a frozen config dataclass and a per-seed function that
returns a :class:`SeedRun`: rows for the experiment's CSV tables plus a dict
of scalar metrics.  :func:`run_experiment` runs the seeds (optionally in
parallel, merged in seed order) and aggregates every metric into its mean
and sample standard deviation.
"""

import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import cca, data, dropout, kernel_warp, lstm
from .errors import ConfigError
from .rng import substream

__all__ = [
    "CONFIGS",
    "DropoutSimConfig",
    "ExperimentResult",
    "GccaCheckConfig",
    "ProxCcaConfig",
    "ProxLstmConfig",
    "SeedRun",
    "TABLES",
    "TwomoonConfig",
    "config_from_mapping",
    "run_experiment",
]

DEFAULT_SEEDS = (1, 2, 3, 4, 5)


def _seeds():
    return field(default=DEFAULT_SEEDS)


@dataclass(frozen=True)
class TwomoonConfig:
    n: int = 200
    noise: float = 0.08
    landmarks: int = 100
    lam: float = 1e-4
    seeds: tuple = _seeds()


@dataclass(frozen=True)
class DropoutSimConfig:
    """``c_reg = c_coef * lam**2 * mu`` is the ridge weight of the prox pipeline."""

    lam: float = 0.5
    mu: float = 0.1
    c_coef: float = 0.2
    n: int = 200
    noise: float = 0.08
    seeds: tuple = _seeds()


@dataclass(frozen=True)
class ProxCcaConfig:
    n_train: int = 400
    n_test: int = 200
    d_latent: int = 4
    d_obs: int = 10
    noise_x: float = 1.0
    noise_y: float = 1.0
    classes: int = 4
    separation: float = 4.0
    hidden: int = 20
    k: int = 2
    eps: float = 1e-4
    k_sched: float = 0.5
    alpha0: float = 0.1
    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-2
    weight_decay: float = 1e-4
    use_prox: bool = True
    seeds: tuple = _seeds()


@dataclass(frozen=True)
class ProxLstmConfig:
    n: int = 1000
    length: int = 30
    vocab: int = 2
    corruption: float = 0.5
    train_fraction: float = 0.8
    hidden: int = 16
    lam: float = 1.0
    delta: float = 1.0
    vanilla_epochs: int = 30
    prox_epochs: int = 10
    batch_size: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-4
    plateau_tol: float = 1e-5
    plateau_window: int = 10
    seeds: tuple = _seeds()


@dataclass(frozen=True)
class GccaCheckConfig:
    """Each seed draws ``trials`` problems with ``views`` views of ``n``
    samples sharing a ``latent``-dimensional signal; view ``j`` has
    ``2 + j % 3`` columns."""

    views: int = 3
    trials: int = 4
    n: int = 12
    latent: int = 2
    r: int = 2
    noise: float = 0.5
    starts: int = 5
    seeds: tuple = _seeds()


CONFIGS = {
    "twomoon": TwomoonConfig,
    "dropout-sim": DropoutSimConfig,
    "proxcca-train": ProxCcaConfig,
    "proxlstm-train": ProxLstmConfig,
    "gcca-check": GccaCheckConfig,
}

# file name -> column names, per experiment
TABLES = {
    "twomoon": {
        "embedding.csv": ("seed", "index", "x1", "x2", "label", "labeled", "warped_1", "warped_2",
                          "warped_prediction", "unwarped_prediction"),
    },
    "dropout-sim": {
        "scatter.csv": ("seed", "index", "label", "rrm_discriminant", "prox_discriminant"),
    },
    "proxcca-train": {
        "epochs.csv": ("seed", "epoch", "lambda", "loss", "train_accuracy", "test_accuracy", "correlation"),
    },
    "proxlstm-train": {
        "epochs.csv": ("seed", "phase", "epoch", "loss", "train_accuracy", "test_accuracy"),
    },
    "gcca-check": {
        "trials.csv": ("seed", "trial", "objective", "oracle_objective", "gap", "orthogonality_error"),
    },
}  # fmt: skip


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

_POSITIVE = {
    "n", "landmarks", "lam", "n_train", "n_test", "d_latent", "d_obs", "classes", "separation",
    "hidden", "k", "eps", "alpha0", "epochs", "batch_size", "lr", "length", "vocab",
    "vanilla_epochs", "plateau_window", "views", "trials", "latent", "r", "starts", "c_coef",
}  # fmt: skip


def _coerce(name, kind, value):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ConfigError(f"{name} must be a finite number, got {value!r}")
        return float(value)
    if kind is tuple:  # seeds
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{name} must be a non-empty list of integers, got {value!r}")
        out = tuple(_coerce(name, int, v) for v in value)
        if any(v < 0 or v >= 2**64 for v in out):
            raise ConfigError(f"{name} must lie in [0, 2**64), got {list(out)}")
        if len(set(out)) != len(out):
            raise ConfigError(f"{name} contains duplicates: {list(out)}")
        return out
    raise TypeError(f"unsupported config field type {kind}")


def config_from_mapping(experiment, mapping):
    """Build the config for ``experiment`` from a dict.  Unknown keys, wrong
    types and out-of-range values raise ``ConfigError``; missing keys take
    their defaults."""
    try:
        cls = CONFIGS[experiment]
    except KeyError:
        raise ConfigError(f"unknown experiment {experiment!r}") from None
    if not isinstance(mapping, dict):
        raise ConfigError("config must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(mapping) - set(names))
    if unknown:
        raise ConfigError(f"unknown config keys for {experiment}: {', '.join(unknown)}")
    values = {k: _coerce(k, hints[k], v) for k, v in mapping.items()}
    cfg = cls(**values)
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg):
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _POSITIVE and not v > 0:
            raise ConfigError(f"{f.name} must be positive, got {v}")
        if f.name in ("noise", "noise_x", "noise_y", "corruption", "k_sched", "weight_decay", "mu", "delta",
                      "plateau_tol", "prox_epochs") and v < 0:  # fmt: skip
            raise ConfigError(f"{f.name} must be non-negative, got {v}")
    if isinstance(cfg, ProxCcaConfig):
        if cfg.k > cfg.hidden:
            raise ConfigError(f"k={cfg.k} exceeds hidden={cfg.hidden}")
        if cfg.d_latent < cfg.classes:
            raise ConfigError(f"d_latent={cfg.d_latent} must be at least classes={cfg.classes}")
        if cfg.batch_size <= cfg.hidden:
            raise ConfigError(f"batch_size={cfg.batch_size} must exceed hidden={cfg.hidden}")
    if isinstance(cfg, ProxLstmConfig):
        if not 0 < cfg.train_fraction < 1:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {cfg.train_fraction}")
        if cfg.vocab < 2:
            raise ConfigError(f"vocab must be at least 2, got {cfg.vocab}")
    if isinstance(cfg, (TwomoonConfig, DropoutSimConfig)) and cfg.n < 10:
        raise ConfigError(f"n must be at least 10, got {cfg.n}")
    if isinstance(cfg, TwomoonConfig) and cfg.landmarks > cfg.n:
        raise ConfigError(f"cannot draw {cfg.landmarks} landmarks from {cfg.n} points")


# ---------------------------------------------------------------------------
# Per-seed drivers
# ---------------------------------------------------------------------------


class SeedRun(NamedTuple):
    seed: int
    tables: dict  # file name -> list of row tuples
    metrics: dict  # metric name -> float
    seconds: float


def _nearest_labeled(emb, labeled, labels):
    dist = np.linalg.norm(emb[:, None, :] - emb[labeled][None, :, :], axis=2)
    return labels[labeled][np.argmin(dist, axis=1)]


def _twomoon(cfg, seed):
    moons = data.gen_twomoon(cfg.n, cfg.noise, seed)
    nmap = kernel_warp.NystromMap.from_data(moons.x, cfg.landmarks, substream(seed, 1))
    phi = kernel_warp.nystrom_embed(nmap, moons.x)
    reps = kernel_warp.gradient_representers(nmap, moons.x)
    warped = kernel_warp.warp_prox(reps, phi, lam=cfg.lam)
    pred_w = _nearest_labeled(warped, moons.labeled, moons.y)
    pred_u = _nearest_labeled(phi, moons.labeled, moons.y)
    coords = kernel_warp.kpca_top2(warped)
    flags = np.zeros(cfg.n, dtype=np.int64)
    flags[moons.labeled] = 1
    rows = [
        (seed, i, *moons.x[i], int(moons.y[i]), int(flags[i]), *coords[i], int(pred_w[i]), int(pred_u[i]))
        for i in range(cfg.n)
    ]
    metrics = {
        "warped_accuracy": float(np.mean(pred_w == moons.y)),
        "unwarped_accuracy": float(np.mean(pred_u == moons.y)),
    }
    return {"embedding.csv": rows}, metrics


def _dropout_sim(cfg, seed):
    moons = data.gen_twomoon(cfg.n, cfg.noise, seed)
    x = moons.x - moons.x.mean(axis=0)
    y = np.where(moons.y == 1, 1.0, -1.0)
    beta = dropout.rrm_dropout_train(x, y, cfg.mu)
    prox_cfg = dropout.DropoutProxConfig(lam=cfg.lam)
    alpha, outputs = dropout.prox_pipeline_train(x, y, prox_cfg, cfg.c_coef * cfg.lam**2 * cfg.mu)
    pairs, r = dropout.compare_discriminants(x, beta, alpha, outputs=outputs)
    rows = [(seed, i, int(y[i]), pairs[i, 0], pairs[i, 1]) for i in range(cfg.n)]
    return {"scatter.csv": rows}, {"pearson_r": r}


def _proxcca(cfg, seed):
    mv = data.gen_synthetic_multiview(
        cfg.n_train + cfg.n_test, cfg.d_latent, cfg.d_obs, cfg.noise_x, cfg.noise_y, cfg.classes, seed,
        separation=cfg.separation,
    )  # fmt: skip
    tr = slice(0, cfg.n_train)
    te = slice(cfg.n_train, None)
    rng = substream(seed, 2)
    model = cca.TwoTower.init(cfg.d_obs, cfg.d_obs, cfg.hidden, cfg.classes, rng)
    layer = cca.CcaProxLayer(k=cfg.k, eps=cfg.eps, k_sched=cfg.k_sched, alpha0=cfg.alpha0)
    train_cfg = cca.MultiviewTrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, weight_decay=cfg.weight_decay,
        use_prox=cfg.use_prox,
    )  # fmt: skip
    records, _ = cca.train_multiview(
        model, layer, train_cfg, (mv.x[tr], mv.y[tr], mv.labels[tr]), (mv.x[te], mv.y[te], mv.labels[te]), rng
    )
    rows = [(seed, *r) for r in records]
    last = records[-1]
    metrics = {"test_accuracy": last.test_accuracy, "train_accuracy": last.train_accuracy,
               "correlation": last.correlation}  # fmt: skip
    return {"epochs.csv": rows}, metrics


def _proxlstm(cfg, seed):
    seqs = data.gen_sequences(cfg.n, cfg.length, cfg.vocab, cfg.corruption, seed)
    cut = int(round(cfg.train_fraction * cfg.n))
    if not 0 < cut < cfg.n:
        raise ConfigError(f"train_fraction {cfg.train_fraction} leaves an empty split for n={cfg.n}")
    train_cfg = lstm.TrainConfig(
        hidden=cfg.hidden, lam=cfg.lam, delta=cfg.delta, vanilla_epochs=cfg.vanilla_epochs,
        prox_epochs=cfg.prox_epochs, batch_size=cfg.batch_size, lr=cfg.lr, weight_decay=cfg.weight_decay,
        plateau_tol=cfg.plateau_tol, plateau_window=cfg.plateau_window,
    )  # fmt: skip
    test = (seqs.x[cut:], seqs.y[cut:])
    log, models = lstm.train_sequence_classifier(
        train_cfg, (seqs.x[:cut], seqs.y[:cut]), test, cfg.vocab, substream(seed, 1)
    )
    rows = [(seed, *r) for r in log]
    vanilla = lstm.accuracy(models["vanilla"], *test, 0.0)
    prox = lstm.accuracy(models["prox"], *test, train_cfg.rho)
    metrics = {
        "vanilla_test_accuracy": vanilla,
        "prox_test_accuracy": prox,
        "prox_minus_vanilla": prox - vanilla,
        "warmup_epochs": float(sum(r.phase == "warmup" for r in log)),
    }
    return {"epochs.csv": rows}, metrics


def _gcca_problem(cfg, rng):
    shared = rng.standard_normal((cfg.n, cfg.latent))
    views = []
    for j in range(cfg.views):
        dim = 2 + j % 3
        views.append(shared @ rng.standard_normal((cfg.latent, dim)) + cfg.noise * rng.standard_normal((cfg.n, dim)))
    return views


def _gcca(cfg, seed):
    rng = substream(seed, 0)
    rows = []
    for trial in range(cfg.trials):
        views = _gcca_problem(cfg, rng)
        res = cca.gcca_solve(views, cfg.r)
        oracle = min(cca.gcca_alternating(views, cfg.r, rng).objective for _ in range(cfg.starts))
        ortho = float(np.abs(res.g.T @ res.g - np.eye(cfg.r)).max())
        rows.append((seed, trial, res.objective, oracle, res.objective - oracle, ortho))
    arr = np.array([r[2:] for r in rows])
    metrics = {"max_gap": float(arr[:, 2].max()), "max_orthogonality_error": float(arr[:, 3].max())}
    return {"trials.csv": rows}, metrics


_DRIVERS = {
    "twomoon": _twomoon,
    "dropout-sim": _dropout_sim,
    "proxcca-train": _proxcca,
    "proxlstm-train": _proxlstm,
    "gcca-check": _gcca,
}


def _run_seed(experiment, cfg, seed):
    start = time.perf_counter()
    tables, metrics = _DRIVERS[experiment](cfg, seed)
    return SeedRun(seed, tables, metrics, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    experiment: str
    config: object
    runs: list

    def table(self, name):
        """Rows of ``name`` over all seeds, in seed order."""
        return [row for run in self.runs for row in run.tables[name]]

    def aggregate(self):
        """Per metric: mean and sample standard deviation over seeds (``None``
        for a single seed)."""
        out = {}
        for key in self.runs[0].metrics:
            vals = np.array([run.metrics[key] for run in self.runs], dtype=np.float64)
            std = float(np.std(vals, ddof=1)) if vals.size > 1 else None
            out[key] = {"mean": float(vals.mean()), "std": std}
        return out

    def summary(self):
        metrics = {
            "per_seed": [{"seed": run.seed, **run.metrics} for run in self.runs],
            "aggregate": self.aggregate(),
        }
        if self.experiment == "proxlstm-train":
            metrics["prox_at_least_vanilla"] = sum(
                run.metrics["prox_test_accuracy"] >= run.metrics["vanilla_test_accuracy"] for run in self.runs
            )
        cfg = asdict(self.config)
        cfg["seeds"] = list(cfg["seeds"])
        return {
            "experiment": self.experiment,
            "seeds": [run.seed for run in self.runs],
            "metrics": metrics,
            "config": cfg,
        }


def run_experiment(experiment, cfg, jobs=1):
    """Run every seed of ``cfg``; with ``jobs > 1`` seeds run in separate
    processes and are merged in seed order."""
    if experiment not in _DRIVERS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    seeds = sorted(cfg.seeds)
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_seed, [experiment] * len(seeds), [cfg] * len(seeds), seeds))
    else:
        runs = [_run_seed(experiment, cfg, s) for s in seeds]
    return ExperimentResult(experiment, cfg, runs)
