"""Sequential model-based hyperparameter search.

The first trials come from a Latin hypercube design; afterwards a Gaussian
process is fitted to every completed trial and the next configuration is the
candidate with the highest expected improvement. All modelling happens in the
unit cube: each hyperparameter is mapped to ``[0, 1]`` by its linear or log
scale, and the discrete mini-batch size by equal-width bins over its choices.
"""

from __future__ import annotations

import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.stats import norm, qmc

from .masac import SacHyperparams

TUNED = ("gamma", "a_l", "c_l", "batch_n", "kappa")


@dataclass(frozen=True)
class Dimension:
    name: str
    lo: float = 0.0
    hi: float = 1.0
    log: bool = False
    choices: tuple | None = None

    def __post_init__(self):
        if self.choices is not None:
            if not self.choices:
                raise ValueError(f"{self.name}: empty choice set")
            object.__setattr__(self, "choices", tuple(sorted(self.choices)))
        else:
            if not self.lo < self.hi:
                raise ValueError(f"{self.name}: need lo < hi")
            if self.log and self.lo <= 0:
                raise ValueError(f"{self.name}: log scale needs a positive range")

    def decode(self, z: float):
        z = min(max(float(z), 0.0), 1.0)
        if self.choices is not None:
            k = min(int(z * len(self.choices)), len(self.choices) - 1)
            return self.choices[k]
        if self.log:
            return float(math.exp(math.log(self.lo) + z * (math.log(self.hi) - math.log(self.lo))))
        return float(self.lo + z * (self.hi - self.lo))

    def encode(self, value) -> float:
        if self.choices is not None:
            k = int(np.argmin([abs(math.log(c) - math.log(value)) if c > 0 and value > 0
                               else abs(c - value) for c in self.choices]))
            return (k + 0.5) / len(self.choices)
        if self.log:
            return (math.log(value) - math.log(self.lo)) / (math.log(self.hi) - math.log(self.lo))
        return (value - self.lo) / (self.hi - self.lo)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    @property
    def size(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    def decode(self, z) -> dict:
        return {d.name: d.decode(v) for d, v in zip(self.dims, z)}

    def encode(self, values: dict) -> np.ndarray:
        return np.array([d.encode(values[d.name]) for d in self.dims])

    def to_dict(self) -> dict:
        return {d.name: ({"choices": list(d.choices)} if d.choices is not None
                         else {"lo": d.lo, "hi": d.hi, "log": d.log}) for d in self.dims}

    @classmethod
    def from_dict(cls, spec: dict) -> "SearchSpace":
        dims = []
        for name, s in spec.items():
            if "choices" in s:
                dims.append(Dimension(name, choices=tuple(s["choices"])))
            else:
                dims.append(Dimension(name, float(s["lo"]), float(s["hi"]), bool(s.get("log", False))))
        return cls(tuple(dims))


def default_space() -> SearchSpace:
    return SearchSpace((
        Dimension("gamma", 0.80, 0.99),
        Dimension("a_l", 1e-5, 1e-2, log=True),
        Dimension("c_l", 1e-5, 1e-2, log=True),
        Dimension("batch_n", choices=(64, 128, 256, 512, 1024)),
        Dimension("kappa", 0.01, 0.5),
    ))


def bootstrap_count(D: int, U: int) -> int:
    """Number of bootstrap combinations ``(D!)^(U-1)``, saturating at ``sys.maxsize``."""
    if D < 1 or U < 1:
        raise ValueError("need D >= 1 and U >= 1")
    if (U - 1) * math.lgamma(D + 1) > math.log(sys.maxsize):
        return sys.maxsize
    return min(math.factorial(D) ** (U - 1), sys.maxsize)


def lhs_unit(n_dims: int, D: int, seed) -> np.ndarray:
    """``D`` points in the unit cube, one per stratum ``[k/D, (k+1)/D)`` in every dimension."""
    if D < 1:
        raise ValueError("need at least one interval")
    return qmc.LatinHypercube(d=n_dims, seed=np.random.default_rng(seed)).random(D)


def lhs_sample(space: SearchSpace, D: int, seed) -> list[dict]:
    return [space.decode(z) for z in lhs_unit(space.size, D, seed)]


# --- Gaussian process --------------------------------------------------------

LENGTH_GRID = (0.05, 0.1, 0.15, 0.2, 0.3, 0.45, 0.7, 1.0, 1.5, 2.5)
NOISE_GRID = (1e-6, 1e-4, 1e-3, 1e-2, 1e-1)


def matern52(a: np.ndarray, b: np.ndarray, length: float) -> np.ndarray:
    d = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0)) / length
    s5 = math.sqrt(5.0) * d
    return (1.0 + s5 + 5.0 / 3.0 * d * d) * np.exp(-s5)


@dataclass
class GpModel:
    """Zero-mean GP on standardised targets with a Matern-5/2 kernel."""

    x: np.ndarray
    y: np.ndarray
    length: float
    signal_var: float
    noise_var: float
    y_mean: float
    y_std: float
    chol: tuple = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    log_marginal: float = 0.0

    @property
    def best_observed(self) -> float:
        return float(np.max(self.y))

    def predict(self, xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function, in objective units."""
        xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
        ks = self.signal_var * matern52(xq, self.x, self.length)
        mean = ks @ self.alpha
        v = linalg.cho_solve(self.chol, ks.T)
        var = np.maximum(self.signal_var - np.sum(ks * v.T, axis=1), 0.0)
        return self.y_mean + self.y_std * mean, var * self.y_std ** 2


class DegenerateDesign(ValueError):
    pass


def gp_fit(x, y, length_grid=LENGTH_GRID, noise_grid=NOISE_GRID) -> GpModel:
    """Fit by maximising the marginal likelihood over a (length, noise) grid.

    The signal variance is profiled out in closed form for each grid point;
    ``noise_grid`` is relative to that signal variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        raise ValueError("need at least two observations")
    if np.ptp(x, axis=0).max() == 0.0:
        raise DegenerateDesign("all training inputs are identical")
    y_mean = float(np.mean(y))
    y_std = float(np.std(y)) or 1.0
    ys = (y - y_mean) / y_std
    n = len(ys)
    best = None
    for length in length_grid:
        corr = matern52(x, x, length)
        for r in noise_grid:
            try:
                chol = linalg.cho_factor(corr + r * np.eye(n), lower=True)
            except linalg.LinAlgError:
                continue
            a = linalg.cho_solve(chol, ys)
            s2 = max(float(ys @ a) / n, 1e-12)
            logdet = 2.0 * np.sum(np.log(np.diag(chol[0]))) + n * math.log(s2)
            lml = -0.5 * n - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)
            if best is None or lml > best[0]:
                best = (lml, length, r, s2)
    if best is None:
        raise DegenerateDesign("covariance factorisation failed for every grid point")
    lml, length, r, s2 = best
    chol = linalg.cho_factor(s2 * (matern52(x, x, length) + r * np.eye(n)), lower=True)
    alpha = linalg.cho_solve(chol, ys)
    return GpModel(x=x, y=y, length=length, signal_var=s2, noise_var=r * s2, y_mean=y_mean,
                   y_std=y_std, chol=chol, alpha=alpha, log_marginal=lml)


def gp_fit_records(records, space: SearchSpace, **kw) -> GpModel:
    done = [r for r in records if r.status == "completed"]
    x = np.array([space.encode(r.hyperparams) for r in done])
    y = np.array([r.objective for r in done])
    return gp_fit(x, y, **kw)


def expected_improvement(mean, var, best: float, xi: float = 0.0) -> np.ndarray:
    """EI for maximisation; with zero variance it reduces to ``max(mean - best, 0)``."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.asarray(var, dtype=np.float64))
    imp = mean - best - xi
    out = np.maximum(imp, 0.0)
    pos = sd > 1e-12
    z = imp[pos] / sd[pos]
    out[pos] = imp[pos] * norm.cdf(z) + sd[pos] * norm.pdf(z)
    return out


def propose_next_unit(model: GpModel, n_dims: int, n_candidates: int, seed) -> np.ndarray:
    cands = lhs_unit(n_dims, n_candidates, seed)
    mean, var = model.predict(cands)
    ei = expected_improvement(mean, var, model.best_observed)
    return cands[int(np.argmax(ei))]


def propose_next(model: GpModel, space: SearchSpace, n_candidates: int = 2000, seed=0) -> dict:
    """Decoded argmax of expected improvement over a fresh Latin hypercube of candidates."""
    return space.decode(propose_next_unit(model, space.size, n_candidates, seed))


# --- trials ------------------------------------------------------------------

@dataclass
class TrialRecord:
    trial_id: int
    hyperparams: dict
    objective: float | None
    seed: int
    wall_time_s: float
    status: str
    source: str = "lhs"
    error: str = ""

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "hyperparams": self.hyperparams,
                "objective": self.objective, "seed": self.seed,
                "wall_time_s": self.wall_time_s, "status": self.status,
                "source": self.source, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(**d)


@dataclass
class TuningResult:
    records: list[TrialRecord]
    best: TrialRecord
    bootstrap_combinations: int

    def best_so_far(self) -> list[float]:
        out, cur = [], -math.inf
        for r in self.records:
            if r.status == "completed":
                cur = max(cur, r.objective)
            out.append(cur)
        return out


class AllTrialsFailed(RuntimeError):
    pass


def _python_value(v):
    return int(v) if isinstance(v, (int, np.integer)) else float(v)


def _run_one(trainer, base_hp: SacHyperparams, values: dict, seed: int, trial_id: int,
             source: str) -> TrialRecord:
    values = {k: _python_value(v) for k, v in values.items()}
    t0 = time.perf_counter()
    try:
        hp = replace(base_hp, **values)
        obj = float(trainer(hp, seed))
        if not math.isfinite(obj):
            raise FloatingPointError("non-finite objective")
        status, err = "completed", ""
    except Exception as exc:  # a failed trial must not stop the search
        obj, status, err = None, "failed", f"{type(exc).__name__}: {exc}"
    return TrialRecord(trial_id, values, obj, seed, time.perf_counter() - t0, status, source, err)


def run_trials(space: SearchSpace, M: int, trainer: Callable[[SacHyperparams, int], float],
               seed: int = 0, base_hp: SacHyperparams | None = None, bootstrap: int = 8,
               n_candidates: int = 2000, jobs: int = 1, on_trial=None) -> TuningResult:
    """Evaluate ``M`` configurations: a Latin-hypercube bootstrap, then GP/EI proposals.

    ``trainer(hp, seed)`` returns the objective to maximise. Every trial uses
    the same training ``seed``; proposal randomness derives from it too.
    """
    if M < 1:
        raise ValueError("need at least one trial")
    base_hp = base_hp or SacHyperparams()
    seq = np.random.SeedSequence(seed)
    lhs_seed, *proposal_seeds = seq.spawn(1 + M)
    B = min(M, bootstrap)
    design = lhs_sample(space, B, lhs_seed)
    records: list[TrialRecord] = []

    def record(r):
        records.append(r)
        if on_trial is not None:
            on_trial(r)

    if jobs > 1 and B > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_one, trainer, base_hp, v, seed, k, "lhs")
                    for k, v in enumerate(design)]
            for f in futs:
                record(f.result())
    else:
        for k, v in enumerate(design):
            record(_run_one(trainer, base_hp, v, seed, k, "lhs"))

    for k in range(B, M):
        done = [r for r in records if r.status == "completed"]
        source = "gp"
        try:
            if len(done) < 2:
                raise DegenerateDesign("fewer than two completed trials")
            model = gp_fit_records(records, space)
            values = propose_next(model, space, n_candidates, proposal_seeds[k])
        except DegenerateDesign:
            values = lhs_sample(space, 1, proposal_seeds[k])[0]
            source = "lhs"
        record(_run_one(trainer, base_hp, values, seed, k, source))

    done = [r for r in records if r.status == "completed"]
    if not done:
        raise AllTrialsFailed(f"all {M} trials failed; first error: {records[0].error}")
    best = max(done, key=lambda r: r.objective)
    return TuningResult(records, best, bootstrap_count(B, space.size))


# --- trial log ---------------------------------------------------------------

TRIALS_CSV_HEADER = ("trial_id",) + TUNED + ("objective",)


def write_trial_json(record: TrialRecord, out_dir) -> Path:
    path = Path(out_dir) / f"trial_{record.trial_id:03d}.json"
    path.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_trial_json(path) -> TrialRecord:
    return TrialRecord.from_dict(json.loads(Path(path).read_text()))


def write_trials_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIALS_CSV_HEADER)
        for r in records:
            w.writerow([r.trial_id] + [repr(r.hyperparams.get(k)) for k in TUNED]
                       + ["" if r.objective is None else repr(r.objective)])
    return path


def read_trials_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRIALS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected trials CSV header")
        out = []
        for row in reader:
            out.append({"trial_id": int(row["trial_id"]), "gamma": float(row["gamma"]),
                        "a_l": float(row["a_l"]), "c_l": float(row["c_l"]),
                        "batch_n": int(row["batch_n"]), "kappa": float(row["kappa"]),
                        "objective": float(row["objective"]) if row["objective"] else None})
    return out
