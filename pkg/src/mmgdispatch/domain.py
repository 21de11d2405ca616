"""Microgrid parameters, scenarios and the on-disk scenario bundle.

A scenario bundle is a directory holding

* ``scenario.json`` -- manifest with ``n_mg``, ``horizon_t``, ``dt`` and one
  parameter block per microgrid,
* ``mg<k>.csv`` -- header ``t,load_kw,wt_kw,pv_kw``, one row per step,
* ``prices.csv`` -- header ``t,price_mg,price_grid_buy,price_grid_sell``.

Floats are written with ``repr`` so a write/load cycle is bit exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

MANIFEST_NAME = "scenario.json"
PRICES_NAME = "prices.csv"
FORMAT_TAG = "mmg-scenario/1"
SERIES_HEADER = ("t", "load_kw", "wt_kw", "pv_kw")
PRICES_HEADER = ("t", "price_mg", "price_grid_buy", "price_grid_sell")

DATA_DIR = Path(__file__).resolve().parent / "data"


class ScenarioError(ValueError):
    """Invalid scenario input; carries the offending file, row and field."""

    def __init__(self, message: str, file: str | None = None,
                 row: int | None = None, field: str | None = None):
        self.file = file
        self.row = row
        self.field = field
        where = ":".join(str(p) for p in (file, row, field) if p is not None)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class MicrogridParams:
    """Physical and economic constants of one microgrid (kW, kWh, $)."""

    lambda_mgts: float = 1.3
    p_mgts_min: float = 5.0
    p_mgts_max: float = 30.0
    eta_ch: float = 0.9
    eta_dc: float = 0.9
    p_ch_max: float = 100.0
    p_dc_max: float = 100.0
    s_esd_min: float = 0.0
    s_esd_max: float = 200.0
    lambda_b: float = 0.5
    lambda_loss: float = 1.35
    psi_mgts: float = 0.02
    psi_pv: float = 0.02
    psi_wt: float = 0.02
    ell: float = 0.5
    p_ig_max: float = 500.0
    p_ij_max: float = 200.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ScenarioError("must be finite", field=f.name)
        if not 0 <= self.p_mgts_min <= self.p_mgts_max:
            raise ScenarioError("need 0 <= p_mgts_min <= p_mgts_max", field="p_mgts_min")
        for name in ("eta_ch", "eta_dc"):
            if not 0 < getattr(self, name) <= 1:
                raise ScenarioError("efficiency must lie in (0, 1]", field=name)
        if not 0 <= self.s_esd_min < self.s_esd_max:
            raise ScenarioError("need 0 <= s_esd_min < s_esd_max", field="s_esd_min")
        for name in ("p_ch_max", "p_dc_max"):
            if getattr(self, name) <= 0:
                raise ScenarioError("must be positive", field=name)
        for name in ("lambda_mgts", "lambda_b", "lambda_loss", "ell", "p_ig_max", "p_ij_max"):
            if getattr(self, name) < 0:
                raise ScenarioError("must be non-negative", field=name)
        for name in ("psi_mgts", "psi_pv", "psi_wt"):
            if not 0 <= getattr(self, name) < 1:
                raise ScenarioError("loss fraction must lie in [0, 1)", field=name)

    @classmethod
    def from_dict(cls, d: dict) -> "MicrogridParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown parameter(s) {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


# Default parameter preset ("table1"); MG 2 differs only in its
# generator cost coefficient.
TABLE1 = (MicrogridParams(lambda_mgts=1.3), MicrogridParams(lambda_mgts=1.5))

# Cheaper-generation preset ("table2") for checking that tuned hyperparameters adapt.
TABLE2 = (
    MicrogridParams(lambda_mgts=0.1, lambda_loss=0.15, lambda_b=0.06),
    MicrogridParams(lambda_mgts=0.2, lambda_loss=0.15, lambda_b=0.06),
)

PARAM_PRESETS = {"table1": TABLE1, "table2": TABLE2}


def preset_params(name: str, n_mg: int) -> tuple[MicrogridParams, ...]:
    """Per-MG parameters of a named preset, cycled to ``n_mg`` microgrids."""
    try:
        base = PARAM_PRESETS[name]
    except KeyError:
        raise ScenarioError(f"unknown parameter preset {name!r}") from None
    return tuple(base[i % len(base)] for i in range(n_mg))


@dataclass(frozen=True)
class CostBreakdown:
    """The six per-step cost terms of one microgrid, in $."""

    mgts_cost: float = 0.0
    mg_trade_cost: float = 0.0
    grid_trade_cost: float = 0.0
    esd_om_cost: float = 0.0
    loss_cost: float = 0.0
    imbalance_penalty: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", (
            self.mgts_cost + self.mg_trade_cost + self.grid_trade_cost
            + self.esd_om_cost + self.loss_cost + self.imbalance_penalty))

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Scenario:
    """Per-MG load/renewable series and price schedules over ``horizon_t`` steps.

    Array fields are read-only float64: ``load``, ``p_wt`` and ``p_pv`` have
    shape ``(n_mg, horizon_t)``, the price series shape ``(horizon_t,)``.
    """

    load: np.ndarray
    p_wt: np.ndarray
    p_pv: np.ndarray
    price_mg: np.ndarray
    price_grid_buy: np.ndarray
    price_grid_sell: np.ndarray
    params: tuple[MicrogridParams, ...]
    dt: float = 1.0

    def __post_init__(self):
        for name in ("load", "p_wt", "p_pv", "price_mg", "price_grid_buy", "price_grid_sell"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "dt", float(self.dt))
        self.validate()

    @property
    def n_mg(self) -> int:
        return len(self.params)

    @property
    def horizon_t(self) -> int:
        return self.price_mg.shape[0]

    def validate(self) -> None:
        n, T = self.n_mg, self.horizon_t
        if n < 1:
            raise ScenarioError("scenario needs at least one microgrid", field="n_mg")
        if T < 1:
            raise ScenarioError("scenario needs at least one time step", field="horizon_t")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ScenarioError("dt must be positive", field="dt")
        for name in ("load", "p_wt", "p_pv"):
            arr = getattr(self, name)
            if arr.shape != (n, T):
                raise ScenarioError(f"expected shape {(n, T)}, got {arr.shape}", field=name)
        for name in ("price_mg", "price_grid_buy", "price_grid_sell"):
            arr = getattr(self, name)
            if arr.shape != (T,):
                raise ScenarioError(f"expected {T} entries, got {arr.shape}", field=name)
        for name in ("load", "p_wt", "p_pv", "price_mg", "price_grid_buy", "price_grid_sell"):
            arr = getattr(self, name)
            bad = np.argwhere(~np.isfinite(arr) | (arr < 0))
            if bad.size:
                idx = tuple(int(v) for v in bad[0])
                raise ScenarioError(f"value {arr[idx]!r} is negative or non-finite",
                                    row=idx[-1], field=name)
        order_ok = (self.price_grid_sell <= self.price_mg) & (self.price_mg <= self.price_grid_buy)
        if not order_ok.all():
            t = int(np.argmin(order_ok))
            raise ScenarioError(
                "price ordering violated at t=%d: need price_grid_sell <= price_mg <= "
                "price_grid_buy, got %r, %r, %r" % (
                    t, self.price_grid_sell[t], self.price_mg[t], self.price_grid_buy[t]),
                row=t, field="price_mg")

    def with_params(self, params) -> "Scenario":
        return replace(self, params=tuple(params))

    def equals(self, other: "Scenario") -> bool:
        """Bit-identical comparison of every series and parameter."""
        return (self.params == other.params and self.dt == other.dt and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in
            ("load", "p_wt", "p_pv", "price_mg", "price_grid_buy", "price_grid_sell")))


# --- synthetic data ---------------------------------------------------------

# Three-tier tariff ($/kWh): off-peak, shoulder, peak.
TIER_GRID_BUY = (0.5, 0.9, 1.4)
TIER_GRID_SELL = (0.2, 0.3, 0.4)
TIER_MG = (0.35, 0.6, 0.9)


def _tier(hour: float) -> int:
    if hour < 7 or hour >= 23:
        return 0
    if 10 <= hour < 15 or 18 <= hour < 22:
        return 2
    return 1


def generate_synthetic(seed: int, n_mg: int = 2, horizon_t: int = 24, dt: float = 1.0,
                       params=None) -> Scenario:
    """Deterministic synthetic day with alternating deficit/surplus microgrids.

    Even-indexed microgrids carry a load above their renewable output, odd
    ones the opposite; the property is enforced over the horizon. ``params``
    defaults to the "table1" preset.
    """
    if n_mg < 2:
        raise ScenarioError(f"n_mg must be >= 2, got {n_mg}", field="n_mg")
    if horizon_t < 1:
        raise ScenarioError(f"horizon_t must be >= 1, got {horizon_t}", field="horizon_t")
    rng = np.random.default_rng(seed)
    hours = (np.arange(horizon_t) + 0.5) * 24.0 / horizon_t

    morning = np.exp(-0.5 * ((hours - 9.0) / 2.0) ** 2)
    evening = np.exp(-0.5 * ((hours - 19.5) / 2.5) ** 2)
    load_shape = 0.55 + 0.3 * morning + 0.45 * evening
    sun = np.clip(np.sin(np.pi * (hours - 6.0) / 13.0), 0.0, None)

    load = np.empty((n_mg, horizon_t))
    wt = np.empty((n_mg, horizon_t))
    pv = np.empty((n_mg, horizon_t))
    for i in range(n_mg):
        deficit = i % 2 == 0
        size = rng.uniform(0.85, 1.15)
        load_peak = (320.0 if deficit else 150.0) * size
        wt_mean = (70.0 if deficit else 190.0) * size
        pv_peak = (80.0 if deficit else 160.0) * size
        load[i] = load_peak * load_shape * rng.uniform(0.95, 1.05, horizon_t)
        # AR(1) wind around its mean
        w = np.empty(horizon_t)
        level = rng.normal(0.0, 0.2)
        for t in range(horizon_t):
            level = 0.8 * level + rng.normal(0.0, 0.12)
            w[t] = wt_mean * (1.0 + level)
        wt[i] = np.clip(w, 0.0, None)
        pv[i] = pv_peak * sun * rng.uniform(0.85, 1.0, horizon_t)
        net = load[i].sum() - wt[i].sum() - pv[i].sum()
        if deficit and net <= 0:
            load[i] *= 1.1 * (wt[i].sum() + pv[i].sum()) / load[i].sum()
        elif not deficit and net >= 0:
            load[i] *= 0.9 * (wt[i].sum() + pv[i].sum()) / load[i].sum()
    load, wt, pv = (np.round(a, 3) for a in (load, wt, pv))

    tiers = [_tier(h) for h in hours]
    price_mg = np.array([TIER_MG[k] for k in tiers])
    buy = np.array([TIER_GRID_BUY[k] for k in tiers])
    sell = np.array([TIER_GRID_SELL[k] for k in tiers])

    if params is None:
        params = preset_params("table1", n_mg)
    return Scenario(load=load, p_wt=wt, p_pv=pv, price_mg=price_mg,
                    price_grid_buy=buy, price_grid_sell=sell,
                    params=tuple(params), dt=dt)


# --- bundle I/O -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_scenario(scenario: Scenario, out_dir) -> Path:
    """Write ``scenario`` as a bundle into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mgs = []
    for i, p in enumerate(scenario.params):
        name = f"mg{i + 1}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SERIES_HEADER)
            for t in range(scenario.horizon_t):
                w.writerow([t, _fmt(scenario.load[i, t]), _fmt(scenario.p_wt[i, t]),
                            _fmt(scenario.p_pv[i, t])])
        mgs.append({"series_csv": name, "params": asdict(p)})
    with open(out / PRICES_NAME, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICES_HEADER)
        for t in range(scenario.horizon_t):
            w.writerow([t, _fmt(scenario.price_mg[t]), _fmt(scenario.price_grid_buy[t]),
                        _fmt(scenario.price_grid_sell[t])])
    manifest = {
        "format": FORMAT_TAG,
        "n_mg": scenario.n_mg,
        "horizon_t": scenario.horizon_t,
        "dt": scenario.dt,
        "prices_csv": PRICES_NAME,
        "microgrids": mgs,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_csv(path: Path, header: tuple[str, ...], horizon_t: int) -> np.ndarray:
    if not path.is_file():
        raise ScenarioError("file not found", file=str(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != header:
        raise ScenarioError(f"expected header {','.join(header)}", file=str(path), row=0)
    body = [r for r in rows[1:] if r]
    if len(body) != horizon_t:
        raise ScenarioError(f"expected {horizon_t} data rows, found {len(body)}",
                            file=str(path), row=len(body))
    out = np.empty((horizon_t, len(header) - 1))
    for k, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ScenarioError(f"expected {len(header)} columns, found {len(row)}",
                                file=str(path), row=k)
        if row[0].strip() != str(k - 1):
            raise ScenarioError(f"expected t={k - 1}", file=str(path), row=k, field="t")
        for c in range(1, len(header)):
            try:
                v = float(row[c])
            except ValueError:
                raise ScenarioError(f"not a number: {row[c]!r}", file=str(path), row=k,
                                    field=header[c]) from None
            if not math.isfinite(v) or v < 0:
                raise ScenarioError(f"value {v!r} is negative or non-finite",
                                    file=str(path), row=k, field=header[c])
            out[k - 1, c - 1] = v
    return out


def load_scenario(path) -> Scenario:
    """Load a bundle from its directory or its manifest file."""
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    if not manifest_path.is_file():
        raise ScenarioError("scenario manifest not found", file=str(manifest_path))
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc}", file=str(manifest_path)) from None
    mf = str(manifest_path)
    for key in ("n_mg", "horizon_t", "microgrids", "prices_csv"):
        if key not in manifest:
            raise ScenarioError("missing key", file=mf, field=key)
    n_mg, horizon_t = int(manifest["n_mg"]), int(manifest["horizon_t"])
    if horizon_t < 1:
        raise ScenarioError("horizon_t must be >= 1", file=mf, field="horizon_t")
    if len(manifest["microgrids"]) != n_mg:
        raise ScenarioError(f"n_mg={n_mg} but {len(manifest['microgrids'])} parameter blocks",
                            file=mf, field="microgrids")
    params, series = [], []
    for i, block in enumerate(manifest["microgrids"]):
        try:
            params.append(MicrogridParams.from_dict(block["params"]))
        except ScenarioError as exc:
            raise ScenarioError(str(exc), file=mf, field=f"microgrids[{i}].{exc.field}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad parameter block: {exc}", file=mf,
                                field=f"microgrids[{i}]") from None
        series.append(_read_csv(root / block["series_csv"], SERIES_HEADER, horizon_t))
    prices = _read_csv(root / manifest["prices_csv"], PRICES_HEADER, horizon_t)
    pf = str(root / manifest["prices_csv"])
    try:
        return Scenario(
            load=np.stack([s[:, 0] for s in series]),
            p_wt=np.stack([s[:, 1] for s in series]),
            p_pv=np.stack([s[:, 2] for s in series]),
            price_mg=prices[:, 0], price_grid_buy=prices[:, 1], price_grid_sell=prices[:, 2],
            params=tuple(params), dt=float(manifest.get("dt", 1.0)))
    except ScenarioError as exc:
        # price rows are 1-based in the file (row 0 is the header)
        row = exc.row + 1 if exc.row is not None else None
        raise ScenarioError(str(exc).split(": ", 1)[-1], file=pf if exc.field and
                            exc.field.startswith("price") else mf, row=row,
                            field=exc.field) from None


def bundled_scenario_path(name: str = "scenario_default") -> Path:
    """Directory of a scenario bundle shipped with the package."""
    path = DATA_DIR / name
    if not (path / MANIFEST_NAME).is_file():
        raise ScenarioError("no such bundled scenario", file=str(path))
    return path
