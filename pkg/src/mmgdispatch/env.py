"""Multi-microgrid dispatch environment.

Each step every microgrid chooses its gas-turbine output, desired trades with
the other microgrids and its grid exchange. Trades are cleared pairwise, the
storage absorbs what it can of the remaining imbalance, and whatever is left
is priced by the quadratic imbalance penalty.

Sign conventions: trade and grid powers are positive when buying.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import CostBreakdown, MicrogridParams, Scenario

_TOL = 1e-9


@dataclass(frozen=True)
class StorageState:
    s_esd: float


@dataclass(frozen=True)
class Observation:
    """Local view of one microgrid at the start of a step."""

    p_load: float
    soc: float
    p_wt: float
    p_pv: float
    price_mg: float
    price_grid_buy: float
    price_grid_sell: float
    t_of_day: float

    def to_array(self) -> np.ndarray:
        return np.array([self.p_load, self.soc, self.p_wt, self.p_pv, self.price_mg,
                         self.price_grid_buy, self.price_grid_sell, self.t_of_day])

    SIZE = 8


@dataclass(frozen=True)
class AgentAction:
    """Set-points of one microgrid; ``p_ij`` has one entry per microgrid (own slot ignored).

    ``p_esd`` is only read when the environment runs with ``esd_in_action``;
    positive requests charging.
    """

    p_mgts: float
    p_ij: tuple[float, ...]
    p_ig: float
    p_esd: float = 0.0


@dataclass
class StepResult:
    next_obs: list[Observation]
    reward: np.ndarray
    cost: list[CostBreakdown]
    realized_trade: np.ndarray
    realized_grid: np.ndarray
    esd_charge: np.ndarray
    esd_discharge: np.ndarray
    esd_spill: np.ndarray
    p_loss: np.ndarray
    p_gap: np.ndarray
    done: bool
    t: int
    p_mgts: np.ndarray
    soc_after: np.ndarray


# --- closed-form terms ------------------------------------------------------

def mgts_cost(params: MicrogridParams, p: float) -> float:
    if not params.p_mgts_min - _TOL <= p <= params.p_mgts_max + _TOL:
        raise ValueError(f"MGTS power {p} outside [{params.p_mgts_min}, {params.p_mgts_max}]")
    return params.lambda_mgts * p


def esd_step(state: StorageState, p_ch: float, p_dc: float, params: MicrogridParams,
             dt: float) -> StorageState:
    if not (-_TOL <= p_ch <= params.p_ch_max + _TOL):
        raise ValueError(f"charge power {p_ch} outside [0, {params.p_ch_max}]")
    if not (-_TOL <= p_dc <= params.p_dc_max + _TOL):
        raise ValueError(f"discharge power {p_dc} outside [0, {params.p_dc_max}]")
    s = state.s_esd + (params.eta_ch * p_ch - p_dc / params.eta_dc) * dt
    if not (params.s_esd_min - 1e-7 <= s <= params.s_esd_max + 1e-7):
        raise ValueError(f"stored energy {s} outside [{params.s_esd_min}, {params.s_esd_max}]")
    return StorageState(min(max(s, params.s_esd_min), params.s_esd_max))


def soc(state: StorageState, params: MicrogridParams) -> float:
    return state.s_esd / params.s_esd_max


def esd_om_cost(p_ch: float, p_dc: float, params: MicrogridParams) -> float:
    return (abs(p_ch) + abs(p_dc)) * params.lambda_b


def mg_trade_cost(price_mg: float, realized_trade_row) -> float:
    """Positive when the microgrid is a net buyer from its peers."""
    return price_mg * float(np.sum(realized_trade_row))


def grid_trade_cost(price_buy: float, price_sell: float, p_ig: float,
                    p_ig_max: float | None = None) -> float:
    if p_ig_max is not None and abs(p_ig) > p_ig_max + _TOL:
        raise ValueError(f"grid exchange {p_ig} exceeds limit {p_ig_max}")
    return price_buy * p_ig if p_ig >= 0 else price_sell * p_ig


def power_loss(params: MicrogridParams, p_mgts: float, p_pv: float, p_wt: float) -> float:
    return params.psi_mgts * p_mgts + params.psi_pv * p_pv + params.psi_wt * p_wt


def power_gap(p_sup: float, p_con: float) -> float:
    return p_sup - p_con


def step_reward(cost: CostBreakdown) -> float:
    return -cost.total


def clear_trades(desired) -> np.ndarray:
    """Pairwise min-matching of desired trades into an antisymmetric matrix.

    A pair trades only when one side wants to buy and the other to sell; the
    smaller of the two quantities is exchanged.
    """
    d = np.asarray(desired, dtype=np.float64)
    n = d.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            a, b = d[i, j], d[j, i]
            if a * b < 0:
                q = np.sign(a) * min(abs(a), abs(b))
                out[i, j] = q
                out[j, i] = -q
    return out


def clip_esd(residual: float, state: StorageState, params: MicrogridParams,
             dt: float) -> tuple[float, float, float]:
    """Let the storage absorb ``residual`` (kW, positive = surplus).

    Returns ``(p_ch, p_dc, leftover)`` with ``leftover = residual - p_ch + p_dc``.
    """
    if residual > 0:
        headroom = max(params.s_esd_max - state.s_esd, 0.0)
        p_ch = min(residual, params.p_ch_max, headroom / (params.eta_ch * dt))
        return p_ch, 0.0, residual - p_ch
    if residual < 0:
        available = max(state.s_esd - params.s_esd_min, 0.0)
        p_dc = min(-residual, params.p_dc_max, available * params.eta_dc / dt)
        return 0.0, p_dc, residual + p_dc
    return 0.0, 0.0, 0.0


def drain_esd(residual: float, state: StorageState, params: MicrogridParams,
              dt: float) -> tuple[float, float, float]:
    """Final-step storage handling: discharge to ``s_esd_min``.

    Returns ``(p_dc, spill, leftover)``. ``spill`` is the power equivalent of the
    energy that the discharge limit could not move out; it is booked as
    supplied power so it shows up in the imbalance.
    """
    energy = max(state.s_esd - params.s_esd_min, 0.0)
    needed = energy * params.eta_dc / dt
    p_dc = min(needed, params.p_dc_max)
    spill = needed - p_dc
    return p_dc, spill, residual + p_dc + spill


# --- environment ------------------------------------------------------------

class MultiMicrogridEnv:
    """Stepped environment over one scenario day.

    ``trading=False`` is the isolated mode: desired inter-MG trades are ignored
    and nothing is exchanged between microgrids. ``terminal_drain`` enforces the
    end-of-day storage condition on the last step.
    """

    def __init__(self, scenario: Scenario, trading: bool = True, esd_in_action: bool = False,
                 terminal_drain: bool = True):
        if scenario.horizon_t < 1:
            raise ValueError("scenario horizon must be at least one step")
        self.scenario = scenario
        self.trading = trading
        self.esd_in_action = esd_in_action
        self.terminal_drain = terminal_drain
        self.n_mg = scenario.n_mg
        self.t = 0
        self.storage: list[StorageState] = []
        self.done = True

    def reset(self) -> list[Observation]:
        self.t = 0
        self.storage = [StorageState(p.s_esd_min) for p in self.scenario.params]
        self.done = False
        return self._observe(0)

    def _observe(self, t: int) -> list[Observation]:
        sc = self.scenario
        T = sc.horizon_t
        k = t % T
        return [Observation(
            p_load=float(sc.load[i, k]), soc=soc(self.storage[i], sc.params[i]),
            p_wt=float(sc.p_wt[i, k]), p_pv=float(sc.p_pv[i, k]),
            price_mg=float(sc.price_mg[k]), price_grid_buy=float(sc.price_grid_buy[k]),
            price_grid_sell=float(sc.price_grid_sell[k]), t_of_day=k / T,
        ) for i in range(self.n_mg)]

    def check_action(self, i: int, a: AgentAction) -> None:
        p = self.scenario.params[i]
        if not p.p_mgts_min - _TOL <= a.p_mgts <= p.p_mgts_max + _TOL:
            raise ValueError(f"agent {i}: p_mgts={a.p_mgts} out of bounds")
        if abs(a.p_ig) > p.p_ig_max + _TOL:
            raise ValueError(f"agent {i}: p_ig={a.p_ig} out of bounds")
        if len(a.p_ij) != self.n_mg:
            raise ValueError(f"agent {i}: p_ij needs {self.n_mg} entries")
        for j, q in enumerate(a.p_ij):
            if j != i and abs(q) > p.p_ij_max + _TOL:
                raise ValueError(f"agent {i}: p_ij[{j}]={q} out of bounds")

    def step(self, joint_action) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        sc = self.scenario
        n, t, dt = self.n_mg, self.t, sc.dt
        for i, a in enumerate(joint_action):
            self.check_action(i, a)

        desired = np.array([list(a.p_ij) for a in joint_action], dtype=np.float64)
        np.fill_diagonal(desired, 0.0)
        trade = clear_trades(desired) if self.trading else np.zeros((n, n))

        last = t == sc.horizon_t - 1
        costs, storage = [], []
        arrays = {k: np.zeros(n) for k in
                  ("grid", "ch", "dc", "spill", "loss", "gap", "mgts", "soc")}
        for i, a in enumerate(joint_action):
            p = sc.params[i]
            load, wt, pv = sc.load[i, t], sc.p_wt[i, t], sc.p_pv[i, t]
            loss = power_loss(p, a.p_mgts, pv, wt)
            traded = float(trade[i].sum())
            residual = a.p_mgts + wt + pv + traded + a.p_ig - load - loss
            state = self.storage[i]
            spill = 0.0
            if last and self.terminal_drain:
                p_ch = 0.0
                p_dc, spill, leftover = drain_esd(residual, state, p, dt)
            elif self.esd_in_action:
                p_ch, p_dc = self._explicit_esd(a.p_esd, state, p, dt)
                leftover = residual - p_ch + p_dc
            else:
                p_ch, p_dc, leftover = clip_esd(residual, state, p, dt)
            p_sup = a.p_mgts + wt + pv + p_dc + spill + traded + a.p_ig
            p_con = load + p_ch + loss
            gap = power_gap(p_sup, p_con)
            cost = CostBreakdown(
                mgts_cost=mgts_cost(p, a.p_mgts),
                mg_trade_cost=mg_trade_cost(sc.price_mg[t], trade[i]),
                grid_trade_cost=grid_trade_cost(sc.price_grid_buy[t], sc.price_grid_sell[t],
                                                a.p_ig, p.p_ig_max),
                esd_om_cost=esd_om_cost(p_ch, p_dc, p),
                loss_cost=p.lambda_loss * loss,
                imbalance_penalty=p.ell * gap * gap,
            )
            new_state = esd_step(state, p_ch, p_dc, p, dt)
            if last and self.terminal_drain:
                new_state = StorageState(p.s_esd_min)
            costs.append(cost)
            storage.append(new_state)
            arrays["grid"][i] = a.p_ig
            arrays["ch"][i], arrays["dc"][i], arrays["spill"][i] = p_ch, p_dc, spill
            arrays["loss"][i] = loss
            arrays["gap"][i] = gap
            arrays["mgts"][i] = a.p_mgts
            arrays["soc"][i] = soc(new_state, p)
            # both formulations of the imbalance must agree
            assert abs(gap - leftover) <= 1e-9 * max(1.0, abs(gap)), (gap, leftover)

        self.storage = storage
        self.t += 1
        self.done = self.t >= sc.horizon_t
        return StepResult(
            next_obs=self._observe(self.t), reward=np.array([step_reward(c) for c in costs]),
            cost=costs, realized_trade=trade, realized_grid=arrays["grid"],
            esd_charge=arrays["ch"], esd_discharge=arrays["dc"], esd_spill=arrays["spill"],
            p_loss=arrays["loss"], p_gap=arrays["gap"], done=self.done, t=t,
            p_mgts=arrays["mgts"], soc_after=arrays["soc"])

    @staticmethod
    def _explicit_esd(p_esd: float, state: StorageState, p: MicrogridParams,
                      dt: float) -> tuple[float, float]:
        if p_esd > 0:
            headroom = max(p.s_esd_max - state.s_esd, 0.0)
            return min(p_esd, p.p_ch_max, headroom / (p.eta_ch * dt)), 0.0
        if p_esd < 0:
            available = max(state.s_esd - p.s_esd_min, 0.0)
            return 0.0, min(-p_esd, p.p_dc_max, available * p.eta_dc / dt)
        return 0.0, 0.0


# --- trace ------------------------------------------------------------------

TRACE_COLUMNS = (
    "t", "mg", "p_load", "p_wt", "p_pv", "p_mgts", "realized_trade", "realized_grid",
    "esd_charge", "esd_discharge", "esd_spill", "soc", "p_loss", "p_gap",
    "price_mg", "price_grid_buy", "price_grid_sell",
    "mgts_cost", "mg_trade_cost", "grid_trade_cost", "esd_om_cost", "loss_cost",
    "imbalance_penalty", "total_cost", "reward",
)


def trace_rows(scenario: Scenario, result: StepResult) -> list[dict]:
    """Flatten one step into one row per microgrid."""
    t = result.t
    rows = []
    for i in range(scenario.n_mg):
        c = result.cost[i]
        rows.append({
            "t": t, "mg": i + 1,
            "p_load": float(scenario.load[i, t]), "p_wt": float(scenario.p_wt[i, t]),
            "p_pv": float(scenario.p_pv[i, t]), "p_mgts": float(result.p_mgts[i]),
            "realized_trade": float(result.realized_trade[i].sum()),
            "realized_grid": float(result.realized_grid[i]),
            "esd_charge": float(result.esd_charge[i]),
            "esd_discharge": float(result.esd_discharge[i]),
            "esd_spill": float(result.esd_spill[i]), "soc": float(result.soc_after[i]),
            "p_loss": float(result.p_loss[i]), "p_gap": float(result.p_gap[i]),
            "price_mg": float(scenario.price_mg[t]),
            "price_grid_buy": float(scenario.price_grid_buy[t]),
            "price_grid_sell": float(scenario.price_grid_sell[t]),
            "mgts_cost": c.mgts_cost, "mg_trade_cost": c.mg_trade_cost,
            "grid_trade_cost": c.grid_trade_cost, "esd_om_cost": c.esd_om_cost,
            "loss_cost": c.loss_cost, "imbalance_penalty": c.imbalance_penalty,
            "total_cost": c.total, "reward": float(result.reward[i]),
        })
    return rows


def objective_from_trace(rows, scenario: Scenario) -> float:
    """Total operating cost re-evaluated from the physical quantities of a trace.

    Row costs are accumulated with ``math.fsum`` so the result does not depend
    on row order.
    """
    terms = []
    for r in rows:
        p = scenario.params[int(r["mg"]) - 1]
        t = int(r["t"])
        buy, sell = scenario.price_grid_buy[t], scenario.price_grid_sell[t]
        p_ig = float(r["realized_grid"])
        loss = p.psi_mgts * r["p_mgts"] + p.psi_pv * r["p_pv"] + p.psi_wt * r["p_wt"]
        terms.append(p.lambda_mgts * r["p_mgts"]
                  + scenario.price_mg[t] * r["realized_trade"]
                  + (buy if p_ig >= 0 else sell) * p_ig
                  + (r["esd_charge"] + r["esd_discharge"]) * p.lambda_b
                  + p.lambda_loss * loss
                  + p.ell * r["p_gap"] ** 2)
    return math.fsum(terms)


def write_trace(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (int(v) if k in ("t", "mg") else repr(float(v))) for k, v in r.items()})
    return path


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header")
        return [{k: (int(v) if k in ("t", "mg") else float(v)) for k, v in row.items()}
                for row in reader]
