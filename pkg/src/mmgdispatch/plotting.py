"""PNG figures rendered next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _by_mg(rows):
    mgs = sorted({r["mg"] for r in rows})
    out = {}
    for m in mgs:
        sel = sorted((r for r in rows if r["mg"] == m), key=lambda r: r["t"])
        out[m] = {k: np.array([r[k] for r in sel]) for k in sel[0]}
    return out


def reward_curve(totals, path, window: int = 50, moving=None) -> Path:
    totals = np.asarray(totals, dtype=np.float64)
    ep = np.arange(1, len(totals) + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(ep, totals, lw=0.6, alpha=0.5, label="episode reward")
    if moving is not None:
        ax.plot(ep, moving, lw=1.8, label=f"{window}-episode mean")
    ax.set_xlabel("episode")
    ax.set_ylabel("total reward")
    ax.set_yscale("symlog", linthresh=1e3)
    ax.legend()
    return _save(fig, path)


def electrical_balance(rows, path) -> Path:
    """Supply components stacked against load, one panel per microgrid."""
    data = _by_mg(rows)
    fig, axes = plt.subplots(len(data), 1, figsize=(8, 3 * len(data)), squeeze=False)
    for ax, (m, d) in zip(axes[:, 0], data.items()):
        t = d["t"]
        parts = {"MGTS": d["p_mgts"], "wind": d["p_wt"], "PV": d["p_pv"],
                 "ESD discharge": d["esd_discharge"] + d["esd_spill"],
                 "trade in": np.maximum(d["realized_trade"], 0),
                 "grid in": np.maximum(d["realized_grid"], 0)}
        bottom = np.zeros_like(t, dtype=float)
        for name, v in parts.items():
            ax.bar(t, v, bottom=bottom, label=name, width=0.8)
            bottom = bottom + v
        sinks = d["esd_charge"] + np.maximum(-d["realized_trade"], 0) + np.maximum(-d["realized_grid"], 0)
        ax.plot(t, d["p_load"], "k-", lw=1.5, label="load")
        ax.plot(t, d["p_load"] + sinks + d["p_loss"], "k--", lw=1, label="load + outflows")
        ax.set_title(f"MG{m}")
        ax.set_xlabel("t")
        ax.set_ylabel("kW")
    axes[0, 0].legend(fontsize=7, ncol=4)
    return _save(fig, path)


def trades(rows, path) -> Path:
    data = _by_mg(rows)
    fig, ax = plt.subplots(figsize=(8, 4))
    for m, d in data.items():
        ax.plot(d["t"], d["realized_trade"], marker="o", ms=3, label=f"MG{m} inter-MG")
        ax.plot(d["t"], d["realized_grid"], ls="--", label=f"MG{m} grid")
    ax.axhline(0, color="grey", lw=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel("kW (positive = import)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def storage(rows, path) -> Path:
    data = _by_mg(rows)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for m, d in data.items():
        a1.plot(d["t"], d["soc"], marker="o", ms=3, label=f"MG{m}")
        a2.plot(d["t"], d["esd_charge"] - d["esd_discharge"], label=f"MG{m}")
    a1.set_ylabel("SOC after step")
    a2.set_ylabel("charge - discharge (kW)")
    a2.set_xlabel("t")
    a1.legend(fontsize=8)
    return _save(fig, path)


def mode_costs(costs: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    names = list(costs)
    ax.bar(names, [costs[k] for k in names], color=["tab:grey", "tab:green"][:len(names)])
    ax.set_ylabel("evaluated cost ($)")
    return _save(fig, path)


def tuning_progress(objectives, best_so_far, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    k = np.arange(len(objectives))
    obj = np.array([np.nan if v is None else v for v in objectives], dtype=float)
    ax.plot(k, obj, "o", label="trial objective")
    ax.step(k, best_so_far, where="post", label="best so far")
    ax.set_xlabel("trial")
    ax.set_ylabel("objective")
    ax.legend()
    return _save(fig, path)
