"""CSV tables and PNG figures for the rate calculus and pipeline runs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .params import ProtocolParams, RateRow, accumulation_time, required_n0  # noqa: E402
from .qsim import MAX_LOSS_DB, ChannelModel, channel_at  # noqa: E402

DEFAULT_EPS = (1e-3, 1e-5, 1e-8, 1e-10)


def parse_grid(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:step`` (stop inclusive)."""
    text = text.strip()
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(v) for v in text.split(",") if v.strip()]


def qber_rows(model: ChannelModel, losses) -> list[tuple[float, float, float, float]]:
    """(loss dB, coincidence Hz, QBER HV, QBER DA)."""
    return [(float(l), *channel_at(model, l)) for l in losses]


def n0_rows(params: ProtocolParams, eps_grid, coincidence_hz: float) -> list[tuple[float, int | None, float | None]]:
    """(eps, required N0, accumulation time in s at the given rate)."""
    out = []
    for eps in eps_grid:
        n0 = required_n0(params, eps)
        out.append((float(eps), n0, None if n0 is None else accumulation_time(n0, coincidence_hz)))
    return out


def write_n0_csv(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("eps", "n0", "accumulation_s"))
    for eps, n0, t in rows:
        w.writerow((f"{eps:.6g}", "" if n0 is None else n0, "" if t is None else f"{t:.3f}"))


def plot_qber(model: ChannelModel, losses, path) -> Path:
    rows = qber_rows(model, losses)
    loss = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(loss, [100 * r[2] for r in rows], label="H/V")
    ax.plot(loss, [100 * r[3] for r in rows], label="D/A")
    ax.axvline(MAX_LOSS_DB, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("channel loss [dB]")
    ax.set_ylabel("QBER [%]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_rates(rows: list[RateRow], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for eps in sorted({r.eps for r in rows}, reverse=True):
        sel = [r for r in rows if r.eps == eps and r.feasible]
        if sel:
            ax.semilogy([r.loss_db for r in sel], [r.ot_per_s for r in sel], marker=".", label=f"eps={eps:.0e}")
    ax.set_xlabel("channel loss [dB]")
    ax.set_ylabel("OT rate [1/s]")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_n0(rows, path) -> Path:
    pts = [(eps, n0) for eps, n0, _ in rows if n0 is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o")
    ax.invert_xaxis()
    ax.set_xlabel("security parameter eps")
    ax.set_ylabel("required block size N0")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_stage_timings(results, path) -> Path:
    """Mean wall-clock per stage over the successful OT results."""
    ok = [r for r in results if r.ok and r.timings]
    stages = [k for k in (ok[0].timings if ok else {}) if k != "total"]
    means = [float(np.mean([r.timings[s] for r in ok])) for s in stages]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(stages, means)
    ax.set_ylabel("seconds per OT")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def run_summary(results, wall_seconds: float) -> dict:
    """Summary fields for a run report: measured QBER and f, and OT/s."""
    ok = [r for r in results if r.ok]
    qber = [r.p_hat for r in results if r.p_hat is not None]
    f = [r.f_actual if r.f_actual is not None else r.f_bound for r in ok]
    f = [v for v in f if v is not None]
    return {
        "ots_ok": len(ok),
        "ots_total": len(results),
        "qber_meas": float(np.mean(qber)) if qber else float("nan"),
        "f_meas": float(np.median(f)) if f else float("nan"),
        "ot_per_s": len(ok) / wall_seconds if wall_seconds > 0 else float("nan"),
        "wall_s": wall_seconds,
    }
