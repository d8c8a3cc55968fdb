"""Report figures written next to the JSON/CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def risk_histogram(risks, var_value: float, path, cvar_value=None, bins: int = 80) -> Path:
    r = np.asarray(risks, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.hist(r, bins=bins, color="0.55", edgecolor="none")
    ax.axvline(var_value, color="tab:red", lw=1.2, label=f"VaR = {var_value:.3f}")
    if cvar_value is not None:
        ax.axvline(cvar_value, color="tab:blue", lw=1.2, ls="--", label=f"ORM = {cvar_value:.3f}")
    ax.set_yscale("log")
    ax.set_xlabel("per-point risk")
    ax.set_ylabel("count")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_trace(trace, path) -> Path:
    """Weighted term contributions and total per iteration, stages shaded."""
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    names = []
    for rep in trace:
        for k in rep.terms:
            if k not in names:
                names.append(k)
    it = np.arange(len(trace))
    for k in names:
        vals = np.array([rep.terms.get(k, np.nan) * rep.weights.get(k, 1.0) for rep in trace])
        if np.any(vals > 0):
            ax.plot(it, vals, lw=1, label=k)
    ax.plot(it, [rep.total for rep in trace], color="k", lw=1.4, label="total")
    stages = [rep.stage for rep in trace]
    for i in range(1, len(stages)):
        if stages[i] != stages[i - 1]:
            ax.axvline(i - 0.5, color="0.6", ls=":", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8, ncol=3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
