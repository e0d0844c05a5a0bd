"""Optional figures for ``hetdof report --figures``.

matplotlib is imported lazily and is only required when figures are
requested (``pip install artifact[plot]``); every figure is drawn from the
same tables the report writes as CSV.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigError("figures need matplotlib; install the 'plot' extra") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_report(tables: dict, out) -> list[str]:
    """Render the MSE curves and the selected-size summary; returns file names."""
    plt = _pyplot()
    out = Path(out)
    written = []
    mse = tables.get("mse")
    if mse:
        fig, ax = plt.subplots(figsize=(6, 4))
        sizes = [r["p"] for r in mse]
        for name in (k for k in mse[0] if k != "p"):
            ax.plot(sizes, [r[name] for r in mse], label=name)
        ax.set_yscale("log")
        ax.set_xlabel("p")
        ax.set_ylabel("mean squared error")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "mse.png", dpi=120)
        plt.close(fig)
        written.append("mse.png")
    weights = tables.get("weights")
    if weights:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        labels = [r["scheme_criterion"] for r in weights]
        ax.bar(labels, [r["mean"] for r in weights], yerr=[r["sd"] for r in weights], capsize=3)
        ax.set_ylabel("mean selected size")
        fig.tight_layout()
        fig.savefig(out / "weights.png", dpi=120)
        plt.close(fig)
        written.append("weights.png")
    return written
