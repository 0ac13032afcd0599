"""Static SVG plots of coefficient curves over quantile levels."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

from matplotlib.backends.backend_svg import FigureCanvasSVG  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["curve_svg"]


def curve_svg(q, estimate, lower=None, upper=None, title: str = "", ylabel: str = "coefficient") -> str:
    """Estimate against q with an optional shaded point-wise interval band.

    The output is byte-for-byte reproducible: no timestamp is embedded and
    element ids use a fixed salt.
    """
    q = np.asarray(q, dtype=float)
    est = np.asarray(estimate, dtype=float)
    fig = Figure(figsize=(5.0, 3.6))
    FigureCanvasSVG(fig)
    ax = fig.add_subplot(111)
    if lower is not None and upper is not None:
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        ok = np.isfinite(lo) & np.isfinite(hi)
        ax.fill_between(q[ok], lo[ok], hi[ok], color="0.8", linewidth=0, label="pointwise CI")
    ax.plot(q, est, color="black", marker="o", markersize=3, linewidth=1.2, label="estimate")
    ax.axhline(0.0, color="0.5", linewidth=0.6, linestyle=":")
    ax.set_xlabel("q")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "qrtd", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()
