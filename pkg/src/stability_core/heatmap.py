"""SVG rendering of sweep results with the marginal curves on top."""
from typing import Optional
import logging

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib import colors
from matplotlib.patches import Patch, Rectangle
import numpy as np

from .errors import InvalidParameters
from .marginal import marginal_curves, MARGINAL
from .sweep import SweepResult

logger = logging.getLogger(__name__)

HASH_SALT = "stability-heatmap"
MARGINAL_COLOR = "#bdbdbd"
ERROR_COLOR = "#000000"
CURVE_COLOR = "#d62728"
CURVE_SAMPLES = 400


def _count_color(n, palette):
    if n == MARGINAL:
        return MARGINAL_COLOR
    if isinstance(n, (int, np.integer)):
        return palette(int(n) % palette.N)
    return ERROR_COLOR


def render_heatmap(result: SweepResult, path: str, value: Optional[str] = None) -> str:
    """Write the sweep as a self-contained SVG; returns the path

    ``value`` is "N" (discrete palette) or "rate" (diverging palette); by
    default rates are shown for simulation-only sweeps and counts otherwise.
    """
    if not result.cells:
        raise InvalidParameters("cannot render an empty sweep")
    spec = result.spec
    if value is None:
        value = "N" if spec.uses_spectral else "rate"
    if value not in ("N", "rate"):
        raise InvalidParameters(f"value must be 'N' or 'rate', got {value!r}")

    ks, Ls = spec.k_values, spec.L_values
    dk = (ks[-1] - ks[0]) / (len(ks) - 1)
    dL = (Ls[-1] - Ls[0]) / (len(Ls) - 1)

    plt.rcParams["svg.hashsalt"] = HASH_SALT
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    try:
        palette = plt.get_cmap("tab10")
        rates = np.array([c.rate for c in result.cells if isinstance(c.rate, float)])
        if value == "rate":
            bound = float(np.max(np.abs(rates))) if rates.size else 1.0
            bound = bound if bound > 0 else 1.0
            norm = colors.TwoSlopeNorm(vcenter=0.0, vmin=-bound, vmax=bound)
            cmap = plt.get_cmap("RdBu_r")

        for idx, cell in enumerate(result.cells):
            i, j = divmod(idx, len(Ls))
            if value == "N":
                face = _count_color(cell.N, palette)
            elif isinstance(cell.rate, float):
                face = cmap(norm(cell.rate))
            else:
                face = ERROR_COLOR
            ax.add_patch(Rectangle((cell.k - dk / 2.0, cell.L - dL / 2.0), dk, dL,
                                   facecolor=face, edgecolor="none", gid=f"cell-{i}-{j}"))

        k_lo, k_hi = ks[0] - dk / 2.0, ks[-1] + dk / 2.0
        L_lo, L_hi = Ls[0] - dL / 2.0, Ls[-1] + dL / 2.0
        k_dense = np.linspace(max(ks[0], -1.0 + 1e-9), min(ks[-1], 1.0 - 1e-9), CURVE_SAMPLES)
        drawn = 0
        for curve in marginal_curves(spec.a, spec.b, spec.lam, L_max=Ls[-1]):
            heights = np.asarray(curve.height(k_dense), dtype=float)
            visible = np.isfinite(heights) & (heights >= L_lo) & (heights <= L_hi)
            if not np.any(visible):
                continue
            ax.plot(k_dense, np.where(visible, heights, np.nan), color=CURVE_COLOR,
                    linewidth=1.5, gid=f"curve-{curve.branch_index}")
            drawn += 1

        ax.set_xlim(k_lo, k_hi)
        ax.set_ylim(L_lo, L_hi)
        ax.set_xlabel("k")
        ax.set_ylabel("L")
        ax.set_title(f"a={spec.a:g}, b={spec.b:g}, lambda={spec.lam:g}")

        if value == "N":
            counts = sorted({c.N for c in result.cells if isinstance(c.N, int)})
            handles = [Patch(facecolor=_count_color(n, palette), label=f"N={n}") for n in counts]
            if any(c.marginal for c in result.cells):
                handles.append(Patch(facecolor=MARGINAL_COLOR, label=MARGINAL))
            if handles:
                ax.legend(handles=handles, loc="upper right", fontsize="small")
        else:
            fig.colorbar(plt.cm.ScalarMappable(norm=norm, cmap=cmap), ax=ax, label="rate")

        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info(f"heatmap with {len(result.cells)} cells and {drawn} curve(s) written to {path}")
    return path
