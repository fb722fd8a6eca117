"""t-SNE scatter plots as standalone SVG documents."""
import io
import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402

from medimp.storage import atomic_write_text  # noqa: E402

logger = logging.getLogger(__name__)

SVG_NS = "{http://www.w3.org/2000/svg}"
POINT_GROUP = "points"
CATEGORY_ORDER = {
    "exam": ["D15", "D30", "M3", "M12"],
    "gfr": ["very low", "low", "medium", "high"],
    "creat": ["stable", "unstable"],
    "donor_age": ["low", "medium", "high"],
}
TITLES = {"exam": "Follow-up exam", "gfr": "GFR", "creat": "Creatinine variation", "donor_age": "Donor age"}


def _categories(variable: str, labels: Sequence[str]) -> list[str]:
    known = CATEGORY_ORDER.get(variable, [])
    present = set(labels)
    return [c for c in known if c in present] + sorted(present - set(known))


def render_scatter_svg(
    coords: np.ndarray,
    labels: Sequence[str],
    is_augmented: Sequence[bool],
    variable: str,
) -> str:
    """One marker per row, stars for real volumes and circles for augmented ones, coloured by ``labels``."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = [str(v) for v in labels]
    augmented = np.asarray(is_augmented, dtype=bool)
    if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) != len(labels) or len(labels) != len(augmented):
        raise ValueError(f"coords {coords.shape}, {len(labels)} labels and {len(augmented)} flags do not line up")
    if not np.isfinite(coords).all():
        raise ValueError("coordinates must be finite")

    with plt.rc_context({"svg.hashsalt": "medimp", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 5))
        cmap = plt.get_cmap("tab10")
        categories = _categories(variable, labels)
        label_arr = np.asarray(labels, dtype=object)
        handles = []
        for k, category in enumerate(categories):
            color = cmap(k % 10)
            for aug, marker, size in ((False, "*", 70), (True, "o", 18)):
                rows = (label_arr == category) & (augmented == aug)
                if rows.any():
                    ax.scatter(
                        coords[rows, 0], coords[rows, 1], s=size, marker=marker, color=color,
                        alpha=0.5 if aug else 0.9, linewidths=0, gid=f"{POINT_GROUP}-{k}-{'aug' if aug else 'real'}",
                    )
            handles.append(Line2D([], [], linestyle="", marker="s", color=color, label=category))
        handles.append(Line2D([], [], linestyle="", marker="*", color="0.3", markersize=9, label="real"))
        handles.append(Line2D([], [], linestyle="", marker="o", color="0.3", alpha=0.5, label="aug"))
        ax.legend(handles=handles, title=TITLES.get(variable, variable), loc="best", fontsize=8, frameon=False)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(f"t-SNE of image embeddings: {TITLES.get(variable, variable)}")
        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buffer.getvalue()


def count_markers(svg: str) -> int:
    """Markers drawn inside the point groups of a rendered scatter."""
    root = ET.fromstring(svg)
    total = 0
    for group in root.iter(f"{SVG_NS}g"):
        if not group.get("id", "").startswith(POINT_GROUP):
            continue
        uses = list(group.iter(f"{SVG_NS}use"))
        if uses:
            total += len(uses)
        else:
            defined = {id(p) for d in group.iter(f"{SVG_NS}defs") for p in d.iter(f"{SVG_NS}path")}
            total += sum(1 for p in group.iter(f"{SVG_NS}path") if id(p) not in defined)
    return total


def write_scatter_svg(path: str | Path, svg: str) -> Path:
    out = atomic_write_text(path, svg)
    logger.info("Wrote scatter plot %s", out)
    return out
