"""Event-study figure emitted as a self-contained SVG."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {
    "full-mc": "#1b9e77",
    "cy": "#d95f02",
    "combine-apply": "#7570b3",
    "did": "#e7298a",
}


def event_study_svg(studies: dict, title: str = "") -> str:
    """Overlay event studies keyed by estimator tag; returns SVG text.

    Each series is drawn in an SVG group with id ``series-<tag>``.
    """
    plt.rcParams["svg.hashsalt"] = "mcpanel"
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    ax.axhline(0.0, color="black", lw=0.8, gid="zero-line")
    ax.axvline(-0.5, color="grey", lw=0.8, ls="--", gid="treatment-marker")
    n = max(len(studies), 1)
    for j, (tag, study) in enumerate(studies.items()):
        ks = study.ks()
        off = (j - (n - 1) / 2) * 0.12
        x = [k + off for k in ks]
        y = [study.entries[k].estimate for k in ks]
        color = COLORS.get(tag)
        line = ax.plot(x, y, marker="o", ms=3, lw=1.2, label=tag, color=color)[0]
        line.set_gid(f"series-{tag}")
        lo = [study.entries[k].ci_low for k in ks]
        if any(v is not None for v in lo):
            pts = [(xx, e.ci_low, e.ci_high) for xx, k in zip(x, ks) if (e := study.entries[k]).ci_low is not None]
            coll = ax.vlines([p[0] for p in pts], [p[1] for p in pts], [p[2] for p in pts], color=line.get_color(), lw=0.8)
            coll.set_gid(f"ci-{tag}")
    ax.set_xlabel("event time k (periods since adoption)")
    ax.set_ylabel("estimated effect")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()
