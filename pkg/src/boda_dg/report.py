"""Human-readable summaries of saved metrics reports: text table, CSV and SVG heatmap."""

from __future__ import annotations

from html import escape

import numpy as np
from numpy.typing import NDArray

from .errors import ClassMismatch
from .metrics import MetricsReport, aggregate


def group_reports(reports: list[MetricsReport], labels: list[str] | None = None) -> dict[str, list[MetricsReport]]:
    """Group by method name, keeping first-seen order.

    The method name is the matching entry of ``labels`` when given, else
    ``run_meta["variant"]``.
    """
    if not reports:
        raise ValueError("no reports given")
    sizes = {r.confusion.shape for r in reports}
    if len(sizes) != 1:
        raise ClassMismatch("reports cover different class sets")
    if labels is not None and len(labels) != len(reports):
        raise ValueError("need exactly one label per report")
    groups: dict[str, list[MetricsReport]] = {}
    for i, r in enumerate(reports):
        name = labels[i] if labels is not None else str(r.run_meta.get("variant", "unknown"))
        groups.setdefault(name, []).append(r)
    return groups


def summarize_rows(groups: dict[str, list[MetricsReport]]) -> list[dict]:
    rows = []
    for name, reps in groups.items():
        num_classes = reps[0].confusion.shape[0]
        rows.append(
            {
                "method": name,
                "n": len(reps),
                "f1_micro": aggregate(r.f1_micro for r in reps),
                "f1_macro": aggregate(r.f1_macro for r in reps),
                "recall": [float(np.mean([r.classes[c].recall for r in reps])) for c in range(num_classes)],
            }
        )
    return rows


def render_table(rows: list[dict]) -> str:
    head = ("method", "n", "F1-micro", "F1-macro")
    body = [
        (
            r["method"],
            str(r["n"]),
            f"{r['f1_micro']['mean']:.4f} ± {r['f1_micro']['std']:.4f}",
            f"{r['f1_macro']['mean']:.4f} ± {r['f1_macro']['std']:.4f}",
        )
        for r in rows
    ]
    widths = [max(len(line[i]) for line in [head, *body]) for i in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*line) for line in body]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def comparison_csv(rows: list[dict]) -> str:
    num_classes = len(rows[0]["recall"])
    header = ["method", "n", "f1_micro_mean", "f1_micro_std", "f1_macro_mean", "f1_macro_std"]
    header += [f"recall_{c}" for c in range(num_classes)]
    lines = [",".join(header)]
    for r in rows:
        vals = [
            r["method"],
            str(r["n"]),
            repr(r["f1_micro"]["mean"]),
            repr(r["f1_micro"]["std"]),
            repr(r["f1_macro"]["mean"]),
            repr(r["f1_macro"]["std"]),
        ]
        vals += [repr(v) for v in r["recall"]]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def summed_confusion(reports: list[MetricsReport]) -> NDArray:
    return np.sum([r.confusion for r in reports], axis=0)


def confusion_svg(cm: NDArray, title: str = "", cell: int = 44) -> str:
    """Heatmap of a confusion matrix.

    Cell shade is the row-normalised rate; each cell carries two text nodes,
    the raw count (``class="count"``) and the row fraction (``class="rate"``).
    """
    cm = np.asarray(cm, dtype=np.int64)
    n_true, n_pred = cm.shape
    rows = cm.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(rows > 0, cm / np.maximum(rows, 1), 0.0)
    left, top = 60, 50
    width = left + n_pred * cell + 10
    height = top + n_true * cell + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="10">',
        f'<text x="{left}" y="16" font-size="12">{escape(title)}</text>',
        f'<text x="{left}" y="{top - 22}">predicted</text>',
        f'<text x="4" y="{top - 22}">true</text>',
    ]
    for p in range(n_pred):
        x = left + p * cell + cell // 2
        out.append(f'<text x="{x}" y="{top - 6}" text-anchor="middle">{p}</text>')
    for t in range(n_true):
        y = top + t * cell
        out.append(f'<text x="{left - 8}" y="{y + cell // 2 + 4}" text-anchor="end">{t}</text>')
        for p in range(n_pred):
            x = left + p * cell
            shade = int(round(255 * (1.0 - rate[t, p])))
            ink = "#ffffff" if rate[t, p] > 0.5 else "#000000"
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="#cccccc"/>'
            )
            out.append(
                f'<text class="count" data-true="{t}" data-pred="{p}" x="{x + cell // 2}" y="{y + cell // 2 - 2}" '
                f'text-anchor="middle" fill="{ink}">{int(cm[t, p])}</text>'
            )
            out.append(
                f'<text class="rate" data-true="{t}" data-pred="{p}" x="{x + cell // 2}" y="{y + cell // 2 + 11}" '
                f'text-anchor="middle" font-size="8" fill="{ink}">{rate[t, p]:.2f}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
