"""SVG timelines of true and predicted labels."""
from __future__ import annotations

from xml.sax.saxutils import escape

from .metrics import labels_to_segments

BACKGROUND_COLOR = "#9e9e9e"
# fixed class colours; class 0 (background) is always gray
CLASS_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                "#e377c2", "#17becf", "#bcbd22", "#393b79", "#637939", "#8c6d31")


def class_color(c):
    if c == 0:
        return BACKGROUND_COLOR
    return CLASS_COLORS[(c - 1) % len(CLASS_COLORS)]


def timeline_svg(truth, pred, title="", class_names=None, width=800, band=24):
    """Two stacked label bands (truth above, prediction below) with a legend."""
    truth_tl, pred_tl = labels_to_segments(truth), labels_to_segments(pred)
    if truth_tl.total_frames != pred_tl.total_frames:
        raise ValueError("truth and prediction must have the same length")
    n = truth_tl.total_frames
    scale = width / n
    left, top = 90, 30 if title else 10
    present = sorted(set(truth_tl.classes()) | set(pred_tl.classes()))
    legend_y = top + 2 * band + 30
    height = legend_y + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 10}" height="{height}" '
           f'font-family="sans-serif" font-size="12">']
    if title:
        out.append(f'<text x="{left}" y="18">{escape(title)}</text>')
    for row, (label, tl) in enumerate((("truth", truth_tl), ("prediction", pred_tl))):
        y = top + row * (band + 4)
        out.append(f'<text x="4" y="{y + band * 0.7:.1f}">{label}</text>')
        for s, e, c in tl.segments:
            out.append(f'<rect x="{left + s * scale:.3f}" y="{y}" width="{(e - s) * scale:.3f}" '
                       f'height="{band}" fill="{class_color(c)}" data-class="{c}" '
                       f'data-frames="{s}-{e}"/>')
    axis_y = top + 2 * band + 12
    out.append(f'<text x="{left}" y="{axis_y}">0</text>')
    out.append(f'<text x="{left + width}" y="{axis_y}" text-anchor="end">{n} frames</text>')
    x = left
    for c in present:
        name = class_names[c] if class_names else ("background" if c == 0 else f"class {c}")
        out.append(f'<rect x="{x}" y="{legend_y - 10}" width="12" height="12" fill="{class_color(c)}"/>')
        out.append(f'<text x="{x + 16}" y="{legend_y}">{escape(name)}</text>')
        x += 24 + 7 * len(name)
    out.append("</svg>")
    return "\n".join(out) + "\n"
