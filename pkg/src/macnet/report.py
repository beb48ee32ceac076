"""SVG renderings of an evaluation report: per-class F1 bars and a confusion heat map.

Both charts are plain SVG built with the standard XML tooling, so they diff
cleanly and need no plotting backend.
"""

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

SVG_NS = "http://www.w3.org/2000/svg"

BAR_AREA_HEIGHT = 240
BAR_WIDTH = 22
BAR_GAP = 8
MARGIN_LEFT = 56
MARGIN_TOP = 30
LABEL_SPACE = 130
CELL = 34


def _svg(width, height, title):
    root = ET.Element("svg", xmlns=SVG_NS, width=str(width), height=str(height),
                      viewBox=f"0 0 {width} {height}")
    ET.SubElement(root, "title").text = title
    ET.SubElement(root, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    return root


def _text(parent, x, y, content, size=11, anchor="start", **extra):
    el = ET.SubElement(parent, "text", x=f"{x:g}", y=f"{y:g}", attrib={
        "font-family": "sans-serif", "font-size": str(size), "text-anchor": anchor, **extra})
    el.text = content
    return el


def _to_bytes(root):
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


def f1_bar_chart(class_names, f1):
    """One ``rect.bar`` per class in the given order; a zero score gives a zero-height bar."""
    f1 = np.clip(np.asarray(f1, dtype=np.float64), 0.0, 1.0)
    if len(f1) != len(class_names):
        raise ValueError(f"{len(f1)} scores for {len(class_names)} classes")
    n = len(class_names)
    width = MARGIN_LEFT + n * (BAR_WIDTH + BAR_GAP) + 20
    height = MARGIN_TOP + BAR_AREA_HEIGHT + LABEL_SPACE
    root = _svg(width, height, "Per-class F1 score")
    base = MARGIN_TOP + BAR_AREA_HEIGHT

    axes = ET.SubElement(root, "g", attrib={"class": "axes", "stroke": "black", "stroke-width": "1"})
    ET.SubElement(axes, "line", x1=str(MARGIN_LEFT), y1=str(MARGIN_TOP), x2=str(MARGIN_LEFT), y2=str(base))
    ET.SubElement(axes, "line", x1=str(MARGIN_LEFT), y1=str(base), x2=str(width - 10), y2=str(base))
    for tick in np.linspace(0.0, 1.0, 6):
        y = base - tick * BAR_AREA_HEIGHT
        ET.SubElement(axes, "line", x1=str(MARGIN_LEFT - 4), y1=f"{y:g}", x2=str(MARGIN_LEFT), y2=f"{y:g}")
        _text(root, MARGIN_LEFT - 7, y + 4, f"{tick:.1f}", anchor="end")
    _text(root, 14, MARGIN_TOP + BAR_AREA_HEIGHT / 2, "F1", anchor="middle")

    bars = ET.SubElement(root, "g", attrib={"class": "bars", "fill": "#3b6ea8"})
    for i, (name, score) in enumerate(zip(class_names, f1)):
        x = MARGIN_LEFT + BAR_GAP + i * (BAR_WIDTH + BAR_GAP)
        h = score * BAR_AREA_HEIGHT
        bar = ET.SubElement(bars, "rect", attrib={
            "class": "bar", "x": f"{x:g}", "y": f"{base - h:g}", "width": str(BAR_WIDTH), "height": f"{h:g}",
            "data-class": name, "data-f1": f"{score:.6f}"})
        ET.SubElement(bar, "title").text = f"{name}: {score:.3f}"
        cx = x + BAR_WIDTH / 2
        _text(root, cx, base - h - 3, f"{score:.2f}", size=9, anchor="middle")
        _text(root, cx, base + 12, name, size=10, anchor="end",
              transform=f"rotate(-60 {cx:g} {base + 12:g})")
    return _to_bytes(root)


def row_normalize(confusion):
    cm = np.asarray(confusion, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    out = np.zeros_like(cm)
    np.divide(cm, sums, out=out, where=sums > 0)
    return out


def _shade(value):
    # white to dark blue
    lo, hi = np.array([255, 255, 255]), np.array([23, 63, 130])
    r, g, b = np.rint(lo + (hi - lo) * value).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def confusion_heatmap(class_names, confusion):
    """Row-normalized heat map (rows are true classes) with the fraction written in each cell."""
    norm = row_normalize(confusion)
    n = len(class_names)
    if norm.shape != (n, n):
        raise ValueError(f"confusion matrix shape {norm.shape} does not match {n} classes")
    left = top = LABEL_SPACE
    width = left + n * CELL + 20
    height = top + n * CELL + 40
    root = _svg(width, height, "Row-normalized confusion matrix")
    _text(root, left + n * CELL / 2, height - 12, "predicted", anchor="middle")
    _text(root, 14, top + n * CELL / 2, "true", anchor="middle",
          transform=f"rotate(-90 14 {top + n * CELL / 2:g})")

    cells = ET.SubElement(root, "g", attrib={"class": "cells"})
    for i in range(n):
        y = top + i * CELL
        _text(root, left - 6, y + CELL / 2 + 4, class_names[i], size=10, anchor="end")
        cx = left + i * CELL + CELL / 2
        _text(root, cx, top - 6, class_names[i], size=10, anchor="start",
              transform=f"rotate(-60 {cx:g} {top - 6:g})")
        for j in range(n):
            v = norm[i, j]
            x = left + j * CELL
            ET.SubElement(cells, "rect", attrib={
                "class": "cell", "x": str(x), "y": str(y), "width": str(CELL), "height": str(CELL),
                "fill": _shade(v), "stroke": "#cccccc", "data-row": str(i), "data-col": str(j),
                "data-value": f"{v:.6f}"})
            _text(root, x + CELL / 2, y + CELL / 2 + 4, f"{v:.2f}", size=9, anchor="middle",
                  fill="white" if v > 0.5 else "black")
    return _to_bytes(root)


def write_report_charts(report, directory):
    """Write ``f1_per_class.svg``, ``confusion_heatmap.svg`` and ``report.txt``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "f1": directory / "f1_per_class.svg",
        "confusion": directory / "confusion_heatmap.svg",
        "summary": directory / "report.txt",
    }
    paths["f1"].write_bytes(f1_bar_chart(report.class_names, report.f1))
    paths["confusion"].write_bytes(confusion_heatmap(report.class_names, report.confusion))
    lines = [report.summary_text().rstrip("\n"), "", "class,support,precision,recall,f1"]
    for name, s, p, r, f in zip(report.class_names, report.support, report.precision, report.recall, report.f1):
        lines.append(f"{name},{int(s)},{p:.4f},{r:.4f},{f:.4f}")
    paths["summary"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths
