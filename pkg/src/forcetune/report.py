"""Report tables and convergence plots."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass

from .bo import TuningRun
from .transfer import improvement_report, percent_change


class MixedObjectivesError(ValueError):
    """Runs with normalized and raw objectives were put in one table."""


def check_homogeneous(runs: list[TuningRun], what: str) -> None:
    kinds = {r.normalized for r in runs}
    if len(kinds) > 1:
        raise MixedObjectivesError(
            f"{what}: refusing to mix normalized (RMSE / reference) and raw (RMSE in N) objectives"
        )


@dataclass(frozen=True)
class BeforeAfterRow:
    name: str
    ref_force_n: float
    before: float
    after: float

    @property
    def change_percent(self) -> float:
        if self.before == 0:
            return math.nan
        return percent_change(self.before, self.after)


def before_after_rows(named_runs: list[tuple[str, TuningRun]]) -> list[BeforeAfterRow]:
    """Window 0 (the controller in place when tuning began) against the best window."""
    check_homogeneous([r for _, r in named_runs], "before/after table")
    return [
        BeforeAfterRow(name, r.reference_force_n, r.observations[0].objective, r.best_objective)
        for name, r in named_runs
    ]


@dataclass(frozen=True)
class ImprovementRow:
    name: str
    baseline: str
    rmse_change_percent: float
    iterations_change_percent: float


def improvement_rows(
    named_runs: list[tuple[str, TuningRun]], named_baselines: list[tuple[str, TuningRun]]
) -> list[ImprovementRow]:
    if len(named_runs) != len(named_baselines):
        raise ValueError(
            f"{len(named_runs)} runs but {len(named_baselines)} baselines; they are paired in order"
        )
    check_homogeneous([r for _, r in named_runs + named_baselines], "improvement table")
    rows = []
    for (name, run), (bname, base) in zip(named_runs, named_baselines):
        imp = improvement_report(base, run)
        rows.append(ImprovementRow(name, bname, imp.rmse_change_percent, imp.iterations_change_percent))
    return rows


def _pct(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:+.1f}%"


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def format_before_after(rows: list[BeforeAfterRow]) -> str:
    return _markdown(
        ["run", "reference force [N]", "before", "after", "change"],
        [[r.name, f"{r.ref_force_n:g}", f"{r.before:.6g}", f"{r.after:.6g}", _pct(r.change_percent)] for r in rows],
    )


def format_improvement(rows: list[ImprovementRow]) -> str:
    return _markdown(
        ["run", "baseline", "best RMSE change", "iterations change"],
        [[r.name, r.baseline, _pct(r.rmse_change_percent), _pct(r.iterations_change_percent)] for r in rows],
    )


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def convergence_svg(named_runs: list[tuple[str, TuningRun]], width: int = 640, height: int = 400) -> str:
    """Best-so-far objective against iteration, one polyline per run."""
    check_homogeneous([r for _, r in named_runs], "convergence plot")
    left, right, top, bottom = 70, 180, 20, 50
    pw, ph = width - left - right, height - top - bottom
    series = [(name, run.best_so_far()) for name, run in named_runs]
    n_max = max((len(s) for _, s in series), default=1)
    values = [v for _, s in series for v in s] or [0.0, 1.0]
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0

    def px(i):
        return left + (i - 1) / max(n_max - 1, 1) * pw

    def py(v):
        return top + (hi - v) / (hi - lo) * ph

    svg = ET.Element(
        "svg",
        xmlns="http://www.w3.org/2000/svg",
        width=str(width),
        height=str(height),
        viewBox=f"0 0 {width} {height}",
    )
    axes = ET.SubElement(svg, "g", stroke="black", fill="none")
    ET.SubElement(axes, "rect", x=str(left), y=str(top), width=str(pw), height=str(ph))
    text = ET.SubElement(svg, "g", {"font-family": "sans-serif", "font-size": "11"})
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        t = ET.SubElement(text, "text", x=str(left - 6), y=f"{py(v) + 4:.1f}", **{"text-anchor": "end"})
        t.text = f"{v:.3g}"
    for i in sorted({1, max(1, (n_max + 1) // 2), n_max}):
        t = ET.SubElement(text, "text", x=f"{px(i):.1f}", y=str(top + ph + 16), **{"text-anchor": "middle"})
        t.text = str(i)
    xl = ET.SubElement(text, "text", x=str(left + pw / 2), y=str(height - 10), **{"text-anchor": "middle"})
    xl.text = "iteration"
    yl = ET.SubElement(
        text, "text", x="14", y=str(top + ph / 2), transform=f"rotate(-90 14 {top + ph / 2})", **{"text-anchor": "middle"}
    )
    yl.text = "best objective"

    lines = ET.SubElement(svg, "g", fill="none", **{"stroke-width": "1.5"})
    for k, (name, s) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{px(i + 1):.2f},{py(v):.2f}" for i, v in enumerate(s))
        line = ET.SubElement(lines, "polyline", points=pts, stroke=color)
        ET.SubElement(line, "title").text = name
        y = top + 14 * k + 8
        ET.SubElement(svg, "line", x1=str(width - right + 10), y1=str(y), x2=str(width - right + 28), y2=str(y), stroke=color)
        label = ET.SubElement(text, "text", x=str(width - right + 32), y=str(y + 4))
        label.text = name
    return ET.tostring(svg, encoding="unicode") + "\n"
