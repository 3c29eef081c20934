"""Run report: summary tables and SVG plots written from stage artifacts.

Everything is rendered in memory first, so a failed report leaves no files
behind. Output is byte-for-byte deterministic for identical inputs.

summary.csv columns, one row per scalar metric:
    task, seed, strategy, metric, value
"""

from __future__ import annotations

import csv
import io
import json
import shutil
from pathlib import Path
from xml.sax.saxutils import escape

REPORT_DIR = "report"
SUMMARY_COLUMNS = ("task", "seed", "strategy", "metric", "value")
REQUIRED = {
    "filter": "filter/summary.json",
    "curriculum-train": "curriculum-train/stages.jsonl",
    "evaluate": "evaluate/metrics.json",
}

W, H = 480, 300
LEFT, RIGHT, TOP, BOTTOM = 56, 16, 28, 44
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class ReportError(RuntimeError):
    def __init__(self, missing: list[str]):
        super().__init__(f"cannot write report, metrics missing for stages: {', '.join(missing)}")
        self.missing = missing


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if abs(v) < 1e6 else f"{v:.3g}"


class _Axes:
    """Linear data-to-pixel map over a fixed plot box."""

    def __init__(self, xmin, xmax, ymin, ymax):
        if xmax == xmin:
            xmin, xmax = xmin - 0.5, xmax + 0.5
        if ymax == ymin:
            ymin, ymax = ymin - 0.5, ymax + 0.5
        self.xmin, self.xmax, self.ymin, self.ymax = xmin, xmax, ymin, ymax

    def x(self, v: float) -> float:
        return LEFT + (v - self.xmin) / (self.xmax - self.xmin) * (W - LEFT - RIGHT)

    def y(self, v: float) -> float:
        return H - BOTTOM - (v - self.ymin) / (self.ymax - self.ymin) * (H - TOP - BOTTOM)


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str, xticks, yticks) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{(LEFT + W - RIGHT) / 2:.1f}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{(TOP + H - BOTTOM) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for v, label in xticks:
        px = ax.x(v)
        out.append(f'<line x1="{px:.1f}" y1="{H - BOTTOM}" x2="{px:.1f}" y2="{H - BOTTOM + 4}" stroke="black"/>')
        out.append(f'<text x="{px:.1f}" y="{H - BOTTOM + 16}" text-anchor="middle">{escape(label)}</text>')
    for v in yticks:
        py = ax.y(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{py:.1f}" x2="{LEFT}" y2="{py:.1f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{py + 4:.1f}" text-anchor="end">{_num(v)}</text>')
    return out


def _yticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot(series: dict[str, tuple[list, list]], title: str, xlabel: str, ylabel: str,
              ylim: tuple[float, float] | None = None, errors: dict[str, list] | None = None,
              hline: float | None = None) -> str:
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    lo, hi = ylim if ylim else (min(ys), max(ys))
    if hline is not None:
        lo, hi = min(lo, hline), max(hi, hline)
    ax = _Axes(min(xs), max(xs), lo, hi)
    uniq = sorted(set(xs))
    step = max(1, len(uniq) // 8)
    out = _frame(ax, title, xlabel, ylabel, [(x, _num(x)) for x in uniq[::step]], _yticks(ax.ymin, ax.ymax))
    if hline is not None:
        out.append(f'<line x1="{LEFT}" y1="{ax.y(hline):.1f}" x2="{W - RIGHT}" y2="{ax.y(hline):.1f}" '
                   'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{ax.x(x):.1f},{ax.y(y):.1f}" for x, y in zip(xv, yv))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for j, (x, y) in enumerate(zip(xv, yv)):
            out.append(f'<circle cx="{ax.x(x):.1f}" cy="{ax.y(y):.1f}" r="2.5" fill="{color}"/>')
            if errors and name in errors:
                e = errors[name][j]
                out.append(f'<line x1="{ax.x(x):.1f}" y1="{ax.y(y - e):.1f}" x2="{ax.x(x):.1f}" '
                           f'y2="{ax.y(y + e):.1f}" stroke="{color}"/>')
        out.append(f'<text x="{W - RIGHT - 4}" y="{TOP + 12 + 13 * i}" text-anchor="end" fill="{color}">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels: list[str], values: list[float], errors: list[float], title: str, ylabel: str) -> str:
    lo = min(0.0, min(v - e for v, e in zip(values, errors)))
    hi = max(v + e for v, e in zip(values, errors))
    ax = _Axes(-0.5, len(labels) - 0.5, lo, hi if hi > lo else lo + 1)
    out = _frame(ax, title, "", ylabel, [], _yticks(ax.ymin, ax.ymax))
    width = 0.7 * (W - LEFT - RIGHT) / max(len(labels), 1)
    for i, (label, v, e) in enumerate(zip(labels, values, errors)):
        cx = ax.x(i)
        top, base = ax.y(v), ax.y(max(lo, 0.0))
        out.append(f'<rect x="{cx - width / 2:.1f}" y="{min(top, base):.1f}" width="{width:.1f}" '
                   f'height="{abs(base - top):.1f}" fill="{COLORS[0]}"/>')
        out.append(f'<line x1="{cx:.1f}" y1="{ax.y(v - e):.1f}" x2="{cx:.1f}" y2="{ax.y(v + e):.1f}" stroke="black"/>')
        out.append(f'<text x="{cx:.1f}" y="{H - BOTTOM + 10}" text-anchor="end" font-size="9" '
                   f'transform="rotate(-40 {cx:.1f} {H - BOTTOM + 10})">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- report assembly -----------------------------------------------------------


def _load(run_dir: Path) -> dict:
    missing = [stage for stage, rel in REQUIRED.items() if not (run_dir / rel).is_file()]
    if not missing:
        metrics = json.loads((run_dir / REQUIRED["evaluate"]).read_text())
        if not metrics.get("metrics"):
            missing.append("evaluate")
        stages = [json.loads(l) for l in (run_dir / REQUIRED["curriculum-train"]).read_text().splitlines() if l.strip()]
        if not stages:
            missing.append("curriculum-train")
    if missing:
        raise ReportError(missing)
    return {
        "metrics": metrics,
        "stages": stages,
        "filter": json.loads((run_dir / REQUIRED["filter"]).read_text()),
    }


def _read_battery(run_dir: Path) -> tuple[dict, dict] | None:
    path = run_dir / "battery" / "summary.csv"
    if not path.is_file():
        return None
    rows = list(csv.DictReader(path.read_text().splitlines()))
    manifest = json.loads((run_dir / "battery" / "manifest.json").read_text())
    table: dict[str, dict[str, tuple[float, float, int]]] = {}
    for r in rows:
        table.setdefault(r["arm"], {})[r["metric"]] = (float(r["mean"]), float(r["std"]), int(r["n"]))
    return table, manifest


def render_report(run_dir: str | Path) -> dict[str, str]:
    """File name -> content for every report file of ``run_dir``."""
    run_dir = Path(run_dir)
    data = _load(run_dir)
    m = data["metrics"]
    scalars = {k: v for k, v in m["metrics"].items() if isinstance(v, (int, float))}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for metric in sorted(scalars):
        w.writerow((m["task"], m["seed"], m["strategy"], metric, repr(float(scalars[metric]))))
    files = {"summary.csv": buf.getvalue()}

    stages = data["stages"]
    levels = data["filter"]["levels"]
    summary = {
        "task": m["task"],
        "seed": m["seed"],
        "strategy": m["strategy"],
        "metrics": scalars,
        "per_class": m["metrics"].get("per_class", {}),
        "filter": {"h_filter": data["filter"]["h_filter"], "levels": levels},
        "stages": [{k: s.get(k) for k in ("epoch", "phase", "lam", "size", "loss", "accuracy")} for s in stages],
    }

    files["accuracy_vs_stage.svg"] = line_plot(
        {"train accuracy": ([s["epoch"] for s in stages], [s["accuracy"] for s in stages])},
        "accuracy by training stage", "epoch", "accuracy", ylim=(0.0, 1.0),
    )
    if levels:
        files["fidelity_vs_lambda.svg"] = line_plot(
            {"mean fidelity": ([l["lam"] for l in levels], [l["mean_fidelity"] for l in levels])},
            "fidelity across guidance levels", "guidance level", "fidelity",
            ylim=(min(l["mean_fidelity"] - l["std_fidelity"] for l in levels),
                  max(l["mean_fidelity"] + l["std_fidelity"] for l in levels)),
            errors={"mean fidelity": [l["std_fidelity"] for l in levels]},
            hline=data["filter"]["h_filter"],
        )

    battery = _read_battery(run_dir)
    if battery is not None:
        table, manifest = battery
        metric = manifest["primary_metric"]
        arms = [a["name"] for a in manifest["arms"] if metric in table.get(a["name"], {})]
        if arms:
            files["ablation_bars.svg"] = bar_chart(
                arms, [table[a][metric][0] for a in arms], [table[a][metric][1] for a in arms],
                f"ablation arms ({metric})", metric,
            )
            summary["ablation"] = {
                "metric": metric,
                "best_fixed": manifest.get("best_fixed"),
                "arms": {a: {"mean": table[a][metric][0], "std": table[a][metric][1], "n": table[a][metric][2]}
                         for a in arms},
            }
    files["summary.json"] = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    return files


def emit_report(run_dir: str | Path) -> list[Path]:
    """Write ``<run>/report/``; raises ``ReportError`` naming absent stages."""
    run_dir = Path(run_dir)
    files = render_report(run_dir)
    out = run_dir / REPORT_DIR
    tmp = run_dir / f".{REPORT_DIR}.tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    for name, text in sorted(files.items()):
        (tmp / name).write_text(text)
    shutil.rmtree(out, ignore_errors=True)
    tmp.rename(out)
    return [out / name for name in sorted(files)]
