import json
from pathlib import Path

import pytest

from diffcurriculum.report import SUMMARY_COLUMNS, ReportError, emit_report, render_report

GOLDEN = Path(__file__).parent / "golden"


def fake_run(root: Path, metrics=None) -> Path:
    (root / "filter").mkdir(parents=True)
    (root / "curriculum-train").mkdir()
    (root / "evaluate").mkdir()
    (root / "filter" / "summary.json").write_text(json.dumps({
        "h_filter": 0.6, "calibrated_threshold": 0.6,
        "levels": [{"lam": l, "count": 40, "kept": k, "mean_fidelity": f, "std_fidelity": 0.05}
                   for l, k, f in [(0.0, 20, 0.55), (0.1, 25, 0.6), (0.3, 30, 0.66), (0.5, 36, 0.7)]],
    }))
    rows = [{"epoch": e, "phase": "curriculum" if e < 4 else "cooldown", "strategy": "diverse_to_specific",
             "lam": [0.0, 0.1, 0.3, 0.5][e] if e < 4 else None, "size": 100, "n_synthetic": 20, "n_real": 80,
             "loss": 1.0 / (e + 1), "accuracy": 0.5 + 0.05 * e, "lr": 0.01} for e in range(6)]
    (root / "curriculum-train" / "stages.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    if metrics is None:
        metrics = {"accuracy_all": 0.75, "accuracy_few": 0.5, "accuracy_many": 0.9, "accuracy_medium": 0.7,
                   "macro_f1_id": 0.74, "macro_f1_ood": 0.6, "accuracy_ood": 0.61, "worst_1": 0.2, "worst_3": 0.4,
                   "worst_k": {"1": 0.2, "3": 0.4}, "per_class": {"0": 0.9, "1": 0.2}}
    (root / "evaluate" / "metrics.json").write_text(json.dumps(
        {"task": "longtail", "seed": 0, "strategy": "diverse_to_specific", "metrics": metrics}))
    return root


def test_summary_csv_matches_golden(tmp_path):
    files = render_report(fake_run(tmp_path))
    assert files["summary.csv"] == (GOLDEN / "summary.csv").read_text()
    assert files["summary.csv"].splitlines()[0] == ",".join(SUMMARY_COLUMNS)


def test_plots_are_byte_deterministic(tmp_path):
    a = render_report(fake_run(tmp_path / "a"))
    b = render_report(fake_run(tmp_path / "b"))
    assert set(a) == {"summary.csv", "summary.json", "accuracy_vs_stage.svg", "fidelity_vs_lambda.svg"}
    assert a == b
    assert a["fidelity_vs_lambda.svg"].startswith("<svg") and "polyline" in a["accuracy_vs_stage.svg"]


def test_emit_writes_files(tmp_path):
    paths = emit_report(fake_run(tmp_path))
    assert sorted(p.name for p in paths) == sorted(render_report(tmp_path))
    assert all(p.is_file() for p in paths)


def test_empty_metrics_leave_no_files(tmp_path):
    run = fake_run(tmp_path, metrics={})
    with pytest.raises(ReportError) as err:
        emit_report(run)
    assert err.value.missing == ["evaluate"]
    assert not (run / "report").exists() and not (run / ".report.tmp").exists()


def test_missing_stages_named(tmp_path):
    run = fake_run(tmp_path)
    (run / "filter" / "summary.json").unlink()
    (run / "curriculum-train" / "stages.jsonl").unlink()
    with pytest.raises(ReportError) as err:
        render_report(run)
    assert err.value.missing == ["filter", "curriculum-train"]


def test_failed_report_keeps_previous_report(tmp_path):
    run = fake_run(tmp_path)
    emit_report(run)
    before = (run / "report" / "summary.csv").read_text()
    (run / "evaluate" / "metrics.json").unlink()
    with pytest.raises(ReportError):
        emit_report(run)
    assert (run / "report" / "summary.csv").read_text() == before


def test_battery_bars(tmp_path):
    run = fake_run(tmp_path)
    (run / "battery").mkdir()
    (run / "battery" / "summary.csv").write_text(
        "arm,metric,mean,std,n\nreal_only,accuracy_few,0.2,0.03,5\ndiverse_to_specific,accuracy_few,0.44,0.04,5\n")
    (run / "battery" / "manifest.json").write_text(json.dumps({
        "primary_metric": "accuracy_few", "best_fixed": None,
        "arms": [{"name": "real_only"}, {"name": "diverse_to_specific"}]}))
    files = render_report(run)
    assert "ablation_bars.svg" in files and files["ablation_bars.svg"].count("<rect") == 3
    assert json.loads(files["summary.json"])["ablation"]["arms"]["real_only"]["n"] == 5
