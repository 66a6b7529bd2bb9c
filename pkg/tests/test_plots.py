from graspfield.plots import (ablation_bars, energy_traces, metric_bars,
                              save_report_figures)

ROWS = [
    {"bin": "B1", "viou": 0.91, "cd": 0.002},
    {"bin": "B2", "viou": 0.88, "cd": 0.003},
    {"bin": "All", "viou": 0.90, "cd": 0.0024},
]


def test_metric_bars_writes_png(tmp_path):
    p = metric_bars(ROWS, "viou", tmp_path / "fig.png")
    assert p.exists() and p.stat().st_size > 1000
    assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_save_report_figures_one_per_metric(tmp_path):
    paths = save_report_figures(ROWS, ["viou", "cd"], tmp_path)
    assert [p.name for p in paths] == ["fig_viou.png", "fig_cd.png"]
    assert all(p.exists() for p in paths)


def test_ablation_bars_and_traces(tmp_path):
    p = ablation_bars({"full": 0.97, "no-touch": 0.95, "vision-only": 0.9},
                      tmp_path / "sub" / "ab.png")
    assert p.exists() and p.stat().st_size > 1000
    q = energy_traces([[3, 2, 1], [2.5, 2, 1.5]], tmp_path / "en.png")
    assert q.exists() and q.stat().st_size > 1000
