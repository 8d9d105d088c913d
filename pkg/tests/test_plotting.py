from beliefmeta import plotting

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

RUN = [
    {"iter": str(i), "labeled_query_sets": str(2 * (i + 1)), "train_loss": str(1.6 - 0.01 * i),
     "mean_vb": "0.5", "mean_cb": "0.2", "mean_ib": "NA" if i == 0 else "0.3"}
    for i in range(5)
]


def test_belief_trends_multi_run(tmp_path):
    path = plotting.belief_trends({"a": RUN, "b": RUN[:3]}, tmp_path / "t.png")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_budget_curves(tmp_path):
    assert plotting.budget_curves({"a": RUN}, tmp_path / "b.png").read_bytes().startswith(PNG_MAGIC)


def test_vacuity_thresholds_skips_overall_and_missing(tmp_path):
    rows = [{"threshold": "0.1", "coverage": "0", "accuracy": "NA"},
            {"threshold": "1", "coverage": "1", "accuracy": "0.4"},
            {"threshold": "overall", "coverage": "1", "accuracy": "0.4"}]
    assert plotting.vacuity_thresholds({"r": rows}, tmp_path / "v.png").read_bytes().startswith(PNG_MAGIC)


def test_ood_vacuity(tmp_path):
    rows = [{"kind": "feature-shift", "magnitude": m, "mean_vacuity": v, "accuracy": "0.3"}
            for m, v in [("0", "0.2"), ("1", "0.3"), ("5", "0.6")]]
    assert plotting.ood_vacuity(rows, tmp_path / "o.png").read_bytes().startswith(PNG_MAGIC)


def test_figure_bytes_are_reproducible(tmp_path):
    a = plotting.budget_curves({"a": RUN}, tmp_path / "a.png").read_bytes()
    b = plotting.budget_curves({"a": RUN}, tmp_path / "b.png").read_bytes()
    assert a == b
