import logging

import numpy as np
import pytest

from hagnn.metrics import roc_curve
from hagnn.report import emit_report, format_cell, format_table
from hagnn.training import MetricsReport

KEYS = ("acc", "auc_roc", "ba", "cn_to_mci", "mci_to_ad")


def _report(n_folds=2):
    per_fold = [{k: 0.5 + 0.1 * i for k in KEYS} | {"fold": i} for i in range(n_folds)]
    mean = {k: float(np.mean([f[k] for f in per_fold])) for k in KEYS}
    std = {k: float(np.std([f[k] for f in per_fold])) for k in KEYS}
    return MetricsReport(per_fold, mean, std)


def test_cell_format():
    assert format_cell(0.771, 0.114) == "0.771 ± 0.114"
    assert format_cell(0.6875) == "0.688"
    assert format_cell(None, 0.1) == "n/a"


def test_table_layout():
    rep = MetricsReport([], {"acc": 0.829, "auc_roc": 0.852, "ba": 0.771, "cn_to_mci": 0.688, "mci_to_ad": 0.5},
                        {"acc": 0.058, "auc_roc": 0.065, "ba": 0.114, "cn_to_mci": 0.2, "mci_to_ad": 0.1})
    text = format_table([("HA-GNN (LSTM)", rep)])
    header, rule, row = text.splitlines()
    assert header.split()[:3] == ["Model", "Acc.", "AUC-ROC"]
    assert set(rule) == {"-"}
    assert "0.771 ± 0.114" in row and "0.829 ± 0.058" in row
    # pooled transition columns print without a spread
    assert row.rstrip().endswith("0.688      0.500")


def test_single_fold_reports_zero_spread(tmp_path):
    rep = _report(1)
    assert all(v == 0.0 for v in rep.std.values())
    emit_report(rep, tmp_path, [])
    assert "0.500 ± 0.000" in (tmp_path / "table.txt").read_text()


def test_missing_std_on_defined_mean_prints_zero():
    rep = MetricsReport([], {"acc": 0.9, "auc_roc": None, "ba": 0.8, "cn_to_mci": None, "mci_to_ad": None},
                        {"acc": None, "auc_roc": None, "ba": 0.0, "cn_to_mci": None, "mci_to_ad": None})
    row = format_table([("m", rep)]).splitlines()[2]
    assert "0.900 ± 0.000" in row and "n/a" in row


def test_emit_writes_every_artifact(tmp_path):
    rng = np.random.default_rng(0)
    rocs = [roc_curve(rng.random(20), np.r_[np.ones(5), np.zeros(15)]) for _ in range(2)]
    paths = emit_report(_report(), tmp_path / "out", rocs)
    names = sorted(p.name for p in paths)
    assert names == ["metrics.json", "roc_fold0.csv", "roc_fold0.svg", "roc_fold1.csv", "roc_fold1.svg",
                     "table.txt"]
    data = np.loadtxt(tmp_path / "out" / "roc_fold0.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 0], rocs[0][0])
    np.testing.assert_array_equal(data[:, 1], rocs[0][1])
    assert np.isinf(data[0, 2])
    assert (tmp_path / "out" / "roc_fold0.csv").read_text().startswith("fpr,tpr,threshold\n")
    assert (tmp_path / "out" / "roc_fold1.svg").read_text().lstrip().startswith("<?xml")


def test_svg_is_reproducible(tmp_path):
    roc = roc_curve([0.9, 0.2, 0.6, 0.4], [1, 0, 1, 0])
    emit_report(_report(), tmp_path / "a", [roc])
    emit_report(_report(), tmp_path / "b", [roc])
    assert (tmp_path / "a" / "roc_fold0.svg").read_bytes() == (tmp_path / "b" / "roc_fold0.svg").read_bytes()


def test_empty_roc_list_warns_and_skips_plots(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="hagnn.report"):
        paths = emit_report(_report(), tmp_path, [])
    assert sorted(p.name for p in paths) == ["metrics.json", "table.txt"]
    assert "plots omitted" in caplog.text


def test_undefined_fold_roc_is_skipped(tmp_path, caplog):
    roc = roc_curve([0.9, 0.2], [1, 0])
    with caplog.at_level(logging.WARNING, logger="hagnn.report"):
        paths = emit_report(_report(), tmp_path, [None, roc])
    assert "roc_fold1.svg" in {p.name for p in paths}
    assert not (tmp_path / "roc_fold0.csv").exists()
    assert "fold 0" in caplog.text


def test_unwritable_directory_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(_report(), blocker / "sub", [])
