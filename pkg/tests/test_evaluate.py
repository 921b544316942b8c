import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clad.compressor import compress_window
from clad.errors import InputError
from clad.evaluate import MetricsReport, confusion, evaluate_model, macro_f1, prf1, report
from clad.model import CLAD, save_checkpoint, tiny_config
from clad.synthgen import generate_corpus


def test_confusion_counts():
    assert confusion([1, 1, 0, 0, 1], [1, 0, 1, 0, 1]) == (2, 1, 1, 1)
    with pytest.raises(InputError):
        confusion([1, 0], [1])


def test_prf1_examples():
    assert prf1(8, 2, 2)[:3] == pytest.approx((0.8, 0.8, 0.8))
    p, r, f, deg = prf1(0, 0, 5)
    assert (p, r, f, deg) == (0.0, 0.0, 0.0, True)
    p, r, f, deg = prf1(0, 0, 0)
    assert f == 0.0 and deg
    assert prf1(3, 0, 0) == (1.0, 1.0, 1.0, False)


def test_f1_from_published_precision_recall():
    p, r = 0.9768, 0.9530
    f1 = 2 * p * r / (p + r)
    assert abs(f1 - 0.9645) <= 0.001
    # the same value through integer counts that realize those ratios
    tp = 9768 * 9530
    fp = tp * (10000 - 9768) // 9768
    fn = tp * (10000 - 9530) // 9530
    assert prf1(tp, fp, fn)[2] == pytest.approx(f1, abs=1e-8)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_f1_is_harmonic_mean(tp, fp, fn):
    p, r, f, deg = prf1(tp, fp, fn)
    assert 0 <= f <= 1
    if not deg:
        assert f == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


def test_report_and_macro(tmp_path):
    a = report([1, 0, 1, 1], [1, 0, 0, 1], "a")
    b = report([0, 0], [0, 1], "b")
    assert (a.tp, a.fp, a.fn, a.tn) == (2, 1, 0, 1) and a.total == 4
    assert b.degenerate and b.f1 == 0
    assert macro_f1([a, b]) == pytest.approx(a.f1 / 2)
    a.write(tmp_path / "m.json")
    assert MetricsReport(**json.loads((tmp_path / "m.json").read_text())) == a


def test_evaluate_model_from_checkpoint(tmp_path):
    cws = [compress_window(w) for w in generate_corpus(0, 12, 10, 0.25).windows]
    model = CLAD(tiny_config(seed=4))
    save_checkpoint(tmp_path / "m.ckpt", model, "finetuned-ema")
    preds_csv = tmp_path / "p.csv"
    rep = evaluate_model(tmp_path / "m.ckpt", cws, "synth", predictions_csv=preds_csv)
    direct = evaluate_model(model, cws, "synth")
    assert rep == direct
    assert rep.total == 12
    rows = list(csv.DictReader(preds_csv.open()))
    assert [int(r["window_id"]) for r in rows] == list(range(12))
    assert sum(int(r["prediction"]) for r in rows) == rep.tp + rep.fp
    for r in rows:
        assert int(r["prediction"]) == int(np.argmax([float(r["logit_normal"]), float(r["logit_anomalous"])]))
    with pytest.raises(InputError):
        evaluate_model(model, [], "synth")
