import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metric_oracles import consistency_direct, stability_bruteforce
from xaiport.backends import mock_configure
from xaiport.errors import MissingRunError
from xaiport.evaluation import (
    ExplanationSummary,
    MetricReport,
    ReportRow,
    build_report,
    consistency,
    deletion_score,
    f1_score,
    stability,
    summary_distance,
)
from xaiport.explainers import METHODS

scores = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def summ(method, d, backend="Azure", variant="baseline", ids=None):
    ids = ids or [f"s{i}" for i in range(len(d))]
    return ExplanationSummary(method=method, backend_id=backend, sample_ids=ids, deletion=d, variant=variant)


# -- stability -------------------------------------------------------------------

def test_stability_examples():
    assert stability([0.2, 0.2, 0.2]) == 0.0
    assert stability([0.1, 0.3]) == pytest.approx(0.2, abs=1e-15)
    assert stability([0, 1, 2]) == pytest.approx(4 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        stability([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(scores, min_size=2, max_size=50))
def test_stability_matches_bruteforce(d):
    ref = stability_bruteforce(d)
    assert stability(d) == pytest.approx(ref, rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(scores, min_size=2, max_size=30), st.randoms(use_true_random=False))
def test_stability_permutation_invariant_and_bounded(d, rnd):
    shuffled = list(d)
    rnd.shuffle(shuffled)
    assert stability(shuffled) == stability(d)
    assert 0 <= stability(d) <= max(d) - min(d) + 1e-9
    assert stability(d + [d[0]]) <= max(d) - min(d) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(scores, min_size=2, max_size=30))
def test_stability_zero_iff_constant(d):
    assert (stability(d) == 0) == (len(set(d)) == 1)


# -- consistency -------------------------------------------------------------------

def test_consistency_examples():
    x, o = summ("grad_cam", [0.1, 0.2]), summ("eigen_cam", [0.3, 0.2])
    assert consistency([x, o], "grad_cam") == pytest.approx(0.1, abs=1e-15)
    same = [summ(m, [1.0, 2.0, 3.0]) for m in METHODS]
    assert consistency(same, "layer_cam") == 0.0
    three = [summ("grad_cam", [0.0]), summ("eigen_cam", [0.1]), summ("layer_cam", [0.3])]
    assert consistency(three, "grad_cam") == pytest.approx(0.2, abs=1e-15)


def test_consistency_two_methods_is_exact_pair_distance():
    rs = np.random.default_rng(0)
    for _ in range(50):
        a, b = rs.normal(size=7).tolist(), rs.normal(size=7).tolist()
        x, o = summ("grad_cam", a), summ("xgrad_cam", b)
        assert consistency([x, o], "grad_cam") == summary_distance(x, o)
        assert consistency([x, o], "grad_cam") == math.fsum(abs(p - q) for p, q in zip(a, b)) / 7


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 20), st.data())
def test_consistency_matches_direct_formula(k, m, data):
    methods = list(METHODS[:k])
    vecs = {meth: data.draw(st.lists(scores, min_size=m, max_size=m)) for meth in methods}
    summaries = [summ(meth, vecs[meth]) for meth in methods]
    for x in methods:
        ref = consistency_direct(vecs, x)
        assert consistency(summaries, x) == pytest.approx(ref, rel=1e-9, abs=1e-12)
    # permuting the non-x summaries changes nothing
    assert consistency([summaries[0]] + summaries[1:][::-1], methods[0]) == consistency(summaries, methods[0])


def test_consistency_errors():
    a = summ("grad_cam", [1.0, 2.0])
    with pytest.raises(ValueError):
        consistency([a, summ("eigen_cam", [1.0, 2.0], ids=["x", "y"])], "grad_cam")
    with pytest.raises(KeyError):
        consistency([a, summ("eigen_cam", [1.0, 2.0])], "layer_cam")


def test_summary_rejects_bad_vectors():
    with pytest.raises(ValueError):
        summ("grad_cam", [1.0, float("nan")])
    with pytest.raises(ValueError):
        ExplanationSummary("grad_cam", "a", ["s0"], [1.0, 2.0])


# -- deletion ----------------------------------------------------------------------

def test_deletion_zero_when_masking_is_noop():
    img = np.full((1, 16, 16), 0.3, np.float32)
    lin = np.zeros((2, 1, 16, 16), np.float32)
    lin[0, 0, :4] = 1
    m = mock_configure(linear=lin)
    assert deletion_score(m, img, np.zeros((16, 16)), 0.25, [0.3]) == 0.0
    fixed = mock_configure(fixed=[0.8, 0.2])
    rs = np.random.default_rng(0)
    assert deletion_score(fixed, rs.random((1, 16, 16)), rs.random((16, 16)), 0.25, [0.5]) == 0.0


def test_deletion_uses_clean_argmax_and_can_be_negative():
    lin = np.zeros((2, 1, 16, 16), np.float32)
    lin[0, 0] = 0.05
    lin[0, 0, :8, :8] = -0.05  # class 0 wins, and zeroing the top-left raises it further
    m = mock_configure(linear=lin)
    img = np.ones((1, 16, 16), np.float32)
    sal = np.zeros((16, 16))
    sal[:8, :8] = 1
    d = deletion_score(m, img, sal, 0.25, [0.0])
    assert d < 0


# -- f1 ------------------------------------------------------------------------------

def test_f1_examples():
    assert f1_score([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert f1_score([0, 1, 0, 1], [0, 1, 1, 0]) == 0.5
    assert f1_score([0, 0, 0, 0], [0, 1, 0, 1]) == pytest.approx(1 / 3)
    assert f1_score([0, 0], [0, 0], num_classes=2) == 0.5
    with pytest.raises(ValueError):
        f1_score([0], [0, 1])


# -- report --------------------------------------------------------------------------

def test_report_ordering_and_shape():
    rs = np.random.default_rng(1)
    summaries, f1 = [], {}
    for b in ("Google", "Amazon", "Azure"):
        for v in ("saliency-mix", "baseline", "cutmix"):
            f1[(b, v)] = 0.9
            for m in reversed(METHODS):
                summaries.append(summ(m, rs.random(4).tolist(), backend=b, variant=v))
    rep = build_report(summaries, f1)
    assert [r.label for r in rep.rows][:4] == ["Amazon (B)", "Amazon (C)", "Amazon (P)", "Azure (B)"]
    assert rep.methods == list(METHODS)
    assert len(rep.rows) == 9 and all(r.pairs == 6 and r.samples == 4 for r in rep.rows)
    again = build_report(list(reversed(summaries)), f1)
    assert rep.to_json() == again.to_json()
    assert json.loads(rep.to_json())["rows"][0]["pairs"] == 6
    assert MetricReport.from_dict(json.loads(rep.to_json())).to_json() == rep.to_json()


def test_single_cell_report():
    rep = build_report([summ("eigen_cam", [1.0, 3.0])], {("Azure", "baseline"): 1.0})
    assert rep.methods == ["eigen_cam"] and len(rep.rows) == 1
    assert rep.cell("Azure", "baseline", "eigen_cam") == 2.0
    assert rep.rows[0].consistency == {}


def test_missing_run_lists_cells():
    s = [summ("grad_cam", [1.0, 2.0]), summ("eigen_cam", [1.0, 2.0], variant="cutmix")]
    with pytest.raises(MissingRunError) as err:
        build_report(s, {("Azure", "baseline"): 1.0}, variants=["baseline", "cutmix"])
    missing = err.value.missing
    assert ("Azure", "baseline", "eigen_cam") in missing
    assert ("Azure", "cutmix", "grad_cam") in missing
    assert ("Azure", "cutmix", "f1") in missing


def test_table_renderer_reproduces_stored_row():
    row = ReportRow(
        backend="Azure", variant="baseline", f1=0.839,
        stability=dict(zip(METHODS, [22.227, 21.211, 32.498, 20.595, 22.229])), samples=10,
    )
    text = MetricReport(list(METHODS), [row]).render_table()
    header, line = text.splitlines()
    assert header == "Service  F1-score  GradCAM  GradCAM++  EigenCAM  LayerCAM  XGradCAM"
    assert line == "Azure (B) 0.839 | 22.227 | 21.211 | 32.498 | 20.595 | 22.229"
