import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gashis.evaluation import (
    ConfusionMatrix,
    EvalReport,
    confusion,
    evaluate,
    export_features,
    is_close_percent,
    metrics,
    read_features,
)
from gashis.model import GasHisTransformer, ModelConfig
from gashis.preprocess import Dataset, ImageSample
from gashis.tensor import ContractError


def tally(preds, labels, k):
    """Pairwise counting, one sample at a time."""
    out = [[0] * k for _ in range(k)]
    for p, t in zip(preds, labels):
        out[t][p] += 1
    return out


def random_case(seed, n=100, k=2):
    rng = np.random.default_rng(seed)
    return rng.integers(0, k, n), rng.integers(0, k, n)


# ---------------------------------------------------------------------- confusion

def test_all_correct_is_diagonal():
    labels = np.array([0, 1, 2, 2, 1])
    cm = confusion(labels, labels, 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 2]))


@pytest.mark.parametrize("k", [2, 3, 5])
@pytest.mark.parametrize("seed", range(5))
def test_matches_tally_oracle(seed, k):
    preds, labels = random_case(seed, 100, k)
    cm = confusion(preds, labels, k)
    assert cm.counts.tolist() == tally(preds, labels, k)
    assert cm.total == 100


def test_full_test_split_counts():
    # 420 abnormal (class 0, positive) and 420 normal test images
    labels = np.array([0] * 420 + [1] * 420)
    preds = np.array([0] * 409 + [1] * 11 + [0] * 6 + [1] * 414)
    cm = confusion(preds, labels, 2)
    assert cm.one_vs_rest(0) == (409, 11, 6, 414)
    assert cm.total == 840


def test_confusion_contracts():
    with pytest.raises(ContractError, match="label 3"):
        confusion([0, 1], [0, 3], 3)
    with pytest.raises(ContractError, match="prediction -1"):
        confusion([-1, 1], [0, 1], 2)
    with pytest.raises(ContractError):
        confusion([0, 1, 1], [0, 1], 2)
    with pytest.raises(ContractError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ContractError):
        ConfusionMatrix(np.array([[1.5, 0], [0, 0]]))


# ------------------------------------------------------------------------ metrics

def test_reference_criteria():
    r = metrics(ConfusionMatrix.from_binary(409, 11, 6, 414))
    assert r.pre == pytest.approx(409 / 415)
    assert r.rec == pytest.approx(409 / 420)
    assert r.acc == pytest.approx(823 / 840)
    for value, expected in zip((r.pre, r.rec, r.f1, r.acc), (98.55, 97.38, 97.97, 97.97)):
        assert is_close_percent(value, expected, 0.01)
    assert str(r) == "Pre 98.55  Rec 97.38  F1 97.96  Acc 97.98"


def test_perfect_predictions():
    r = metrics(ConfusionMatrix.from_binary(5, 0, 0, 7))
    assert (r.pre, r.rec, r.f1, r.acc) == (1.0, 1.0, 1.0, 1.0)
    assert r.to_csv_row() == ["100.00"] * 4


def test_undefined_precision_is_marked():
    r = metrics(ConfusionMatrix.from_binary(0, 10, 0, 10))
    assert r.pre is None
    assert r.rec == 0.0
    assert r.f1 == 0.0
    assert r.acc == 0.5
    assert r.percent("Pre") == "undefined"
    assert json.loads(r.to_json())["criteria"]["Pre"] is None


def test_no_positive_samples_leaves_recall_undefined():
    r = metrics(ConfusionMatrix.from_binary(0, 0, 3, 7))
    assert r.rec is None and r.pre == 0.0 and r.f1 == 0.0 and r.acc == 0.7


def test_positive_index_selects_the_class():
    counts = np.array([[8, 2], [1, 9]])
    a = metrics(ConfusionMatrix(counts, positive=0))
    b = metrics(ConfusionMatrix(counts[::-1, ::-1].copy(), positive=1))
    assert a.as_dict() == b.as_dict()
    assert a.pre == pytest.approx(8 / 9)


@settings(max_examples=60, deadline=None)
@given(cells=st.tuples(*[st.integers(0, 500)] * 4).filter(lambda c: sum(c) > 0))
def test_binary_identities(cells):
    tp, fn, fp, tn = cells
    r = metrics(ConfusionMatrix.from_binary(tp, fn, fp, tn))
    assert r.acc == pytest.approx((tp + tn) / (tp + fn + fp + tn), abs=1e-15)
    if r.pre is not None and r.rec is not None and r.pre + r.rec > 0:
        assert abs(r.f1 - 2 * r.pre * r.rec / (r.pre + r.rec)) <= 1e-12
    for v in r.as_dict().values():
        assert v is None or 0.0 <= v <= 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.integers(2, 5), perm_seed=st.integers(0, 2**16))
def test_permutation_invariance_and_trace_accuracy(seed, k, perm_seed):
    preds, labels = random_case(seed, 60, k)
    perm = np.random.default_rng(perm_seed).permutation(60)
    a = metrics(confusion(preds, labels, k))
    b = metrics(confusion(preds[perm], labels[perm], k))
    assert a.as_dict() == b.as_dict()
    assert a.acc == np.mean(preds == labels)


def test_multiclass_macro_by_hand():
    counts = np.array([[5, 1, 0], [2, 3, 1], [0, 0, 4]])
    r = metrics(ConfusionMatrix(counts))
    pre = [5 / 7, 3 / 4, 4 / 5]
    rec = [5 / 6, 3 / 6, 4 / 4]
    f1 = [2 * p * q / (p + q) for p, q in zip(pre, rec)]
    assert r.averaging == "macro"
    assert r.pre == pytest.approx(np.mean(pre))
    assert r.rec == pytest.approx(np.mean(rec))
    assert r.f1 == pytest.approx(np.mean(f1))
    assert r.acc == pytest.approx(12 / 16)
    assert len(r.per_class) == 3


def test_macro_skips_classes_with_undefined_ratio():
    # class 2 is never predicted, so its precision is undefined
    counts = np.array([[3, 1, 0], [1, 3, 0], [1, 1, 0]])
    r = metrics(ConfusionMatrix(counts))
    assert r.per_class[2]["Pre"] is None
    assert r.pre == pytest.approx((3 / 5 + 3 / 5) / 2)
    assert r.rec == pytest.approx((3 / 4 + 3 / 4 + 0) / 3)


def test_empty_matrix():
    with pytest.raises(ContractError):
        metrics(ConfusionMatrix(np.zeros((2, 2), np.int64)))


def test_report_files(tmp_path):
    r = metrics(ConfusionMatrix.from_binary(409, 11, 6, 414))
    r.write(tmp_path / "r.json")
    back = EvalReport.from_json((tmp_path / "r.json").read_text())
    assert back.as_dict() == r.as_dict() and back.counts == [[409, 11], [6, 414]]
    r.write(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows == [["Pre", "Rec", "F1", "Acc"], ["98.55", "97.38", "97.96", "97.98"]]


# ----------------------------------------------------------------- model-backed

def image_dataset(n, size, seed=0):
    rng = np.random.default_rng(seed)
    samples = [ImageSample(rng.uniform(0, 255, (3, size, size)), i % 2, f"img{i}") for i in range(n)]
    return Dataset(samples, ["abnormal", "normal"])


@pytest.fixture(scope="module")
def desk_model():
    return GasHisTransformer(ModelConfig.desk()).eval()


def test_evaluate_counts_every_sample(desk_model):
    data = image_dataset(5, 80)
    report, preds = evaluate(desk_model, data, batch=2)
    assert preds.shape == (5,)
    assert sum(map(sum, report.counts)) == 5
    assert report.acc == np.mean(preds == data.labels())


def test_export_shape_and_round_trip(desk_model, tmp_path):
    data = image_dataset(3, 80)
    feats = export_features(desk_model, data, tmp_path / "f.csv", batch=2)
    header = next(csv.reader(open(tmp_path / "f.csv")))
    assert header[:3] == ["source_id", "label", "prediction"] and len(header) == 3 + 512
    ids, labels, preds, back = read_features(tmp_path / "f.csv")
    assert ids == ["img0", "img1", "img2"] and labels.tolist() == [0, 1, 0]
    np.testing.assert_array_equal(back, feats)


def test_export_halves_follow_the_branches(desk_model, tmp_path):
    data = image_dataset(2, 80)
    lim_forward = desk_model.lim.forward
    try:
        desk_model.lim.forward = lambda t, trace=None: lim_forward(t, trace) * 0.0
        feats = export_features(desk_model, data, tmp_path / "f.csv")
    finally:
        del desk_model.lim.forward
    assert np.all(feats[:, 256:] == 0.0) and np.any(feats[:, :256] != 0.0)


def test_paper_scale_export_width(tmp_path):
    model = GasHisTransformer(ModelConfig.paper()).eval()
    feats = export_features(model, image_dataset(2, 224), tmp_path / "f.csv")
    assert feats.shape == (2, 4096)
    assert len(next(csv.reader(open(tmp_path / "f.csv")))) == 4099


def test_export_io_errors_surface(desk_model, tmp_path):
    with pytest.raises(OSError):
        export_features(desk_model, image_dataset(2, 80), tmp_path / "missing" / "f.csv")
