import math

import numpy as np
import pytest

import immune
from immune import (
    ImmuneModel,
    Label,
    ProcessTrace,
    SingleClassError,
    SyntheticSpec,
    TraceError,
    classify,
    evaluate,
    extract_features,
    generate_synthetic_traces,
    threshold_grid,
    train,
    tuned_prior,
)


def trace(samples, label=None, pid="p"):
    return ProcessTrace(pid, np.array(samples, dtype=float), label)


@pytest.fixture(scope="module")
def train_set():
    return generate_synthetic_traces(SyntheticSpec(n_normal=40, n_abnormal=0, seed=1))


@pytest.fixture(scope="module")
def model(train_set):
    return train(train_set)


@pytest.fixture(scope="module")
def test_set():
    return generate_synthetic_traces(SyntheticSpec(n_normal=60, n_abnormal=20, seed=2))


def test_constant_trace_features():
    f = extract_features(trace([[0.5, 0.5, 0.5]] * 10))
    assert f.values == (0.5, 0.0, 0.5, 0.5) * 3


def test_two_point_features():
    f = extract_features(trace([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    assert f.values[:4] == (0.5, 0.5, 0.0, 1.0)
    assert f.values[4:] == (0.0,) * 8


def test_features_ignore_sample_order():
    rng = np.random.default_rng(0)
    samples = rng.random((64, 3))
    shuffled = samples[rng.permutation(64)]
    assert extract_features(trace(samples)) == extract_features(trace(shuffled))


def test_trace_validation():
    with pytest.raises(TraceError):
        trace([[0.1, 0.1, 0.1]])
    with pytest.raises(TraceError):
        trace([[0.1, 0.1, 1.2], [0.1, 0.1, 0.1]])
    with pytest.raises(TraceError):
        trace([[0.1, 0.1], [0.1, 0.1]])


def test_train_needs_two_traces():
    with pytest.raises(TraceError):
        train([trace([[0.2, 0.2, 0.2], [0.3, 0.3, 0.3]])])


def test_identical_traces_zero_threshold():
    t = trace([[0.2, 0.3, 0.4], [0.3, 0.3, 0.5]])
    for q in (0.1, 0.5, 1.0):
        m = train([t, t], q)
        assert m.threshold == 0.0
        assert np.all(m.scale == 1.0)


def test_threshold_from_leave_one_out_quantile(monkeypatch):
    # three raw points on one axis: 0, 1 and -1
    prototypes = np.zeros((3, immune.N_DIMS))
    prototypes[1, 0] = 1.0
    prototypes[2, 0] = -1.0
    monkeypatch.setattr(immune, "feature_matrix", lambda traces: prototypes)
    dummy = [trace([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]])] * 3
    m_max = train(dummy, 1.0)
    m_med = train(dummy, 0.5)
    scale = np.std([0.0, 1.0, -1.0])
    assert m_max.threshold == pytest.approx(1.0 / scale)
    assert m_med.threshold == pytest.approx(1.0 / scale)
    assert m_max.beta == pytest.approx(0.0)


def test_classify_prototype_is_normal(model, train_set):
    f = extract_features(train_set[0])
    for p in (0.5, 0.7, 0.99):
        result = classify(model, f, p)
        assert result.distance == 0.0
        assert result.verdict is Label.NORMAL


def test_prior_half_is_plain_threshold(model, test_set):
    for t in test_set:
        f = extract_features(t)
        result = classify(model, f, 0.5)
        assert (result.verdict is Label.NORMAL) == (result.distance <= model.threshold)


def test_verdicts_compare_directly_with_labels(model, test_set):
    results = [classify(model, extract_features(t)) for t in test_set]
    correct = sum(r.verdict is t.label for r, t in zip(results, test_set))
    errors = evaluate(model, test_set, [model.threshold], 0.5)[0]
    assert correct == len(test_set) - errors.false_positives - errors.false_negatives


def test_verdict_monotone_in_prior(model, test_set):
    grid = np.linspace(0.01, 0.99, 99)
    for t in test_set[::7]:
        f = extract_features(t)
        verdicts = [classify(model, f, p).verdict is Label.NORMAL for p in grid]
        flips = sum(a != b for a, b in zip(verdicts, verdicts[1:]))
        assert flips <= 1
        if flips:
            assert verdicts[-1]


def test_prior_out_of_range(model, test_set):
    with pytest.raises(ValueError):
        classify(model, extract_features(test_set[0]), 1.0)


def test_distance_matches_exhaustive_scan():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        m = ImmuneModel(
            prototypes=rng.normal(size=(rng.integers(1, 8), immune.N_DIMS)),
            threshold=1.0,
            center=rng.normal(size=immune.N_DIMS),
            scale=rng.uniform(0.5, 2.0, size=immune.N_DIMS),
            beta=0.5,
        )
        raw = rng.normal(size=immune.N_DIMS)
        z = (raw - m.center) / m.scale
        oracle = min(math.sqrt(sum((a - b) ** 2 for a, b in zip(z, p))) for p in m.prototypes)
        assert m.distances(raw)[0] == pytest.approx(oracle, rel=1e-12, abs=1e-12)


def test_affine_rescaling_keeps_verdicts(train_set, test_set):
    shift = np.linspace(-0.3, 0.3, immune.N_DIMS)
    factor = np.linspace(0.5, 3.0, immune.N_DIMS)
    raw_train = immune.feature_matrix(train_set)
    raw_test = immune.feature_matrix(test_set)

    def fitted(raw):
        center, scale = raw.mean(axis=0), raw.std(axis=0)
        scale[scale == 0] = 1.0
        return ImmuneModel((raw - center) / scale, 1.5, center, scale, 0.0)

    a = fitted(raw_train)
    b = fitted(raw_train * factor + shift)
    da = a.distances(raw_test)
    db = b.distances(raw_test * factor + shift)
    assert np.allclose(da, db)
    assert np.array_equal(da <= 1.5, db <= 1.5)


def test_evaluate_limits(model, test_set):
    huge, zero = evaluate(model, test_set, [1e9, 0.0])
    n_normal = sum(t.label is Label.NORMAL for t in test_set)
    assert (huge.false_positives, huge.false_negatives) == (0, len(test_set) - n_normal)
    assert (zero.false_positives, zero.false_negatives) == (n_normal, 0)
    for row in (huge, zero):
        assert 0.0 <= row.error_rate <= 100.0


def test_evaluate_rejects_single_class(model, train_set):
    with pytest.raises(SingleClassError):
        evaluate(model, train_set, [1.0])
    with pytest.raises(SingleClassError):
        tuned_prior(train_set)


def test_error_curve_shape(model, test_set):
    grid = threshold_grid(model, test_set, [0.5])
    rows = evaluate(model, test_set, grid)
    rates = [r.error_rate for r in rows]
    best = min(rates)
    assert best < 10.0
    assert rates[0] > best and rates[-1] > best
    assert rates[0] >= 20.0 and rates[-1] >= 20.0


def test_tuned_prior_never_worse(model, test_set):
    p = tuned_prior(test_set)
    assert p == pytest.approx(0.75)
    grid = threshold_grid(model, test_set, [0.5, p])
    best_plain = min(r.error_rate for r in evaluate(model, test_set, grid, 0.5))
    best_tuned = min(r.error_rate for r in evaluate(model, test_set, grid, p))
    assert best_tuned <= best_plain


def test_balanced_synthetic_set_is_separable(model):
    labelled = generate_synthetic_traces(SyntheticSpec(n_normal=50, n_abnormal=50, length=256, seed=9))
    rows = evaluate(model, labelled, threshold_grid(model, labelled, [0.5]))
    assert min(r.error_rate for r in rows) < 10.0


def test_generator_empty_and_deterministic():
    assert generate_synthetic_traces(SyntheticSpec(n_normal=0, n_abnormal=0)) == []
    spec = SyntheticSpec(n_normal=3, n_abnormal=2, length=32, seed=5)
    a = generate_synthetic_traces(spec)
    b = generate_synthetic_traces(spec)
    assert [t.process_id for t in a] == [t.process_id for t in b]
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))
    assert [t.label for t in a] == [Label.NORMAL] * 3 + [Label.ABNORMAL] * 2


def test_generator_rejects_invalid_settings():
    with pytest.raises(ValueError):
        SyntheticSpec(n_normal=-1)
    with pytest.raises(ValueError):
        immune.TraceProfile(phi=1.0)


def test_trace_files_round_trip(tmp_path):
    traces = generate_synthetic_traces(SyntheticSpec(n_normal=2, n_abnormal=1, length=16, seed=3))
    manifest = immune.write_traces(traces, tmp_path)
    loaded = immune.read_manifest(manifest)
    assert [t.label for t in loaded] == [t.label for t in traces]
    assert all(np.allclose(x.samples, y.samples, rtol=0, atol=1e-15) for x, y in zip(loaded, traces))


def test_trace_csv_needs_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,cpu,mem,net\n0,0.1,0.1,0.1\n1,0.2,0.2,0.2\n")
    with pytest.raises(TraceError):
        immune.read_trace_csv(path)


def test_manifest_missing_trace(tmp_path):
    (tmp_path / "manifest.csv").write_text("path,label\nmissing.csv,normal\n")
    with pytest.raises(FileNotFoundError):
        immune.read_manifest(tmp_path / "manifest.csv")
