import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predbayes.domain import mask_table, parse_domain
from predbayes.frames import LabeledFrame, ObservationFrame
from predbayes.sensors import (EPS, FeatureTable, PredicateSensor, StateClassifier, TrainConfig, balanced_indices,
                               build_table, extract_features, masked_loss, masked_loss_and_grad, predict,
                               predict_many, predict_state, predict_state_features, recipe_for, sigmoid,
                               train_predicate_sensors, train_state_classifier)

THREE = """
predicate a modality=visual args=peg
predicate b modality=visual args=peg
predicate c modality=visual args=peg
predicate d modality=visual args=peg
state ALL3 { a=true, b=false, c=true }
state NONE { }
action Go kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1
"""


def _frame(force=(0.0, 0.0, 0.0), **kw):
    z = np.zeros(3)
    return ObservationFrame(kw.get("t", 0.0), kw.get("action", "Prepare"), np.asarray(kw.get("position", z)),
                            np.asarray(kw.get("velocity", z)), np.asarray(force, dtype=float),
                            np.asarray(kw.get("visual", np.zeros(6))))


def test_contact_features_read_force(spec):
    p = spec.predicate("motion-force-in-contact")
    names = recipe_for(p)[1]
    x = extract_features(_frame(force=(0, 0, -5)), p)
    assert x[names.index("fmag")] == pytest.approx(5.0)
    assert x[names.index("fz")] == pytest.approx(-5.0)


def test_zero_frame_gives_zero_features(spec):
    for p in spec.predicates:
        x = extract_features(ObservationFrame.zeros("Prepare"), p)
        assert np.all(x == 0.0)


def test_features_deterministic_and_bounded_length(spec, rng):
    f = _frame(force=rng.normal(size=3), position=rng.normal(size=3), velocity=rng.normal(size=3),
               visual=rng.normal(size=6))
    for p in spec.predicates:
        a, b = extract_features(f, p), extract_features(f, p)
        assert np.array_equal(a, b)
        assert len(a) <= 8


def test_streaming_features_match_batch(spec, small_dataset):
    traj = small_dataset[0]
    table = build_table([traj], spec, with_state_features=False)
    frames = traj.frames()
    for i in (0, 3, 10, 11, 57, len(frames) - 1):
        for p in spec.predicates:
            x = extract_features(frames[i], p, frames[:i])
            np.testing.assert_allclose(x, table.features[p.id][i], rtol=0, atol=1e-12)


def test_predict_examples():
    assert predict(PredicateSensor("p", np.zeros(2), 0.0), np.array([3.0, -7.0])) == 0.5
    assert predict(PredicateSensor("p", np.zeros(2), 20.0), np.zeros(2)) == 1.0 - EPS
    assert predict(PredicateSensor("p", np.zeros(2), -40.0), np.zeros(2)) == EPS
    got = predict(PredicateSensor("p", np.array([1.0, -1.0]), 0.0), np.array([2.0, 1.0]))
    assert got == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)
    assert got == pytest.approx(0.7310586, abs=1e-7)


def test_predict_dimension_mismatch():
    with pytest.raises(ValueError):
        predict(PredicateSensor("p", np.zeros(3), 0.0), np.zeros(2))
    with pytest.raises(ValueError):
        predict_many(PredicateSensor("p", np.zeros(3), 0.0), np.zeros((4, 2)))


@settings(max_examples=200, deadline=None)
@given(st.floats(-60, 60), st.floats(-60, 60))
def test_predict_monotone_and_clamped(z1, z2):
    s = PredicateSensor("p", np.array([1.0]), 0.0)
    h1, h2 = predict(s, np.array([z1])), predict(s, np.array([z2]))
    assert EPS <= h1 <= 1 - EPS
    if z1 <= z2:
        assert h1 <= h2


def test_sigmoid_stable_at_extremes():
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(1000.0) == 1.0


def _vis_frame(state):
    return LabeledFrame(ObservationFrame(0.0, "Go", np.zeros(3), np.zeros(3), np.zeros(3), np.ones(6)), state)


def test_masked_loss_examples():
    d = parse_domain(THREE)
    zero = {p: PredicateSensor(p, np.zeros(8), 0.0) for p in d.predicate_ids}
    assert masked_loss(zero, _vis_frame("ALL3"), d) == pytest.approx(3 * math.log(2), abs=1e-12)
    assert masked_loss(zero, _vis_frame("NONE"), d) == 0.0
    truth = d.state("ALL3").determined
    perfect = {p: PredicateSensor(p, np.zeros(8), 50.0 if truth.get(p, True) else -50.0) for p in d.predicate_ids}
    loss = masked_loss(perfect, _vis_frame("ALL3"), d)
    assert 0.0 <= loss <= 3 * -math.log(1 - EPS) + 1e-15


def test_masked_loss_unknown_state():
    d = parse_domain(THREE)
    zero = {p: PredicateSensor(p, np.zeros(8), 0.0) for p in d.predicate_ids}
    with pytest.raises(KeyError):
        masked_loss(zero, _vis_frame("MISSING"), d)


def _fd_check(weights, biases, feats, truth, mask, h=1e-5):
    loss, gw, gb = masked_loss_and_grad(weights, biases, feats, truth, mask)
    worst = 0.0
    for k in range(len(weights)):
        for j in range(len(weights[k])):
            wp = [w.copy() for w in weights]
            wm = [w.copy() for w in weights]
            wp[k][j] += h
            wm[k][j] -= h
            fd = (masked_loss_and_grad(wp, biases, feats, truth, mask)[0]
                  - masked_loss_and_grad(wm, biases, feats, truth, mask)[0]) / (2 * h)
            worst = max(worst, abs(fd - gw[k][j]) / max(1.0, abs(fd), abs(gw[k][j])))
        bp, bm = biases.copy(), biases.copy()
        bp[k] += h
        bm[k] -= h
        fd = (masked_loss_and_grad(weights, bp, feats, truth, mask)[0]
              - masked_loss_and_grad(weights, bm, feats, truth, mask)[0]) / (2 * h)
        worst = max(worst, abs(fd - gb[k]) / max(1.0, abs(fd), abs(gb[k])))
    return worst, gw, gb


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    K = int(r.integers(1, 5))
    dims = r.integers(1, 5, size=K)
    weights = [r.normal(size=d) for d in dims]
    feats = [r.normal(size=d) for d in dims]
    biases = r.normal(size=K)
    truth = r.integers(0, 2, size=K).astype(float)
    mask = r.random(K) < 0.6
    worst, gw, gb = _fd_check(weights, biases, feats, truth, mask)
    assert worst < 1e-5
    for k in np.flatnonzero(~mask):
        assert np.all(gw[k] == 0.0) and gb[k] == 0.0


def _separable_table(n=200, seed=0, d=8):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    y = (X[:, 0] > 0).astype(int)
    X[:, 0] += np.where(y == 1, 0.5, -0.5)  # margin
    return X, y


def test_train_separable_single_predicate():
    d = parse_domain("""
predicate p modality=visual args=peg
state POS { p=true }
state NEG { p=false }
action Go kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1
""")
    X, y = _separable_table()
    state_idx = np.where(y == 1, 0, 1)
    table = FeatureTable({"p": X}, state_idx, np.zeros(len(y), dtype=int), np.zeros(len(y), dtype=int))
    hist = {}
    sensors = train_predicate_sensors(table, d, TrainConfig(seed=1), history=hist)
    pred = predict_many(sensors["p"], X) > 0.5
    assert np.mean(pred == (y == 1)) == 1.0
    assert hist["p"][1] <= hist["p"][0]


def test_untrained_predicate_flagged():
    d = parse_domain(THREE)
    r = np.random.default_rng(0)
    n = 40
    feats = {p: r.normal(size=(n, 8)) for p in d.predicate_ids}
    table = FeatureTable(feats, np.zeros(n, dtype=int), np.zeros(n, dtype=int), np.zeros(n, dtype=int))
    sensors = train_predicate_sensors(table, d)
    assert not sensors["d"].trained
    assert predict(sensors["d"], r.normal(size=8)) == 0.5
    assert sensors["a"].trained


def test_training_reduces_loss_on_simulated_data(spec, small_dataset):
    hist = {}
    train_predicate_sensors(small_dataset[:8], spec, TrainConfig(iterations=100), history=hist)
    for pid, (before, after) in hist.items():
        assert after <= before, pid


def test_training_deterministic(spec, small_dataset):
    a = train_predicate_sensors(small_dataset[:6], spec, TrainConfig(iterations=50, seed=4))
    b = train_predicate_sensors(small_dataset[:6], spec, TrainConfig(iterations=50, seed=4))
    for p in spec.predicate_ids:
        assert np.array_equal(a[p].weights, b[p].weights) and a[p].bias == b[p].bias


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=200), st.integers(1, 500))
def test_balanced_counts_equal(labels, cap):
    idx = np.array(labels)
    rows = balanced_indices(idx, np.random.default_rng(0), cap)
    counts = [int(np.sum(idx[rows] == s)) for s in np.unique(idx)]
    assert max(counts) - min(counts) <= 1


def test_masked_rows_do_not_move_weights(spec):
    # ALIGNED leaves visual-below undetermined: a table of ALIGNED frames must leave it untrained
    n = 30
    r = np.random.default_rng(2)
    feats = {p.id: r.normal(size=(n, len(recipe_for(p)[1]))) for p in spec.predicates}
    s = spec.state_index("ALIGNED")
    table = FeatureTable(feats, np.full(n, s), np.zeros(n, dtype=int), np.zeros(n, dtype=int))
    sensors = train_predicate_sensors(table, spec, TrainConfig(iterations=20))
    assert not sensors["visual-below"].trained
    masks, _ = mask_table(spec)
    assert not masks[s, spec.predicate_ids.index("visual-below")]


def test_state_classifier_separable(spec):
    d = parse_domain("""
predicate p modality=visual args=peg
state POS { p=true }
state NEG { p=false }
action Go kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1
""")
    X, y = _separable_table(d=16)
    table = FeatureTable({"p": X[:, :8]}, np.where(y == 1, 0, 1), np.zeros(len(y), dtype=int),
                         np.zeros(len(y), dtype=int), state_features=X)
    clf = train_state_classifier(table, d, TrainConfig(iterations=500))
    pred = predict_state_features(clf, X).argmax(axis=1)
    assert np.mean(pred == np.where(y == 1, 0, 1)) == 1.0


def test_state_classifier_zero_weights_uniform(spec):
    clf = StateClassifier(tuple(spec.state_ids), np.zeros((6, 16)), np.zeros(6),
                          tuple(("fmag", "fz", "flat", "speed", "vz", "vlat", "dz_w", "dfz_w",
                                 "v0", "v1", "v2", "v3", "v4", "v5", "v0-v4", "v3-v2")))
    p = predict_state(clf, _frame(force=(1, 2, 3)))
    np.testing.assert_allclose(p, np.full(6, 1 / 6), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_state_probabilities_sum_to_one(seed):
    r = np.random.default_rng(seed)
    clf = StateClassifier(tuple("ABCD"), r.normal(scale=10, size=(4, 5)), r.normal(size=4))
    P = predict_state_features(clf, r.normal(scale=5, size=(7, 5)))
    assert np.all(np.abs(P.sum(axis=1) - 1.0) < 1e-9)
