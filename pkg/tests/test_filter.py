import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predbayes.domain import DomainSpec, parse_domain
from predbayes.filter import (BELIEF_FLOOR, TransitionModel, belief_trace_csv, correct_step, correct_with_loglik,
                              estimate_transitions, filter_trajectory, map_state, predict_step, run_filter, update)
from predbayes.frames import LabeledFrame, ObservationFrame, Trajectory
from predbayes.obsmodel import EPS, Gmm1D, ObservationModelSet
from predbayes.sensors import PredicateSensor, extract_features

TWO = """
predicate p modality=visual args=peg
predicate q modality=visual args=peg
state A { p=true, q=false }
state B { p=false, q=true }
action go kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1
action stay kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1
"""


def _traj(states, actions):
    frames = [LabeledFrame(ObservationFrame(0.02 * i, a, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(6)), s)
              for i, (s, a) in enumerate(zip(states, actions))]
    return Trajectory.from_frames(frames)


def _tm(T, prior=None):
    S, A = T.shape[0], T.shape[1]
    prior = np.full(S, 1.0 / S) if prior is None else np.asarray(prior, float)
    return TransitionModel(np.asarray(T, float), prior, tuple(f"s{i}" for i in range(S)),
                           tuple(f"a{j}" for j in range(A)))


# -- transitions ----------------------------------------------------------------


def test_single_transition_alpha_zero():
    d = parse_domain(TWO)
    tm = estimate_transitions([_traj(["A", "B"], ["stay", "go"])], d, alpha=0.0)
    assert tm.T[0, d.action_ids.index("go"), 1] == 1.0
    assert tm.prior.tolist() == [1.0, 0.0]


def test_unvisited_row_uniform():
    d = parse_domain(TWO)
    tm = estimate_transitions([_traj(["A", "B"], ["stay", "go"])], d, alpha=0.1)
    np.testing.assert_allclose(tm.T[1, 0, :], [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(tm.T[1, 1, :], [0.5, 0.5], atol=1e-15)


def test_hand_count_add_alpha():
    d = parse_domain(TWO)
    # A->A three times and A->B once, all under "go"
    tm = estimate_transitions([_traj(["A", "A", "A", "A", "B"], ["go"] * 5)], d, alpha=1.0)
    np.testing.assert_allclose(tm.T[0, 0], [4 / 6, 2 / 6], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.tuples(st.sampled_from("AB"), st.sampled_from(["go", "stay"])), min_size=1, max_size=12),
                min_size=1, max_size=5), st.floats(0.0, 3.0))
def test_transition_rows_valid(seqs, alpha):
    d = parse_domain(TWO)
    tm = estimate_transitions([_traj([s for s, _ in q], [a for _, a in q]) for q in seqs], d, alpha=alpha)
    assert tm.validate() == []
    assert np.all(tm.T >= 0)


def test_simulated_transitions_valid(spec, small_dataset):
    tm = estimate_transitions(small_dataset, spec)
    assert tm.validate() == []
    # at 50 Hz rows are strongly self-looping where visited
    a = spec.action_ids.index("Search")
    s = spec.state_index("SEARCHING")
    assert tm.T[s, a, s] > 0.9


# -- predict ----------------------------------------------------------------------


def test_predict_identity_and_deterministic():
    eye = _tm(np.eye(2)[:, None, :])
    b = np.array([0.3, 0.7])
    np.testing.assert_allclose(predict_step(b, 0, eye), b, atol=1e-15)
    shift = _tm(np.array([[[0.0, 1.0]], [[0.0, 1.0]]]))
    out = predict_step(np.array([1.0, 0.0]), "a0", shift)
    np.testing.assert_allclose(out, [BELIEF_FLOOR, 1.0], atol=1e-15)


def test_predict_unknown_action():
    with pytest.raises(ValueError):
        predict_step(np.array([0.5, 0.5]), "nope", _tm(np.eye(2)[:, None, :]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_predict_matches_matrix_vector_oracle(seed):
    r = np.random.default_rng(seed)
    T = r.dirichlet(np.ones(3), size=(3, 2))
    b = r.dirichlet(np.ones(3))
    a = int(r.integers(0, 2))
    want = np.array([sum(T[sp, a, s] * b[sp] for sp in range(3)) for s in range(3)])
    want = np.maximum(want / want.sum(), 0)
    got = predict_step(b, a, _tm(T))
    if want.min() >= BELIEF_FLOOR:
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    assert abs(got.sum() - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_predict_linear(seed):
    r = np.random.default_rng(seed)
    T = r.dirichlet(np.ones(4), size=(4, 1))
    b1, b2 = r.dirichlet(np.ones(4)), r.dirichlet(np.ones(4))
    lam = float(r.uniform())
    tm = _tm(T)
    mix = predict_step(lam * b1 + (1 - lam) * b2, 0, tm)
    np.testing.assert_allclose(mix, lam * predict_step(b1, 0, tm) + (1 - lam) * predict_step(b2, 0, tm), atol=1e-12)


# -- correct ------------------------------------------------------------------------


def test_uninformative_correction_keeps_belief():
    b = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(correct_with_loglik(b, np.full(3, -4.2)), b, atol=1e-15)


def test_zero_likelihood_goes_to_floor():
    out = correct_with_loglik(np.array([0.5, 0.5]), np.array([-1e6, -1.0]))
    assert out[0] == pytest.approx(BELIEF_FLOOR, rel=1e-6)
    assert abs(out.sum() - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_correct_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    b = r.dirichlet(np.ones(5))
    ll = r.normal(scale=5, size=5)
    np.testing.assert_allclose(correct_with_loglik(b, ll), correct_with_loglik(b, ll + c), atol=1e-12)


def _gauss_log(x, mu, var):
    return -0.5 * math.log(2 * math.pi * var) - (x - mu) ** 2 / (2 * var)


def test_correct_two_state_closed_form():
    d = parse_domain(TWO)
    frame = ObservationFrame(0.0, "go", np.zeros(3), np.zeros(3), np.zeros(3),
                             np.array([0.9, 0.1, 0.2, 0.0, 0.4, 0.3]))
    sensors = {"p": PredicateSensor("p", np.linspace(-1, 1, 8), 0.3),
               "q": PredicateSensor("q", np.linspace(1, -1, 8), -0.2)}
    params = {("A", "p"): (-0.2, 0.3), ("A", "q"): (-2.0, 1.1), ("B", "p"): (-1.5, 0.6), ("B", "q"): (-0.4, 0.2)}
    models = ObservationModelSet(("A", "B"), ("go", "stay"), ("p", "q"), specific={
        (s, "go", p): Gmm1D(np.array([1.0]), np.array([mu]), np.array([var])) for (s, p), (mu, var) in params.items()})
    # hand oracle: sigmoid, clamp, log, Gaussian density, Bayes rule
    logh = {}
    for p, sen in sensors.items():
        x = extract_features(frame, d.predicate(p))
        z = float(np.dot(sen.weights, x) + sen.bias)
        logh[p] = math.log(min(max(1 / (1 + math.exp(-z)), EPS), 1 - EPS))
    prior = np.array([0.35, 0.65])
    w = [prior[i] * math.exp(sum(_gauss_log(logh[p], *params[(s, p)]) for p in "pq")) for i, s in enumerate("AB")]
    want = np.array(w) / sum(w)
    got = correct_step(prior, frame, "go", sensors, models, d)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)
    # identity transitions make update reduce to correct
    tm = TransitionModel(np.stack([np.eye(2)] * 2, axis=1), prior, ("A", "B"), ("go", "stay"))
    np.testing.assert_allclose(update(prior, "go", frame, tm, sensors, models, d), want, atol=1e-9)


def test_update_identity_uninformative():
    d = parse_domain(TWO)
    tm = TransitionModel(np.stack([np.eye(2)] * 2, axis=1), np.array([0.5, 0.5]), ("A", "B"), ("go", "stay"))
    models = ObservationModelSet(("A", "B"), ("go", "stay"), ("p", "q"))  # uniform everywhere
    sensors = {p: PredicateSensor(p, np.zeros(8), 0.0) for p in "pq"}
    b = np.array([0.8, 0.2])
    f = ObservationFrame.zeros("go")
    np.testing.assert_allclose(update(b, "go", f, tm, sensors, models, d), b, atol=1e-15)


# -- forward-algorithm oracle ---------------------------------------------------------


def _brute_force(prior, T, L, acts):
    """Exhaustive sum over state sequences of the filtering posterior at every step."""
    S, N = len(prior), len(L)
    out = []
    for t in range(N):
        mass = np.zeros(S)
        for seq in itertools.product(range(S), repeat=t + 1):
            w = prior[seq[0]] * L[0][seq[0]]
            for k in range(1, t + 1):
                w *= T[seq[k - 1], acts[k], seq[k]] * L[k][seq[k]]
            mass[seq[-1]] += w
        out.append(mass / mass.sum())
    return np.array(out)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(1, 6))
def test_filter_matches_forward_algorithm(seed, S, N):
    r = np.random.default_rng(seed)
    A = 2
    T = r.dirichlet(np.ones(S), size=(S, A))
    prior = r.dirichlet(np.ones(S))
    L = np.exp(r.normal(scale=2.0, size=(N, S)))
    acts = r.integers(0, A, size=N)
    tm = _tm(T, prior)
    want = _brute_force(prior, T, L, acts)
    got = run_filter(np.log(L), acts, tm)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)
    # the stepwise API gives the same result
    b = correct_with_loglik(prior, np.log(L[0]))
    for t in range(1, N):
        b = correct_with_loglik(predict_step(b, int(acts[t]), tm), np.log(L[t]))
    np.testing.assert_allclose(b, want[-1], atol=1e-9)
    assert np.all(np.abs(got.sum(axis=1) - 1) < 1e-9)


def test_state_permutation_equivariance(spec, small_dataset, small_models):
    order = [5, 2, 0, 4, 1, 3]
    perm_spec = DomainSpec(spec.predicates, tuple(spec.states[i] for i in order), spec.actions)
    traj = small_dataset[2]
    base = filter_trajectory(traj, estimate_transitions(small_dataset, spec), small_models.sensors,
                             small_models.models, spec)
    pm = replace(small_models.models, states=tuple(perm_spec.state_ids))
    perm = filter_trajectory(traj, estimate_transitions(small_dataset, perm_spec), small_models.sensors, pm, perm_spec)
    np.testing.assert_allclose(perm, base[:, order], rtol=0, atol=1e-12)


# -- MAP ---------------------------------------------------------------------------------


def test_map_examples(spec):
    assert map_state(np.array([0.7, 0.2, 0.1])) == 0
    assert map_state(np.array([0.5, 0.5])) == 0
    b = np.zeros(6)
    b[[1, 3]] = 0.5
    assert map_state(b, spec) == "ONSURFACE"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.001, 100), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_map_scale_invariant(w, c):
    w = np.array(w)
    assert map_state(w / w.sum()) == map_state(c * w / (c * w).sum())


def test_belief_trace_rows(spec, small_dataset, small_models):
    traj = small_dataset[0]
    beliefs = filter_trajectory(traj, small_models.tm, small_models.sensors, small_models.models, spec)
    assert np.all(beliefs >= BELIEF_FLOOR * 0.999)
    assert np.all(np.abs(beliefs.sum(axis=1) - 1) < 1e-9)
    lines = belief_trace_csv(traj, beliefs, spec).splitlines()
    assert len(lines) == len(traj) + 1
    assert lines[0].split(",")[2:8] == [f"p_{s}" for s in spec.state_ids]
