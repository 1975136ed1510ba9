"""One-dimensional Gaussian mixture observation models over log sensor outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .domain import DomainSpec
from .sensors import EPS, FeatureTable, PredicateSensor, build_table, sensor_outputs

VAR_FLOOR = 1e-6
MIN_SAMPLES = 8
# density of a uniform distribution over the clamped log-output range [ln EPS, 0]
UNIFORM_LOGPDF = -math.log(-math.log(EPS))

TIERS = ("specific", "state", "global", "uniform")


class InsufficientData(ValueError):
    pass


@dataclass
class Gmm1D:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def K(self) -> int:
        return len(self.weights)

    def validate(self) -> list[str]:
        problems = []
        if abs(self.weights.sum() - 1.0) > 1e-9:
            problems.append("weights do not sum to 1")
        if np.any(self.variances < VAR_FLOOR * (1 - 1e-12)):
            problems.append("variance below floor")
        return problems


def log_output(h):
    """Log of a sensor probability, clamped to [EPS, 1 - EPS] first."""
    return np.log(np.clip(h, EPS, 1.0 - EPS))


def _component_logpdf(x: np.ndarray, means, variances) -> np.ndarray:
    # (n, K) log N(x; mu_k, var_k)
    d = x[:, None] - means[None, :]
    return -0.5 * (np.log(2.0 * np.pi * variances)[None, :] + d * d / variances[None, :])


def gmm_logpdf(model: Gmm1D, x):
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = logsumexp(_component_logpdf(xs, model.means, model.variances) + np.log(model.weights)[None, :], axis=1)
    return float(out[0]) if scalar else out


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, K):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers, dtype=float)


def em_fit(samples, K: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-8,
           trace: list | None = None) -> Gmm1D:
    """Fit a K-component mixture by EM from a k-means++ seeded start.

    ``trace`` (if given) receives the total log-likelihood after every iteration.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = len(x)
    if K < 1 or n < 2 * K:
        raise InsufficientData(f"need at least {2 * K} samples for K={K}, got {n}")
    rng = np.random.default_rng(seed)

    means = _kmeanspp(x, K, rng)
    assign = np.argmin(np.abs(x[:, None] - means[None, :]), axis=1)
    weights = np.empty(K)
    variances = np.empty(K)
    overall = max(float(x.var()), VAR_FLOOR)
    for k in range(K):
        members = x[assign == k]
        weights[k] = max(len(members), 1) / n
        variances[k] = max(float(members.var()), VAR_FLOOR) if len(members) > 1 else overall
    weights /= weights.sum()

    prev = -np.inf
    for it in range(max_iter + 1):
        # E-step; its normalizer is the log-likelihood of the current parameters
        logp = _component_logpdf(x, means, variances) + np.log(np.maximum(weights, 1e-300))[None, :]
        mx = logp.max(axis=1, keepdims=True)
        norm = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        ll = float(norm.sum())
        if it > 0:
            if trace is not None:
                trace.append(ll)
            if abs(ll - prev) < tol or it == max_iter:
                break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk_safe
        d = x[:, None] - means[None, :]
        variances = np.maximum((resp * d * d).sum(axis=0) / nk_safe, VAR_FLOOR)
    keep = weights > 0
    return Gmm1D(weights[keep] / weights[keep].sum(), means[keep], variances[keep])


def total_loglik(model: Gmm1D, samples) -> float:
    return float(np.sum(gmm_logpdf(model, np.asarray(samples, dtype=float))))


def bic(model: Gmm1D, samples) -> float:
    n = len(samples)
    p = 3 * model.K - 1
    return -2.0 * total_loglik(model, samples) + p * math.log(n)


def select_components(samples, candidates=(1, 2, 3), seed: int = 0) -> Gmm1D:
    """Minimum-BIC mixture among the feasible component counts."""
    x = np.asarray(samples, dtype=float).ravel()
    best, best_bic = None, math.inf
    for K in candidates:
        if len(x) < 2 * K:
            continue
        m = em_fit(x, K, seed=seed)
        score = bic(m, x)
        if score < best_bic:
            best, best_bic = m, score
    if best is None:
        raise InsufficientData(f"no feasible component count for {len(x)} samples")
    return best


# -- observation model set ---------------------------------------------------


@dataclass
class ObservationModelSet:
    states: tuple[str, ...]
    actions: tuple[str, ...]
    predicates: tuple[str, ...]
    specific: dict[tuple[str, str, str], Gmm1D] = field(default_factory=dict)
    state_level: dict[tuple[str, str], Gmm1D] = field(default_factory=dict)
    global_level: dict[str, Gmm1D] = field(default_factory=dict)

    def lookup(self, state: str, action: str, predicate: str) -> tuple[Gmm1D | None, str]:
        m = self.specific.get((state, action, predicate))
        if m is not None:
            return m, "specific"
        m = self.state_level.get((state, predicate))
        if m is not None:
            return m, "state"
        m = self.global_level.get(predicate)
        if m is not None:
            return m, "global"
        return None, "uniform"

    def logpdf(self, state: str, action: str, predicate: str, x):
        m, _ = self.lookup(state, action, predicate)
        if m is None:
            return UNIFORM_LOGPDF if np.ndim(x) == 0 else np.full(np.shape(x), UNIFORM_LOGPDF)
        return gmm_logpdf(m, x)

    def tier_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(TIERS, 0)
        for s in self.states:
            for a in self.actions:
                for p in self.predicates:
                    counts[self.lookup(s, a, p)[1]] += 1
        return counts

    def log_likelihoods(self, log_outputs: np.ndarray, action_idx: np.ndarray) -> np.ndarray:
        """(N, |S|) summed log-densities of per-predicate log outputs.

        ``log_outputs`` columns follow ``self.predicates``; ``action_idx``
        indexes ``self.actions``.
        """
        N = len(log_outputs)
        out = np.zeros((N, len(self.states)))
        for ai, a in enumerate(self.actions):
            rows = np.flatnonzero(action_idx == ai)
            if len(rows) == 0:
                continue
            for si, s in enumerate(self.states):
                acc = np.zeros(len(rows))
                for k, p in enumerate(self.predicates):
                    acc += self.logpdf(s, a, p, log_outputs[rows, k])
                out[rows, si] = acc
        return out


def _seed_for(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _cap(x: np.ndarray, max_samples: int | None, seed: int) -> np.ndarray:
    if max_samples is None or len(x) <= max_samples:
        return x
    rows = np.random.default_rng(seed).choice(len(x), size=max_samples, replace=False)
    return x[np.sort(rows)]


def fit_observation_models(validation: list | FeatureTable, sensors: dict[str, PredicateSensor], spec: DomainSpec,
                           seed: int = 0, min_samples: int = MIN_SAMPLES, candidates=(1, 2, 3),
                           max_samples: int | None = 1500) -> ObservationModelSet:
    """Fit per (state, action, predicate) mixtures on held-out sensor outputs, with fallbacks.

    Groups larger than ``max_samples`` are subsampled (deterministically) before EM.
    """
    table = validation if isinstance(validation, FeatureTable) else build_table(validation, spec,
                                                                                 with_state_features=False)
    labeled = np.flatnonzero(table.state_idx >= 0)
    if len(labeled) == 0:
        raise ValueError("empty validation set")
    sub = table.subset(labeled)
    logs = log_output(sensor_outputs(sensors, sub, spec))
    models = ObservationModelSet(tuple(spec.state_ids), tuple(spec.action_ids), tuple(spec.predicate_ids))

    for k, p in enumerate(spec.predicates):
        col = logs[:, k]
        for si, s in enumerate(spec.state_ids):
            in_state = sub.state_idx == si
            for ai, a in enumerate(spec.action_ids):
                x = col[in_state & (sub.action_idx == ai)]
                if len(x) >= min_samples:
                    sd = _seed_for(seed, si, ai, k)
                    models.specific[(s, a, p.id)] = select_components(_cap(x, max_samples, sd), candidates, sd)
                    continue
                if (s, p.id) not in models.state_level:
                    pooled = col[in_state]
                    if len(pooled) >= min_samples:
                        sd = _seed_for(seed, si, 10_000, k)
                        models.state_level[(s, p.id)] = select_components(_cap(pooled, max_samples, sd),
                                                                           candidates, sd)
                        continue
                    if p.id not in models.global_level and len(col) >= min_samples:
                        sd = _seed_for(seed, 20_000, k)
                        models.global_level[p.id] = select_components(_cap(col, max_samples, sd), candidates, sd)
    return models
