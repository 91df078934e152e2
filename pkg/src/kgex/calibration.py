"""Platt scaling of raw triple scores and reliability diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .store import TripleStore

EPS = 1e-12


class CalibrationError(ValueError):
    pass


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class Calibrator:
    """``p = sigmoid(slope * score + intercept)`` clamped to ``[EPS, 1 - EPS]``."""

    slope: float
    intercept: float
    ratio: float = 1.0
    method: str = "platt"
    model_fingerprint: str | None = None

    def __call__(self, scores):
        return calibrate(self, scores)

    def to_dict(self) -> dict:
        return {"method": self.method, "slope": self.slope, "intercept": self.intercept,
                "ratio": self.ratio, "model_fingerprint": self.model_fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibrator":
        return cls(d["slope"], d["intercept"], d.get("ratio", 1.0), d.get("method", "platt"),
                   d.get("model_fingerprint"))


def calibrate(calibrator: Calibrator, scores):
    """Map raw scores to probabilities in ``(0, 1)``; scalars stay scalars."""
    arr = np.asarray(scores, dtype=np.float64)
    p = _sigmoid(calibrator.slope * np.atleast_1d(arr) + calibrator.intercept)
    p = np.clip(np.nan_to_num(p, nan=0.5), EPS, 1.0 - EPS)
    return float(p[0]) if arr.ndim == 0 else p.reshape(arr.shape)


def platt_targets(labels, weights) -> np.ndarray:
    """Platt's smoothed regression targets ``(N+ + 1)/(N+ + 2)`` and ``1/(N- + 2)``.

    ``N+``/``N-`` are the summed weights of each class. Smoothing keeps the
    fit finite on separable data.
    """
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    npos, nneg = float(w[y > 0.5].sum()), float(w[y <= 0.5].sum())
    return np.where(y > 0.5, (npos + 1.0) / (npos + 2.0), 1.0 / (nneg + 2.0))


def fit_platt(scores, labels, weights=None, smooth: bool = True, max_iter: int = 100, tol: float = 1e-12):
    """Weighted logistic regression of ``labels`` on ``scores`` by Newton's method.

    With ``smooth`` the 0/1 labels are replaced by :func:`platt_targets`.
    Returns ``(slope, intercept)``.
    """
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    if x.size == 0 or np.ptp(x) == 0:
        raise CalibrationError("degenerate calibration data: all scores equal")
    if smooth:
        y = platt_targets(y, w)
    # Standardise for conditioning, then map the solution back.
    mu, sd = np.average(x, weights=w), x.std()
    z = (x - mu) / sd
    X = np.column_stack([z, np.ones_like(z)])
    beta = np.zeros(2)

    def nll(b):
        t = X @ b
        return float(np.sum(w * (np.logaddexp(0.0, t) - y * t)))

    cur = nll(beta)
    for _ in range(max_iter):
        p = _sigmoid(X @ beta)
        grad = X.T @ (w * (p - y))
        hess = (X * (w * p * (1 - p))[:, None]).T @ X + 1e-12 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            cand = beta - t * step
            new = nll(cand)
            if new <= cur or t < 1e-10:
                break
            t *= 0.5
        done = abs(cur - new) <= tol * max(1.0, abs(cur))
        beta, cur = cand, new
        if done:
            break
    slope = beta[0] / sd
    return float(slope), float(beta[1] - slope * mu)


def sample_corruptions(store: TripleStore, triples: np.ndarray, per_positive: int,
                       rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    """Corrupt subject or object uniformly, rejecting known and circular corruptions.

    Circular corruptions ``(x, p, x)`` are skipped: translational models
    score them as ``-|p|``, far above typical triples, which would swamp the
    negative class.
    """
    known = store.known_triples()
    out = []
    for s, p, o in np.asarray(triples).tolist():
        for _ in range(per_positive):
            for _ in range(max_tries):
                e = int(rng.integers(store.num_entities))
                cand = (e, p, o) if rng.integers(2) == 0 else (s, p, e)
                if cand not in known and cand[0] != cand[2]:
                    break
            out.append(cand)
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def fit(model, store: TripleStore, negatives_per_positive: int = 1, seed: int = 0,
        ratio: float | None = None, refits: int = 2) -> Calibrator:
    """Fit a Platt calibrator on the validation split.

    Validation triples are positives; ``negatives_per_positive`` filtered
    corruptions each are negatives. Negatives are weighted so the effective
    positive base rate is ``1 / (1 + ratio)``; ``ratio`` defaults to the
    sampled negative/positive ratio.

    A negative slope triggers up to ``refits`` refits, each with four times
    as many freshly sampled negatives (weights keep the same ``ratio``).

    Raises
    ------
    CalibrationError
        On an empty validation split, constant scores, or a slope that stays
        negative after refitting.
    """
    if len(store.valid) == 0:
        raise CalibrationError("validation split is empty")
    if negatives_per_positive < 1:
        raise CalibrationError("need at least one negative per positive")
    ratio = float(negatives_per_positive if ratio is None else ratio)
    pos = store.valid
    pos_scores = model.score_triples(pos)
    per = negatives_per_positive
    for attempt in range(refits + 1):
        rng = np.random.default_rng([seed, attempt])
        neg = sample_corruptions(store, pos, per, rng)
        scores = np.concatenate([pos_scores, model.score_triples(neg)])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        weights = np.concatenate([np.ones(len(pos)), np.full(len(neg), ratio / per)])
        a, b = fit_platt(scores, labels, weights)
        if a >= 0:
            return Calibrator(a, b, ratio, "platt", getattr(model, "fingerprint", None))
        per *= 4
    raise CalibrationError(f"fitted slope {a:.4g} < 0 would invert the score order")


# --------------------------------------------------------------------------- reliability

@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    mean_predicted: float
    empirical_frequency: float
    count: int


@dataclass
class ReliabilityTable:
    bins: list[ReliabilityBin]
    ece: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lower", "bin_upper", "mean_predicted", "empirical_frequency", "count"])
            for b in self.bins:
                w.writerow([f"{b.lower:.6g}", f"{b.upper:.6g}", repr(b.mean_predicted),
                            repr(b.empirical_frequency), b.count])


def reliability_table(probs, labels, bins: int = 10) -> ReliabilityTable:
    """Equal-width reliability bins over ``[0, 1]`` and the expected calibration error.

    Empty bins report their midpoint as mean prediction, NaN frequency and
    contribute nothing to the ECE.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)
    out, ece = [], 0.0
    for i in range(bins):
        sel = which == i
        n = int(sel.sum())
        if n:
            mp, fr = float(p[sel].mean()), float(y[sel].mean())
            ece += n / len(p) * abs(mp - fr)
        else:
            mp, fr = float((edges[i] + edges[i + 1]) / 2), float("nan")
        out.append(ReliabilityBin(float(edges[i]), float(edges[i + 1]), mp, fr, n))
    return ReliabilityTable(out, float(ece))


def reliability(calibrator: Calibrator, model, labeled_triples, bins: int = 10) -> ReliabilityTable:
    """Reliability of calibrated model probabilities on ``(triple, label)`` pairs."""
    triples = np.array([t for t, _ in labeled_triples], dtype=np.int64).reshape(-1, 3)
    labels = np.array([l for _, l in labeled_triples], dtype=np.float64)
    return reliability_table(calibrate(calibrator, model.score_triples(triples)), labels, bins)


def minmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    span = np.ptp(s)
    return np.full_like(s, 0.5) if span == 0 else (s - s.min()) / span


def brier(probs, labels) -> float:
    return float(np.mean((np.asarray(probs) - np.asarray(labels)) ** 2))
