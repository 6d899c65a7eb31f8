"""Per-subject embedding collection, exact t-SNE and profile-cluster
statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .conditioning import code_string, encode_profile
from .dataset import SubjectProfile
from .models import Decoder

N_POSSIBLE_CODES = 16


@dataclass(eq=False)
class EmbeddingMatrix:
    rows: np.ndarray              # N x 16
    row_ids: list[str]
    codes: np.ndarray             # N x 4
    unseen: np.ndarray            # N, bool

    def __len__(self) -> int:
        return len(self.row_ids)


def collect_embeddings(model: Decoder, profiles: Mapping[str, SubjectProfile],
                       unseen_ids: Sequence[str] = ()) -> EmbeddingMatrix:
    """One embedding row per subject (sorted ids), unseen subjects flagged."""
    if model.embedder is None:
        raise ValueError("model was trained without identification inputs")
    ids = sorted(profiles)
    codes = np.stack([encode_profile(profiles[s]) for s in ids])
    dtype = next(model.embedder.parameters()).dtype
    with torch.no_grad():
        rows = model.embedder(torch.as_tensor(codes, dtype=dtype)).double().numpy()
    unseen = np.array([s in set(unseen_ids) for s in ids])
    return EmbeddingMatrix(rows, ids, codes, unseen)


# ---------------------------------------------------------------------------
# t-SNE


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 5.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 4.0
    exaggeration_steps: int = 100
    init_scale: float = 1e-4
    adaptive_gains: bool = True
    min_gain: float = 0.01
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.perplexity < 1:
            raise ValueError("perplexity must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def squared_distances(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # d excludes the point itself and is shifted so min(d) == 0
    w = np.exp(-beta * d)
    z = w.sum()
    p = w / z
    return math.log(z) + beta * float(np.dot(p, d)), p


def conditional_affinities(D2: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 200) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-stochastic p(j|i) with per-row Gaussian precision found by bisection.

    Returns (P_cond, beta, entropy_nats); each row's entropy matches
    log(perplexity) to within ``tol``.
    """
    n = D2.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(D2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, math.inf
        H, p = _entropy(d, beta)
        for _ in range(max_iter):
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2 if math.isinf(hi) else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
            H, p = _entropy(d, beta)
        else:
            if abs(H - target) >= tol:
                raise RuntimeError(f"perplexity calibration failed for point {i}")
        P[i, np.arange(n) != i] = p
        betas[i], entropies[i] = beta, H
    return P, betas, entropies


def joint_probabilities(X: np.ndarray, perplexity: float, tol: float = 1e-5):
    P_cond, betas, H = conditional_affinities(squared_distances(X), perplexity, tol)
    P = (P_cond + P_cond.T) / (2 * X.shape[0])
    return P, betas, H


def _student_t(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    """KL(P || Q) for the Student-t affinities Q of layout ``Y``."""
    _, Q = _student_t(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d KL / d Y = 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)."""
    num, Q = _student_t(Y)
    W = (P - Q) * num
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


@dataclass
class TsneResult:
    embedding: np.ndarray          # N x 2, duplicates re-expanded
    unique_embedding: np.ndarray   # n_distinct x 2
    inverse: np.ndarray            # row -> distinct index
    P: np.ndarray
    entropies: np.ndarray          # nats, per distinct row
    kl_initial: float
    kl_final: float
    kl_trace: list[float] = field(default_factory=list)


def _distinct_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # first-occurrence order, exact equality
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return X[np.sort(first)], rank[inverse.ravel()]


def run_tsne(X: np.ndarray, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact t-SNE; identical input rows are optimised once and share a point."""
    X = np.asarray(X, dtype=np.float64)
    U, inverse = _distinct_rows(X)
    n = len(U)
    if n == 1:
        raise ValueError("all rows are identical")
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 distinct rows, got {n}")
    if cfg.perplexity >= n - 1:
        raise ValueError(f"perplexity {cfg.perplexity} is not attainable with {n} "
                         f"distinct rows (must be < {n - 1})")
    P, _, H = joint_probabilities(U, cfg.perplexity, cfg.tol)
    P = np.maximum(P, 1e-300)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(cfg.seed)
    Y = cfg.init_scale * rng.standard_normal((n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl0 = kl_divergence(P, Y)
    trace = []
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_steps else 1.0
        momentum = cfg.momentum_early if it < cfg.momentum_switch else cfg.momentum_late
        grad = kl_gradient(exag * P, Y)
        if cfg.adaptive_gains:
            same = np.sign(grad) == np.sign(update)
            gains = np.where(same, gains * 0.8, gains + 0.2)
            gains = np.maximum(gains, cfg.min_gain)
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if (it + 1) % 50 == 0 or it + 1 == cfg.iterations:
            trace.append(kl_divergence(P, Y))
    return TsneResult(Y[inverse], Y, inverse, P, H, kl0, kl_divergence(P, Y), trace)


def tsne(X: np.ndarray, cfg: TsneConfig = TsneConfig()) -> np.ndarray:
    return run_tsne(X, cfg).embedding


# ---------------------------------------------------------------------------
# clusters


@dataclass
class ClusterReport:
    n_possible: int
    n_observed: int
    n_prominent: int
    membership: dict[str, list[str]]
    prominent: list[str]
    unseen_nearest: dict[str, str]

    def to_dict(self) -> dict:
        return {"n_possible": self.n_possible, "n_observed": self.n_observed,
                "n_prominent": self.n_prominent, "membership": self.membership,
                "prominent": self.prominent, "unseen_nearest": self.unseen_nearest}


def cluster_report(E: EmbeddingMatrix, min_size: int = 2) -> ClusterReport:
    """Count profile combinations present and those shared by >= ``min_size``.

    Unseen subjects are also mapped to the nearest centroid of the training
    subjects' combinations in embedding space.
    """
    membership: dict[str, list[str]] = {}
    for sid, bits in zip(E.row_ids, E.codes):
        membership.setdefault(code_string(bits), []).append(sid)
    membership = {k: membership[k] for k in sorted(membership)}
    prominent = [k for k, v in membership.items() if len(v) >= min_size]

    nearest = {}
    train = ~E.unseen
    if train.any():
        train_codes = sorted({code_string(b) for b in E.codes[train]})
        centroids = np.stack([
            E.rows[train][[code_string(b) == c for b in E.codes[train]]].mean(axis=0)
            for c in train_codes])
        for k in np.flatnonzero(E.unseen):
            dist = np.sum((centroids - E.rows[k]) ** 2, axis=1)
            nearest[E.row_ids[k]] = train_codes[int(np.argmin(dist))]
    return ClusterReport(N_POSSIBLE_CODES, len(membership), len(prominent), membership,
                         prominent, nearest)


def tsne_csv(E: EmbeddingMatrix, Y: np.ndarray, config_hash: str | None = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "x", "y", "profile_code", "unseen_flag"])
    for sid, (x, y), bits, u in zip(E.row_ids, Y, E.codes, E.unseen):
        w.writerow([sid, repr(float(x)), repr(float(y)), code_string(bits), int(u)])
    return buf.getvalue()
