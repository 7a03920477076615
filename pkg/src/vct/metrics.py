"""Disentanglement metrics over (PCA-reduced) representations, plus ARI / MSC.

Every disentanglement metric takes a *representation function* mapping an
``(n, F)`` integer label array to an ``(n, d)`` float array. For a trained model
over the finite MiniShapes grid this is a lookup into a precomputed table (see
``table_representation``); tests plug in oracle functions directly.
"""
from __future__ import annotations

import logging
import warnings
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import adjusted_rand_score, mutual_info_score
from sklearn.multiclass import OneVsRestClassifier
from sklearn.utils.validation import check_is_fitted

from .datasets import FactorSpec, sample_fixed_factor_labels

logger = logging.getLogger(__name__)

Representation = Callable[[np.ndarray], np.ndarray]


class DegenerateRepresentationWarning(UserWarning):
    pass


class ConceptPCA(TransformerMixin, BaseEstimator):
    """Reduce ``(n, M, D)`` concept tokens to ``(n, M)`` scores.

    ``mode="per_slot"`` fits one principal axis per slot and keeps its score;
    ``mode="concat"`` flattens the tokens and keeps the top ``M`` components.
    Slots with (numerically) zero variance map to 0 with a warning.
    """

    def __init__(self, mode: str = "per_slot", tol: float = 1e-12):
        self.mode = mode
        self.tol = tol

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected (n, M, D) tokens, got shape {X.shape}")
        n, m, d = X.shape
        if self.mode not in ("per_slot", "concat"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if n < 2:
            raise ValueError("need at least 2 samples")
        if n < d:
            warnings.warn(f"PCA fitted on {n} samples < token dim {d}", DegenerateRepresentationWarning)
        self.n_slots_ = m
        self.token_dim_ = d
        if self.mode == "per_slot":
            self.mean_ = X.mean(axis=0)
            comps = np.zeros((m, d))
            var = np.zeros(m)
            for j in range(m):
                comps[j], var[j] = _top_axis(X[:, j] - self.mean_[j])
        else:
            flat = X.reshape(n, m * d)
            self.mean_ = flat.mean(axis=0)
            centered = flat - self.mean_
            cov = centered.T @ centered / (n - 1)
            evals, evecs = np.linalg.eigh(cov)
            order = np.argsort(evals)[::-1][:m]
            comps = np.stack([_fix_sign(evecs[:, k]) for k in order])
            var = evals[order]
        scale = max(float(np.max(var)), 1.0) if var.size else 1.0
        self.dead_ = var <= self.tol * scale
        if np.any(self.dead_):
            warnings.warn(
                f"degenerate covariance for slot(s) {np.flatnonzero(self.dead_).tolist()}; scores set to 0",
                DegenerateRepresentationWarning,
            )
        self.components_ = comps
        self.explained_variance_ = var
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1:] != (self.n_slots_, self.token_dim_):
            raise ValueError(f"expected (n, {self.n_slots_}, {self.token_dim_}), got {X.shape}")
        if self.mode == "per_slot":
            out = np.einsum("nmd,md->nm", X - self.mean_, self.components_)
        else:
            out = (X.reshape(len(X), -1) - self.mean_) @ self.components_.T
        out[:, self.dead_] = 0.0
        return out


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def _top_axis(centered: np.ndarray) -> tuple[np.ndarray, float]:
    n = len(centered)
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    return _fix_sign(evecs[:, -1]), float(max(evals[-1], 0.0))


def pca_reduce(tokens: np.ndarray, mode: str = "per_slot") -> np.ndarray:
    return ConceptPCA(mode=mode).fit_transform(tokens)


def table_representation(table: np.ndarray, spec: FactorSpec) -> Representation:
    """Representation function backed by one row per flat factor combination."""
    table = np.asarray(table, dtype=np.float64)
    if len(table) != spec.num_combinations:
        raise ValueError(f"table has {len(table)} rows, spec has {spec.num_combinations} combinations")

    def represent(labels: np.ndarray) -> np.ndarray:
        return table[spec.index_from_labels(np.atleast_2d(labels))]

    return represent


def _sample_labels(spec: FactorSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    return np.stack([rng.integers(0, c, size=n) for c in spec.sizes], axis=1)


def factorvae_score(
    represent: Representation,
    spec: FactorSpec,
    rng: np.random.Generator,
    batch_size: int = 64,
    num_train: int = 800,
    num_eval: int = 400,
    num_variance_estimate: int = 10000,
    collapse_ratio: float = 0.05,
) -> dict:
    """Majority-vote accuracy of "which factor was fixed" from the lowest-variance dim."""
    global_reps = represent(_sample_labels(spec, rng, num_variance_estimate))
    std = global_reps.std(axis=0)
    median = np.median(std)
    active = std >= collapse_ratio * median if median > 0 else std > 0
    if not np.any(active):
        raise ValueError("all representation dimensions collapsed")
    d, f = global_reps.shape[1], spec.num_factors

    def votes(count):
        out = np.zeros((d, f), dtype=np.int64)
        for _ in range(count):
            k = int(rng.integers(f))
            reps = represent(sample_fixed_factor_labels(spec, k, rng, batch_size))
            var = np.var(reps / np.where(std > 0, std, 1.0), axis=0, ddof=1)
            var[~active] = np.inf
            out[int(np.argmin(var)), k] += 1
        return out

    train_votes = votes(num_train)
    eval_votes = votes(num_eval)
    classifier = np.argmax(train_votes, axis=1)
    train_acc = train_votes[np.arange(d), classifier].sum() / train_votes.sum()
    eval_acc = eval_votes[np.arange(d), classifier].sum() / eval_votes.sum()
    return {"train_accuracy": float(train_acc), "eval_accuracy": float(eval_acc),
            "num_active_dims": int(active.sum())}


def betavae_score(
    represent: Representation,
    spec: FactorSpec,
    rng: np.random.Generator,
    batch_size: int = 64,
    num_train: int = 10000,
    num_eval: int = 5000,
) -> dict:
    """Accuracy of a multinomial logistic classifier predicting the fixed factor
    from mean absolute pair differences."""
    f = spec.num_factors

    def points(count):
        feats, ys = [], []
        for _ in range(count):
            k = int(rng.integers(f))
            a = _sample_labels(spec, rng, batch_size)
            b = _sample_labels(spec, rng, batch_size)
            b[:, k] = a[:, k]
            feats.append(np.mean(np.abs(represent(a) - represent(b)), axis=0))
            ys.append(k)
        return np.array(feats), np.array(ys)

    x_train, y_train = points(num_train)
    x_eval, y_eval = points(num_eval)
    mu, sd = x_train.mean(0), x_train.std(0)
    sd[sd == 0] = 1.0
    clf = LogisticRegression(max_iter=2000)
    clf.fit((x_train - mu) / sd, y_train)
    return {
        "train_accuracy": float(clf.score((x_train - mu) / sd, y_train)),
        "eval_accuracy": float(clf.score((x_eval - mu) / sd, y_eval)),
    }


def _mid_ranks(col: np.ndarray) -> np.ndarray:
    """0-based ranks with ties sharing their average rank."""
    n = len(col)
    order = np.argsort(col, kind="stable")
    ordered = col[order]
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]])
    ends = np.r_[starts[1:], n]
    group = np.repeat(np.arange(len(starts)), ends - starts)
    ranks = np.empty(n)
    ranks[order] = ((starts + ends - 1) / 2.0)[group]
    return ranks


def discretize(reps: np.ndarray, num_bins: int = 20) -> np.ndarray:
    """Per-dimension equal-occupancy binning by mid-rank; constant dims land in bin 0.

    Tied values always share a bin, and reversing a dimension mirrors its bins,
    so binned statistics are invariant to any per-dimension affine map.
    """
    reps = np.asarray(reps, dtype=np.float64)
    n = len(reps)
    out = np.zeros(reps.shape, dtype=np.int64)
    for j in range(reps.shape[1]):
        col = reps[:, j]
        if np.ptp(col) == 0:
            continue
        out[:, j] = np.minimum(np.floor((_mid_ranks(col) + 0.5) * num_bins / n), num_bins - 1).astype(np.int64)
    return out


def discrete_entropy(labels: np.ndarray) -> np.ndarray:
    """Entropy (nats) of each column."""
    out = []
    for col in np.atleast_2d(labels.T):
        _, counts = np.unique(col, return_counts=True)
        p = counts / counts.sum()
        out.append(float(-(p * np.log(p)).sum()))
    return np.array(out)


def mutual_info_matrix(reps: np.ndarray, labels: np.ndarray, num_bins: int = 20) -> np.ndarray:
    """``(d, F)`` discrete mutual information (nats) between binned dims and factors."""
    binned = discretize(reps, num_bins)
    return np.array([[mutual_info_score(labels[:, k], binned[:, j]) for k in range(labels.shape[1])]
                     for j in range(binned.shape[1])])


def mig(reps: np.ndarray, labels: np.ndarray, num_bins: int = 20) -> dict:
    """Mean over factors of the normalised gap between the two most informative dims."""
    reps, labels = np.asarray(reps), np.asarray(labels)
    if len(reps) != len(labels):
        raise ValueError("representation and labels must have the same length")
    mi = mutual_info_matrix(reps, labels, num_bins)
    entropy = discrete_entropy(labels)
    if mi.shape[0] < 2:
        gaps = mi[0] / entropy
    else:
        top = np.sort(mi, axis=0)[::-1]
        gaps = (top[0] - top[1]) / entropy
    return {"mig": float(np.mean(gaps)), "per_factor": gaps, "mutual_info": mi}


def dci_from_importance(importance: np.ndarray) -> float:
    """Disentanglement score from a non-negative ``(d, F)`` importance matrix."""
    R = np.asarray(importance, dtype=np.float64)
    if np.any(R < 0):
        raise ValueError("importance must be non-negative")
    total = R.sum()
    if total <= 0:
        warnings.warn("all-zero importance matrix; DCI disentanglement is 0", DegenerateRepresentationWarning)
        return 0.0
    f = R.shape[1]
    row_sums = R.sum(axis=1)
    keep = row_sums > 0
    P = R[keep] / row_sums[keep, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(P > 0, np.log(P), 0.0)
    h = -(P * logs).sum(axis=1) / np.log(f) if f > 1 else np.zeros(keep.sum())
    rho = row_sums[keep] / total
    return float(np.sum(rho * (1.0 - h)))


def bin_features(binned: np.ndarray, num_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """One indicator column per (dim, bin); also returns each column's dim."""
    n, d = binned.shape
    feats = np.zeros((n, d * num_bins))
    feats[np.arange(n)[:, None], np.arange(d) * num_bins + binned] = 1.0
    owner = np.repeat(np.arange(d), num_bins)
    return feats, owner


def dci_importance(
    reps: np.ndarray,
    labels: np.ndarray,
    num_bins: int = 20,
    C: float = 1.0,
    train_fraction: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Importance from L1 one-vs-rest logistic fits on binned representation dims.

    Each dim is expanded into equal-occupancy bin indicators; ``R[j, k]`` is the
    summed (over bins of dim ``j``) mean-over-classes absolute coefficient of the
    factor-``k`` model. Returns ``(R, test_accuracy_per_factor)``.
    """
    reps, labels = np.asarray(reps), np.asarray(labels)
    n = len(reps)
    n_train = int(round(train_fraction * n))
    binned = discretize(reps, num_bins)
    feats, owner = bin_features(binned, num_bins)
    d = reps.shape[1]
    R = np.zeros((d, labels.shape[1]))
    acc = np.zeros(labels.shape[1])
    for k in range(labels.shape[1]):
        y = labels[:, k]
        clf = OneVsRestClassifier(LogisticRegression(penalty="l1", solver="liblinear", C=C, max_iter=1000,
                                                     random_state=0))
        clf.fit(feats[:n_train], y[:n_train])
        coef = np.mean([np.abs(est.coef_).ravel() for est in clf.estimators_], axis=0)
        R[:, k] = np.bincount(owner, weights=coef, minlength=d)
        acc[k] = clf.score(feats[n_train:], y[n_train:])
    return R, acc


def dci_disentanglement(reps: np.ndarray, labels: np.ndarray, num_bins: int = 20, C: float = 1.0) -> dict:
    R, acc = dci_importance(reps, labels, num_bins, C)
    return {"dci": dci_from_importance(R), "importance": R, "informativeness": float(acc.mean())}


def evaluate_disentanglement(
    represent: Representation,
    spec: FactorSpec,
    seed: int = 0,
    num_mig: int | None = None,
    num_dci: int = 10000,
    fast: bool = False,
) -> dict[str, float]:
    """All four disentanglement scores with a fixed evaluation seed.

    ``num_mig=None`` scores MIG on the full factor grid, where distinct factors
    are exactly independent and carry no finite-sample MI bias.
    """
    rng = np.random.default_rng(seed)
    fv = factorvae_score(represent, spec, rng)
    bv = betavae_score(represent, spec, rng, num_train=2000 if fast else 10000, num_eval=1000 if fast else 5000)
    if num_mig is None:
        labels = spec.labels_from_index(np.arange(spec.num_combinations))
    else:
        labels = _sample_labels(spec, rng, num_mig)
    m = mig(represent(labels), labels)
    labels = _sample_labels(spec, rng, num_dci)
    dci = dci_disentanglement(represent(labels), labels)
    return {
        "factorvae": fv["eval_accuracy"],
        "betavae": bv["eval_accuracy"],
        "mig": m["mig"],
        "dci": dci["dci"],
        "dci_informativeness": dci["informativeness"],
    }


def ari(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Adjusted Rand index over ground-truth foreground pixels (gt id > 0)."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    fg = gt_mask > 0
    if not np.any(fg):
        raise ValueError("ground-truth mask has no foreground pixels")
    return float(adjusted_rand_score(gt_mask[fg], pred_mask[fg]))


def label_map_to_masks(label_map: np.ndarray, ids=None) -> np.ndarray:
    label_map = np.asarray(label_map)
    ids = np.unique(label_map) if ids is None else ids
    return np.stack([label_map == i for i in ids])


def msc(pred_masks: np.ndarray, gt_masks: np.ndarray) -> float:
    """Mean over ground-truth masks of the best IoU against any predicted mask.

    Both arguments are ``(K, H, W)`` boolean stacks; pass the background region
    as one of the ground-truth masks.
    """
    pred_masks = np.asarray(pred_masks, dtype=bool)
    gt_masks = np.asarray(gt_masks, dtype=bool)
    if len(gt_masks) == 0 or len(pred_masks) == 0:
        raise ValueError("msc needs non-empty mask sets")
    scores = []
    for g in gt_masks:
        inter = (pred_masks & g).sum(axis=(1, 2))
        union = (pred_masks | g).sum(axis=(1, 2))
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        scores.append(iou.max())
    return float(np.mean(scores))


def write_report(path, metrics: dict[str, float], seed: int, config_hash: str) -> None:
    """Key-value text report plus a sibling ``.csv`` (metric,value,seed,config_hash)."""
    from pathlib import Path

    path = Path(path)
    lines = [f"config_hash = {config_hash}", f"seed = {seed}"]
    lines += [f"{k} = {v:.6f}" for k, v in metrics.items()]
    path.write_text("\n".join(lines) + "\n")
    rows = ["metric,value,seed,config_hash"] + [f"{k},{v:.6f},{seed},{config_hash}" for k, v in metrics.items()]
    path.with_suffix(".csv").write_text("\n".join(rows) + "\n")
