"""Bagging and SAMME boosting over independently trained single-tentacle BNNs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import NetworkSpec, build_tentaclenet, derive_seed
from .train import TrainConfig, predict_logits, train
from .layers import softmax

ALPHA_CAP = math.log(1e12)


@dataclass
class BaggedEnsemble:
    members: list
    mode: str = "average"
    partition_seed: int = 0
    subsets: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("average", "vote"):
            raise ValueError("fusion mode must be 'average' or 'vote'")


@dataclass
class BoostedEnsemble:
    members: list
    alphas: list[float]
    classes: int
    sample_weights: list[np.ndarray] = field(default_factory=list)


def partition(n_items: int, n_parts: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle indices and split into ``n_parts`` disjoint near-equal subsets."""
    if n_parts < 1:
        raise ValueError("need at least one part")
    if n_parts > n_items:
        raise ValueError(f"cannot split {n_items} samples into {n_parts} subsets")
    return np.array_split(rng.permutation(n_items), n_parts)


def bagging_train(spec: NetworkSpec, x, y, n: int, cfg: TrainConfig, seed: int = 0, mode="average"):
    parts = partition(len(x), n, np.random.default_rng(seed))
    members = []
    for i, idx in enumerate(parts):
        member = build_tentaclenet(spec, 1, derive_seed(seed, 1000 + i))
        member, _ = train(member, x[idx], y[idx], replace(cfg, seed=derive_seed(cfg.seed, i)))
        members.append(member)
    return BaggedEnsemble(members, mode, seed, parts)


def _vote(preds: np.ndarray, weights: np.ndarray, classes: int) -> np.ndarray:
    """Weighted plurality per row; ties resolve to the lowest class index."""
    tally = np.zeros((preds.shape[1], classes))
    for m in range(preds.shape[0]):
        tally[np.arange(preds.shape[1]), preds[m]] += weights[m]
    return tally.argmax(axis=1)


def bagging_predict(e: BaggedEnsemble, x) -> np.ndarray:
    """Class per input (batched)."""
    logits = np.stack([predict_logits(m, x) for m in e.members])
    if e.mode == "average":
        return softmax(logits.astype(np.float64), axis=2).mean(axis=0).argmax(axis=1)
    preds = logits.argmax(axis=2)
    return _vote(preds, np.ones(len(e.members)), logits.shape[2])


def samme_alpha(err: float, classes: int) -> float:
    """ln((1-err)/err) + ln(C-1), zero when no better than chance, capped for err = 0."""
    if err >= 1 - 1 / classes:
        return 0.0
    if err <= 0:
        return ALPHA_CAP
    return min(math.log((1 - err) / err) + math.log(classes - 1), ALPHA_CAP)


def samme_reweight(w: np.ndarray, miss: np.ndarray, alpha: float) -> np.ndarray:
    w = w * np.exp(alpha * miss)
    return w / w.sum()


def boost_train(spec: NetworkSpec, x, y, rounds: int, cfg: TrainConfig, seed: int = 0) -> BoostedEnsemble:
    y = np.asarray(y)
    classes = spec.classes
    if rounds < 1:
        raise ValueError("need at least one boosting round")
    if len(np.unique(y)) < 2:
        raise ValueError("boosting needs at least two classes present in the data")
    rng = np.random.default_rng(seed)
    w = np.full(len(x), 1.0 / len(x))
    members, alphas, history = [], [], []
    for m in range(rounds):
        idx = rng.choice(len(x), size=len(x), replace=True, p=w)
        member = build_tentaclenet(spec, 1, derive_seed(seed, 2000 + m))
        member, _ = train(member, x[idx], y[idx], replace(cfg, seed=derive_seed(cfg.seed, m)))
        miss = (predict_logits(member, x).argmax(axis=1) != y).astype(np.float64)
        err = float(np.dot(w, miss))
        alpha = samme_alpha(err, classes)
        members.append(member)
        alphas.append(alpha)
        if alpha == 0.0:
            break
        w = samme_reweight(w, miss, alpha)
        history.append(w.copy())
    return BoostedEnsemble(members, alphas, classes, history)


def boost_predict(e: BoostedEnsemble, x) -> np.ndarray:
    preds = np.stack([predict_logits(m, x).argmax(axis=1) for m in e.members])
    weights = np.array(e.alphas, dtype=np.float64)
    if not np.any(weights):
        weights = np.ones_like(weights)
    return _vote(preds, weights, e.classes)


COMPARE_COLUMNS = ["benchmark", "template", "delta_pct", "members", "size_kb", "savings_pct"]


def compare_report(fp32_acc: float, candidates, benchmark: str = "") -> list[dict]:
    """Rows of (delta vs FP32, members, kB, savings vs smallest non-TentacleNet entry).

    ``candidates`` holds (name, accuracy, size_kb, members) tuples; savings
    apply to TentacleNet rows only, the others are left blank.
    """
    baseline = [c[2] for c in candidates if not c[0].lower().startswith("tentaclenet")]
    smallest = min(baseline) if baseline else None
    rows = []
    for name, acc, kb, members in candidates:
        savings = None
        if name.lower().startswith("tentaclenet") and smallest:
            # truncated, not rounded, to one decimal (645 vs 1445 kB -> 55.3)
            savings = math.floor(1000.0 * (1 - kb / smallest) + 1e-9) / 10
        rows.append({
            "benchmark": benchmark,
            "template": name,
            "delta_pct": float(acc) - float(fp32_acc),
            "members": members,
            "size_kb": kb,
            "savings_pct": savings,
        })
    return rows


def write_compare_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in COMPARE_COLUMNS})
