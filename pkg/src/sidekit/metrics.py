"""Evaluation metrics: cosine reconstruction loss, exhaustive kNN ground
truth with Recall@k, and normalized entropy for binary predictions.

All functions are pure. kNN is exhaustive by design (desk-scale corpora
make exactness cheap and remove the index as a confound); query batches
can be evaluated in parallel, capped by the SIDEKIT_THREADS env var.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_KS = (20, 50, 100)
NE_CLIP = 1e-7


class MetricError(ValueError):
    pass


def worker_count():
    env = os.environ.get("SIDEKIT_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _unit_rows(x, what):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.where(norms == 0.0)[0]
    if bad.size:
        raise MetricError(f"zero-norm row {int(bad[0])} in {what}")
    return x / norms[:, None]


def cosine_recon_loss(x, x_hat):
    """Mean over rows of 1 - cos(x_i, x_hat_i)."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    xn = _unit_rows(x, "original corpus")
    rn = _unit_rows(x_hat, "reconstruction")
    return float(np.mean(1.0 - np.einsum("ij,ij->i", xn, rn)))


def delta_percent(fusion_loss, iso_loss):
    """Percentage increase of a fused-model loss over its 1:1 counterpart."""
    return 100.0 * (fusion_loss - iso_loss) / iso_loss


def cosine_topk(base, queries, k, exclude_self=None):
    """Exhaustive top-k indices of `base` rows by cosine similarity.

    `queries` is a (q, d) matrix; `exclude_self` optionally gives, per
    query, a base index to mask out (for queries drawn from the corpus).
    Ties break toward the lower base index. Runs query chunks on a small
    thread pool (matrix products release the GIL).
    """
    base_n = _unit_rows(base, "base corpus")
    q = _unit_rows(queries, "queries")
    nq = q.shape[0]
    limit = base_n.shape[0] - (1 if exclude_self is not None else 0)
    if k > limit:
        raise MetricError(f"k={k} exceeds candidate pool of {limit}")
    out = np.empty((nq, k), dtype=np.int64)

    def run(lo, hi):
        sims = q[lo:hi] @ base_n.T
        if exclude_self is not None:
            sims[np.arange(hi - lo), exclude_self[lo:hi]] = -np.inf
        # stable sort on -sims: equal similarities keep ascending index order
        out[lo:hi] = np.argsort(-sims, axis=1, kind="stable")[:, :k]

    workers = worker_count()
    chunk = max(1, -(-nq // workers))
    bounds = [(i, min(i + chunk, nq)) for i in range(0, nq, chunk)]
    if len(bounds) == 1:
        run(*bounds[0])
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: run(*b), bounds))
    return out


def knn_ground_truth(corpus, query_indices, depth=20):
    """Exact closest-`depth` neighbors of corpus rows, self excluded.

    Queries are given as row indices into the corpus; the query's own row
    never appears among its neighbors.
    """
    corpus = np.asarray(corpus)
    idx = np.asarray(query_indices, dtype=np.int64)
    if depth < 1:
        raise MetricError(f"depth must be >= 1, got {depth}")
    if depth > corpus.shape[0] - 1:
        raise MetricError(
            f"depth {depth} exceeds corpus size {corpus.shape[0]} minus self")
    return cosine_topk(corpus, corpus[idx], depth, exclude_self=idx)


@dataclass
class RecallReport:
    """Recall@k of candidate lists against fixed-depth ground truth."""

    ks: tuple
    recalls: tuple
    query_count: int
    corpus_size: int
    gt_depth: int

    def __post_init__(self):
        for r in self.recalls:
            if not 0.0 <= r <= 1.0:
                raise MetricError(f"recall {r} outside [0, 1]")

    def as_dict(self):
        d = {f"recall@{k}": r for k, r in zip(self.ks, self.recalls)}
        d.update(queries=self.query_count, corpus=self.corpus_size,
                 gt_depth=self.gt_depth)
        return d

    def __str__(self):
        cells = "  ".join(f"R@{k}={r:.4f}" for k, r in zip(self.ks, self.recalls))
        return f"{cells}  ({self.query_count} queries, corpus {self.corpus_size})"


def recall_at_k(ground_truth, candidates, ks=DEFAULT_KS, corpus_size=None):
    """Mean over queries of |gt ∩ candidates[:k]| / |gt|.

    Candidate lists must be at least max(ks) long. For nested candidate
    prefixes the recall values are non-decreasing in k, which is asserted
    on every report.
    """
    gt = np.asarray(ground_truth)
    cand = np.asarray(candidates)
    ks = tuple(sorted(ks))
    if cand.shape[0] != gt.shape[0]:
        raise MetricError(
            f"query count mismatch: {gt.shape[0]} ground truth vs "
            f"{cand.shape[0]} candidate lists")
    if cand.shape[1] < max(ks):
        raise MetricError(
            f"candidate lists of length {cand.shape[1]} too short for k={max(ks)}")
    recalls = []
    for k in ks:
        hits = [np.isin(gt[i], cand[i, :k]).sum() for i in range(gt.shape[0])]
        recalls.append(float(np.mean(hits) / gt.shape[1]))
    for lo, hi in zip(recalls, recalls[1:]):
        if lo > hi + 1e-12:
            raise MetricError("recall not monotone over nested candidate lists")
    return RecallReport(ks, tuple(recalls), gt.shape[0],
                        corpus_size if corpus_size is not None else 0,
                        gt.shape[1])


def random_baseline_recall(corpus_size, k, _gt_depth=20):
    """Expected recall of k uniformly random candidates (self excluded)."""
    return k / (corpus_size - 1)


@dataclass
class NEReport:
    """Normalized entropy: mean binary log-loss over the prior entropy."""

    ne: float
    n: int
    prior: float
    mean_log_loss: float

    def as_dict(self):
        return {"ne": self.ne, "n": self.n, "prior": self.prior,
                "mean_log_loss": self.mean_log_loss}

    def __str__(self):
        return f"NE={self.ne:.6f} (n={self.n}, prior={self.prior:.4f})"


def normalized_entropy(labels, predictions):
    """NE = mean log-loss of the predictions / entropy of the label prior.

    Equals 1 for the constant-prior predictor; lower is better. Predictions
    are clipped to [1e-7, 1 - 1e-7] to keep the log-loss finite. Requires
    at least one positive and one negative label, otherwise the prior
    entropy is zero.
    """
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise MetricError(f"shape mismatch: {y.shape} labels vs {p.shape} predictions")
    if y.size < 1:
        raise MetricError("need at least one sample")
    if not np.isin(y, (0.0, 1.0)).all():
        raise MetricError("labels must be binary")
    prior = float(y.mean())
    if prior in (0.0, 1.0):
        raise MetricError("labels are single-class; prior entropy is zero")
    p = np.clip(p, NE_CLIP, 1.0 - NE_CLIP)
    mean_ll = float(np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    prior_ent = prior * np.log(prior) + (1.0 - prior) * np.log(1.0 - prior)
    return NEReport(ne=float(mean_ll / prior_ent), n=y.size, prior=prior,
                    mean_log_loss=-mean_ll)


# ---------------------------------------------------------------------------
# Report rendering


def format_recon_table(rows):
    """Pretty-print reconstruction losses with the percentage-increase column.

    `rows` is a list of dicts with keys: setting, method, and one loss per
    task name; 1:1 rows anchor the percentage for the matching fusion row.
    """
    tasks = [k for k in rows[0] if k not in ("setting", "method")]
    iso = {(r["method"], t): r[t] for r in rows if r["setting"] == "1:1"
           for t in tasks}
    header = ["Setting", "Method"]
    for t in tasks:
        header += [t, "d%"]
    lines = ["  ".join(f"{h:>10}" for h in header)]
    for r in rows:
        cells = [f"{r['setting']:>10}", f"{r['method']:>10}"]
        for t in tasks:
            cells.append(f"{r[t]:>10.4f}")
            if r["setting"] == "fusion" and (r["method"], t) in iso:
                cells.append(f"{delta_percent(r[t], iso[(r['method'], t)]):>9.2f}%")
            else:
                cells.append(f"{'-':>10}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def format_recall_table(rows):
    """Rows of {corpus, method, report: RecallReport} as an aligned table."""
    ks = rows[0]["report"].ks
    header = ["Corpus", "Method"] + [f"R@{k}" for k in ks]
    lines = ["  ".join(f"{h:>10}" for h in header)]
    for r in rows:
        cells = [f"{r['corpus']:>10}", f"{r['method']:>10}"]
        cells += [f"{v:>10.4f}" for v in r["report"].recalls]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def emit_report(payload, as_json=False, stream=None):
    import sys
    stream = stream or sys.stdout
    if as_json:
        def default(o):
            if hasattr(o, "as_dict"):
                return o.as_dict()
            if isinstance(o, np.generic):
                return o.item()
            raise TypeError(f"not serializable: {type(o)}")
        stream.write(json.dumps(payload, default=default, indent=2) + "\n")
    else:
        if isinstance(payload, dict):
            for k, v in payload.items():
                stream.write(f"{k}: {v}\n")
        else:
            stream.write(str(payload) + "\n")
