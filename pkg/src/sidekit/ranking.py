"""Desk-scale ranking harness comparing SID and SIDE feature paths.

The model mirrors the usual deep ranking block structure: a sparse block
(categorical features through embedding tables), a dense block, an
embedding block for the candidate item, and a user-history block that
pools the event sequence with one-layer attention (softmax(Q K^T / sqrt(d)) V
with K = V Theta). Event and candidate items enter either as hashed SID
sparse features (embedding table lookups, collision-prone when the table
is small) or as SIDE features (digits unpacked from the SID and projected
by a single t x d matrix, no per-item table at all). The prediction head
is logistic over the concatenated block outputs plus the elementwise
interaction between the pooled history and the candidate feature; without
that interaction a linear head cannot express the user-item affinity the
labels are generated from, and neither feature path would beat the
no-history ablation.

Synthetic engagement data plants a real signal in the history: items
carry ternary-grid latents, each user's history is sampled around a
hidden taste vector, and the click probability of the shown candidate is
sigmoid(a * <mean of history latents, candidate latent> + b).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_core as nn
from .nn_core import DTYPE, AdamState, ParamStore, adam_step
from .metrics import NEReport, normalized_entropy
from .quantizers import FsqConfig, fsq_quantize
from .sid_codec import SidScheme, pack_all, sid_hash, side_embed, unpack_all


class RankingError(ValueError):
    pass


def pma_forward(queries, values, theta):
    """One-layer pooled attention: softmax(Q K^T / sqrt(d)) V, K = V Theta.

    queries is (k, d), values (l, d), theta (d, d); returns (k, d). The
    attention rows are a softmax, so each sums to 1.
    """
    q = np.asarray(queries, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    th = np.asarray(theta, dtype=np.float64)
    d = q.shape[1]
    if v.shape[1] != d or th.shape != (d, d):
        raise RankingError(
            f"shape mismatch: Q {q.shape}, V {v.shape}, Theta {th.shape}")
    keys = v @ th
    logits = q @ keys.T / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    return (attn @ v).astype(DTYPE)


def build_features_sid(event_sids, table, hash_size):
    """Hashed sparse lookup per event: mean of the gram embeddings.

    event_sids is (l, grams) of u64 SIDs; table is (hash_size, d). SIDs
    congruent modulo hash_size share rows by construction.
    """
    table = np.asarray(table)
    if table.shape[0] != hash_size:
        raise RankingError(
            f"table has {table.shape[0]} rows, hash_size is {hash_size}")
    idx = sid_hash(np.asarray(event_sids, dtype=np.uint64), hash_size)
    return table[idx].mean(axis=1).astype(DTYPE)


def build_features_side(event_digits, omega):
    """Project unpacked SIDE digits through the t x d matrix omega."""
    digits = np.asarray(event_digits, dtype=DTYPE)
    omega = np.asarray(omega)
    if digits.shape[-1] != omega.shape[0]:
        raise RankingError(
            f"SIDE length {digits.shape[-1]} != projection rows {omega.shape[0]}")
    return (digits @ omega).astype(DTYPE)


# ---------------------------------------------------------------------------
# Synthetic engagement data


@dataclass(frozen=True)
class EngagementConfig:
    users: int = 10_000
    items: int = 2_000
    seq_len: int = 32
    latent_dim: int = 16
    segments: int = 16
    dense_dim: int = 4
    ngram: int = 8
    affinity_scale: float = 8.0   # a in sigmoid(a * <pref, item> + b)
    affinity_bias: float = -1.5   # b
    history_sharpness: float = 20.0
    seed: int = 0


@dataclass
class SyntheticEngagementSet:
    config: EngagementConfig
    item_latents: np.ndarray   # (items, latent_dim), rows on the ternary grid
    item_digits: np.ndarray    # (items, latent_dim) centered ternary digits
    item_sids: np.ndarray      # (items, grams) u64
    scheme: SidScheme
    history: np.ndarray        # (users, seq_len) item ids
    candidates: np.ndarray     # (users,) item id shown
    labels: np.ndarray         # (users,) binary click
    segments: np.ndarray       # (users,) categorical id
    dense: np.ndarray          # (users, dense_dim)

    @property
    def sid_cardinality(self):
        return int(self.scheme.base ** self.scheme.ngram)

    def collision_free_size(self):
        return self.scheme.max_sid + 1


def generate_engagement(cfg):
    """Seed-deterministic synthetic engagement sequences with planted signal.

    Item latents are unit-normalized ternary vectors, so the SIDE digits
    recover the latent direction exactly; whatever separates the feature
    paths is collisions, not quantization error. Users sample history
    items with probability softmax(sharpness * <taste, item latent>), and
    the click label on a uniformly drawn candidate follows
    sigmoid(a * <mean history latent, candidate latent> + b).
    """
    rng = np.random.default_rng(cfg.seed)
    t = cfg.latent_dim

    raw = rng.integers(-1, 2, size=(cfg.items, t))
    dead = ~raw.any(axis=1)
    raw[dead, 0] = 1  # no zero vectors on the grid
    latents = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    # digits via the ternary scalar quantizer at a gain that clears the
    # tanh dead zone for entries of magnitude 1/sqrt(t)
    fsq = FsqConfig(latent_dims=t, levels=3)
    levels, _ = fsq_quantize(fsq, latents * (2.0 * np.sqrt(t)))
    digits = (levels - 1).astype(np.int8)
    if not np.array_equal(digits, np.sign(raw)):
        raise RankingError("digit extraction failed to recover the grid")

    scheme = SidScheme.for_digits(t, base=3, ngram=cfg.ngram)
    sids = pack_all(scheme, digits)

    taste = rng.normal(size=(cfg.users, t))
    taste /= np.linalg.norm(taste, axis=1, keepdims=True)
    affinity = taste @ latents.T                       # (users, items)
    w = np.exp(cfg.history_sharpness * affinity)
    w /= w.sum(axis=1, keepdims=True)
    cum = np.cumsum(w, axis=1)
    draws = rng.random(size=(cfg.users, cfg.seq_len))
    history = (draws[:, :, None] > cum[:, None, :]).sum(axis=2).astype(np.int64)

    candidates = rng.integers(0, cfg.items, size=cfg.users)
    pref = latents[history].mean(axis=1)
    dot = np.einsum("ud,ud->u", pref, latents[candidates])
    p_click = 1.0 / (1.0 + np.exp(-(cfg.affinity_scale * dot + cfg.affinity_bias)))
    labels = (rng.random(cfg.users) < p_click).astype(np.int8)

    segments = rng.integers(0, cfg.segments, size=cfg.users)
    dense = rng.normal(size=(cfg.users, cfg.dense_dim)).astype(DTYPE)
    return SyntheticEngagementSet(
        config=cfg, item_latents=latents.astype(DTYPE), item_digits=digits,
        item_sids=sids, scheme=scheme, history=history, candidates=candidates,
        labels=labels, segments=segments, dense=dense)


# ---------------------------------------------------------------------------
# Toy ranking model


@dataclass
class RankTrainConfig:
    batch_size: int = 256
    epochs: int = 12
    lr: float = 3e-3
    weight_decay: float = 1e-3
    feature_dim: int = 16
    eval_fraction: float = 0.2
    seed: int = 0


class ToyRankingModel:
    """Logistic CTR model over sparse, dense, candidate, and history blocks.

    variant selects the item feature path: "sid" (hashed embedding table),
    "side" (digit projection), or "none" (history and candidate identity
    features ablated to zero).
    """

    def __init__(self, dataset, variant, hash_size, cfg):
        if variant not in ("sid", "side", "none"):
            raise RankingError(f"unknown variant '{variant}'")
        self.variant = variant
        self.hash_size = hash_size
        self.cfg = cfg
        self.dataset = dataset
        d = cfg.feature_dim
        t = dataset.item_digits.shape[1]
        self.params = ParamStore(cfg.seed)
        self.params.table("sparse.segments", dataset.config.segments, d)
        self.params.weight("dense.w", dataset.config.dense_dim, d)
        self.params.zeros("dense.b", 1, d)
        grams = dataset.scheme.grams
        if variant == "sid":
            # one row block per gram position: gram g of an item indexes
            # rows [g*hash_size, (g+1)*hash_size), so grams never collide
            # with each other, only with same-position SIDs. Rows start at
            # O(1) scale; near-zero rows would leave the multiplicative
            # interaction path with no usable gradient.
            self.params.table("feature.table", grams * hash_size, d, scale=0.3)
        elif variant == "side":
            self.params.weight("feature.omega", t, d)
        self.params.weight("pma.theta", d, d)
        self.params.weight("head.w", 5 * d, 1)
        self.params.zeros("head.b", 1, 1)
        self._pnodes = {}
        # precomputed per-item inputs for the feature path
        if variant == "sid":
            offsets = (np.arange(grams) * hash_size)[None, :]
            self.item_hash = sid_hash(dataset.item_sids, hash_size) + offsets
        self.item_digits = dataset.item_digits.astype(DTYPE)

    def _p(self, name):
        node = self._pnodes.get(name)
        if node is None:
            node = self.params.node(name)
            self._pnodes[name] = node
        return node

    def _item_features(self, item_ids):
        """Feature node for a flat vector of item ids."""
        ids = np.asarray(item_ids).ravel()
        if self.variant == "sid":
            grams = self.item_hash.shape[1]
            looked = [nn.gather_rows(self._p("feature.table"),
                                     self.item_hash[ids, g])
                      for g in range(grams)]
            acc = looked[0]
            for node in looked[1:]:
                acc = nn.add(acc, node)
            return nn.scale(acc, 1.0 / grams)
        if self.variant == "side":
            digits = nn.constant(self.item_digits[ids])
            return nn.matmul(digits, self._p("feature.omega"))
        return nn.constant(np.zeros((ids.size, self.cfg.feature_dim)))

    def logits(self, rows):
        """Forward pass for a batch of user row indices; returns (node, p)."""
        self._pnodes = {}
        ds = self.dataset
        d = self.cfg.feature_dim
        l = ds.config.seq_len
        b = rows.size

        seg = nn.gather_rows(self._p("sparse.segments"), ds.segments[rows])
        dense = nn.add(nn.matmul(nn.constant(ds.dense[rows]),
                                 self._p("dense.w")), self._p("dense.b"))
        cand = self._item_features(ds.candidates[rows])
        hist = self._item_features(ds.history[rows])      # (b*l, d)

        keys = nn.matmul(hist, self._p("pma.theta"))
        qrep = nn.repeat_rows(cand, l)
        logits = nn.scale(nn.sum_axis1(nn.mul(keys, qrep)), 1.0 / np.sqrt(d))
        attn = nn.softmax_rows(nn.reshape(logits, b, l))
        pooled = nn.segment_sum_rows(
            nn.mul(hist, nn.reshape(attn, b * l, 1)), l)

        inter = nn.mul(pooled, cand)
        feats = nn.concat_cols([seg, dense, cand, pooled, inter])
        z = nn.add(nn.matmul(feats, self._p("head.w")), self._p("head.b"))
        return z

    def predict(self, rows):
        z = self.logits(rows)
        return 1.0 / (1.0 + np.exp(-z.value[:, 0].astype(np.float64)))

    def collect_grads(self):
        out = {}
        for name, arr in self.params.items():
            node = self._pnodes.get(name)
            out[name] = node.grad if node is not None and node.grad is not None \
                else np.zeros_like(arr)
        return out

    def feature_path_params(self):
        """Parameter count of the item feature path only."""
        if self.variant == "sid":
            return self.params.count("feature.table")
        if self.variant == "side":
            return self.params.count("feature.omega")
        return 0

    def parameter_census(self):
        return {name: arr.size for name, arr in self.params.items()}


def _bce_loss(logit_node, labels):
    # mean(softplus(z) - y*z), the stable form of binary cross-entropy
    y = nn.constant(labels.reshape(-1, 1).astype(DTYPE))
    return nn.mean_all(nn.sub(nn.softplus(logit_node), nn.mul(y, logit_node)))


def train_ranker(dataset, variant, hash_size, cfg):
    """Train one variant; returns (model, NEReport on the eval split)."""
    rng = np.random.default_rng(cfg.seed)
    n = dataset.config.users
    order = rng.permutation(n)
    n_eval = int(n * cfg.eval_fraction)
    eval_rows = order[:n_eval]
    train_rows = order[n_eval:]
    if dataset.labels[train_rows].min() == dataset.labels[train_rows].max():
        raise RankingError("training split is single-class")

    model = ToyRankingModel(dataset, variant, hash_size, cfg)
    opt = AdamState(lr=cfg.lr)
    for _ in range(cfg.epochs):
        perm = rng.permutation(train_rows.size)
        for lo in range(0, train_rows.size, cfg.batch_size):
            rows = train_rows[perm[lo:lo + cfg.batch_size]]
            z = model.logits(rows)
            loss = _bce_loss(z, dataset.labels[rows])
            if not np.isfinite(loss.value[0, 0]):
                raise nn.TrainingDiverged("ranking loss became non-finite")
            nn.backward(loss)
            params = dict(model.params.items())
            adam_step(opt, params, model.collect_grads())
            if cfg.weight_decay > 0.0:
                # decoupled decay; keeps rarely touched table rows from
                # freezing noise into the eval logits
                shrink = DTYPE(1.0 - cfg.lr * cfg.weight_decay)
                for arr in params.values():
                    arr *= shrink
    preds = model.predict(eval_rows)
    report = normalized_entropy(dataset.labels[eval_rows], preds)
    return model, report


@dataclass
class AbResult:
    variant: str
    ne: NEReport
    feature_params: int
    ne_gain_pct: float | None = None  # vs the no-history ablation


@dataclass
class AbReport:
    hash_size: int
    results: dict
    seed: int

    def markdown(self):
        lines = ["| Variant | Click NE | NE gain | Feature-path params |",
                 "|---|---|---|---|"]
        for name, r in self.results.items():
            gain = "-" if r.ne_gain_pct is None else f"{r.ne_gain_pct:+.4f}%"
            lines.append(
                f"| {name} | {r.ne.ne:.6f} | {gain} | {r.feature_params} |")
        return "\n".join(lines)


def run_ab(dataset, hash_size, cfg, variants=("sid", "side"),
           include_baseline=True):
    """Train each variant on identical splits and report paired NE.

    The no-history ablation anchors the NE-gain column; a positive gain
    means the feature path reduced NE relative to ranking without item
    identity features.
    """
    results = {}
    baseline_ne = None
    if include_baseline:
        _, base_report = train_ranker(dataset, "none", hash_size, cfg)
        baseline_ne = base_report.ne
        results["none"] = AbResult("none", base_report, 0)
    for variant in variants:
        _, report = train_ranker(dataset, variant, hash_size, cfg)
        gain = None
        if baseline_ne is not None:
            gain = 100.0 * (baseline_ne - report.ne) / baseline_ne
        model = ToyRankingModel(dataset, variant, hash_size, cfg)
        results[variant] = AbResult(variant, report,
                                    model.feature_path_params(), gain)
    return AbReport(hash_size=hash_size, results=results, seed=cfg.seed)
