"""Command-line surface tying the quantizers, codec, trainer, and metrics
into file-based pipelines.

Commands: gen-corpus, gen-engagement, train, encode, decode, eval-recon,
eval-recall, eval-ne, rank-ab, sweep. All randomness flows from --seed
flags; SIDEKIT_THREADS caps metric-evaluation parallelism.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from itertools import product

import numpy as np

from . import fusion_vae as fv
from . import metrics
from . import ranking as rk
from .corpus_io import corpus_read, corpus_write, generate_clustered_corpus
from .quantizers import (KMeansCodebook, kmeans_fit, product_split,
                         residual_fit, residual_quantize, save_codebooks,
                         load_codebooks)
from .sid_codec import (SidScheme, pack_all, read_sid_file, side_embed,
                        unpack_all, write_sid_file)


class PipelineError(ValueError):
    pass


QUANTIZER_KINDS = ("kmeans", "rq", "pq", "fsq", "dpca", "none")


@dataclass
class PipelineConfig:
    """Flat training/encoding configuration, loadable from key=value files."""

    quantizer: str = "fsq"
    levels: int = 3       # scalar buckets (fsq) or centroids k (kmeans family)
    depth: int = 1        # residual layers (rq, dpca)
    groups: int = 1       # product groups (pq, dpca)
    latent: int = 15
    hidden: int = 128
    ngram: int = 3
    batch_size: int = 256
    epochs: int = 50
    lr: float = 1e-3
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    quantizer_dropout: float = 0.0
    kmeans_iters: int = 25
    seed: int = 0

    def validate(self):
        if self.quantizer not in QUANTIZER_KINDS:
            raise PipelineError(f"unknown quantizer '{self.quantizer}'")
        if self.quantizer in ("kmeans", "fsq") and self.depth != 1:
            raise PipelineError(f"depth only applies to rq/dpca, got {self.depth}")
        if self.quantizer in ("kmeans", "rq", "fsq") and self.groups != 1:
            raise PipelineError(f"groups only applies to pq/dpca, got {self.groups}")
        if self.quantizer == "pq" and self.depth != 1:
            raise PipelineError("pq has no residual depth")
        if self.quantizer == "dpca" and self.levels != 3:
            raise PipelineError("dpca uses the ternary codebook; levels must be 3")
        return self

    def train_config(self):
        return fv.TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
            commitment_weight=self.commitment_weight,
            codebook_weight=self.codebook_weight,
            quantizer_dropout=self.quantizer_dropout, seed=self.seed)


def load_config(path):
    cfg = {}
    valid = {f.name: f.type for f in fields(PipelineConfig)}
    casts = {"lr": float, "commitment_weight": float, "codebook_weight": float,
             "quantizer_dropout": float}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise PipelineError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in valid:
                raise PipelineError(f"{path}:{lineno}: unknown key '{key}'")
            if key == "quantizer":
                cfg[key] = value
            else:
                cfg[key] = casts.get(key, int)(value)
    return PipelineConfig(**cfg).validate()


def _signal_specs(paths, dims):
    return tuple(fv.SignalSpec(name=f"sig{i}", dim=d)
                 for i, d in enumerate(dims))


def _build_fusion(cfg, dims, seed):
    spec = fv.FusionSpec(
        signals=_signal_specs(None, dims), latent=cfg.latent, hidden=cfg.hidden,
        quantizer=fv.QuantizerSpec(kind=cfg.quantizer, levels=cfg.levels,
                                   depth=cfg.depth, groups=cfg.groups))
    return fv.FusionModel(spec, seed=seed)


def _load_bundle(paths):
    corpora = [corpus_read(p) for p in paths]
    rows = {c.shape[0] for c in corpora}
    if len(rows) != 1:
        raise PipelineError(f"corpora disagree on row count: {sorted(rows)}")
    return {f"sig{i}": c for i, c in enumerate(corpora)}, \
        [c.shape[1] for c in corpora]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args):
    x = generate_clustered_corpus(args.rows, args.dim, clusters=args.clusters,
                                  noise=args.noise, seed=args.seed)
    corpus_write(args.out, x)
    print(f"wrote {args.rows}x{args.dim} corpus to {args.out}")
    return 0


def cmd_gen_engagement(args):
    cfg = rk.EngagementConfig(users=args.users, items=args.items,
                              seq_len=args.seq_len, seed=args.seed)
    ds = rk.generate_engagement(cfg)
    np.savez(args.out, item_latents=ds.item_latents, item_digits=ds.item_digits,
             item_sids=ds.item_sids, history=ds.history,
             candidates=ds.candidates, labels=ds.labels, segments=ds.segments,
             dense=ds.dense, users=cfg.users, items=cfg.items,
             seq_len=cfg.seq_len, seed=cfg.seed)
    print(f"wrote engagement set ({cfg.users} users, {cfg.items} items) to {args.out}")
    return 0


def _fit_classical(cfg, corpus):
    if cfg.quantizer == "kmeans":
        return [kmeans_fit(corpus, cfg.levels, iters=cfg.kmeans_iters,
                           seed=cfg.seed)]
    if cfg.quantizer == "rq":
        return residual_fit(corpus, cfg.levels, cfg.depth,
                            iters=cfg.kmeans_iters, seed=cfg.seed)
    # pq: independent codebooks per contiguous slice
    return [kmeans_fit(part, cfg.levels, iters=cfg.kmeans_iters,
                       seed=cfg.seed + g)
            for g, part in enumerate(product_split(corpus, cfg.groups))]


def _classical_codes(cfg, books, corpus):
    if cfg.quantizer in ("kmeans", "rq"):
        idx, _ = residual_quantize(books, corpus)
        return idx
    parts = product_split(corpus, cfg.groups)
    cols = [residual_quantize([b], p)[0] for b, p in zip(books, parts)]
    return np.concatenate(cols, axis=1)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    bundle, dims = _load_bundle(args.corpus)
    if cfg.quantizer in ("kmeans", "rq", "pq"):
        if len(args.corpus) != 1:
            raise PipelineError("classical quantizers train on one corpus")
        books = _fit_classical(cfg, bundle["sig0"])
        arrays = {}
        for layer, book in enumerate(books):
            arrays[f"kmeans.l{layer}.centroids"] = book.centroids
        from .nn_core import save_checkpoint
        save_checkpoint(args.out, arrays)
        print(f"fitted {cfg.quantizer} ({len(books)} codebooks) -> {args.out}")
        return 0
    model = _build_fusion(cfg, dims, cfg.seed)
    model, history = fv.train(model, bundle, cfg.train_config())
    model.save(args.out)
    if args.history:
        history.to_csv(args.history)
    last = history.rows[-1] if history.rows else {}
    print(f"trained {cfg.quantizer} fusion model -> {args.out} "
          f"(final loss {last.get('total', float('nan')):.4f})")
    if history.diverged_at is not None:
        print(f"warning: diverged at epoch {history.diverged_at}; "
              "kept last good checkpoint")
    return 0


def _load_classical(path):
    from .nn_core import load_checkpoint
    arrays = load_checkpoint(path)
    layers = sorted(arrays, key=lambda k: int(k.split(".")[1][1:]))
    return [KMeansCodebook(arrays[k]) for k in layers]


def cmd_encode(args):
    cfg = load_config(args.config)
    bundle, dims = _load_bundle(args.corpus)
    if cfg.quantizer in ("kmeans", "rq", "pq"):
        books = _load_classical(args.ckpt)
        codes = _classical_codes(cfg, books, bundle["sig0"])
        scheme = SidScheme.for_digits(codes.shape[1], base=cfg.levels,
                                      ngram=cfg.ngram)
        sids = pack_all(scheme, codes - scheme.offset)
    else:
        model = _build_fusion(cfg, dims, cfg.seed).load(args.ckpt)
        scheme, sids = fv.encode_corpus(model, bundle, ngram=cfg.ngram)
    write_sid_file(args.out, scheme, sids)
    print(f"encoded {len(np.atleast_2d(sids))} records -> {args.out}")
    return 0


def cmd_decode(args):
    cfg = load_config(args.config)
    scheme, sids = read_sid_file(args.sids)
    digits = unpack_all(scheme, sids)
    if cfg.quantizer in ("kmeans", "rq", "pq"):
        books = _load_classical(args.ckpt)
        idx = digits + scheme.offset
        if cfg.quantizer == "pq":
            parts = [books[g].centroids[idx[:, g]] for g in range(len(books))]
            recon = np.concatenate(parts, axis=1)
        else:
            recon = sum(b.centroids[idx[:, i]] for i, b in enumerate(books))
        corpus_write(f"{args.out}.sig0.emb", recon)
        print(f"decoded {recon.shape[0]} rows -> {args.out}.sig0.emb")
        return 0
    dims = [int(d) for d in args.dims.split(",")]
    model = _build_fusion(cfg, dims, cfg.seed).load(args.ckpt)
    recon = fv.decode_from_digits(model, digits)
    for name, arr in recon.items():
        corpus_write(f"{args.out}.{name}.emb", arr)
        print(f"decoded {arr.shape[0]} rows -> {args.out}.{name}.emb")
    return 0


def cmd_eval_recon(args):
    x = corpus_read(args.original)
    x_hat = corpus_read(args.reconstruction)
    loss = metrics.cosine_recon_loss(x, x_hat)
    metrics.emit_report({"cosine_reconstruction_loss": loss}, args.json)
    return 0


def cmd_eval_recall(args):
    corpus = corpus_read(args.corpus)
    cand_vectors = corpus_read(args.candidates)
    if cand_vectors.shape[0] != corpus.shape[0]:
        raise PipelineError("corpus and candidate vectors must align by row")
    rng = np.random.default_rng(args.seed)
    n_queries = min(args.queries, corpus.shape[0])
    queries = rng.choice(corpus.shape[0], size=n_queries, replace=False)
    ks = tuple(int(k) for k in args.ks.split(","))
    gt = metrics.knn_ground_truth(corpus, queries, depth=args.depth)
    cands = metrics.cosine_topk(cand_vectors, cand_vectors[queries],
                                max(ks), exclude_self=queries)
    report = metrics.recall_at_k(gt, cands, ks, corpus_size=corpus.shape[0])
    metrics.emit_report(report.as_dict() if args.json else report, args.json)
    return 0


def cmd_eval_ne(args):
    labels = np.loadtxt(args.labels)
    preds = np.loadtxt(args.predictions)
    report = metrics.normalized_entropy(labels, preds)
    metrics.emit_report(report.as_dict() if args.json else report, args.json)
    return 0


def cmd_rank_ab(args):
    if args.data:
        loaded = np.load(args.data)
        cfg = rk.EngagementConfig(users=int(loaded["users"]),
                                  items=int(loaded["items"]),
                                  seq_len=int(loaded["seq_len"]),
                                  seed=int(loaded["seed"]))
        scheme = SidScheme.for_digits(loaded["item_digits"].shape[1],
                                      base=3, ngram=cfg.ngram)
        ds = rk.SyntheticEngagementSet(
            config=cfg, item_latents=loaded["item_latents"],
            item_digits=loaded["item_digits"], item_sids=loaded["item_sids"],
            scheme=scheme, history=loaded["history"],
            candidates=loaded["candidates"], labels=loaded["labels"],
            segments=loaded["segments"], dense=loaded["dense"])
    else:
        ds = rk.generate_engagement(rk.EngagementConfig(
            users=args.users, items=args.items, seq_len=args.seq_len,
            seed=args.seed))
    hash_size = args.hash_size or ds.collision_free_size()
    tcfg = rk.RankTrainConfig(epochs=args.epochs, lr=args.lr,
                              feature_dim=args.feature_dim, seed=args.seed)
    report = rk.run_ab(ds, hash_size, tcfg)
    if args.json:
        payload = {name: {"ne": r.ne.as_dict(), "feature_params": r.feature_params,
                          "ne_gain_pct": r.ne_gain_pct}
                   for name, r in report.results.items()}
        payload["hash_size"] = hash_size
        metrics.emit_report(payload, as_json=True)
    else:
        print(f"hash_size={hash_size}")
        print(report.markdown())
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    bundle, dims = _load_bundle(args.corpus)
    levels = [int(v) for v in (args.levels or str(cfg.levels)).split(",")]
    depths = [int(v) for v in (args.depths or str(cfg.depth)).split(",")]
    groups = [int(v) for v in (args.groups or str(cfg.groups)).split(",")]
    ngrams = [int(v) for v in (args.ngrams or str(cfg.ngram)).split(",")]
    rows = []
    for L, D, P, n in product(levels, depths, groups, ngrams):
        combo = PipelineConfig(
            quantizer=cfg.quantizer, levels=L, depth=D, groups=P,
            latent=cfg.latent, hidden=cfg.hidden, ngram=n,
            batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr,
            commitment_weight=cfg.commitment_weight,
            codebook_weight=cfg.codebook_weight,
            quantizer_dropout=cfg.quantizer_dropout, seed=cfg.seed).validate()
        model = _build_fusion(combo, dims, combo.seed)
        model, _ = fv.train(model, bundle, combo.train_config())
        data = fv.normalize_bundle(model, bundle)
        result = model.forward(data)
        losses = {name: metrics.cosine_recon_loss(data[name],
                                                  result.recon[name].value)
                  for name in data}
        digits = model.spec.code_digits
        bits = digits * np.log2(combo.levels)
        scheme = model.spec.sid_scheme(ngram=n)
        row = {"quantizer": combo.quantizer, "L": L, "D": D, "P": P, "n": n,
               "bits": round(float(bits), 1), "sids_per_item": scheme.grams}
        row.update({f"loss.{k}": round(v, 4) for k, v in losses.items()})
        rows.append(row)
    cols = list(rows[0])
    print(",".join(cols))
    for row in rows:
        print(",".join(str(row[c]) for c in cols))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sidekit",
        description="vector quantization, semantic IDs, and SIDE evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic embedding corpus")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("gen-engagement", help="write synthetic engagement data")
    p.add_argument("--users", type=int, default=10_000)
    p.add_argument("--items", type=int, default=2_000)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_engagement)

    p = sub.add_parser("train", help="train a quantizer on corpora")
    p.add_argument("--corpus", action="append", required=True,
                   help="embedding corpus; repeat for multiple signals")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--history", help="write per-epoch loss CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode corpora to a SID file")
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct embeddings from a SID file")
    p.add_argument("--sids", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dims", default="",
                   help="comma-separated signal dims for fusion checkpoints")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-recon", help="cosine reconstruction loss")
    p.add_argument("--original", required=True)
    p.add_argument("--reconstruction", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("eval-recall", help="Recall@k of candidate vectors "
                                           "against raw-embedding kNN")
    p.add_argument("--corpus", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--ks", default="20,50,100")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("eval-ne", help="normalized entropy of predictions")
    p.add_argument("--labels", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval_ne)

    p = sub.add_parser("rank-ab", help="SID vs SIDE ranking A/B on synthetic data")
    p.add_argument("--data", help="engagement .npz from gen-engagement")
    p.add_argument("--users", type=int, default=10_000)
    p.add_argument("--items", type=int, default=2_000)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--hash-size", type=int, default=None,
                   help="sparse table rows per gram; default collision-free")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_rank_ab)

    p = sub.add_parser("sweep", help="grid over quantizer hyperparameters")
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--levels")
    p.add_argument("--depths")
    p.add_argument("--groups")
    p.add_argument("--ngrams")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
