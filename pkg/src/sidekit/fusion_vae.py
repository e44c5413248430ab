"""Multi-input multi-output quantized autoencoder ("VQ fusion").

Each input signal runs through its own encoder MLP; the encoder outputs
are concatenated and mixed by a fusion layer into a shared latent h. The
latent is quantized (FSQ grid or a discrete-PCA stack) to h_hat, and the
decoder consumes the straight-through surrogate s = h - stop_grad(h -
h_hat): numerically equal to h_hat, but with an identity Jacobian toward
h, so reconstruction gradients reach the encoders. A shared trunk feeds
one head per signal, and training minimizes the weighted per-task
reconstruction losses plus, for parameterized quantizers, the commitment
and codebook terms that bind the encoder and the component vectors
together. FSQ has no trainable codebook and needs neither term.

With a residual quantizer, depth dropout (sampling a random prefix depth
per step and decoding from that partial sum) pushes prefix codes to stay
useful on their own.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .nn_core import DTYPE, AdamState, ParamStore, adam_step
from .quantizers import (DpcaStack, FsqConfig, dpca_encode, fsq_quantize,
                         fsq_values)
from .sid_codec import SidScheme, pack_all


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    """One input signal: its width, task loss, and task weight."""

    name: str
    dim: int
    loss: str = "cosine"  # cosine | mse | xent
    weight: float = 1.0

    def __post_init__(self):
        if self.loss not in ("cosine", "mse", "xent"):
            raise FusionError(f"unknown loss '{self.loss}'")
        if self.weight < 0:
            raise FusionError(f"negative task weight for '{self.name}'")


@dataclass(frozen=True)
class QuantizerSpec:
    kind: str = "fsq"  # fsq | dpca | none
    levels: int = 3
    depth: int = 1     # dpca residual layers
    groups: int = 1    # dpca product groups

    def __post_init__(self):
        if self.kind not in ("fsq", "dpca", "none"):
            raise FusionError(f"unknown quantizer kind '{self.kind}'")


@dataclass(frozen=True)
class FusionSpec:
    signals: tuple
    latent: int = 15
    hidden: int = 128
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    init_gain: float | None = None  # None: 2.0 for fsq, else 1.0

    def __post_init__(self):
        if not self.signals:
            raise FusionError("need at least one signal")
        if sum(s.weight for s in self.signals) <= 0:
            raise FusionError("task weights must sum to a positive value")
        if self.quantizer.kind == "dpca" and self.latent % self.quantizer.groups:
            raise FusionError(
                f"{self.quantizer.groups} product groups do not divide "
                f"latent width {self.latent}")

    @property
    def fuse_gain(self):
        if self.init_gain is not None:
            return self.init_gain
        # A tanh-bounded grid dead-zones a small-variance latent: every
        # digit starts at 0 and no gradient signal ever activates the
        # grid. Widening the fusion layer's init spreads h across levels.
        return 2.0 if self.quantizer.kind == "fsq" else 1.0

    @property
    def code_digits(self):
        q = self.quantizer
        if q.kind == "dpca":
            return q.depth * q.groups
        return self.latent

    def sid_scheme(self, ngram=3):
        return SidScheme.for_digits(self.code_digits,
                                    base=self.quantizer.levels, ngram=ngram)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    lr: float = 1e-3
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    quantizer_dropout: float = 0.0
    fsq_dither: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.commitment_weight < 0:
            raise FusionError("commitment weight must be >= 0")
        if not 0.0 <= self.quantizer_dropout <= 1.0:
            raise FusionError("dropout probability outside [0, 1]")


@dataclass
class ForwardResult:
    """Graph handles from one forward pass."""

    h: nn.Node
    h_hat: nn.Node
    s: nn.Node
    recon: dict
    codes: np.ndarray | None


class FusionModel:
    """Parameter container plus the per-batch graph builder."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.params = ParamStore(seed)
        h = spec.hidden
        for sig in spec.signals:
            self.params.weight(f"enc.{sig.name}.w1", sig.dim, h)
            self.params.zeros(f"enc.{sig.name}.b1", 1, h)
            self.params.weight(f"enc.{sig.name}.w2", h, h)
            self.params.zeros(f"enc.{sig.name}.b2", 1, h)
            self.params.weight(f"head.{sig.name}.w1", h, h)
            self.params.zeros(f"head.{sig.name}.b1", 1, h)
            self.params.weight(f"head.{sig.name}.w2", h, sig.dim)
            self.params.zeros(f"head.{sig.name}.b2", 1, sig.dim)
        self.params.weight("fuse.w", h * len(spec.signals), spec.latent)
        if spec.fuse_gain != 1.0:
            self.params.set("fuse.w", self.params.get("fuse.w") * spec.fuse_gain)
        self.params.zeros("fuse.b", 1, spec.latent)
        self.params.weight("trunk.w", spec.latent, h)
        self.params.zeros("trunk.b", 1, h)
        q = spec.quantizer
        if q.kind == "dpca":
            width = spec.latent // q.groups
            rng = np.random.default_rng(seed + 1)
            for g in range(q.groups):
                for t in range(q.depth):
                    self.params.add(f"dpca.g{g}.d{t}.u",
                                    rng.normal(0.0, 0.5, size=(1, width)))
                    self.params.add(f"dpca.g{g}.d{t}.b", np.zeros((1, width)))
        self.fsq = FsqConfig(latent_dims=spec.latent, levels=q.levels) \
            if q.kind == "fsq" else None
        self._pnodes = {}

    def _p(self, name):
        """Per-graph parameter node; one node per name so grads accumulate."""
        node = self._pnodes.get(name)
        if node is None:
            node = self.params.node(name)
            self._pnodes[name] = node
        return node

    def collect_grads(self):
        """Gradients by parameter name after backward (zeros if unused)."""
        out = {}
        for name, arr in self.params.items():
            node = self._pnodes.get(name)
            if node is not None and node.grad is not None:
                out[name] = node.grad
            else:
                out[name] = np.zeros_like(arr)
        return out

    # -- quantizer views ----------------------------------------------------

    def dpca_stack(self):
        """Current component vectors as an immutable encode/decode stack."""
        q = self.spec.quantizer
        width = self.spec.latent // q.groups
        comps = np.zeros((q.groups, q.depth, width), dtype=DTYPE)
        offs = np.zeros((q.groups, q.depth, width), dtype=DTYPE)
        for g in range(q.groups):
            for t in range(q.depth):
                comps[g, t] = self.params.get(f"dpca.g{g}.d{t}.u")[0]
                offs[g, t] = self.params.get(f"dpca.g{g}.d{t}.b")[0]
        return DpcaStack(comps, offs)

    # -- graph building -----------------------------------------------------

    def _mlp(self, prefix, x):
        y = nn.relu(nn.add(nn.matmul(x, self._p(f"{prefix}.w1")),
                           self._p(f"{prefix}.b1")))
        return nn.add(nn.matmul(y, self._p(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    def _quantize_node(self, h, depth=None, dither_rng=None):
        """Build (h_hat, codes) for the current quantizer.

        For DPCA, h_hat is an expression of the component parameters with
        the ternary digits held fixed, so codebook-loss gradients reach
        the components. For FSQ, h_hat is a constant grid snap;
        `dither_rng` enables training-time dither (uniform half-step noise
        on the grid position before rounding) so assignments near bin
        boundaries keep exploring instead of freezing into a bad partition.
        """
        q = self.spec.quantizer
        if q.kind == "none":
            return h, None
        if q.kind == "fsq":
            if dither_rng is not None:
                u = np.tanh(h.value)
                pos = (u + 1.0) * 0.5 * (q.levels - 1)
                pos = pos + dither_rng.uniform(-0.5, 0.5, size=pos.shape)
                levels = np.clip(np.floor(pos + 0.5), 0, q.levels - 1)
                levels = levels.astype(np.int64)
                values = fsq_values(self.fsq, levels)
            else:
                levels, values = fsq_quantize(self.fsq, h.value)
            return nn.constant(values, "h_hat"), (levels - self.fsq.offset)
        stack = self.dpca_stack()
        codes = dpca_encode(stack, h.value)
        depth = q.depth if depth is None else depth
        batch = h.shape[0]
        group_nodes = []
        for g in range(q.groups):
            acc = None
            for t in range(depth):
                s_col = nn.constant(
                    codes[:, g * q.depth + t].reshape(batch, 1).astype(DTYPE))
                term = nn.add(nn.mul(s_col, self._p(f"dpca.g{g}.d{t}.u")),
                              self._p(f"dpca.g{g}.d{t}.b"))
                acc = term if acc is None else nn.add(acc, term)
            group_nodes.append(acc)
        h_hat = group_nodes[0] if len(group_nodes) == 1 \
            else nn.concat_cols(group_nodes)
        return h_hat, codes

    def forward(self, batch, depth=None, dither_rng=None):
        """Run the mixing model on a dict of per-signal input matrices."""
        self._pnodes = {}
        for sig in self.spec.signals:
            if sig.name not in batch:
                raise FusionError(f"missing signal '{sig.name}'")
        encoded = [self._mlp(f"enc.{s.name}", nn.constant(batch[s.name], s.name))
                   for s in self.spec.signals]
        stacked = encoded[0] if len(encoded) == 1 else nn.concat_cols(encoded)
        h = nn.add(nn.matmul(stacked, self._p("fuse.w")),
                   self._p("fuse.b"), name="h")
        h_hat, codes = self._quantize_node(h, depth=depth, dither_rng=dither_rng)
        if h_hat is h:
            s = h
        else:
            s = nn.sub(h, nn.stop_gradient(nn.sub(h, h_hat)), name="s")
        trunk = nn.relu(nn.add(nn.matmul(s, self._p("trunk.w")),
                               self._p("trunk.b")))
        recon = {sig.name: self._mlp(f"head.{sig.name}", trunk)
                 for sig in self.spec.signals}
        return ForwardResult(h=h, h_hat=h_hat, s=s, recon=recon, codes=codes)

    def trainable(self):
        return dict(self.params.items())

    # -- persistence ----------------------------------------------------

    def save(self, path):
        arrays = dict(self.params.items())
        arrays["meta.latent"] = np.array([[self.spec.latent]], dtype=DTYPE)
        nn.save_checkpoint(path, arrays)

    def load(self, path):
        arrays = nn.load_checkpoint(path)
        latent = int(arrays.pop("meta.latent", [[self.spec.latent]])[0][0])
        if latent != self.spec.latent:
            raise FusionError(
                f"checkpoint latent width {latent} != spec {self.spec.latent}")
        for name in self.params.names():
            if name not in arrays:
                raise FusionError(f"checkpoint missing parameter '{name}'")
            if arrays[name].shape != self.params.get(name).shape:
                raise FusionError(f"checkpoint shape mismatch for '{name}'")
            self.params.set(name, arrays[name])
        return self


def _cosine_loss_node(target, recon_node):
    # Zero-norm targets are a data error. The reconstruction norm is
    # epsilon-stabilized instead: a ternary grid quantizes a freshly
    # initialized latent to exactly 0, so the first decoder outputs are
    # all-zero and a hard error here would make every cold start fail.
    t = np.asarray(target, dtype=DTYPE)
    norms = np.linalg.norm(t, axis=1)
    bad = np.where(norms == 0.0)[0]
    if bad.size:
        raise FusionError(f"zero-norm target vector at sample {int(bad[0])}")
    tgt = nn.constant(t)
    dot = nn.sum_axis1(nn.mul(tgt, recon_node))
    sq = nn.add(nn.sum_axis1(nn.square(recon_node)),
                nn.constant(np.full((t.shape[0], 1), 1e-12)))
    nrm = nn.mul(nn.constant(norms.reshape(-1, 1)), nn.sqrt(sq))
    return nn.mean_all(nn.sub(nn.constant(np.ones((t.shape[0], 1))),
                              nn.div(dot, nrm)))


def _task_loss_node(sig, target, recon_node):
    if sig.loss == "cosine":
        return _cosine_loss_node(target, recon_node)
    if sig.loss == "mse":
        return nn.mean_all(nn.square(nn.sub(nn.constant(target), recon_node)))
    # cross-entropy against a one-hot (or distribution) target
    logp = nn.log_softmax_rows(recon_node)
    per_row = nn.sum_axis1(nn.mul(nn.constant(target), logp))
    return nn.scale(nn.mean_all(per_row), -1.0)


def fusion_loss(model, batch, result, cfg=None):
    """Total training loss node plus a per-term float breakdown.

    Total = sum_k w_k * task_k  +  beta * ||h - sg(h_hat)||^2
          + codebook_weight * ||sg(h) - h_hat||^2,
    with the two quantizer terms only when the quantizer has parameters.
    """
    cfg = cfg or TrainConfig()
    weights = np.array([s.weight for s in model.spec.signals], dtype=np.float64)
    weights = weights / weights.sum()
    terms = []
    breakdown = {}
    for sig, w in zip(model.spec.signals, weights):
        node = _task_loss_node(sig, batch[sig.name], result.recon[sig.name])
        breakdown[f"recon.{sig.name}"] = float(node.value[0, 0])
        terms.append(nn.scale(node, w))
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    if model.spec.quantizer.kind == "dpca":
        commit = nn.mean_all(nn.square(
            nn.sub(result.h, nn.stop_gradient(result.h_hat))))
        codebook = nn.mean_all(nn.square(
            nn.sub(nn.stop_gradient(result.h), result.h_hat)))
        breakdown["commitment"] = float(commit.value[0, 0])
        breakdown["codebook"] = float(codebook.value[0, 0])
        total = nn.add(total, nn.scale(commit, cfg.commitment_weight))
        total = nn.add(total, nn.scale(codebook, cfg.codebook_weight))
    breakdown["total"] = float(total.value[0, 0])
    return total, breakdown


def normalize_bundle(model, bundle):
    """L2-normalize embedding signals on ingestion; leaves xent targets alone."""
    out = {}
    for sig in model.spec.signals:
        x = np.asarray(bundle[sig.name], dtype=DTYPE)
        if sig.loss == "cosine":
            norms = np.linalg.norm(x, axis=1, keepdims=True)
            bad = np.where(norms[:, 0] == 0.0)[0]
            if bad.size:
                raise FusionError(
                    f"zero-norm input for '{sig.name}' at row {int(bad[0])}")
            x = x / norms
        out[sig.name] = x
    return out


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    diverged_at: int | None = None

    def to_csv(self, path):
        if not self.rows:
            return
        cols = ["epoch"] + [k for k in self.rows[0] if k != "epoch"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(self.rows)


def train(model, bundle, cfg):
    """End-to-end training with straight-through gradients.

    Returns (model, TrainHistory). On a non-finite loss the parameters are
    rolled back to the end of the last finished epoch and training stops
    (diverged_at records the epoch); if the very first epoch diverges a
    TrainingDiverged error is raised instead.
    """
    data = normalize_bundle(model, bundle)
    sizes = {len(v) for v in data.values()}
    if len(sizes) != 1:
        raise FusionError(f"signals disagree on sample count: {sorted(sizes)}")
    n = sizes.pop()
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    history = TrainHistory()
    q = model.spec.quantizer
    last_good = model.params.snapshot()

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {}
        batches = 0
        try:
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch = {k: v[idx] for k, v in data.items()}
                depth = None
                if (q.kind == "dpca" and cfg.quantizer_dropout > 0.0
                        and rng.random() < cfg.quantizer_dropout):
                    depth = int(rng.integers(1, q.depth + 1))
                dither = rng if (q.kind == "fsq" and cfg.fsq_dither) else None
                result = model.forward(batch, depth=depth, dither_rng=dither)
                loss, breakdown = fusion_loss(model, batch, result, cfg)
                if not np.isfinite(breakdown["total"]):
                    raise nn.TrainingDiverged(f"epoch {epoch}")
                nn.backward(loss)
                adam_step(opt, model.trainable(), model.collect_grads())
                for k, v in breakdown.items():
                    sums[k] = sums.get(k, 0.0) + v
                batches += 1
        except (nn.TrainingDiverged, nn.NonFiniteError) as exc:
            # non-finite anywhere in the batch counts as divergence
            if epoch == 0:
                raise nn.TrainingDiverged(str(exc)) from None
            model.params.restore(last_good)
            history.diverged_at = epoch
            break
        row = {"epoch": epoch}
        row.update({k: v / batches for k, v in sums.items()})
        history.rows.append(row)
        last_good = model.params.snapshot()
    return model, history


def encode_latent(model, bundle):
    """Deterministic batch inference of the pre-quantizer latent h."""
    data = normalize_bundle(model, bundle)
    result = model.forward(data)
    return result.h.value.copy()


def encode_codes(model, bundle):
    """Centered digit matrix for a corpus bundle."""
    data = normalize_bundle(model, bundle)
    result = model.forward(data)
    if result.codes is None:
        raise FusionError("identity quantizer produces no codes")
    return np.asarray(result.codes, dtype=np.int64)


def encode_corpus(model, bundle, ngram=3):
    """SID records (one row of grams per sample) via the packing codec."""
    codes = encode_codes(model, bundle)
    scheme = model.spec.sid_scheme(ngram=ngram)
    return scheme, pack_all(scheme, codes)


def decode_from_digits(model, digits):
    """Reconstruct every signal from centered digits (the SIDE path).

    For FSQ the digits are rescaled onto the quantizer grid; for DPCA the
    digits drive the component-vector sum. The decoder then maps the
    recovered latent through the trunk and heads.
    """
    q = model.spec.quantizer
    model._pnodes = {}
    digits = np.atleast_2d(np.asarray(digits, dtype=np.int64))
    digits = digits[:, :model.spec.code_digits]
    if q.kind == "fsq":
        latent = (2.0 * (digits + model.fsq.offset) / (q.levels - 1) - 1.0)
    elif q.kind == "dpca":
        latent = dpca_decode_stack(model, digits)
    else:
        raise FusionError("identity quantizer has no digit decoding")
    s = nn.constant(latent.astype(DTYPE))
    trunk = nn.relu(nn.add(nn.matmul(s, model._p("trunk.w")),
                           model._p("trunk.b")))
    return {sig.name: model._mlp(f"head.{sig.name}", trunk).value
            for sig in model.spec.signals}


def dpca_decode_stack(model, digits):
    from .quantizers import dpca_decode
    return dpca_decode(model.dpca_stack(), digits.astype(np.int8))
