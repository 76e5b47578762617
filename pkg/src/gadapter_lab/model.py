"""Miniature graph transformer: the frozen backbone PEFT methods instrument.

Nodes are tokens. Each encoder layer is the vanilla post-LN arrangement

    X <- LN(X + MHA(X));  X <- LN(X + FFN(X))

with an optional structural attention bias (a per-head learnable scalar
times a constant structure matrix), so the pretrained backbone is itself
structure-aware. The virtual node sits at index 0 of every augmented graph
and its last-layer hidden state is the whole-graph representation.

All forwards are batched [B, m, d]; single graphs run with B = 1. Padding
uses an additive -1e30 attention bias, which underflows to an exact zero
weight after softmax, so padded and unpadded runs of the same graph agree
to tight tolerance.

Hook points for PEFT blocks, per layer: pre_mha, post_mha, pre_ffn,
mid_ffn (between the ReLU and W_f2), post_ffn, plus parallel_ffn (a branch
from FFN input added to FFN output). Q/V projections can be swapped out
wholesale for low-rank reparametrizations.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .graphs import Graph, StructureMatrix, pad_batch
from .tensor import ParamStore, Tape, Tensor, backward, init_params

HEAD_TYPES = ("binary_classification", "regression", "masked_node")
HOOK_POINTS = ("pre_mha", "post_mha", "pre_ffn", "mid_ffn", "post_ffn", "parallel_ffn")
NEG_INF = -1e30  # exp(-1e30 - rowmax) underflows to exactly 0.0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 64
    vocab: int = 16
    head_type: str = "binary_classification"
    use_structure_bias: bool = True
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.head_type not in HEAD_TYPES:
            raise ConfigError(f"unknown head_type {self.head_type!r}")
        if self.num_layers < 0 or self.vocab < 2:
            raise ConfigError("num_layers must be >= 0 and vocab >= 2")

    @property
    def d_k(self) -> int:
        return self.hidden // self.heads

    @property
    def virtual_feature_id(self) -> int:
        return self.vocab

    @property
    def mask_feature_id(self) -> int:
        return self.vocab + 1

    @property
    def table_rows(self) -> int:
        # real vocab + reserved virtual-node row + reserved mask row
        return self.vocab + 2

    def backbone_digest(self) -> str:
        """Digest of the fields that define backbone compatibility.

        head_type and seed are excluded: the head is task-specific and
        replaced per task, and parameter values travel in checkpoints.
        """
        payload = {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "vocab": self.vocab,
            "use_structure_bias": self.use_structure_bias,
            "ln_eps": self.ln_eps,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class Batch:
    """Padded minibatch: token ids, node mask, structures, labels."""

    ids: np.ndarray  # [B, m] int64
    mask: np.ndarray  # [B, m] 1.0 = real node
    labels: np.ndarray  # [B]
    task: str  # "clf" | "reg"
    s_bias: np.ndarray | None = None  # [B, m, m] attention-bias structure
    s_peft: np.ndarray | None = None  # [B, m, m] structure for PEFT blocks
    graph_ids: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.ids.shape[0]


class HookCtx:
    """Per-forward context handed to PEFT hooks (constants, never grads)."""

    def __init__(self, s_peft: Tensor | None, mask: np.ndarray):
        self.s_peft = s_peft
        self.mask = mask


def collate(
    graphs: list[Graph],
    config: ModelConfig,
    s_bias: list[StructureMatrix] | None = None,
    s_peft: list[StructureMatrix] | None = None,
) -> Batch:
    """Pad a list of virtual-node-augmented graphs into one Batch."""
    if not graphs:
        raise DataError("empty batch")
    m_max = max(g.num_nodes for g in graphs)
    ids = np.zeros((len(graphs), m_max), dtype=np.int64)
    mask = np.zeros((len(graphs), m_max))
    labels = np.zeros(len(graphs))
    for i, g in enumerate(graphs):
        if not g.has_virtual:
            raise DataError(f"graph {g.id}: collate expects virtual-node-augmented graphs")
        for f in g.node_features:
            if not (0 <= f < config.table_rows):
                raise DataError(f"graph {g.id}: feature id {f} outside [0, {config.table_rows})")
        ids[i, : g.num_nodes] = g.node_features
        mask[i, : g.num_nodes] = 1.0
        labels[i] = g.label
    sb = pad_batch(s_bias, m_max)[0] if s_bias is not None else None
    sp = pad_batch(s_peft, m_max)[0] if s_peft is not None else None
    return Batch(
        ids=ids,
        mask=mask,
        labels=labels,
        task=graphs[0].task,
        s_bias=sb,
        s_peft=sp,
        graph_ids=tuple(g.id for g in graphs),
    )


class Model:
    """Backbone with a ParamStore, hook slots, and swappable Q/V projections."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore()
        self.hooks: dict[tuple[int, str], object] = {}
        self.projections: dict[tuple[int, str], object] = {}
        self.peft_spec = None  # set by peft.instrument; serialized into delta checkpoints
        self._param_counter = 0
        self._build()

    # -- construction ------------------------------------------------------

    def _seed(self):
        seed = np.random.SeedSequence(entropy=self.config.seed, spawn_key=(self._param_counter,))
        self._param_counter += 1
        return seed

    def _reg(self, name: str, shape, scheme: str, role: str) -> Tensor:
        t = init_params(shape, scheme, self._seed())
        return self.store.register(name, t, trainable=True, role=role)

    def _build(self):
        c = self.config
        d, dff = c.hidden, c.ffn_dim
        self._reg("embed.table", (c.table_rows, d), "xavier_uniform", role="embed")
        for i in range(c.num_layers):
            p = f"enc.{i}"
            for nm in ("q", "k", "v", "o"):
                self._reg(f"{p}.attn.w_{nm}", (d, d), "xavier_uniform", role="weight")
                self._reg(f"{p}.attn.b_{nm}", (d,), "zeros", role="bias")
            if c.use_structure_bias:
                # init 1.0: the pretrained backbone sees structure from step 0
                self._reg(f"{p}.attn.s_scale", (c.heads,), "ones", role="scale")
            self._reg(f"{p}.ln1.g", (d,), "ones", role="ln")
            self._reg(f"{p}.ln1.b", (d,), "zeros", role="ln")
            self._reg(f"{p}.ffn.w1", (d, dff), "xavier_uniform", role="weight")
            self._reg(f"{p}.ffn.b1", (dff,), "zeros", role="bias")
            self._reg(f"{p}.ffn.w2", (dff, d), "xavier_uniform", role="weight")
            self._reg(f"{p}.ffn.b2", (d,), "zeros", role="bias")
            self._reg(f"{p}.ln2.g", (d,), "ones", role="ln")
            self._reg(f"{p}.ln2.b", (d,), "zeros", role="ln")
        if c.head_type == "masked_node":
            self._reg("head.proj", (d, c.vocab), "xavier_uniform", role="head")
            self._reg("head.b", (c.vocab,), "zeros", role="head")
        else:
            self._reg("head.proj", (d, 1), "xavier_uniform", role="head")
            self._reg("head.b", (1,), "zeros", role="head")

    def param(self, name: str) -> Tensor:
        return self.store.get(name).tensor

    def reset_head(self, head_type: str) -> None:
        """Swap the task head (used when a pretrained backbone moves to a
        new task). Head parameters are re-registered with fresh init."""
        cfg = replace(self.config, head_type=head_type)
        d = cfg.hidden
        out = cfg.vocab if head_type == "masked_node" else 1
        self.store.replace("head.proj", init_params((d, out), "xavier_uniform", self._seed()), role="head")
        self.store.replace("head.b", init_params((out,), "zeros", self._seed()), role="head")
        self.config = cfg

    # -- forward -----------------------------------------------------------

    def _hook(self, layer: int, point: str, x: Tensor, ctx: HookCtx) -> Tensor:
        fn = self.hooks.get((layer, point))
        return fn(x, ctx) if fn is not None else x

    def _project(self, layer: int, which: str, x: Tensor, ctx: HookCtx) -> Tensor:
        fn = self.projections.get((layer, which))
        if fn is not None:
            return fn(x, ctx)
        w = self.param(f"enc.{layer}.attn.w_{which}")
        b = self.param(f"enc.{layer}.attn.b_{which}")
        return T.add_rowvec(T.matmul(x, w), b)

    def _mask_bias(self, mask: np.ndarray, heads: int) -> Tensor | None:
        if np.all(mask == 1.0):
            return None
        bsz, m = mask.shape
        row = np.where(mask > 0.0, 0.0, NEG_INF)  # [B, m] bias on key columns
        full = np.broadcast_to(row[:, None, None, :], (bsz, heads, m, m))
        return Tensor(np.ascontiguousarray(full))

    def mha(self, layer: int, x: Tensor, ctx: HookCtx, s_bias: Tensor | None, mask_bias: Tensor | None) -> Tensor:
        c = self.config
        bsz, m, d = x.shape
        q = self._project(layer, "q", x, ctx)
        k = T.add_rowvec(T.matmul(x, self.param(f"enc.{layer}.attn.w_k")), self.param(f"enc.{layer}.attn.b_k"))
        v = self._project(layer, "v", x, ctx)

        def split(t):
            return T.transpose(T.reshape(t, (bsz, m, c.heads, c.d_k)), (0, 2, 1, 3))

        qh, kh, vh = split(q), split(k), split(v)
        logits = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(c.d_k))
        if c.use_structure_bias:
            if s_bias is None:
                raise ConfigError("use_structure_bias=True but the batch carries no s_bias")
            logits = T.add(logits, T.scale_heads(s_bias, self.param(f"enc.{layer}.attn.s_scale")))
        if mask_bias is not None:
            logits = T.add(logits, mask_bias)
        attn = T.softmax_rows(logits)
        out = T.reshape(T.transpose(T.matmul(attn, vh), (0, 2, 1, 3)), (bsz, m, d))
        return T.add_rowvec(T.matmul(out, self.param(f"enc.{layer}.attn.w_o")), self.param(f"enc.{layer}.attn.b_o"))

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.param(f"{prefix}.g"), self.param(f"{prefix}.b"), eps=self.config.ln_eps)

    def encoder_forward(self, x: Tensor, ctx: HookCtx, s_bias: Tensor | None, mask_bias: Tensor | None) -> Tensor:
        for i in range(self.config.num_layers):
            attn_in = self._hook(i, "pre_mha", x, ctx)
            attn = self.mha(i, attn_in, ctx, s_bias, mask_bias)
            attn = self._hook(i, "post_mha", attn, ctx)
            x = self._ln(f"enc.{i}.ln1", T.add(x, attn))
            ffn_in = self._hook(i, "pre_ffn", x, ctx)
            h1 = T.relu(T.add_rowvec(T.matmul(ffn_in, self.param(f"enc.{i}.ffn.w1")), self.param(f"enc.{i}.ffn.b1")))
            h1 = self._hook(i, "mid_ffn", h1, ctx)
            f = T.add_rowvec(T.matmul(h1, self.param(f"enc.{i}.ffn.w2")), self.param(f"enc.{i}.ffn.b2"))
            par = self.hooks.get((i, "parallel_ffn"))
            if par is not None:
                f = T.add(f, par(ffn_in, ctx))
            f = self._hook(i, "post_ffn", f, ctx)
            x = self._ln(f"enc.{i}.ln2", T.add(x, f))
        return x

    def forward_hidden(self, batch: Batch) -> Tensor:
        """Embed + encode; returns the [B, m, d] last-layer hidden states."""
        c = self.config
        x = T.gather_rows(self.param("embed.table"), batch.ids)
        s_bias = Tensor(batch.s_bias) if (c.use_structure_bias and batch.s_bias is not None) else None
        ctx = HookCtx(
            s_peft=Tensor(batch.s_peft) if batch.s_peft is not None else None,
            mask=batch.mask,
        )
        mask_bias = self._mask_bias(batch.mask, c.heads)
        return self.encoder_forward(x, ctx, s_bias, mask_bias)

    def graph_repr(self, batch: Batch) -> Tensor:
        """Virtual-node row of the final hidden matrix, [B, d]."""
        return T.take_index(self.forward_hidden(batch), 0, axis=1)

    def predict_batch(self, batch: Batch) -> Tensor:
        """Per-graph prediction: probabilities for classification heads,
        raw values for regression. Shape [B]."""
        c = self.config
        if c.head_type == "masked_node":
            raise ConfigError("predict_batch is undefined for the masked_node head")
        if c.head_type == "binary_classification" and batch.task != "clf":
            raise ConfigError(f"classification head on task {batch.task!r}")
        if c.head_type == "regression" and batch.task != "reg":
            raise ConfigError(f"regression head on task {batch.task!r}")
        g = self.graph_repr(batch)
        logits = T.reshape(T.add_rowvec(T.matmul(g, self.param("head.proj")), self.param("head.b")), (batch.size,))
        return T.sigmoid(logits) if c.head_type == "binary_classification" else logits

    def masked_node_loss(self, batch: Batch, positions: np.ndarray, targets: np.ndarray) -> Tensor:
        """Mean cross-entropy of predicting original ids at given positions.

        positions: [K, 2] (batch row, node index); targets: [K] original ids.
        """
        c = self.config
        if c.head_type != "masked_node":
            raise ConfigError("masked_node_loss requires the masked_node head")
        if len(positions) == 0:
            raise DataError("no prediction positions")
        hidden = self.forward_hidden(batch)
        bsz, m, d = hidden.shape
        flat = T.reshape(hidden, (bsz * m, d))
        logits = T.add_rowvec(T.matmul(flat, self.param("head.proj")), self.param("head.b"))
        logp = T.log_softmax_rows(logits)
        sel = np.zeros((bsz * m, c.vocab))
        for (row, node), target in zip(positions, targets):
            sel[row * m + node, target] = 1.0
        picked = T.sum_all(T.mul(logp, Tensor(sel)))
        return T.mul(picked, -1.0 / len(positions))


def mask_node_features(
    graphs: list[Graph], config: ModelConfig, rng: np.random.Generator, fraction: float = 0.15
) -> tuple[list[Graph], np.ndarray, np.ndarray]:
    """Corrupt ~fraction of non-virtual nodes per graph with the mask id.

    Returns (corrupted graphs, positions [K,2], original ids [K]). With
    fraction = 0 nothing is corrupted and every non-virtual node becomes a
    prediction position (reconstruction of visible ids).
    """
    corrupted: list[Graph] = []
    positions: list[tuple[int, int]] = []
    targets: list[int] = []
    for row, g in enumerate(graphs):
        if not g.has_virtual:
            raise DataError(f"graph {g.id}: masking expects augmented graphs")
        real = g.num_nodes - 1
        k = max(1, int(round(fraction * real))) if fraction > 0 else 0
        if k == 0:
            corrupted.append(g)
            for node in range(1, g.num_nodes):
                positions.append((row, node))
                targets.append(g.node_features[node])
            continue
        chosen = rng.choice(real, size=k, replace=False) + 1  # skip virtual index 0
        feats = list(g.node_features)
        for node in sorted(chosen.tolist()):
            positions.append((row, node))
            targets.append(feats[node])
            feats[node] = config.mask_feature_id
        corrupted.append(replace(g, node_features=tuple(feats)))
    return corrupted, np.asarray(positions, dtype=np.int64), np.asarray(targets, dtype=np.int64)


def pretrain_masked_nodes(model: Model, dataset, config) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Masked-node pretraining over the full parameter set.

    dataset must yield (graphs, structure) batches via its `batches` method;
    config is a training.TrainConfig. Returns (parameter snapshot, history).
    Deterministic given config.seed.
    """
    from .training import adamw_step, init_train_state

    if model.config.vocab < 2:
        raise ConfigError("masked-node pretraining needs vocab >= 2")
    if model.config.head_type != "masked_node":
        raise ConfigError("pretraining requires a masked_node head")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=config.seed, spawn_key=(0xA5,))))
    state = init_train_state(model.store)
    history: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            graphs = [dataset.graphs[i] for i in idx]
            corrupted, positions, targets = mask_node_features(graphs, model.config, rng, config.mask_fraction)
            batch = collate(corrupted, model.config, s_bias=[dataset.s_bias[i] for i in idx])
            with Tape() as tape:
                loss = model.masked_node_loss(batch, positions, targets)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}")
            grads = backward(loss, tape)
            adamw_step(state, grads, config)
            losses.append(loss.item())
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
    return model.store.snapshot(), history
