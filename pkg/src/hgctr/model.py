"""End-to-end CTR model: sequence encoder + hypergraph contexts + fusion +
MLP head, with training, checkpointing, and data-parallel evaluation.

Per time slot the model convolves a merged user hypergraph (group-aware user
embeddings) and the distinct per-modality item views (item context added to
the id embedding). A user's sequential embedding and group embedding are
fused through the outer product of their 1-augmented forms, and the MLP head
maps [e_user ; e_item] to a click probability.

Training runs single-threaded and bit-deterministically for a fixed seed.
Evaluation freezes parameters, precomputes per-slot context tables once, and
scores fixed-size record chunks — optionally across threads — producing
results identical to the serial pass for any thread count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (InteractionLog, ModalFeatureStore, SlotPartition,
                   clicked_items_by_user_slot, partition_slots, split_indices)
from .errors import (ConfigError, ContractError, ShapeError,
                     DataFormatError, UndefinedMetricError)
from .hypergraph import (DEFAULT_DEPTH, DEFAULT_NEIGHBOR_CAP, Hypergraph,
                         PropagationOperator, build_group_hypergraphs,
                         build_item_hypergraphs, hgcn_stack)
from .interest import InterestModel
from .metrics import auc, log_loss
from .numerics import Tape, Tensor, stable_sigmoid
from .optim import ParameterStore, make_optimizer
from .sequence import (ATTENTION_PARAM_NAMES, AttentionParams, embed_sequence,
                       encode_batch, positional_encoding)
from .tensorfile import load_tensors, save_tensors

EVAL_CHUNK = 4096
METRICS_HEADER = "epoch,split,auc,logloss,loss,seconds"
FUSE_SHIFT = 3.0   # corner weight keeping the fusion ReLU initially active

# binary cross-entropy in probability space, with clamping near 0 and 1
bce_loss = log_loss


# ------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    dim: int = 64
    num_heads: int = 4
    attn_depth: int = 1
    hgcn_depth: int = DEFAULT_DEPTH
    mlp_widths: tuple[int, int] = (128, 64)
    max_seq_len: int = 20
    granularity_months: int = 3
    neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP
    batch_size: int = 512
    lr: float = 3e-3
    reg: float = 1e-4
    epochs: int = 10
    optimizer: str = "adam"
    seed: int = 0
    positional: bool = False
    use_hypergraph: bool = True
    modalities: tuple[str, ...] | None = None   # None = every store modality

    def __post_init__(self):
        if self.dim < 1 or self.dim % self.num_heads != 0:
            raise ConfigError("dim must be positive and divisible by heads")
        if self.attn_depth < 1 or self.hgcn_depth < 1:
            raise ConfigError("attention/convolution depth must be >= 1")
        if len(self.mlp_widths) != 2 or min(self.mlp_widths) < 1:
            raise ConfigError("mlp_widths must be two positive hidden widths")
        if self.max_seq_len < 1 or self.granularity_months < 1:
            raise ConfigError("sequence length and granularity must be >= 1")
        if self.neighbor_cap is not None and self.neighbor_cap < 1:
            raise ConfigError("neighbor cap must be >= 1 (or None)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch size must be >= 1, epochs >= 0")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if not 0.0 <= self.reg <= 0.1:
            raise ConfigError("regularizer weight must lie in [0, 0.1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.modalities is not None:
            self.modalities = tuple(self.modalities)


def _resolve_modalities(store: ModalFeatureStore,
                        config: TrainConfig) -> list[str]:
    if config.modalities is None:
        return list(store.modalities)
    unknown = set(config.modalities) - set(store.modalities)
    if unknown:
        raise ConfigError(f"modalities not in store: {sorted(unknown)}")
    return [m for m in store.modalities if m in config.modalities]


# -------------------------------------------------------------------- model


FROZEN_PARAMS = frozenset({"uip.w"})


@dataclass
class CtrModel:
    config: TrainConfig
    modalities: list[str]
    num_users: int
    num_items: int
    params: ParameterStore


def init_model(num_users: int, num_items: int, store: ModalFeatureStore,
               config: TrainConfig,
               interest: InterestModel | None = None) -> CtrModel:
    """Gaussian parameters centered on structure-preserving maps.

    Mixing matrices (attention value/output, convolution layers, fusion) are
    drawn around identity-like means rather than zero, so at initialization
    the sequence encoder approximates history mean-pooling, the convolutions
    approximate neighborhood smoothing, and fusion approximates the sum of
    its two inputs. A purely random-mixing start scrambles the user-item
    affinity carried by the embeddings, and at this data scale training does
    not recover it; a near-identity start keeps it linearly readable by the
    head from the first step while leaving every map free to move.

    When a pretrained interest model with matching dimensions is given, the
    user embeddings and per-modality feature projections warm-start from it
    and its bilinear matrix is carried along as the frozen `uip.w` entry."""
    mods = _resolve_modalities(store, config)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x90D3)))
    d = config.dim

    def w(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)

    def near_identity(scale=0.02, gain=1.0):
        return gain * np.eye(d) + rng.standard_normal((d, d)) * scale

    def near_zero(scale=0.02):
        return rng.standard_normal((d, d)) * scale

    def fuse_init():
        """Mean: out_k = e_seq_k + e_group_k + FUSE_SHIFT, i.e. weight 1 on
        the two augmented-tensor entries pairing coordinate k with the other
        side's constant-1 slot, plus a positive corner shift keeping the
        ReLU active so fusion starts as an affine pass-through."""
        mat = rng.standard_normal(((d + 1) ** 2, d)) * 0.02
        for k in range(d):
            mat[k * (d + 1) + d, k] += 1.0      # e_seq_k * 1
            mat[d * (d + 1) + k, k] += 1.0      # 1 * e_group_k
        mat[(d + 1) ** 2 - 1, :] += FUSE_SHIFT  # 1 * 1 corner
        return mat

    # Warm start. Each modality gets a disjoint block of embedding
    # coordinates; `feat.m` starts as a fixed basis into its block, so the
    # projected-feature part of an item embedding preserves raw-feature
    # similarity exactly. Each user's embedding starts as their
    # pretraining-implied taste vector
    #   t_m(u) = user_emb(u) @ W @ proj_m^T   (feature-space taste)
    # unit-normalized and placed into the block of their dominant modality
    # only, mirroring the planted structure (a user responds to one
    # modality).
    #
    # When the width allows (2 * sum of dims <= d) the block uses a
    # nonnegative double coding: the user holds [relu(t), relu(-t)] and the
    # feature basis sends x to [x, -x], so dot(user, feature image) = t.x
    # while the user code stays nonnegative. The user-side convolution
    # (ReLU per layer) is then inert at initialization and reduces to pure
    # neighborhood averaging: the group hypergraph starts out denoising
    # tastes instead of truncating their negative halves. With a signed
    # single-width code (sum of dims <= d) the taste pairing still holds
    # but each convolution layer loses the negative parts; without room for
    # blocks, or without a pretrained interest model, initialization is
    # plain Gaussian.
    total = sum(store.dims[m] for m in mods)
    width = 2 if 2 * total <= d else (1 if total <= d else 0)
    pretrained = (interest is not None and interest.proj is not None
                  and interest.user_emb is not None)

    p = ParameterStore()
    if pretrained and width:
        offsets = {}
        off = 0
        for m in mods:
            offsets[m] = off
            off += width * store.dims[m]
        user0 = np.zeros((num_users, d))
        gate = interest.user_emb[:num_users] @ interest.w_uip
        for mi, m in enumerate(mods):
            taste = gate @ interest.proj[m].T          # (users, dims[m])
            sel = interest.dominant[:num_users] == mi
            norms = np.linalg.norm(taste[sel], axis=1, keepdims=True)
            t = taste[sel] / np.maximum(norms, 1e-12)
            code = t if width == 1 else \
                np.concatenate([np.maximum(t, 0.0), np.maximum(-t, 0.0)],
                               axis=1)
            lo = offsets[m]
            user0[np.flatnonzero(sel), lo:lo + code.shape[1]] = code
        p.add("emb.user", user0)
        for m in mods:
            dim = store.dims[m]
            basis = np.zeros((dim, d))
            basis[:, offsets[m]:offsets[m] + dim] = np.eye(dim)
            if width == 2:
                basis[:, offsets[m] + dim:offsets[m] + 2 * dim] = \
                    -np.eye(dim)
            p.add(f"feat.{m}", basis)
    else:
        p.add("emb.user", rng.standard_normal((num_users, d)) * 0.1)
        for m in mods:
            p.add(f"feat.{m}", w(store.dims[m], d))
    p.add("emb.item", rng.standard_normal((num_items, d)) * 0.1)
    for b in range(config.attn_depth):
        pre = f"attn.{b}."
        for nm in ATTENTION_PARAM_NAMES:
            if nm in ("b1", "b2", "ln1_bias", "ln2_bias"):
                p.add(pre + nm, np.zeros((1, d)))
            elif nm in ("ln1_gain", "ln2_gain"):
                p.add(pre + nm, np.ones((1, d)))
            elif nm in ("wq", "wk", "w2"):
                # flat attention scores / quiet feed-forward at the start
                p.add(pre + nm, near_zero())
            elif nm in ("wv", "wo"):
                # amplified identity: with flat scores the block starts as
                # LN(x_last + 4 * history mean), favoring the pooled taste
                # over the most recent item's individual noise
                p.add(pre + nm, near_identity(gain=2.0))
            else:
                p.add(pre + nm, near_identity())
    for layer in range(config.hgcn_depth):
        p.add(f"ughcn.{layer}", near_identity(0.05))
        p.add(f"ighcn.{layer}", near_identity(0.05))
    p.add("fuse.w", fuse_init())
    d1, d2 = config.mlp_widths
    p.add("mlp.w0", w(2 * d, d1))
    p.add("mlp.b0", np.zeros((1, d1)))
    p.add("mlp.w1", w(d1, d2))
    p.add("mlp.b1", np.zeros((1, d2)))
    p.add("mlp.w2", w(d2, 1))
    p.add("mlp.b2", np.zeros((1, 1)))
    if (interest is not None and interest.w_uip is not None
            and interest.w_uip.shape == (d, d)):
        p.add("uip.w", interest.w_uip.copy())
    else:
        p.add("uip.w", np.zeros((d, d)))
    return CtrModel(config, mods, num_users, num_items, p)


# ------------------------------------------------------------ data assembly


@dataclass
class ViewContext:
    """One distinct item-hypergraph view of a slot, convolution-ready."""
    graph: Hypergraph
    op: PropagationOperator
    multiplicity: int


@dataclass
class SlotContext:
    slot_index: int
    group_nodes: np.ndarray | None       # user ids in the merged group graph
    group_op: PropagationOperator | None
    user_pos: np.ndarray | None          # (num_users,) position, -1 absent
    views: list[ViewContext]
    item_inv_mult: np.ndarray            # (num_items, 1): 1/total view count


@dataclass
class DataBundle:
    """Everything train/eval needs beyond the parameters themselves."""
    log: InteractionLog
    store: ModalFeatureStore
    interest: InterestModel
    partition: SlotPartition
    contexts: dict[int, SlotContext]
    fold_contexts: dict[tuple[int, int], SlotContext]
    record_fold: np.ndarray        # 0/1 for train records, -1 otherwise
    click_hist: dict[tuple[int, int], list[int]]   # ordered train clicks
    click_sets: dict[tuple[int, int], set[int]]    # distinct clicked items
    record_slot: np.ndarray
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray
    feat_inv_present: np.ndarray   # (num_items, 1): 1/#present modalities


def build_data(log: InteractionLog, store: ModalFeatureStore,
               interest: InterestModel, config: TrainConfig) -> DataBundle:
    """Partition time, split records, and build per-slot hypergraph contexts
    and train-click histories (hypergraphs and histories use train records
    only, so evaluation scores unseen records against seen context).

    Train records are additionally assigned to two folds. During training a
    record is scored against hypergraphs built from the opposite fold only,
    so no record's own click edge is visible to its forward pass — otherwise
    edge membership literally encodes the label and the model memorizes the
    training split instead of learning preferences. Evaluation records are
    in no fold and use the full train-built graphs."""
    mods = _resolve_modalities(store, config)
    if list(interest.modalities) != mods:
        raise ContractError("interest model modalities do not match config")
    if interest.num_users < log.num_users:
        raise ContractError("interest model covers fewer users than the log")

    partition = partition_slots(log, config.granularity_months)
    train_idx, valid_idx, test_idx = split_indices(len(log), config.seed)
    train_mask = np.zeros(len(log), dtype=bool)
    train_mask[train_idx] = True
    record_slot = np.empty(len(log), dtype=np.int64)
    for slot in partition.slots:
        record_slot[slot.record_indices] = slot.index

    record_fold = np.full(len(log), -1, dtype=np.int64)
    fold_rng = np.random.default_rng(
        np.random.SeedSequence((config.seed, 0xF01D)))
    shuffled = train_idx[fold_rng.permutation(train_idx.size)]
    record_fold[shuffled[:shuffled.size // 2]] = 0
    record_fold[shuffled[shuffled.size // 2:]] = 1

    contexts: dict[int, SlotContext] = {}
    fold_contexts: dict[tuple[int, int], SlotContext] = {}
    if config.use_hypergraph:
        present = {m: store.present[m] for m in mods}

        def make(slot_index, recs):
            gset = build_group_hypergraphs(
                log, recs, interest.dominant, mods, slot_index,
                config.neighbor_cap, config.seed)
            iset = build_item_hypergraphs(
                log, recs, present, mods, slot_index,
                config.neighbor_cap, config.seed)
            return _make_context(slot_index, gset.merged, iset.distinct,
                                 log.num_users, log.num_items)

        for slot in partition.slots:
            recs = slot.record_indices[train_mask[slot.record_indices]]
            contexts[slot.index] = make(slot.index, recs)
            for fold in (0, 1):
                others = recs[record_fold[recs] == 1 - fold]
                fold_contexts[slot.index, fold] = make(slot.index, others)

    click_hist: dict[tuple[int, int], list[int]] = {}
    click_sets: dict[tuple[int, int], set[int]] = {}
    for key, pairs in clicked_items_by_user_slot(log, partition).items():
        kept = [it for r, it in pairs if train_mask[r]]
        if kept:
            click_hist[key] = kept
            click_sets[key] = set(kept)

    counts = np.zeros(log.num_items)
    for m in mods:
        counts += store.present[m]
    feat_inv_present = np.divide(1.0, counts, out=np.zeros(log.num_items),
                                 where=counts > 0).reshape(-1, 1)

    return DataBundle(log, store, interest, partition, contexts,
                      fold_contexts, record_fold,
                      click_hist, click_sets, record_slot,
                      train_idx, valid_idx, test_idx, feat_inv_present)


def _make_context(slot_index, merged, distinct,
                  num_users, num_items) -> SlotContext:
    group_nodes = group_op = user_pos = None
    if merged is not None:
        group_nodes = merged.node_ids
        group_op = PropagationOperator(merged)
        user_pos = np.full(num_users, -1, dtype=np.int64)
        user_pos[group_nodes] = np.arange(group_nodes.size)

    views = []
    total = np.zeros(num_items)
    for graph, mult, _mods in distinct:
        views.append(ViewContext(graph, PropagationOperator(graph), mult))
        total[graph.node_ids] += mult
    item_inv_mult = np.divide(1.0, total, out=np.zeros(num_items),
                              where=total > 0).reshape(-1, 1)
    return SlotContext(slot_index, group_nodes, group_op, user_pos,
                       views, item_inv_mult)


# ------------------------------------------------------------- core forward


def fuse(tape: Tape, e_seq: Tensor, e_group: Tensor, w: Tensor) -> Tensor:
    """Augment both embeddings with a constant 1, take per-row outer products
    (flattened row-major), project to d dims, apply ReLU. Batched: B x d in,
    B x d out."""
    if e_seq.value.shape != e_group.value.shape:
        raise ShapeError("fuse operands must share shape")
    ones = tape.const(np.ones((e_seq.value.shape[0], 1)))
    tensor_u = tape.row_outer(tape.concat_cols([e_seq, ones]),
                              tape.concat_cols([e_group, ones]))
    return tape.relu(tape.matmul(tensor_u, w))


def mlp_logits(tape: Tape, e_user: Tensor, e_item: Tensor,
               leaves: dict[str, Tensor]) -> Tensor:
    h = tape.concat_cols([e_user, e_item])
    h = tape.relu(tape.add(tape.matmul(h, leaves["mlp.w0"]),
                           leaves["mlp.b0"]))
    h = tape.relu(tape.add(tape.matmul(h, leaves["mlp.w1"]),
                           leaves["mlp.b1"]))
    return tape.add(tape.matmul(h, leaves["mlp.w2"]), leaves["mlp.b2"])


def predict(tape: Tape, e_user: Tensor, e_item: Tensor,
            leaves: dict[str, Tensor]) -> Tensor:
    """Click probability for [e_user ; e_item] through the ReLU-ReLU-sigmoid
    head."""
    return tape.sigmoid(mlp_logits(tape, e_user, e_item, leaves))


def item_embedding(item: int, item_table: np.ndarray,
                   view_outputs: list[tuple[np.ndarray, np.ndarray, int]]
                   ) -> np.ndarray:
    """e_i = id embedding + multiplicity-weighted mean of the convolution
    outputs of the views containing the item (just the id embedding when the
    item sits in no view). `view_outputs` holds (node_ids, outputs, mult)."""
    total = np.zeros(item_table.shape[1])
    weight = 0
    for node_ids, outputs, mult in view_outputs:
        pos = np.searchsorted(node_ids, item)
        if pos < node_ids.size and node_ids[pos] == item:
            total = total + mult * outputs[pos]
            weight += mult
    if weight == 0:
        return item_table[item].copy()
    return item_table[item] + total * (1.0 / weight)


@dataclass
class Batch:
    slot: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray | None     # (B, 1) float or None
    seq_users: np.ndarray         # unique sequence owners (U,)
    seq_ids: np.ndarray           # (U, l)
    seq_valid: np.ndarray         # (U, l) item-backed positions
    seq_dummy: np.ndarray         # (U,) sequences with no history
    seq_inverse: np.ndarray       # (B,) row of each record's sequence


def _build_batch(model: CtrModel, data: DataBundle, records: np.ndarray,
                 slot: int, with_labels: bool) -> Batch:
    """Assemble a slot-homogeneous batch. Each record's history is the user's
    train-split clicks in the slot with every occurrence of the target item
    removed — the same rule during training and evaluation, so the sequence
    distribution cannot encode the label. Sequences are deduplicated across
    records sharing (user, excluded-item)."""
    log, l = data.log, model.config.max_seq_len
    users = log.users[records]
    items = log.items[records]
    excl = np.full(records.size, -1, dtype=np.int64)
    for i in range(records.size):
        key = (int(users[i]), slot)
        if int(items[i]) in data.click_sets.get(key, ()):
            excl[i] = items[i]
    keys = np.stack([users, excl], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)

    ids = np.full((uniq.shape[0], l), -1, dtype=np.int64)
    valid = np.zeros((uniq.shape[0], l), dtype=bool)
    dummy = np.zeros(uniq.shape[0], dtype=bool)
    for k, (u, ei) in enumerate(uniq):
        its = data.click_hist.get((int(u), slot), [])
        if ei >= 0:
            its = [it for it in its if it != ei]
        tail = its[-l:]
        if tail:
            ids[k, :len(tail)] = tail
            valid[k, :len(tail)] = True
        else:
            dummy[k] = True
    labels = log.labels[records].reshape(-1, 1).astype(np.float64) \
        if with_labels else None
    return Batch(slot, users, items, labels,
                 uniq[:, 0], ids, valid, dummy, inverse)


def _attention_blocks(leaves: dict[str, Tensor],
                      config: TrainConfig) -> list[AttentionParams]:
    return [AttentionParams(
        *[leaves[f"attn.{b}.{nm}"] for nm in ATTENTION_PARAM_NAMES],
        num_heads=config.num_heads) for b in range(config.attn_depth)]


def _base_item_table(tape: Tape, leaves, model: CtrModel,
                     data: DataBundle) -> Tensor:
    """(num_items x d): id embedding plus the mean projected modality feature.
    Items with no modality keep the id embedding alone."""
    feat = None
    for m in model.modalities:
        term = tape.matmul(tape.const(data.store.features[m]),
                           leaves[f"feat.{m}"])
        feat = term if feat is None else tape.add(feat, term)
    return tape.add(leaves["emb.item"],
                    tape.mul(feat, tape.const(data.feat_inv_present)))


def _sequence_embeddings(tape: Tape, leaves, model: CtrModel, batch: Batch,
                         base: Tensor) -> Tensor:
    """Encode the batch's unique sequences and fan out to records. Every
    valid position sums the owner's user embedding with the content-aware
    item row; users with no history get a single position holding the user
    embedding alone."""
    cfg = model.config
    n_seq, l = batch.seq_ids.shape
    attn_valid = batch.seq_valid
    if batch.seq_dummy.any():
        attn_valid = batch.seq_valid.copy()
        attn_valid[batch.seq_dummy, l - 1] = True
    owners = tape.rows(leaves["emb.user"], batch.seq_users)
    x = embed_sequence(tape, batch.seq_ids, batch.seq_valid, base,
                       user_rows=owners, user_valid=attn_valid)
    if cfg.positional:
        pe = positional_encoding(l, cfg.dim)
        x = tape.add(x, tape.const(np.tile(pe, (n_seq, 1))))
    encoded = encode_batch(tape, x, attn_valid, l,
                           _attention_blocks(leaves, cfg))
    return tape.rows(encoded, batch.seq_inverse)


def _group_conv(tape: Tape, leaves, config: TrainConfig,
                ctx: SlotContext) -> Tensor:
    thetas = [leaves[f"ughcn.{i}"] for i in range(config.hgcn_depth)]
    x0 = tape.rows(leaves["emb.user"], ctx.group_nodes)
    return hgcn_stack(tape, x0, ctx.group_op, thetas)


def _item_ctx_table(tape: Tape, leaves, model: CtrModel, ctx: SlotContext,
                    base: Tensor) -> Tensor:
    """(num_items x d) mean item-view convolution output over the content-
    aware item table; zero rows for items outside every view."""
    cfg = model.config
    thetas = [leaves[f"ighcn.{i}"] for i in range(cfg.hgcn_depth)]
    acc = None
    for view in ctx.views:
        nodes = view.graph.node_ids
        x0 = tape.rows(base, nodes)
        out = hgcn_stack(tape, x0, view.op, thetas)
        scattered = tape.scatter_rows(out, nodes, model.num_items)
        if view.multiplicity != 1:
            scattered = tape.scale(scattered, float(view.multiplicity))
        acc = scattered if acc is None else tape.add(acc, scattered)
    return tape.mul(acc, tape.const(ctx.item_inv_mult))


_FULL_GRAPH = object()   # sentinel: "use the slot's full train-built context"


def _forward_logits(tape: Tape, leaves, model: CtrModel, data: DataBundle,
                    batch: Batch, tables=None, ctx=_FULL_GRAPH) -> Tensor:
    """Shared forward pass. With `tables` (frozen per-slot context arrays)
    the hypergraph sides come from the precomputed tables; otherwise they are
    convolved in-tape so gradients flow, over `ctx` (the slot's full context
    by default; the trainer passes opposite-fold contexts instead)."""
    cfg = model.config
    base = _base_item_table(tape, leaves, model, data)
    e_seq = _sequence_embeddings(tape, leaves, model, batch, base)
    e_item = tape.rows(base, batch.items)

    if tables is not None:
        user_table, item_ctx = tables[batch.slot]
        e_group = tape.const(user_table[batch.users])
        if item_ctx is not None:
            e_item = tape.add(e_item, tape.const(item_ctx[batch.items]))
    else:
        if ctx is _FULL_GRAPH:
            ctx = data.contexts.get(batch.slot)
        n = batch.users.size
        if not cfg.use_hypergraph:
            e_group = tape.const(np.zeros((n, cfg.dim)))
        elif ctx is None or ctx.group_op is None:
            e_group = tape.rows(leaves["emb.user"], batch.users)
        else:
            conv = _group_conv(tape, leaves, cfg, ctx)
            pos = ctx.user_pos[batch.users]
            absent = pos < 0
            gathered = tape.rows(conv, np.where(absent, 0, pos))
            if absent.any():
                keep = tape.const((~absent).astype(np.float64).reshape(-1, 1))
                lost = tape.const(absent.astype(np.float64).reshape(-1, 1))
                fallback = tape.rows(leaves["emb.user"], batch.users)
                e_group = tape.add(tape.mul(gathered, keep),
                                   tape.mul(fallback, lost))
            else:
                e_group = gathered

        if cfg.use_hypergraph and ctx is not None and ctx.views:
            table = _item_ctx_table(tape, leaves, model, ctx, base)
            e_item = tape.add(e_item, tape.rows(table, batch.items))

    e_user = fuse(tape, e_seq, e_group, leaves["fuse.w"])
    return mlp_logits(tape, e_user, e_item, leaves)


def batch_loss(tape: Tape, leaves, model: CtrModel, data: DataBundle,
               batch: Batch, ctx=_FULL_GRAPH) -> tuple[Tensor, Tensor]:
    """(loss, logits) for one labeled batch: mean stable BCE from logits plus
    one L2 node over every trainable tensor."""
    logits = _forward_logits(tape, leaves, model, data, batch, ctx=ctx)
    loss = tape.bce_with_logits(logits, tape.const(batch.labels))
    if model.config.reg > 0:
        trainable = [t for k, t in leaves.items() if k not in FROZEN_PARAMS]
        loss = tape.add(loss, tape.l2_penalty(trainable, model.config.reg))
    return loss, logits


# ----------------------------------------------------------------- training


@dataclass
class EpochRow:
    epoch: int
    split: str
    auc: float
    logloss: float
    loss: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochRow]
    best_epoch: int
    best_valid_auc: float
    aborted: bool = False


def _safe_auc(labels, scores) -> float:
    try:
        return auc(labels, scores)
    except UndefinedMetricError:
        return float("nan")


def train(model: CtrModel, data: DataBundle, log_fn=None) -> TrainResult:
    """Slot-grouped mini-batch training with per-epoch validation scoring.

    Keeps the parameters of the best validation-AUC epoch. On divergence
    (non-finite loss) restores the last completed epoch and reports aborted.
    """
    cfg = model.config
    train_groups: dict[tuple[int, int], np.ndarray] = {}
    for slot in data.partition.slots:
        mask = np.isin(slot.record_indices, data.train_idx,
                       assume_unique=True)
        recs = slot.record_indices[mask]
        for fold in (0, 1):
            part = recs[data.record_fold[recs] == fold]
            if part.size:
                train_groups[slot.index, fold] = part
    if not train_groups and cfg.epochs > 0:
        raise ContractError("no training records")

    history: list[EpochRow] = []
    best_auc, best_epoch, best_snap = -np.inf, -1, None
    last_good = model.params.snapshot()

    with threadpool_limits(limits=1):
        opt = make_optimizer(cfg.optimizer, model.params, cfg.lr)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 0x7E40, epoch)))
            scores_parts, label_parts = [], []
            loss_sum, seen = 0.0, 0
            for slot_index, fold in sorted(train_groups):
                recs = train_groups[slot_index, fold]
                perm = recs[rng.permutation(recs.size)]
                ctx = data.fold_contexts.get((slot_index, fold)) \
                    if cfg.use_hypergraph else None
                for start in range(0, perm.size, cfg.batch_size):
                    rs = perm[start:start + cfg.batch_size]
                    batch = _build_batch(model, data, rs, slot_index,
                                         with_labels=True)
                    tape = Tape()
                    leaves = model.params.leaves(tape)
                    loss, logits = batch_loss(tape, leaves, model, data,
                                              batch, ctx=ctx)
                    value = float(loss.value[0, 0])
                    if not np.isfinite(value):
                        model.params.load(last_good)
                        return TrainResult(history, max(epoch - 1, -1),
                                           best_auc, aborted=True)
                    tape.backward(loss)
                    opt.step({k: (None if k in FROZEN_PARAMS else t.grad)
                              for k, t in leaves.items()})
                    scores_parts.append(stable_sigmoid(logits.value[:, 0]))
                    label_parts.append(batch.labels[:, 0])
                    loss_sum += value * rs.size
                    seen += rs.size
            ep_scores = np.concatenate(scores_parts)
            ep_labels = np.concatenate(label_parts)
            ll = log_loss(ep_labels, ep_scores)
            history.append(EpochRow(
                epoch, "train", _safe_auc(ep_labels, ep_scores), ll.value,
                loss_sum / seen, time.perf_counter() - t0))
            if log_fn:
                log_fn(history[-1])

            if data.valid_idx.size:
                t1 = time.perf_counter()
                v_scores = score_records(model, data, data.valid_idx)
                v_labels = data.log.labels[data.valid_idx]
                v_auc = _safe_auc(v_labels, v_scores)
                v_ll = log_loss(v_labels, v_scores).value
                history.append(EpochRow(epoch, "valid", v_auc, v_ll, v_ll,
                                        time.perf_counter() - t1))
                if log_fn:
                    log_fn(history[-1])
                key = v_auc if np.isfinite(v_auc) else -v_ll
                if key > best_auc:
                    best_auc, best_epoch = key, epoch
                    best_snap = model.params.snapshot()
            else:
                best_epoch = epoch
            last_good = model.params.snapshot()

    if best_snap is not None:
        model.params.load(best_snap)
    return TrainResult(history, best_epoch, best_auc)


# --------------------------------------------------------------- evaluation


def _slot_tables(model: CtrModel, data: DataBundle):
    """Frozen per-slot context: a (num_users x d) group table with the
    static-embedding fallback baked in, and a (num_items x d) item-context
    table (None when the slot has no item views)."""
    cfg = model.config
    names = model.params.names()
    tables = {}
    for slot in data.partition.slots:
        if not cfg.use_hypergraph:
            tables[slot.index] = (np.zeros((model.num_users, cfg.dim)), None)
            continue
        ctx = data.contexts.get(slot.index)
        tape = Tape()
        leaves = {k: tape.const(model.params[k]) for k in names}
        user_table = model.params["emb.user"].copy()
        item_ctx = None
        if ctx is not None and ctx.group_op is not None:
            user_table[ctx.group_nodes] = \
                _group_conv(tape, leaves, cfg, ctx).value
        if ctx is not None and ctx.views:
            base = _base_item_table(tape, leaves, model, data)
            item_ctx = _item_ctx_table(tape, leaves, model, ctx, base).value
        tables[slot.index] = (user_table, item_ctx)
    return tables


def score_records(model: CtrModel, data: DataBundle, records,
                  threads: int = 1,
                  chunk_size: int = EVAL_CHUNK) -> np.ndarray:
    """Frozen-parameter click probabilities for the given records.

    Work is partitioned into fixed `chunk_size` ranges regardless of thread
    count, each chunk scored independently, so any `threads` value produces
    bit-identical scores.
    """
    records = np.asarray(records, dtype=np.int64)
    if threads < 1 or chunk_size < 1:
        raise ContractError("threads and chunk size must be >= 1")
    scores = np.empty(records.size)
    if records.size == 0:
        return scores
    names = model.params.names()

    with threadpool_limits(limits=1):
        tables = _slot_tables(model, data)

        def work(span):
            lo, hi = span
            chunk = records[lo:hi]
            slots = data.record_slot[chunk]
            out = np.empty(chunk.size)
            for s in np.unique(slots):
                sel = slots == s
                batch = _build_batch(model, data, chunk[sel], int(s),
                                     with_labels=False)
                tape = Tape()
                leaves = {k: tape.const(model.params[k]) for k in names}
                logits = _forward_logits(tape, leaves, model, data, batch,
                                         tables=tables)
                out[sel] = stable_sigmoid(logits.value[:, 0])
            scores[lo:hi] = out

        spans = [(lo, min(lo + chunk_size, records.size))
                 for lo in range(0, records.size, chunk_size)]
        if threads == 1:
            for span in spans:
                work(span)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, spans))
    return scores


@dataclass
class EvalReport:
    auc: float
    logloss: float
    clamped: int
    num_records: int
    seconds: float
    records_per_second: float
    threads: int


def evaluate_parallel(model: CtrModel, data: DataBundle, records,
                      threads: int = 1,
                      chunk_size: int = EVAL_CHUNK) -> EvalReport:
    """Score a record set and compute AUC/logloss plus throughput. Results
    are identical for every thread count; only throughput varies."""
    records = np.asarray(records, dtype=np.int64)
    if records.size == 0:
        raise UndefinedMetricError("metrics are undefined for an empty split")
    t0 = time.perf_counter()
    scores = score_records(model, data, records, threads, chunk_size)
    seconds = time.perf_counter() - t0
    labels = data.log.labels[records]
    area = auc(labels, scores)
    ll = log_loss(labels, scores)
    rate = records.size / seconds if seconds > 0 else float("inf")
    return EvalReport(area, ll.value, ll.clamped, records.size, seconds,
                      rate, threads)


def evaluate(model: CtrModel, data: DataBundle, records) -> EvalReport:
    return evaluate_parallel(model, data, records, threads=1)


# -------------------------------------------------------------- persistence


def save_checkpoint(path, model: CtrModel,
                    extra_meta: dict[str, str] | None = None) -> None:
    meta = {
        "kind": "checkpoint",
        "modalities": ",".join(model.modalities),
        "num_users": str(model.num_users),
        "num_items": str(model.num_items),
    }
    for f in fields(TrainConfig):
        value = getattr(model.config, f.name)
        if f.name == "mlp_widths":
            value = ",".join(str(v) for v in value)
        elif f.name == "modalities":
            continue
        meta[f"cfg.{f.name}"] = str(value)
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, {k: model.params[k] for k in model.params.names()},
                 meta=meta)


def load_checkpoint(path) -> CtrModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise DataFormatError(f"{path}: not a checkpoint file")
    modalities = meta["modalities"].split(",")
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name == "modalities":
            continue
        raw = meta[f"cfg.{f.name}"]
        if f.name == "mlp_widths":
            kwargs[f.name] = tuple(int(v) for v in raw.split(","))
        elif f.name == "optimizer":
            kwargs[f.name] = raw
        elif f.name in ("positional", "use_hypergraph"):
            kwargs[f.name] = raw == "True"
        elif f.name == "neighbor_cap":
            kwargs[f.name] = None if raw == "None" else int(raw)
        elif f.name in ("lr", "reg"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    config = TrainConfig(modalities=tuple(modalities), **kwargs)
    params = ParameterStore()
    for name in sorted(tensors):
        params.add(name, tensors[name])
    return CtrModel(config, modalities, int(meta["num_users"]),
                    int(meta["num_items"]), params)


def write_metrics(path, rows: list[EpochRow]) -> None:
    """CSV metrics log; every float is written with full repr precision so
    reruns are byte-comparable (timing column aside)."""
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.split},{r.auc!r},{r.logloss!r},"
                     f"{r.loss!r},{r.seconds:.3f}\n")
