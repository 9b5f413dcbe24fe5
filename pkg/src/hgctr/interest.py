"""Self-supervised user-interest pretraining.

A trilinear scorer sigmoid(e_u . ((e_a W^T) * e_i)) rates how well a user
matches an item seen through one modality's features (the anchor e_a).
During pretraining the item factor e_i is fixed to ones, so the score
reduces to a per-user bilinear form on the anchor alone: every bit of
ranking ability has to come from the modality view of the candidate item.
(A trainable or feature-derived item factor opens a modality-independent
ranking channel and the interest matrix stops discriminating.)

Training contrasts each clicked (user, item, modality) anchor against
sampled negative items of the same modality with an InfoNCE objective on the
pre-sigmoid scores. The interest matrix F (users x modalities) is the mean
sigmoid score over each user's anchors; thresholding F yields interest
assignments, and the per-user top modality drives hypergraph grouping.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionLog, ModalFeatureStore
from .errors import ContractError, DataFormatError
from .numerics import Tape, Tensor, stable_sigmoid
from .optim import AdamOptimizer, ParameterStore
from .tensorfile import load_tensors, save_tensors

DEFAULT_DELTA = 0.5


@dataclass
class InterestConfig:
    dim: int = 32
    negatives: int = 4
    epochs: int = 6
    lr: float = 0.01
    batch_size: int = 512
    delta: float = DEFAULT_DELTA
    modality_weights: dict[str, float] | None = None

    def __post_init__(self):
        if self.dim < 1 or self.negatives < 1 or self.epochs < 0:
            raise ContractError("bad interest config")
        if not 0.0 < self.delta <= 1.0:
            raise ContractError("delta must lie in (0, 1]")


@dataclass
class InterestModel:
    modalities: list[str]
    f_matrix: np.ndarray                 # (num_users, k) mean sigmoid scores
    assignments: np.ndarray              # (num_users, k) bool
    dominant: np.ndarray                 # (num_users,) modality index
    delta: float
    flagged: np.ndarray                  # users with no anchors at all
    w_uip: np.ndarray = field(repr=False, default=None)
    user_emb: np.ndarray = field(repr=False, default=None)
    proj: dict[str, np.ndarray] = field(repr=False, default=None)

    @property
    def num_users(self) -> int:
        return self.f_matrix.shape[0]


def uip_score(tape: Tape, e_u: Tensor, e_i: Tensor, e_a: Tensor,
              w: Tensor) -> Tensor:
    """sigmoid(e_u . ((e_a W^T) * e_i)) for single row vectors; returns 1x1."""
    gated = tape.mul(tape.matmul(e_a, tape.transpose(w)), e_i)
    return tape.sigmoid(tape.row_sum(tape.mul(gated, e_u)))


def _batch_scores(tape: Tape, user_rows: Tensor, w: Tensor, proj: Tensor,
                  feats: np.ndarray, candidates: np.ndarray
                  ) -> tuple[Tensor, Tensor]:
    """Pre-sigmoid scores, one column per candidate, each scored with its own
    modality anchor and a ones item factor. candidates[:, 0] is the positive.
    Returns (positive column B x 1, full B x C score matrix)."""
    wt = tape.transpose(w)
    cols = []
    for j in range(candidates.shape[1]):
        anchor = tape.matmul(tape.const(feats[candidates[:, j]]), proj)
        cols.append(tape.row_sum(tape.mul(user_rows, tape.matmul(anchor, wt))))
    return cols[0], tape.concat_cols(cols)


def uip_loss(tape: Tape, user_rows: Tensor, w: Tensor, proj: Tensor,
             feats: np.ndarray, candidates: np.ndarray) -> Tensor:
    """Contrastive objective: -(s_pos - logsumexp(all candidate scores)),
    averaged over the batch. Scores enter pre-sigmoid for stability."""
    pos, scores = _batch_scores(tape, user_rows, w, proj, feats, candidates)
    return tape.scale(
        tape.mean_all(tape.sub(pos, tape.logsumexp_rows(scores))), -1.0)


def _collect_anchors(log: InteractionLog, store: ModalFeatureStore
                     ) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per modality: (users, items) of clicked records whose item carries the
    modality."""
    clicked = np.flatnonzero(log.labels == 1)
    users, items = log.users[clicked], log.items[clicked]
    out = {}
    for m in store.modalities:
        sel = store.present[m][items]
        out[m] = (users[sel], items[sel])
    return out


def pretrain_interest(log: InteractionLog, store: ModalFeatureStore,
                      config: InterestConfig, seed: int,
                      num_users: int | None = None) -> InterestModel:
    """Train the trilinear scorer on the given (train-split) log and distill
    the interest matrix. Deterministic for a fixed seed."""
    num_users = num_users if num_users is not None else log.num_users
    k = len(store.modalities)
    d = config.dim
    r_init = np.random.default_rng(np.random.SeedSequence((seed, 0x1A7E)))

    params = ParameterStore()
    params.add("user", r_init.standard_normal((num_users, d)) * 0.1)
    for m in store.modalities:
        params.add(f"proj.{m}",
                   r_init.standard_normal((store.dims[m], d)) * 0.1)
    params.add("w", r_init.standard_normal((d, d)) * 0.1)
    opt = AdamOptimizer(params, lr=config.lr)

    anchors = _collect_anchors(log, store)
    pools = {m: np.flatnonzero(store.present[m]) for m in store.modalities}

    for epoch in range(config.epochs):
        for mi, m in enumerate(store.modalities):
            users, items = anchors[m]
            pool = pools[m]
            if users.size == 0 or pool.size < 2:
                continue
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, 0xA11C, epoch, mi)))
            order = rng.permutation(users.size)
            feats = store.features[m]
            for start in range(0, order.size, config.batch_size):
                sel = order[start:start + config.batch_size]
                pos = items[sel]
                negs = pool[rng.integers(0, pool.size,
                                         size=(sel.size, config.negatives))]
                clash = negs == pos[:, None]
                if clash.any():
                    bumped = pool[(np.searchsorted(pool, pos) + 1) % pool.size]
                    negs = np.where(clash, bumped[:, None], negs)
                cands = np.concatenate([pos[:, None], negs], axis=1)
                tape = Tape()
                leaves = params.leaves(tape)
                user_rows = tape.rows(leaves["user"], users[sel])
                loss = uip_loss(tape, user_rows, leaves["w"],
                                leaves[f"proj.{m}"], feats, cands)
                tape.backward(loss)
                opt.step({name: leaf.grad for name, leaf in leaves.items()})

    f_sum = np.zeros((num_users, k))
    f_cnt = np.zeros((num_users, k))
    user_emb, w = params["user"], params["w"]
    for mi, m in enumerate(store.modalities):
        users, items = anchors[m]
        if users.size == 0:
            continue
        proj = params[f"proj.{m}"]
        s = stable_sigmoid(
            (user_emb[users]
             * (store.features[m][items] @ proj @ w.T)).sum(axis=1))
        np.add.at(f_sum[:, mi], users, s)
        np.add.at(f_cnt[:, mi], users, 1.0)
    f = np.divide(f_sum, f_cnt, out=np.zeros_like(f_sum), where=f_cnt > 0)
    flagged = ~(f_cnt > 0).any(axis=1)
    f[flagged] = 1.0 / k

    weights = _weight_vector(store.modalities, config.modality_weights)
    assignments, dominant = assign_interests(f, config.delta, weights)
    return InterestModel(list(store.modalities), f, assignments, dominant,
                         config.delta, flagged, w_uip=params["w"].copy(),
                         user_emb=params["user"].copy(),
                         proj={m: params[f"proj.{m}"].copy()
                               for m in store.modalities})


def _weight_vector(modalities, weight_map) -> np.ndarray:
    if not weight_map:
        return np.ones(len(modalities))
    unknown = set(weight_map) - set(modalities)
    if unknown:
        raise ContractError(f"weights for unknown modalities {sorted(unknown)}")
    return np.array([float(weight_map.get(m, 1.0)) for m in modalities])


def assign_interests(f_matrix: np.ndarray, delta: float,
                     weights: np.ndarray | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Threshold the (optionally weighted) interest matrix at delta; users
    clearing it nowhere fall back to their single best modality. Ties pick
    the earliest modality in configured order (np.argmax semantics)."""
    f = np.asarray(f_matrix, dtype=np.float64)
    if f.ndim != 2:
        raise ContractError("interest matrix must be 2-D")
    scored = f * weights if weights is not None else f
    assignments = scored >= delta
    dominant = np.argmax(scored, axis=1)
    none = ~assignments.any(axis=1)
    assignments[none, dominant[none]] = True
    return assignments, dominant


def uniform_interest_model(num_users: int, modalities: list[str],
                           delta: float = DEFAULT_DELTA) -> InterestModel:
    """The pretraining-off fallback: every user uniform, dominant = first
    configured modality."""
    k = len(modalities)
    f = np.full((num_users, k), 1.0 / k)
    assignments, dominant = assign_interests(f, delta)
    return InterestModel(list(modalities), f, assignments, dominant, delta,
                         flagged=np.ones(num_users, dtype=bool),
                         w_uip=np.zeros((1, 1)))


def save_interest(path, model: InterestModel, csv_path=None) -> None:
    tensors = {
        "f_matrix": model.f_matrix,
        "assignments": model.assignments.astype(np.float64),
        "dominant": model.dominant.reshape(-1, 1).astype(np.float64),
        "flagged": model.flagged.reshape(-1, 1).astype(np.float64),
        "w_uip": model.w_uip,
    }
    if model.user_emb is not None:
        tensors["user_emb"] = model.user_emb
        for m in model.modalities:
            tensors[f"proj.{m}"] = model.proj[m]
    save_tensors(path, tensors,
                 meta={"kind": "interest", "delta": repr(model.delta),
                       "modalities": ",".join(model.modalities)})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_index"] + [f"f_{m}" for m in model.modalities]
                       + ["dominant", "flagged"])
            for u in range(model.num_users):
                w.writerow([u] + [repr(float(v)) for v in model.f_matrix[u]]
                           + [model.modalities[model.dominant[u]],
                              int(model.flagged[u])])


def load_interest(path) -> InterestModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "interest":
        raise DataFormatError(f"{path}: not an interest file")
    mods = meta["modalities"].split(",")
    return InterestModel(
        modalities=mods,
        f_matrix=tensors["f_matrix"],
        assignments=tensors["assignments"].astype(bool),
        dominant=tensors["dominant"].ravel().astype(np.int64),
        delta=float(meta["delta"]),
        flagged=tensors["flagged"].ravel().astype(bool),
        w_uip=tensors["w_uip"],
        user_emb=tensors.get("user_emb"),
        proj={m: tensors[f"proj.{m}"] for m in mods}
        if "user_emb" in tensors else None,
    )
