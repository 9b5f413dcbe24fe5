"""Interaction logs, modality feature stores, temporal slots, behavior
sequences, the train/valid/test split, and the synthetic log generator."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataFormatError
from .numerics import stable_sigmoid

SECONDS_PER_MONTH = 30 * 24 * 3600
DEFAULT_MODALITIES = ("visual", "acoustic", "textual")


@dataclass(frozen=True)
class InteractionRecord:
    """One logged exposure: a user saw an item at a time and clicked or not."""
    user: int
    item: int
    timestamp: int
    label: int
    record_id: int


class InteractionLog:
    """A column-oriented log with dense 0-based user/item ids."""

    def __init__(self, users, items, timestamps, labels,
                 user_ids=None, item_ids=None):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = self.users.size
        if not (self.items.size == self.timestamps.size == self.labels.size == n):
            raise ContractError("log columns must have equal length")
        if n == 0:
            raise ContractError("empty interaction log")
        if not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be 0/1 (use binarize for ratings)")
        if self.users.min() < 0 or self.items.min() < 0:
            raise ContractError("ids must be non-negative")
        self.user_ids = list(user_ids) if user_ids is not None else \
            [str(i) for i in range(int(self.users.max()) + 1)]
        self.item_ids = list(item_ids) if item_ids is not None else \
            [str(i) for i in range(int(self.items.max()) + 1)]
        if int(self.users.max()) >= len(self.user_ids) or \
                int(self.items.max()) >= len(self.item_ids):
            raise ContractError("id map smaller than max dense id")

    def __len__(self) -> int:
        return self.users.size

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def record(self, i: int) -> InteractionRecord:
        return InteractionRecord(int(self.users[i]), int(self.items[i]),
                                 int(self.timestamps[i]), int(self.labels[i]),
                                 record_id=i)

    def records(self) -> list[InteractionRecord]:
        return [self.record(i) for i in range(len(self))]

    def subset(self, indices) -> "InteractionLog":
        """A view-log over selected records; id spaces are preserved."""
        idx = np.asarray(indices, dtype=np.int64)
        return InteractionLog(self.users[idx], self.items[idx],
                              self.timestamps[idx], self.labels[idx],
                              self.user_ids, self.item_ids)


def write_interactions(path, log: InteractionLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp", "label"])
        for u, i, t, y in zip(log.users, log.items, log.timestamps, log.labels):
            w.writerow([log.user_ids[u], log.item_ids[i], int(t), int(y)])


def load_interactions(path, binarize_threshold: float | None = None,
                      id_map_path=None) -> InteractionLog:
    """Read a user_id,item_id,timestamp,label CSV.

    Ids are densified to 0-based contiguous indices in order of first
    appearance; the original->dense map is written to `id_map_path` when
    given. With `binarize_threshold`, the label column is treated as a rating
    and mapped to 1 iff rating >= threshold.
    """
    users, items, stamps, labels = [], [], [], []
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != \
                ["user_id", "item_id", "timestamp", "label"]:
            raise DataFormatError(
                f"{path}: expected header user_id,item_id,timestamp,label")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise DataFormatError(f"{path}:{ln}: expected 4 columns")
            u, i, ts, lab = (c.strip() for c in row[:4])
            try:
                stamp = int(float(ts))
                raw = float(lab)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: bad number") from exc
            if binarize_threshold is not None:
                y = 1 if raw >= binarize_threshold else 0
            else:
                if raw not in (0.0, 1.0):
                    raise DataFormatError(
                        f"{path}:{ln}: label {raw} is not 0/1; "
                        "pass a binarize threshold for ratings")
                y = int(raw)
            users.append(user_map.setdefault(u, len(user_map)))
            items.append(item_map.setdefault(i, len(item_map)))
            stamps.append(stamp)
            labels.append(y)
    if not users:
        raise DataFormatError(f"{path}: no records")
    log = InteractionLog(users, items, stamps, labels,
                         list(user_map), list(item_map))
    if id_map_path is not None:
        with open(id_map_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "original", "index"])
            for orig, idx in user_map.items():
                w.writerow(["user", orig, idx])
            for orig, idx in item_map.items():
                w.writerow(["item", orig, idx])
    return log


# ---------------------------------------------------------------- modalities


@dataclass
class ModalFeatureStore:
    """Per-modality item feature matrices plus presence masks.

    `features[m]` is (num_items, dim_m); rows for absent items are zero and
    flagged False in `present[m]`.
    """
    modalities: list[str]
    features: dict[str, np.ndarray]
    present: dict[str, np.ndarray]
    num_items: int

    def __post_init__(self):
        if not self.modalities:
            raise ContractError("at least one modality required")
        for m in self.modalities:
            f = np.asarray(self.features[m], dtype=np.float64)
            if f.shape[0] != self.num_items:
                raise ContractError(f"{m}: feature rows != num_items")
            if not np.isfinite(f).all():
                raise ContractError(f"{m}: non-finite features")
            self.features[m] = f
            p = np.asarray(self.present[m], dtype=bool)
            if p.shape != (self.num_items,):
                raise ContractError(f"{m}: bad presence mask shape")
            self.present[m] = p

    @property
    def dims(self) -> dict[str, int]:
        return {m: self.features[m].shape[1] for m in self.modalities}


def write_features(out_dir, store: ModalFeatureStore,
                   manifest_name="features.txt") -> str:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"items {store.num_items}"]
    for m in store.modalities:
        rel = f"features_{m}.csv"
        lines.append(f"modality {m} {store.dims[m]} {rel}")
        with open(os.path.join(out_dir, rel), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_index"] +
                       [f"f{j}" for j in range(store.dims[m])])
            for i in np.flatnonzero(store.present[m]):
                w.writerow([int(i)] + [repr(float(v))
                                       for v in store.features[m][i]])
    manifest = os.path.join(out_dir, manifest_name)
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_features(manifest_path) -> ModalFeatureStore:
    base = os.path.dirname(os.path.abspath(manifest_path))
    num_items = None
    spec: list[tuple[str, int, str]] = []
    with open(manifest_path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "items" and len(parts) == 2:
                num_items = int(parts[1])
            elif parts[0] == "modality" and len(parts) == 4:
                spec.append((parts[1], int(parts[2]), parts[3]))
            else:
                raise DataFormatError(f"{manifest_path}:{ln}: bad line {line!r}")
    if num_items is None or not spec:
        raise DataFormatError(f"{manifest_path}: needs items and modality lines")
    features, present = {}, {}
    for name, dim, rel in spec:
        f = np.zeros((num_items, dim))
        p = np.zeros(num_items, dtype=bool)
        with open(os.path.join(base, rel), newline="") as fh:
            reader = csv.reader(fh)
            next(reader)  # header
            for row in reader:
                if not row:
                    continue
                i = int(row[0])
                if not 0 <= i < num_items:
                    raise DataFormatError(f"{rel}: item index {i} out of range")
                if len(row) != dim + 1:
                    raise DataFormatError(f"{rel}: row width != dim {dim}")
                f[i] = [float(v) for v in row[1:]]
                p[i] = True
        features[name], present[name] = f, p
    return ModalFeatureStore([s[0] for s in spec], features, present, num_items)


# --------------------------------------------------------------------- slots


@dataclass
class Slot:
    """A half-open time window [start, end) and the record indices inside."""
    index: int
    start: int
    end: int
    record_indices: np.ndarray


@dataclass
class SlotPartition:
    granularity_months: int
    origin: int
    width: int
    slots: list[Slot]

    def slot_of(self, timestamp: int) -> int:
        """Slot index for a timestamp, clamped to the partition's range."""
        raw = (int(timestamp) - self.origin) // self.width
        return int(min(max(raw, 0), len(self.slots) - 1))


def partition_slots(log: InteractionLog, granularity_months: int,
                    origin: int | None = None) -> SlotPartition:
    """Bucket records into consecutive half-open windows of
    `granularity_months` * 30 days, starting at the earliest timestamp."""
    if granularity_months < 1:
        raise ContractError("granularity must be >= 1 month")
    width = granularity_months * SECONDS_PER_MONTH
    origin = int(log.timestamps.min()) if origin is None else int(origin)
    rel = (log.timestamps - origin) // width
    if rel.min() < 0:
        raise ContractError("records precede the partition origin")
    count = int(rel.max()) + 1
    order = np.argsort(rel, kind="stable")
    boundaries = np.searchsorted(rel[order], np.arange(count + 1))
    slots = []
    for s in range(count):
        idx = order[boundaries[s]:boundaries[s + 1]]
        slots.append(Slot(s, origin + s * width, origin + (s + 1) * width,
                          np.sort(idx)))
    return SlotPartition(granularity_months, origin, width, slots)


# ----------------------------------------------------------------- sequences


@dataclass
class SlotSequence:
    """A user's clicked items within one slot, oldest first, capped at l."""
    user: int
    slot: int
    item_ids: np.ndarray   # (l,) int64, -1 past `length`
    valid: np.ndarray      # (l,) bool
    length: int

    @property
    def current_item(self) -> int:
        if self.length == 0:
            raise ContractError("empty sequence has no current item")
        return int(self.item_ids[self.length - 1])


def clicked_items_by_user_slot(log: InteractionLog,
                               partition: SlotPartition
                               ) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """(user, slot) -> [(record_index, item), ...] for clicked records,
    ordered by (timestamp, record index)."""
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for slot in partition.slots:
        idx = slot.record_indices
        clicked = idx[log.labels[idx] == 1]
        order = clicked[np.lexsort((clicked, log.timestamps[clicked]))] \
            if clicked.size else clicked
        for r in order:
            key = (int(log.users[r]), slot.index)
            out.setdefault(key, []).append((int(r), int(log.items[r])))
    return out


def build_slot_sequences(log: InteractionLog, partition: SlotPartition,
                         max_len: int) -> list[SlotSequence]:
    """One sequence per (user, slot) with at least one click: the most recent
    `max_len` clicked items, oldest first."""
    if max_len < 1:
        raise ContractError("sequence length must be >= 1")
    grouped = clicked_items_by_user_slot(log, partition)
    out = []
    for (user, slot), pairs in sorted(grouped.items()):
        items = [it for _, it in pairs][-max_len:]
        ids = np.full(max_len, -1, dtype=np.int64)
        ids[:len(items)] = items
        valid = np.zeros(max_len, dtype=bool)
        valid[:len(items)] = True
        out.append(SlotSequence(user, slot, ids, valid, len(items)))
    return out


# --------------------------------------------------------------------- split


def split_indices(n: int, seed: int,
                  ratios=(0.7, 0.2, 0.1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random record split; returns sorted train/valid/test index arrays."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError("split ratios must be non-negative and sum to 1")
    perm = np.random.default_rng(np.random.SeedSequence((seed, 0xB0A7))) \
        .permutation(n)
    n_train = int(np.floor(ratios[0] * n))
    n_valid = int(np.floor(ratios[1] * n))
    return (np.sort(perm[:n_train]),
            np.sort(perm[n_train:n_train + n_valid]),
            np.sort(perm[n_train + n_valid:]))


# ----------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 3000
    num_interactions: int = 100_000
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    modality_dims: tuple[int, ...] = (8, 8, 8)
    dominant_share: tuple[float, ...] = (0.5, 0.3, 0.2)
    base_click_rate: float = 0.5
    noise_rate: float = 0.1
    signal_scale: float = 10.0
    start_time: int = 1_600_000_000
    span_months: int = 12
    drift_months: int = 0  # 0 disables preference drift

    def __post_init__(self):
        k = len(self.modalities)
        if len(self.modality_dims) != k or len(self.dominant_share) != k:
            raise ContractError("modality config lengths disagree")
        if abs(sum(self.dominant_share) - 1.0) > 1e-9:
            raise ContractError("dominant_share must sum to 1")
        if not 0.0 < self.base_click_rate < 1.0:
            raise ContractError("base_click_rate must lie in (0, 1)")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ContractError("noise_rate must lie in [0, 1]")
        if min(self.num_users, self.num_items, self.num_interactions) < 1:
            raise ContractError("sizes must be positive")
        if self.span_months < 1 or self.drift_months < 0:
            raise ContractError("bad time span")


@dataclass
class GroundTruth:
    """What the generator actually planted, for diagnostics and oracles."""
    modalities: tuple[str, ...]
    dominant: np.ndarray          # (num_users,) modality index per user
    segment_starts: np.ndarray    # absolute timestamps, one per drift segment
    latents: list[dict[str, np.ndarray]] = field(repr=False)
    record_probs: np.ndarray = field(repr=False)  # planted click probability
    bias: float = 0.0

    def segment_of(self, timestamp) -> np.ndarray:
        ts = np.asarray(timestamp, dtype=np.int64)
        return np.clip(np.searchsorted(self.segment_starts, ts, side="right")
                       - 1, 0, len(self.segment_starts) - 1)


def _calibrate_bias(z: np.ndarray, noise: float, base: float) -> float:
    """Solve mean((1-noise)*sigmoid(z+b) + noise*base) = base for b."""
    def mean_p(b):
        return float(((1.0 - noise) * stable_sigmoid(z + b)
                      + noise * base).mean())

    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_p(mid) < base:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(config: SyntheticConfig, seed: int
                       ) -> tuple[InteractionLog, ModalFeatureStore, GroundTruth]:
    """Draw a log whose click signal lives in each user's dominant modality.

    Click probability per record:
        p = (1 - noise) * sigmoid(scale * a + b) + noise * base_rate
    with `a` the standardized affinity between the user's (possibly drifting)
    latent taste vector and the item's dominant-modality features, and `b`
    calibrated so the mean of p equals base_rate.
    """
    cfg = config
    root = np.random.SeedSequence((seed, 0x5EED))
    r_feat, r_user, r_inter, r_label = (
        np.random.default_rng(s) for s in root.spawn(4))
    k = len(cfg.modalities)

    features = {m: r_feat.standard_normal((cfg.num_items, d))
                for m, d in zip(cfg.modalities, cfg.modality_dims)}
    present = {m: np.ones(cfg.num_items, dtype=bool) for m in cfg.modalities}
    store = ModalFeatureStore(list(cfg.modalities), features, present,
                              cfg.num_items)

    dominant = r_user.choice(k, size=cfg.num_users,
                             p=np.asarray(cfg.dominant_share))
    span = cfg.span_months * SECONDS_PER_MONTH
    if cfg.drift_months > 0:
        seg_width = cfg.drift_months * SECONDS_PER_MONTH
        n_seg = int(np.ceil(span / seg_width))
        segment_starts = cfg.start_time + seg_width * np.arange(n_seg)
    else:
        n_seg = 1
        segment_starts = np.array([cfg.start_time])
    latents = [{m: r_user.standard_normal((cfg.num_users, d))
                for m, d in zip(cfg.modalities, cfg.modality_dims)}
               for _ in range(n_seg)]

    n = cfg.num_interactions
    users = r_inter.integers(0, cfg.num_users, size=n)
    items = r_inter.integers(0, cfg.num_items, size=n)
    stamps = r_inter.integers(cfg.start_time, cfg.start_time + span, size=n)

    truth = GroundTruth(cfg.modalities, dominant, segment_starts, latents,
                        record_probs=np.zeros(n))
    segs = truth.segment_of(stamps)
    affinity = np.zeros(n)
    for s in range(n_seg):
        for mi, m in enumerate(cfg.modalities):
            sel = (segs == s) & (dominant[users] == mi)
            if sel.any():
                affinity[sel] = np.einsum(
                    "ij,ij->i",
                    latents[s][m][users[sel]], features[m][items[sel]])
    std = affinity.std()
    a = (affinity - affinity.mean()) / (std if std > 0 else 1.0)
    z = cfg.signal_scale * a
    bias = _calibrate_bias(z, cfg.noise_rate, cfg.base_click_rate)
    probs = ((1.0 - cfg.noise_rate) * stable_sigmoid(z + bias)
             + cfg.noise_rate * cfg.base_click_rate)
    labels = (r_label.random(n) < probs).astype(np.int64)

    order = np.argsort(stamps, kind="stable")
    log = InteractionLog(users[order], items[order], stamps[order],
                         labels[order],
                         [f"u{j}" for j in range(cfg.num_users)],
                         [f"i{j}" for j in range(cfg.num_items)])
    truth.record_probs = probs[order]
    truth.bias = bias
    return log, store, truth
