"""Sparse attribute vectors, loaders, protocol splits and negative sampling."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNKNOWN = "<unk>"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FieldLayout:
    """Ordered categorical fields, each a one-hot block of the attribute vector."""

    fields: tuple  # ((name, cardinality), ...)
    user_field: str | None = "user"
    item_field: str | None = "item"

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((str(n), int(c)) for n, c in self.fields))
        names = self.names
        if len(set(names)) != len(names):
            raise DataError(f"duplicate field names in {names}")
        for name, card in self.fields:
            if card < 1:
                raise DataError(f"field {name!r} has cardinality {card}")
        if self.user_field not in names:
            object.__setattr__(self, "user_field", None)
        if self.item_field not in names:
            object.__setattr__(self, "item_field", None)

    @classmethod
    def from_cardinalities(cls, cards, names=None):
        names = names or [f"f{i}" for i in range(len(cards))]
        return cls(tuple(zip(names, cards)))

    @property
    def names(self):
        return [n for n, _ in self.fields]

    @property
    def cardinalities(self):
        return [c for _, c in self.fields]

    @property
    def offsets(self):
        return [0, *np.cumsum(self.cardinalities[:-1]).tolist()] if self.fields else []

    @property
    def n(self):
        return int(sum(self.cardinalities))

    def position(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown field {name!r}") from None

    def decode(self, indices):
        """Map global indices back to one category id per field."""
        offs = self.offsets
        out = [None] * len(self.fields)
        for idx in indices:
            f = int(np.searchsorted(offs, idx, side="right")) - 1
            out[f] = int(idx) - offs[f]
        return out


@dataclass(frozen=True)
class SparseInstance:
    label: float
    indices: tuple
    values: tuple
    user: int | None = None
    item: int | None = None
    timestamp: int | None = None
    categories: tuple | None = None  # per-field category ids (one-hot path only)

    @property
    def key(self):
        return (self.user, self.item, self.timestamp)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    layout: FieldLayout
    item_attributes: dict = field(default_factory=dict)
    candidates: object = None  # (user, positive) -> candidate items, top-n only


def encode_instance(values, layout, label=1.0, timestamp=None):
    """One-hot encode one category id per field."""
    if len(values) != len(layout.fields):
        raise DataError(f"expected {len(layout.fields)} field values, got {len(values)}")
    idx = []
    for off, (name, card), c in zip(layout.offsets, layout.fields, values):
        c = int(c)
        if not 0 <= c < card:
            raise DataError(f"category {c} out of range for field {name!r} (cardinality {card})")
        idx.append(off + c)
    cats = tuple(int(c) for c in values)
    user = cats[layout.position(layout.user_field)] if layout.user_field else None
    item = cats[layout.position(layout.item_field)] if layout.item_field else None
    return SparseInstance(
        float(label), tuple(idx), (1.0,) * len(idx), user, item, timestamp, cats
    )


def with_item(instance, item, layout, item_attributes=None, label=None):
    """Copy of a one-hot instance with the item (and its attributes) replaced."""
    if instance.categories is None or layout.item_field is None:
        raise DataError("item replacement needs a one-hot instance with an item field")
    cats = list(instance.categories)
    cats[layout.position(layout.item_field)] = item
    if item_attributes and item in item_attributes:
        for pos, c in item_attributes[item].items():
            cats[pos] = c
    return encode_instance(
        cats, layout, instance.label if label is None else label, instance.timestamp
    )


# ------------------------------------------------------------------ vocabulary
class Vocabulary:
    """Per-field map from raw category strings to local ids.

    With ``reserve_unknown`` every field gets one extra trailing id that
    absorbs categories never seen while building the vocabulary.
    """

    def __init__(self, fields=None, reserve_unknown=False):
        self.maps: dict[str, dict[str, int]] = {k: dict(v) for k, v in (fields or {}).items()}
        self.reserve_unknown = reserve_unknown
        if reserve_unknown:
            for m in self.maps.values():
                m.setdefault(UNKNOWN, len(m))

    @classmethod
    def build(cls, columns: dict, reserve_unknown=False):
        maps = {}
        for name, raw in columns.items():
            cats = sorted(set(raw), key=_natural_key)
            maps[name] = {c: i for i, c in enumerate(cats)}
        return cls(maps, reserve_unknown)

    def cardinality(self, name):
        return len(self.maps[name])

    def encode(self, name, raw):
        m = self.maps[name]
        if raw in m:
            return m[raw]
        if self.reserve_unknown:
            return m[UNKNOWN]
        raise DataError(f"unknown category {raw!r} in field {name!r}")

    def decode(self, name, idx):
        for k, v in self.maps[name].items():
            if v == idx:
                return k
        raise KeyError(idx)

    def layout(self, names):
        return FieldLayout(tuple((n, self.cardinality(n)) for n in names))

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for name, m in self.maps.items():
                for cat, idx in sorted(m.items(), key=lambda kv: kv[1]):
                    w.writerow([name, cat, idx])

    @classmethod
    def load(cls, path):
        maps = defaultdict(dict)
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                name, cat, idx = row
                maps[name][cat] = int(idx)
        reserve = all(UNKNOWN in m for m in maps.values()) and bool(maps)
        return cls(dict(maps), reserve)

    def to_rows(self):
        return [[n, c, i] for n, m in self.maps.items() for c, i in m.items()]

    @classmethod
    def from_rows(cls, rows):
        maps = defaultdict(dict)
        for n, c, i in rows:
            maps[n][c] = int(i)
        reserve = bool(maps) and all(UNKNOWN in m for m in maps.values())
        return cls(dict(maps), reserve)


def _natural_key(s):
    return (0, int(s), s) if s.lstrip("-").isdigit() else (1, 0, s)


# --------------------------------------------------------------------- loading
@dataclass
class LoadedData:
    instances: list
    layout: FieldLayout
    vocabulary: Vocabulary | None = None
    item_attributes: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``instances, layout = load_interactions(...)``
        return iter((self.instances, self.layout))


def load_interactions(path, format="tabular", *, delimiter="\t", vocabulary=None,
                      reserve_unknown=False, n=None):
    """Read interactions from ``path``.

    ``tabular`` files carry a header with ``user``, ``item`` and ``label``
    columns, an optional ``timestamp`` column and any number of extra
    categorical columns.  ``libfm`` files hold ``label idx:val ...`` lines and
    take their dimension from ``n`` or from a ``<path>.meta`` sidecar with an
    ``n=<int>`` line.
    """
    path = Path(path)
    if format == "tabular":
        return _load_tabular(path, delimiter, vocabulary, reserve_unknown)
    if format in ("libfm", "libfm-sparse"):
        return _load_libfm(path, n)
    raise DataError(f"unknown data format {format!r}")


def _load_tabular(path, delimiter, vocabulary, reserve_unknown):
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no instances")
        header = [h.strip() for h in header]
        for col in ("user", "item", "label"):
            if col not in header:
                raise DataError(f"{path}: missing required column {col!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            rows.append((lineno, [c.strip() for c in row]))
    if not rows:
        raise DataError(f"{path}: no instances")

    col = {h: i for i, h in enumerate(header)}
    names = ["user", "item"] + [h for h in header if h not in ("user", "item", "label", "timestamp")]
    if vocabulary is None:
        vocabulary = Vocabulary.build(
            {n: [r[col[n]] for _, r in rows] for n in names}, reserve_unknown
        )
    layout = vocabulary.layout(names)
    item_pos = layout.position("item")

    instances = []
    item_attrs: dict = {}
    for lineno, r in rows:
        try:
            label = float(r[col["label"]])
            ts = int(float(r[col["timestamp"]])) if "timestamp" in col else None
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        cats = [vocabulary.encode(n, r[col[n]]) for n in names]
        inst = encode_instance(cats, layout, label, ts)
        instances.append(inst)
        if len(names) > 2:
            item_attrs.setdefault(cats[item_pos], {p: cats[p] for p in range(2, len(names))})
    item_attrs = _item_functional(instances, item_attrs, layout)
    return LoadedData(instances, layout, vocabulary, item_attrs)


def _item_functional(instances, attrs, layout):
    # only columns that are a function of the item count as item attributes
    if not attrs:
        return {}
    keep = set(attrs and next(iter(attrs.values())).keys())
    for inst in instances:
        ref = attrs[inst.item]
        for p in list(keep):
            if inst.categories[p] != ref[p]:
                keep.discard(p)
    return {it: {p: c for p, c in a.items() if p in keep} for it, a in attrs.items()} if keep else {}


def _load_libfm(path, n):
    if n is None:
        meta = Path(str(path) + ".meta")
        if not meta.exists():
            raise DataError(f"{path}: libfm input needs n (pass n= or write {meta.name})")
        for line in meta.read_text().splitlines():
            k, _, v = line.partition("=")
            if k.strip() == "n":
                n = int(v)
        if n is None:
            raise DataError(f"{meta}: missing n=")
    instances = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                label = float(parts[0])
                pairs = sorted((int(i), float(v)) for i, v in (p.split(":") for p in parts[1:]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed line {line.strip()!r}") from None
            idx = [i for i, _ in pairs]
            if any(not 0 <= i < n for i in idx):
                raise DataError(f"{path}:{lineno}: index out of range [0, {n})")
            if len(set(idx)) != len(idx):
                raise DataError(f"{path}:{lineno}: duplicate index")
            instances.append(SparseInstance(label, tuple(idx), tuple(v for _, v in pairs)))
    if not instances:
        raise DataError(f"{path}: no instances")
    layout = FieldLayout((("x", n),))
    return LoadedData(instances, layout)


def write_tabular(path, rows, extra_fields=(), delimiter="\t"):
    """Write ``(user, item, label, timestamp, *extra)`` rows with a header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["user", "item", "label", "timestamp", *extra_fields])
        w.writerows(rows)


def write_libfm(path, instances, n=None):
    with open(path, "w") as fh:
        for inst in instances:
            feats = " ".join(f"{i}:{v:.17g}" for i, v in zip(inst.indices, inst.values))
            fh.write(f"{inst.label:g} {feats}\n")
    if n is not None:
        Path(str(path) + ".meta").write_text(f"n={n}\n")


# --------------------------------------------------------------------- splits
def split_rating(instances, ratios=(0.7, 0.2, 0.1), seed=0, layout=None):
    """Uniform random train/validation/test partition."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(instances)
    if n < 10:
        raise DataError(f"need at least 10 instances to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    parts = np.split(perm, [n_train, n_train + n_val])
    train, val, test = ([instances[i] for i in p] for p in parts)
    return DatasetSplit(train, val, test, layout)


def split_leave_one_out(instances, layout=None):
    """Hold out each user's latest interaction.

    Ties on the timestamp go to the larger item id.  Users with a single
    interaction stay entirely in train.
    """
    by_user = defaultdict(list)
    for pos, inst in enumerate(instances):
        if inst.timestamp is None:
            raise DataError("leave-one-out split needs timestamps")
        by_user[inst.user].append(pos)
    held = set()
    for positions in by_user.values():
        if len(positions) < 2:
            continue
        held.add(max(positions, key=lambda p: (instances[p].timestamp, instances[p].item)))
    train = [x for p, x in enumerate(instances) if p not in held]
    test = sorted((instances[p] for p in held), key=lambda x: x.user)
    return DatasetSplit(train, [], test, layout)


# ----------------------------------------------------------- negative sampling
def _items_of(layout, n_items=None):
    if n_items is not None:
        return n_items
    if layout is None or layout.item_field is None:
        raise DataError("cannot infer the item universe without an item field")
    return layout.cardinalities[layout.position(layout.item_field)]


def sample_negatives(train, layout, ratio=2, seed=0, item_attributes=None, n_items=None,
                     exclude=None):
    """Pair every positive with ``ratio`` sampled items the user never touched.

    Positives are relabelled +1 and negatives -1.  Negatives copy the
    positive's context fields; item attribute fields follow the sampled item
    when ``item_attributes`` is given.  ``exclude`` optionally names extra
    items (per field id) never to be sampled, such as a reserved unknown slot.
    """
    if ratio < 0:
        raise DataError("ratio must be >= 0")
    pos_train = [replace(x, label=1.0) if x.label != 1.0 else x for x in train]
    if ratio == 0:
        return pos_train
    n_items = _items_of(layout, n_items)
    seen = defaultdict(set)
    for x in pos_train:
        seen[x.user].add(x.item)
    banned = set(exclude or ())
    rng = np.random.default_rng(seed)
    out = list(pos_train)
    short = 0
    for x in pos_train:
        forbidden = seen[x.user] | banned
        avail = n_items - sum(1 for f in forbidden if 0 <= f < n_items)
        picks: list[int] = []
        if avail <= ratio:
            picks = [i for i in range(n_items) if i not in forbidden]
        else:
            chosen = set()
            while len(picks) < ratio:
                it = int(rng.integers(n_items))
                if it in forbidden or it in chosen:
                    continue
                chosen.add(it)
                picks.append(it)
        if len(picks) < ratio:
            short += 1
        out.extend(with_item(x, it, layout, item_attributes, label=-1.0) for it in picks)
    if short:
        log.warning("%d positives got fewer than %d negatives (users saturated the catalogue)",
                    short, ratio)
    return out


def build_eval_candidates(user, positive_item, all_items, known, count=99, seed=0):
    """``count`` distinct unseen items for ``user`` plus the positive (last).

    The sampler is seeded from ``(seed, user)`` so every model variant sees
    the same candidates.
    """
    known = set(known) | {positive_item}
    pool = np.array(sorted(set(all_items) - known), dtype=np.int64)
    if len(pool) < count:
        raise DataError(f"user {user}: need {count} candidate items, only {len(pool)} available")
    rng = np.random.default_rng([int(seed), int(user)])
    picks = rng.choice(len(pool), size=count, replace=False)
    return [int(i) for i in pool[np.sort(picks)]] + [int(positive_item)]


class CandidateBuilder:
    """Callable ``(user, positive) -> candidates`` over a fixed interaction log."""

    def __init__(self, instances, n_items, count=99, seed=0, exclude=()):
        self.known = defaultdict(set)
        for x in instances:
            if x.label > 0:
                self.known[x.user].add(x.item)
        self.items = range(n_items)
        self.count = count
        self.seed = seed
        self.exclude = set(exclude)

    def __call__(self, user, positive):
        return build_eval_candidates(
            user, positive, self.items, self.known[user] | self.exclude, self.count, self.seed
        )


# --------------------------------------------------------------- array views
@dataclass
class EncodedSet:
    """Dense index/value/label arrays; short rows are padded with value 0."""

    indices: np.ndarray  # (N, m) intp
    values: np.ndarray  # (N, m) float64
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, rows):
        return EncodedSet(self.indices[rows], self.values[rows], self.labels[rows])


def to_arrays(instances):
    if isinstance(instances, EncodedSet):
        return instances
    N = len(instances)
    m = max((len(x.indices) for x in instances), default=0)
    idx = np.zeros((N, m), dtype=np.intp)
    val = np.zeros((N, m), dtype=np.float64)
    for r, x in enumerate(instances):
        k = len(x.indices)
        idx[r, :k] = x.indices
        val[r, :k] = x.values
    lab = np.array([x.label for x in instances], dtype=np.float64)
    return EncodedSet(idx, val, lab)
