"""Temporal user-item interaction graph: ingestion, filtering, indexing, sampling."""
from __future__ import annotations

import math
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

USER = "user"
ITEM = "item"
FORMATS = ("movielens_dat", "amazon_csv", "canonical_tsv")


class IngestError(ValueError):
    pass


class UnknownNodeError(KeyError):
    pass


class SplitError(ValueError):
    pass


def other_kind(kind: str) -> str:
    return ITEM if kind == USER else USER


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    position: int = 0

    def sort_key(self):
        return (self.timestamp, self.user_id, self.item_id)


@dataclass
class InteractionLog:
    records: list[Interaction]
    user_count: int
    item_count: int
    # original labels, indexed by compact id
    user_labels: list[str] = field(default_factory=list)
    item_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.records = sorted(self.records, key=Interaction.sort_key)
        if not self.user_labels:
            self.user_labels = [str(i) for i in range(self.user_count)]
        if not self.item_labels:
            self.item_labels = [str(i) for i in range(self.item_count)]

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, records: Iterable[Interaction]) -> "InteractionLog":
        """Same id universe, different records."""
        return InteractionLog(list(records), self.user_count, self.item_count,
                              list(self.user_labels), list(self.item_labels))


def _label_order(labels: Iterable[str]) -> list[str]:
    labels = set(labels)
    if all(s.lstrip("-").isdigit() for s in labels):
        return sorted(labels, key=int)
    return sorted(labels)


def compact(triples: list[tuple[str, str, int]]) -> InteractionLog:
    """Build a log from (user_label, item_label, timestamp), assigning 0-based ids."""
    users = _label_order(u for u, _, _ in triples)
    items = _label_order(v for _, v, _ in triples)
    uid = {u: i for i, u in enumerate(users)}
    iid = {v: i for i, v in enumerate(items)}
    recs = [Interaction(uid[u], iid[v], t) for u, v, t in triples]
    return InteractionLog(recs, len(users), len(items), users, items)


def _parse_line(line: str, fmt: str) -> tuple[str, str, str]:
    if fmt == "movielens_dat":
        parts = line.split("::")
        if len(parts) != 4:
            raise ValueError("expected user::item::rating::timestamp")
        return parts[0], parts[1], parts[3]
    if fmt == "amazon_csv":
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError("expected item,user,rating,timestamp")
        return parts[1], parts[0], parts[3]
    parts = line.split("\t")
    if len(parts) != 3:
        raise ValueError("expected user<TAB>item<TAB>timestamp")
    return parts[0], parts[1], parts[2]


def _read_triples(path: str | Path, fmt: str) -> tuple[list[tuple[str, str, int]], list[str]]:
    if fmt not in FORMATS:
        raise IngestError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    triples, comments = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            try:
                u, v, ts = _parse_line(line, fmt)
                u, v, ts = u.strip(), v.strip(), ts.strip()
                if not u or not v:
                    raise ValueError("empty id")
                t = int(ts)
                if t < 0:
                    raise ValueError("negative timestamp")
            except ValueError as e:
                raise IngestError(f"line {lineno}: malformed record {line!r} ({e})") from None
            triples.append((u, v, t))
    if not triples:
        raise IngestError(f"{path}: no interactions")
    return triples, comments


def ingest(path: str | Path, fmt: str) -> InteractionLog:
    """Parse a raw interaction file; ratings are dropped and ids compacted."""
    triples, _ = _read_triples(path, fmt)
    return compact(triples)


def read_canonical(path: str | Path) -> InteractionLog:
    """Read a canonical TSV whose ids are already compact.

    A ``# users=N items=M`` header fixes the id universe, so splits written
    separately keep identical ids.
    """
    triples, comments = _read_triples(path, "canonical_tsv")
    n_users = n_items = None
    for c in comments:
        kv = dict(tok.split("=", 1) for tok in c.split() if "=" in tok)
        if "users" in kv and "items" in kv:
            n_users, n_items = int(kv["users"]), int(kv["items"])
    recs = []
    for lineno, (u, v, t) in enumerate(triples, 1):
        if not (u.isdigit() and v.isdigit()):
            raise IngestError(f"record {lineno}: ids must be compact integers")
        recs.append(Interaction(int(u), int(v), t))
    n_users = n_users if n_users is not None else 1 + max(r.user_id for r in recs)
    n_items = n_items if n_items is not None else 1 + max(r.item_id for r in recs)
    if any(r.user_id >= n_users or r.item_id >= n_items for r in recs):
        raise IngestError(f"{path}: id outside declared universe")
    return InteractionLog(recs, n_users, n_items)


def write_canonical(log: InteractionLog, path: str | Path, header: Iterable[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        fh.write(f"# users={log.user_count} items={log.item_count}\n")
        for r in log.records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\n")


def write_remap(log: InteractionLog, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, labels in (("users.tsv", log.user_labels), ("items.tsv", log.item_labels)):
        with open(directory / name, "w", encoding="utf-8") as fh:
            for i, lab in enumerate(labels):
                fh.write(f"{lab}\t{i}\n")


def read_remap(path: str | Path) -> list[str]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                lab, idx = line.rstrip("\n").split("\t")
                pairs.append((int(idx), lab))
    return [lab for _, lab in sorted(pairs)]


def recompact(log: InteractionLog) -> InteractionLog:
    """Drop ids with no records and renumber, keeping relative order and labels."""
    users = sorted({r.user_id for r in log.records})
    items = sorted({r.item_id for r in log.records})
    um = {u: i for i, u in enumerate(users)}
    im = {v: i for i, v in enumerate(items)}
    recs = [Interaction(um[r.user_id], im[r.item_id], r.timestamp) for r in log.records]
    return InteractionLog(recs, len(users), len(items),
                          [log.user_labels[u] for u in users],
                          [log.item_labels[v] for v in items])


def k_core_filter(log: InteractionLog, min_user: int, min_item: int) -> InteractionLog:
    """Iteratively drop users/items below the interaction thresholds until stable."""
    if min_user < 1 or min_item < 1:
        raise ValueError("thresholds must be >= 1")
    recs = list(log.records)
    while True:
        uc = Counter(r.user_id for r in recs)
        ic = Counter(r.item_id for r in recs)
        kept = [r for r in recs if uc[r.user_id] >= min_user and ic[r.item_id] >= min_item]
        if len(kept) == len(recs):
            break
        recs = kept
    return recompact(log.subset(recs))


# --------------------------------------------------------------------- graph

class TemporalBipartiteGraph:
    """Immutable per-user / per-item chronological adjacency."""

    def __init__(self, per_user, per_item, user_count: int, item_count: int):
        self.per_user: tuple[tuple[tuple[int, int], ...], ...] = per_user
        self.per_item: tuple[tuple[tuple[int, int], ...], ...] = per_item
        self.user_count = user_count
        self.item_count = item_count
        self._times = {
            USER: tuple(tuple(t for _, t in lst) for lst in per_user),
            ITEM: tuple(tuple(t for _, t in lst) for lst in per_item),
        }
        self._adj = {USER: per_user, ITEM: per_item}
        self.neighborhood = lru_cache(maxsize=1 << 18)(self._neighborhood)

    @property
    def edge_count(self) -> int:
        return sum(len(x) for x in self.per_user)

    def count(self, kind: str) -> int:
        return self.user_count if kind == USER else self.item_count

    def history(self, kind: str, node: int) -> tuple[tuple[int, int], ...]:
        if not 0 <= node < self.count(kind):
            raise UnknownNodeError(f"unknown {kind} {node}")
        return self._adj[kind][node]

    def times(self, kind: str, node: int) -> tuple[int, ...]:
        return self._times[kind][node]

    def count_before(self, kind: str, node: int, t_q) -> int:
        """Number of interactions of ``node`` strictly before ``t_q``."""
        self.history(kind, node)
        return bisect_left(self._times[kind][node], t_q)

    def _neighborhood(self, kind: str, node: int, t_q, n: int) -> "Neighborhood":
        if n < 1:
            raise ValueError("neighborhood width must be >= 1")
        hist = self.history(kind, node)
        end = bisect_left(self._times[kind][node], t_q)
        real = hist[max(0, end - n):end]
        pad = n - len(real)
        entries: list[Interaction | None] = [None] * pad
        for pos, (other, t) in enumerate(real, 1):
            if kind == USER:
                entries.append(Interaction(node, other, t, pos))
            else:
                entries.append(Interaction(other, node, t, pos))
        return Neighborhood(node, kind, t_q, tuple(entries))


def build_graph(log: InteractionLog) -> TemporalBipartiteGraph:
    pu: list[list[tuple[int, int]]] = [[] for _ in range(log.user_count)]
    pi: list[list[tuple[int, int]]] = [[] for _ in range(log.item_count)]
    for r in log.records:
        pu[r.user_id].append((r.item_id, r.timestamp))
        pi[r.item_id].append((r.user_id, r.timestamp))
    pu = tuple(tuple(sorted(x, key=lambda e: (e[1], e[0]))) for x in pu)
    pi = tuple(tuple(sorted(x, key=lambda e: (e[1], e[0]))) for x in pi)
    return TemporalBipartiteGraph(pu, pi, log.user_count, log.item_count)


@dataclass(frozen=True)
class Neighborhood:
    """Latest interactions of a node strictly before ``query_time``.

    ``entries`` is left padded with ``None``; real slots carry positions
    1..k counted from the oldest.
    """
    owner: int | None
    kind: str
    query_time: float
    entries: tuple[Interaction | None, ...]

    @property
    def mask(self) -> tuple[bool, ...]:
        return tuple(e is not None for e in self.entries)

    @property
    def width(self) -> int:
        return len(self.entries)

    def real(self) -> list[Interaction]:
        return [e for e in self.entries if e is not None]

    def endpoint(self, e: Interaction) -> int:
        """The opposite-kind node of an entry."""
        return e.item_id if self.kind == USER else e.user_id


def user_neighborhood(g: TemporalBipartiteGraph, u: int, t_q, n: int) -> Neighborhood:
    return g.neighborhood(USER, u, t_q, n)


def item_neighborhood(g: TemporalBipartiteGraph, v: int, t_q, n: int) -> Neighborhood:
    return g.neighborhood(ITEM, v, t_q, n)


def pad_neighborhood(kind: str, t_q, n: int) -> Neighborhood:
    return Neighborhood(None, kind, t_q, (None,) * n)


@dataclass(frozen=True)
class NodeFlow:
    """``layers[l-1]`` holds the neighborhoods of layer ``l``; the last is the root's."""
    root: tuple[int, str, float]
    layers: tuple[tuple[Neighborhood, ...], ...]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def interactions(self) -> Iterable[Interaction]:
        for layer in self.layers:
            for nb in layer:
                yield from nb.real()


def build_node_flow(g: TemporalBipartiteGraph, root_id: int, root_kind: str, t_q,
                    depth: int, widths) -> NodeFlow:
    """Breadth-first expansion; ``widths[l-1]`` is the width of layer ``l``."""
    if depth < 1:
        raise ValueError("node flow depth must be >= 1")
    if len(widths) != depth:
        raise ValueError("need one width per layer")
    top = (g.neighborhood(root_kind, root_id, t_q, widths[depth - 1]),)
    layers = [top]
    for l in range(depth, 1, -1):
        w = widths[l - 2]
        nxt = []
        for nb in layers[-1]:
            child_kind = other_kind(nb.kind)
            for e in nb.entries:
                if e is None:
                    nxt.append(pad_neighborhood(child_kind, nb.query_time, w))
                else:
                    nxt.append(g.neighborhood(child_kind, nb.endpoint(e), e.timestamp, w))
        layers.append(tuple(nxt))
    return NodeFlow((root_id, root_kind, t_q), tuple(reversed(layers)))


# -------------------------------------------------------------------- splits

def _floor_count(n: int, frac: float) -> int:
    return int(math.floor(n * frac + 1e-9))


def chronological_split(log: InteractionLog, train_frac: float, valid_frac: float):
    """Cut the time-sorted log into train/valid/test by record count."""
    if not (train_frac > 0 and valid_frac > 0 and train_frac + valid_frac < 1):
        raise SplitError("need 0 < train_frac, valid_frac and train_frac + valid_frac < 1")
    n = len(log.records)
    if n < 3:
        raise SplitError("need at least 3 records to split")
    a = _floor_count(n, train_frac)
    b = a + _floor_count(n, valid_frac)
    r = log.records
    return log.subset(r[:a]), log.subset(r[a:b]), log.subset(r[b:])


def leave_last_out_split(log: InteractionLog) -> tuple[InteractionLog, list[Interaction]]:
    """Hold out each user's latest interaction (ties go to the larger item id)."""
    last: dict[int, Interaction] = {}
    counts = Counter()
    for r in log.records:
        counts[r.user_id] += 1
        cur = last.get(r.user_id)
        if cur is None or (r.timestamp, r.item_id) >= (cur.timestamp, cur.item_id):
            last[r.user_id] = r
    single = sorted(u for u, c in counts.items() if c < 2)
    if single:
        raise SplitError(f"users with a single interaction cannot be split: {single[:10]}")
    test_ids = {id(x) for x in last.values()}
    train = [r for r in log.records if id(r) not in test_ids]
    test = sorted(last.values(), key=lambda r: r.user_id)
    return log.subset(train), test


def last_per_user(records: Iterable[Interaction]) -> list[Interaction]:
    last: dict[int, Interaction] = {}
    for r in records:
        cur = last.get(r.user_id)
        if cur is None or (r.timestamp, r.item_id) >= (cur.timestamp, cur.item_id):
            last[r.user_id] = r
    return sorted(last.values(), key=lambda r: r.user_id)
