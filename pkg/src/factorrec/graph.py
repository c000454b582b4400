"""Ingestion, the immutable user/item/entity graph, and the user-holdout split."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import SeededRng

GRAPH_FORMAT_VERSION = 1


class ParseError(ValueError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class GraphError(ValueError):
    pass


class NodeKind(enum.Enum):
    User = "user"
    Item = "item"
    Entity = "entity"


@dataclass(frozen=True)
class NodeRef:
    kind: NodeKind
    index: int


def _read_fields(path, allowed):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split("\t")]
        if len(fields) not in allowed:
            raise ParseError(path, line_no, f"expected {sorted(allowed)} tab-separated fields, got {len(fields)}")
        if any(f == "" for f in fields):
            raise ParseError(path, line_no, "empty field")
        rows.append(fields)
    return rows


def _dedup(pairs):
    seen = set()
    out = []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def load_interactions(path):
    """Read ``user<TAB>item`` lines into deduplicated pairs, in file order."""
    rows = _read_fields(path, {2})
    if not rows:
        raise ParseError(path, 0, "no interactions in file")
    return _dedup([(r[0], r[1]) for r in rows])


def load_knowledge_links(item_entity_path, entity_entity_path=None):
    """Read ``head<TAB>[relation<TAB>]tail`` files; relation columns are dropped."""
    ie = _dedup([(r[0], r[-1]) for r in _read_fields(item_entity_path, {2, 3})])
    ee = []
    if entity_entity_path is not None:
        ee = _dedup([(r[0], r[-1]) for r in _read_fields(entity_entity_path, {2, 3})])
    return ie, ee


@dataclass(frozen=True)
class IdMap:
    users: tuple
    items: tuple
    entities: tuple

    def lookup(self, kind: NodeKind, string_id: str) -> NodeRef:
        table = {NodeKind.User: self.users, NodeKind.Item: self.items, NodeKind.Entity: self.entities}[kind]
        try:
            return NodeRef(kind, table.index(string_id))
        except ValueError:
            raise KeyError(f"unknown {kind.value} id {string_id!r}") from None

    def to_tsv(self) -> str:
        lines = []
        for kind, names in ((NodeKind.User, self.users), (NodeKind.Item, self.items), (NodeKind.Entity, self.entities)):
            lines.extend(f"{kind.value}\t{name}\t{i}" for i, name in enumerate(names))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "IdMap":
        tables = {k: [] for k in NodeKind}
        for line in text.splitlines():
            if not line:
                continue
            kind, name, idx = line.split("\t")
            kind = NodeKind(kind)
            if int(idx) != len(tables[kind]):
                raise GraphError(f"id-map indices for {kind.value} are not dense")
            tables[kind].append(name)
        return cls(tuple(tables[NodeKind.User]), tuple(tables[NodeKind.Item]), tuple(tables[NodeKind.Entity]))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).digest()


def _csr(n_rows, rows, cols):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    if len(rows):
        keep = np.ones(len(rows), dtype=bool)
        keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        rows, cols = rows[keep], cols[keep]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    indptr.setflags(write=False)
    cols.setflags(write=False)
    return indptr, cols


@dataclass(frozen=True)
class HeteroGraph:
    """Immutable tri-partite adjacency in CSR form (all arrays read-only)."""

    n_users: int
    n_items: int
    n_entities: int
    ui_indptr: np.ndarray
    ui_indices: np.ndarray
    ie_indptr: np.ndarray
    ie_indices: np.ndarray
    ee_indptr: np.ndarray
    ee_indices: np.ndarray
    ids: IdMap

    def items_of(self, u: int) -> np.ndarray:
        return self.ui_indices[self.ui_indptr[u] : self.ui_indptr[u + 1]]

    def entities_of(self, t: int) -> np.ndarray:
        return self.ie_indices[self.ie_indptr[t] : self.ie_indptr[t + 1]]

    def user_degree(self) -> np.ndarray:
        return np.diff(self.ui_indptr)

    @property
    def n_interactions(self) -> int:
        return int(len(self.ui_indices))

    def interactions(self):
        users = np.repeat(np.arange(self.n_users), np.diff(self.ui_indptr))
        return users, np.asarray(self.ui_indices)

    def with_user_items(self, users, items) -> "HeteroGraph":
        indptr, indices = _csr(self.n_users, users, items)
        return HeteroGraph(
            self.n_users, self.n_items, self.n_entities, indptr, indices,
            self.ie_indptr, self.ie_indices, self.ee_indptr, self.ee_indices, self.ids,
        )

    def counts(self):
        return self.n_users, self.n_items, self.n_entities


def build_graph(interactions, item_entity, entity_entity=()):
    """Assign dense indices in first-appearance order and build CSR adjacencies."""
    if not interactions:
        raise GraphError("no interactions: graph would have no users")
    users, items, entities = {}, {}, {}

    def idx(table, key):
        if key not in table:
            table[key] = len(table)
        return table[key]

    item_ids = {t for _, t in interactions} | {t for t, _ in item_entity}
    entity_ids = {e for _, e in item_entity} | {x for pair in entity_entity for x in pair}
    clash = item_ids & entity_ids
    if clash:
        raise GraphError(f"id {sorted(clash)[0]!r} used as both item and entity")
    ui = [(idx(users, u), idx(items, t)) for u, t in interactions]
    ie = [(idx(items, t), idx(entities, e)) for t, e in item_entity]
    ee = [(idx(entities, a), idx(entities, b)) for a, b in entity_entity]

    ids = IdMap(tuple(users), tuple(items), tuple(entities))
    nu, nt, ne = len(users), len(items), len(entities)
    ui_p, ui_i = _csr(nu, [p[0] for p in ui], [p[1] for p in ui])
    ie_p, ie_i = _csr(nt, [p[0] for p in ie], [p[1] for p in ie])
    ee_p, ee_i = _csr(ne, [p[0] for p in ee], [p[1] for p in ee])
    return HeteroGraph(nu, nt, ne, ui_p, ui_i, ie_p, ie_i, ee_p, ee_i, ids)


def load_graph_from_files(interactions_path, item_entity_path, entity_entity_path=None):
    ie, ee = load_knowledge_links(item_entity_path, entity_entity_path)
    return build_graph(load_interactions(interactions_path), ie, ee)


@dataclass(frozen=True)
class DatasetSplit:
    train_graph: HeteroGraph
    val_users: np.ndarray
    test_users: np.ndarray
    val_truth: dict
    test_truth: dict
    seed: int

    @property
    def held_out(self):
        return np.concatenate([self.val_users, self.test_users])

    def truth(self, group: str):
        if group == "val":
            return self.val_users, self.val_truth
        if group == "test":
            return self.test_users, self.test_truth
        raise ValueError(f"unknown user group {group!r}")


def split_holdout(graph: HeteroGraph, seed: int, n_val=200, n_test=200, train_frac=0.8) -> DatasetSplit:
    """Hold out ``n_val`` + ``n_test`` users; keep ``train_frac`` of each one's items in training.

    Only users with at least two interactions are eligible, so both sides of
    every held-out user's split are nonempty.
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    if n_val < 0 or n_test < 0 or n_val + n_test > graph.n_users:
        raise ValueError("n_val + n_test exceeds the user count")
    deg = graph.user_degree()
    pool = np.flatnonzero(deg >= 2)
    if len(pool) < n_val + n_test:
        raise GraphError(f"only {len(pool)} users have >= 2 interactions; need {n_val + n_test}")
    rng = SeededRng(seed)
    chosen = pool[rng.permutation(len(pool))[: n_val + n_test]]
    val_users = np.sort(chosen[:n_val])
    test_users = np.sort(chosen[n_val:])

    truth_rng = rng.spawn(1)
    held = set(chosen.tolist())
    truth = {}
    tr_users, tr_items = [], []
    for u in range(graph.n_users):
        items = graph.items_of(u)
        if u not in held:
            tr_users.extend([u] * len(items))
            tr_items.extend(items.tolist())
            continue
        n = len(items)
        n_train = min(max(math.ceil(train_frac * n - 1e-9), 1), n - 1)
        perm = truth_rng.permutation(n)
        keep = np.sort(items[perm[:n_train]])
        truth[u] = frozenset(items[perm[n_train:]].tolist())
        tr_users.extend([u] * len(keep))
        tr_items.extend(keep.tolist())
    train_graph = graph.with_user_items(tr_users, tr_items)
    return DatasetSplit(
        train_graph,
        val_users,
        test_users,
        {int(u): truth[u] for u in val_users},
        {int(u): truth[u] for u in test_users},
        int(seed),
    )


def save_graph(path, graph: HeteroGraph, split: DatasetSplit | None = None):
    arrays = {
        "format_version": np.array([GRAPH_FORMAT_VERSION]),
        "counts": np.array(graph.counts(), dtype=np.int64),
        "ui_indptr": graph.ui_indptr, "ui_indices": graph.ui_indices,
        "ie_indptr": graph.ie_indptr, "ie_indices": graph.ie_indices,
        "ee_indptr": graph.ee_indptr, "ee_indices": graph.ee_indices,
        "idmap": np.frombuffer(graph.ids.to_tsv().encode("utf-8"), dtype=np.uint8),
    }
    if split is not None:
        arrays["split_seed"] = np.array([split.seed])
        arrays["train_ui_indptr"] = split.train_graph.ui_indptr
        arrays["train_ui_indices"] = split.train_graph.ui_indices
        for group, users, truth in (("val", split.val_users, split.val_truth), ("test", split.test_users, split.test_truth)):
            arrays[f"{group}_users"] = users
            lens = np.array([len(truth[int(u)]) for u in users], dtype=np.int64)
            arrays[f"{group}_truth_indptr"] = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
            arrays[f"{group}_truth_indices"] = np.array(
                [t for u in users for t in sorted(truth[int(u)])], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_graph(path):
    """Inverse of :func:`save_graph`; returns ``(graph, split_or_None)``."""
    with np.load(path) as z:
        version = int(z["format_version"][0])
        if version != GRAPH_FORMAT_VERSION:
            raise GraphError(f"unsupported graph format version {version}")
        ids = IdMap.from_tsv(bytes(z["idmap"]).decode("utf-8"))
        nu, nt, ne = (int(x) for x in z["counts"])

        def ro(a):
            a = np.array(a, dtype=np.int64)
            a.setflags(write=False)
            return a

        graph = HeteroGraph(nu, nt, ne, ro(z["ui_indptr"]), ro(z["ui_indices"]), ro(z["ie_indptr"]),
                            ro(z["ie_indices"]), ro(z["ee_indptr"]), ro(z["ee_indices"]), ids)
        if "split_seed" not in z:
            return graph, None
        train = HeteroGraph(nu, nt, ne, ro(z["train_ui_indptr"]), ro(z["train_ui_indices"]),
                            graph.ie_indptr, graph.ie_indices, graph.ee_indptr, graph.ee_indices, ids)
        parts = {}
        for group in ("val", "test"):
            users = np.array(z[f"{group}_users"], dtype=np.int64)
            ptr, idx = z[f"{group}_truth_indptr"], z[f"{group}_truth_indices"]
            parts[group] = (users, {int(u): frozenset(idx[ptr[i]:ptr[i + 1]].tolist()) for i, u in enumerate(users)})
        split = DatasetSplit(train, parts["val"][0], parts["test"][0], parts["val"][1], parts["test"][1],
                             int(z["split_seed"][0]))
        return graph, split
