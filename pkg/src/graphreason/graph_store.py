"""Text-attributed graph: loading, typed neighborhoods and lexical node retrieval."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .text import tokenize

DEFAULT_NEIGHBOR_CAP = 50


class GraphError(Exception):
    """Base class for graph loading and lookup failures."""


class MalformedRecordError(GraphError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DanglingEdgeError(GraphError):
    def __init__(self, node_id: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"edge endpoint {node_id!r} does not exist{where}")
        self.node_id = node_id
        self.line = line


class DuplicateNodeError(GraphError):
    def __init__(self, node_id: str, line: int):
        super().__init__(f"line {line}: duplicate node id {node_id!r}")
        self.node_id = node_id
        self.line = line


class UnknownNodeError(GraphError, KeyError):
    def __init__(self, node_id: str):
        super().__init__(f"unknown node id {node_id!r}")
        self.node_id = node_id

    def __str__(self) -> str:
        return self.args[0]


class UnknownFeatureError(GraphError, KeyError):
    def __init__(self, node_id: str, key: str):
        super().__init__(f"node {node_id!r} has no feature {key!r}")
        self.node_id = node_id
        self.key = key

    def __str__(self) -> str:
        return self.args[0]


class UnknownEdgeTypeError(GraphError, KeyError):
    def __init__(self, edge_type: str):
        super().__init__(f"unknown edge type {edge_type!r}")
        self.edge_type = edge_type

    def __str__(self) -> str:
        return self.args[0]


class IndexMismatchError(GraphError):
    pass


@dataclass(frozen=True)
class GraphSchema:
    node_types: tuple[str, ...] = ()
    edge_types: tuple[str, ...] = ()
    feature_keys_per_node_type: dict[str, tuple[str, ...]] = field(default_factory=dict)
    primary_feature_key_per_node_type: dict[str, str] = field(default_factory=dict)
    description: str = "An empty graph."
    symmetric_edge_types: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError("schema description must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSchema":
        return cls(
            node_types=tuple(d.get("node_types", ())),
            edge_types=tuple(d.get("edge_types", ())),
            feature_keys_per_node_type={
                k: tuple(v) for k, v in d.get("feature_keys", {}).items()
            },
            primary_feature_key_per_node_type=dict(d.get("primary_feature", {})),
            description=d.get("description", ""),
            symmetric_edge_types=tuple(d.get("symmetric_edge_types", ())),
        )

    def to_dict(self) -> dict:
        return {
            "node_types": list(self.node_types),
            "edge_types": list(self.edge_types),
            "feature_keys": {k: list(v) for k, v in self.feature_keys_per_node_type.items()},
            "primary_feature": dict(self.primary_feature_key_per_node_type),
            "description": self.description,
            "symmetric_edge_types": list(self.symmetric_edge_types),
        }


@dataclass(frozen=True)
class Node:
    id: str
    node_type: str
    features: dict[str, str]


class Graph:
    """Immutable typed directed graph with keyed textual node features.

    Adjacency lists are sorted by node id; use :func:`load_graph` or
    :meth:`Graph.build` to construct one.
    """

    def __init__(self, nodes: dict[str, Node], adjacency: dict[tuple[str, str], list[str]],
                 schema: GraphSchema):
        self.nodes = nodes
        self._adj = adjacency
        self.schema = schema
        self._edge_types = frozenset(schema.edge_types)
        self._types_by_node: dict[str, list[str]] = defaultdict(list)
        for (src, etype), dsts in sorted(adjacency.items()):
            if dsts:
                self._types_by_node[src].append(etype)

    @classmethod
    def build(cls, schema: GraphSchema, nodes: Iterable[Node],
              edges: Iterable[tuple[str, str, str]]) -> "Graph":
        """Build from in-memory records; raises the same errors as :func:`load_graph`."""
        node_map: dict[str, Node] = {}
        for i, n in enumerate(nodes, start=1):
            _check_node(n, schema, i)
            if n.id in node_map:
                raise DuplicateNodeError(n.id, i)
            node_map[n.id] = n
        adj: dict[tuple[str, str], set[str]] = defaultdict(set)
        for src, dst, etype in edges:
            _add_edge(adj, node_map, schema, src, dst, etype, None)
        return cls(node_map, {k: sorted(v) for k, v in adj.items()}, schema)

    @property
    def num_edges(self) -> int:
        return sum(len(v) for v in self._adj.values())

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def node_feature(self, node_id: str, key: str) -> str:
        node = self.node(node_id)
        try:
            return node.features[key]
        except KeyError:
            raise UnknownFeatureError(node_id, key) from None

    def primary_name(self, node_id: str) -> str:
        node = self.node(node_id)
        key = self.schema.primary_feature_key_per_node_type.get(node.node_type)
        return node.features.get(key, "") if key else ""

    def _check_edge_type(self, edge_type: str) -> None:
        if edge_type not in self._edge_types:
            raise UnknownEdgeTypeError(edge_type)

    def neighbors(self, node_id: str, edge_type: str, cap: int | None = None) -> list[str]:
        """Sorted neighbor ids; truncated to ``cap`` when given."""
        self.node(node_id)
        self._check_edge_type(edge_type)
        ids = self._adj.get((node_id, edge_type), [])
        return list(ids if cap is None else ids[:cap])

    def neighbors_page(self, node_id: str, edge_type: str,
                       cap: int = DEFAULT_NEIGHBOR_CAP) -> tuple[list[str], bool]:
        ids = self.neighbors(node_id, edge_type)
        return ids[:cap], len(ids) > cap

    def degree(self, node_id: str, edge_type: str) -> int:
        self.node(node_id)
        self._check_edge_type(edge_type)
        return len(self._adj.get((node_id, edge_type), ()))

    def incident_edge_types(self, node_id: str) -> list[str]:
        """Edge types with at least one outgoing edge from the node, sorted."""
        self.node(node_id)
        return list(self._types_by_node.get(node_id, ()))

    def edges(self) -> Iterable[tuple[str, str, str]]:
        for (src, etype), dsts in sorted(self._adj.items()):
            for dst in dsts:
                yield src, dst, etype

    def dump(self, path: str | Path) -> None:
        """Write the graph in the JSON-lines format read by :func:`load_graph`."""
        sym = set(self.schema.symmetric_edge_types)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"schema": self.schema.to_dict()}, sort_keys=True) + "\n")
            for nid in sorted(self.nodes):
                n = self.nodes[nid]
                rec = {"id": n.id, "type": n.node_type, "features": n.features}
                fh.write(json.dumps({"node": rec}, sort_keys=True) + "\n")
            for src, dst, etype in self.edges():
                if etype in sym and dst < src:
                    continue
                rec = {"src": src, "dst": dst, "type": etype}
                fh.write(json.dumps({"edge": rec}, sort_keys=True) + "\n")


def _check_node(n: Node, schema: GraphSchema, line: int) -> None:
    if not isinstance(n.id, str) or not n.id:
        raise MalformedRecordError(line, "node id must be a non-empty string")
    if schema.node_types and n.node_type not in schema.node_types:
        raise MalformedRecordError(line, f"unknown node type {n.node_type!r}")
    for k, v in n.features.items():
        if not k or not isinstance(v, str):
            raise MalformedRecordError(line, "feature keys must be non-empty and values text")
    primary = schema.primary_feature_key_per_node_type.get(n.node_type)
    if primary is None or primary not in n.features:
        raise MalformedRecordError(
            line, f"node {n.id!r} lacks the primary feature for type {n.node_type!r}")


def _add_edge(adj, node_map, schema, src, dst, etype, line):
    if etype not in schema.edge_types:
        raise MalformedRecordError(line or 0, f"unknown edge type {etype!r}")
    for end in (src, dst):
        if end not in node_map:
            raise DanglingEdgeError(end, line)
    adj[(src, etype)].add(dst)
    if etype in schema.symmetric_edge_types:
        adj[(dst, etype)].add(src)


def load_graph(path: str | Path) -> Graph:
    """Read a JSON-lines graph file.

    The first non-blank line must be a ``{"schema": ...}`` record; the rest are
    ``{"node": ...}`` or ``{"edge": ...}`` records in any order. An empty file
    yields an empty graph.
    """
    schema: GraphSchema | None = None
    node_map: dict[str, Node] = {}
    pending_edges: list[tuple[str, str, str, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or len(rec) != 1:
                raise MalformedRecordError(lineno, "expected exactly one of schema/node/edge")
            (kind, body), = rec.items()
            if schema is None:
                if kind != "schema":
                    raise MalformedRecordError(lineno, "first record must be the schema")
                try:
                    schema = GraphSchema.from_dict(body)
                except (ValueError, TypeError, AttributeError) as exc:
                    raise MalformedRecordError(lineno, f"bad schema: {exc}") from None
                continue
            if kind == "node":
                try:
                    n = Node(id=body["id"], node_type=body["type"],
                             features=dict(body.get("features", {})))
                except (KeyError, TypeError):
                    raise MalformedRecordError(lineno, "node needs id, type, features") from None
                _check_node(n, schema, lineno)
                if n.id in node_map:
                    raise DuplicateNodeError(n.id, lineno)
                node_map[n.id] = n
            elif kind == "edge":
                try:
                    pending_edges.append((body["src"], body["dst"], body["type"], lineno))
                except (KeyError, TypeError):
                    raise MalformedRecordError(lineno, "edge needs src, dst, type") from None
            elif kind == "schema":
                raise MalformedRecordError(lineno, "schema record may appear only once")
            else:
                raise MalformedRecordError(lineno, f"unknown record kind {kind!r}")
    if schema is None:
        return Graph({}, {}, GraphSchema())
    adj: dict[tuple[str, str], set[str]] = defaultdict(set)
    for src, dst, etype, lineno in pending_edges:
        _add_edge(adj, node_map, schema, src, dst, etype, lineno)
    return Graph(node_map, {k: sorted(v) for k, v in adj.items()}, schema)


# ---------------------------------------------------------------------------
# lexical retrieval

INDEX_MAGIC = b"GO1IDX1"
INDEX_VERSION = 1


class EmptyQueryError(ValueError):
    pass


def _node_checksum(node_ids: Iterable[str]) -> str:
    h = hashlib.sha256()
    for nid in sorted(node_ids):
        h.update(nid.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class RetrievalIndex:
    """TF-IDF cosine index over each node's primary feature text.

    idf(t) = ln((1 + n_docs) / (1 + df(t))) + 1. Query tokens absent from the
    vocabulary carry no weight.
    """

    def __init__(self, docs: dict[str, dict[str, int]], node_checksum: str):
        self.docs = docs
        self.node_checksum = node_checksum
        n = len(docs)
        df: Counter = Counter()
        self.postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
        for nid in sorted(docs):
            for tok, tf in sorted(docs[nid].items()):
                df[tok] += 1
                self.postings[tok].append((nid, tf))
        self.df = dict(df)
        self.idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
        self.norms = {
            nid: math.sqrt(sum((tf * self.idf[t]) ** 2 for t, tf in tfs.items()))
            for nid, tfs in docs.items()
        }

    def __len__(self) -> int:
        return len(self.docs)

    def retrieve(self, query: str, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        qtf = Counter(tokenize(query))
        if not qtf:
            raise EmptyQueryError("query has no tokens")
        qw = {t: c * self.idf[t] for t, c in qtf.items() if t in self.idf}
        qnorm = math.sqrt(sum(w * w for w in qw.values()))
        if qnorm == 0.0:
            return []
        dots: dict[str, float] = defaultdict(float)
        for t, w in qw.items():
            idf = self.idf[t]
            for nid, tf in self.postings[t]:
                dots[nid] += w * tf * idf
        scored = [(nid, d / (qnorm * self.norms[nid])) for nid, d in dots.items() if d > 0]
        scored.sort(key=lambda x: (-x[1], x[0]))
        return scored[:k]

    def to_bytes(self) -> bytes:
        payload = json.dumps(
            {"node_checksum": self.node_checksum,
             "docs": {nid: dict(sorted(tfs.items())) for nid, tfs in sorted(self.docs.items())}},
            sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        ).encode("utf-8")
        return (INDEX_MAGIC + struct.pack(">HI", INDEX_VERSION, len(payload))
                + payload + hashlib.sha256(payload).digest())

    @classmethod
    def from_bytes(cls, data: bytes) -> "RetrievalIndex":
        if not data.startswith(INDEX_MAGIC):
            raise GraphError("not an index file (bad magic)")
        off = len(INDEX_MAGIC)
        version, length = struct.unpack(">HI", data[off:off + 6])
        if version != INDEX_VERSION:
            raise GraphError(f"unsupported index version {version}")
        payload = data[off + 6: off + 6 + length]
        digest = data[off + 6 + length:]
        if len(payload) != length or hashlib.sha256(payload).digest() != digest:
            raise GraphError("index file is truncated or corrupt")
        d = json.loads(payload)
        return cls(d["docs"], d["node_checksum"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, graph: Graph | None = None) -> "RetrievalIndex":
        idx = cls.from_bytes(Path(path).read_bytes())
        if graph is not None:
            idx.verify(graph)
        return idx

    def verify(self, graph: Graph) -> None:
        if _node_checksum(graph.nodes) != self.node_checksum:
            raise IndexMismatchError("index was built from a different node set")


def build_index(g: Graph) -> RetrievalIndex:
    docs = {}
    for nid, node in g.nodes.items():
        key = g.schema.primary_feature_key_per_node_type.get(node.node_type)
        text = node.features.get(key, "") if key else ""
        docs[nid] = dict(Counter(tokenize(text)))
    return RetrievalIndex(docs, _node_checksum(g.nodes))
