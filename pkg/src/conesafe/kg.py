"""Star-hierarchical knowledge graph and layered retrieval.

One scene hub fans out into two layered subgraphs (policy and control).
Retrieval scores every node against one query component per layer with a
blend of embedding cosine and exact/synonym match, then picks the path that
maximizes the summed log-score by dynamic programming.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional, Protocol

import httpx
import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUBGRAPHS = ("scene", "policy", "control")
EDGE_KINDS = ("hub", "seq", "rel")
EMBED_DIM = 256


class ParseError(ValueError):
    pass


class StructureError(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class NoPath(LookupError):
    pass


class EmbedBackendError(RuntimeError):
    pass


def normalize_text(text: str) -> str:
    return " ".join(text.casefold().split())


def tokens(text: str) -> list[str]:
    toks = re.findall(r"[a-z0-9]+", text.casefold())
    return toks or [normalize_text(text)]


class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Hashed bag of tokens, L2-normalized. Deterministic across processes."""

    name = "hash"

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("cannot embed empty text")
        v = np.zeros(self.dim)
        for tok in tokens(text):
            v[self.bucket(tok)] += 1.0
        return v / np.linalg.norm(v)


class HttpEmbedder:
    """Embedding endpoint speaking ``{"input": text}`` -> ``{"data": [{"embedding": [...]}]}``."""

    name = "http"

    def __init__(self, url: str, key: str = "", timeout: float = 10.0, client: httpx.Client | None = None):
        self.url = url
        self.key = key
        self.timeout = timeout
        self.client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        headers = {"Authorization": f"Bearer {self.key}"} if self.key else {}
        try:
            resp = self.client.post(self.url, json={"input": text}, headers=headers)
            resp.raise_for_status()
            body = resp.json()
            vec = body["data"][0]["embedding"] if "data" in body else body["embedding"]
            v = np.asarray(vec, dtype=float)
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise EmbedBackendError(f"embedding request failed: {exc}") from exc
        n = float(np.linalg.norm(v))
        if v.ndim != 1 or n == 0 or not np.isfinite(n):
            raise EmbedBackendError("embedding endpoint returned an unusable vector")
        return v / n


class FallbackEmbedder:
    """Try the primary backend; on failure log the cause and use the hash embedder."""

    def __init__(self, primary: Embedder, fallback: Embedder | None = None):
        self.primary = primary
        self.fallback = fallback or HashEmbedder()

    def embed(self, text: str) -> np.ndarray:
        try:
            return self.primary.embed(text)
        except EmbedBackendError as exc:
            log.warning("embedding backend failed, using hashed fallback: %s", exc)
            return self.fallback.embed(text)


def embedder_from_env() -> Embedder:
    url = os.environ.get("EMBED_URL")
    if not url:
        return HashEmbedder()
    return FallbackEmbedder(HttpEmbedder(url, os.environ.get("EMBED_KEY", "")))


_default_embedder = HashEmbedder()


def embed(text: str, backend: Embedder | None = None) -> np.ndarray:
    return (backend or _default_embedder).embed(text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True)
class KnowledgeNode:
    id: str
    subgraph: str
    layer: int
    value: str
    synset: frozenset = frozenset()


@dataclass(frozen=True)
class KnowledgeEdge:
    src: str
    dst: str
    kind: str


class KnowledgeGraph:
    """Validated, immutable graph. Node embeddings are memoized per embedder."""

    def __init__(self, nodes: dict[str, KnowledgeNode], edges: Iterable[KnowledgeEdge], layer_names=None):
        self.nodes = dict(sorted(nodes.items()))
        self.edges = tuple(sorted(set(edges), key=lambda e: (e.kind, e.src, e.dst)))
        self.layer_names = {k: list(v) for k, v in (layer_names or {}).items()}
        self._cache: dict[tuple[int, str], np.ndarray] = {}
        self._lock = threading.Lock()
        _validate(self)
        self.hub = next(n for n in self.nodes.values() if n.subgraph == "scene")
        self.depth = {
            sg: max((n.layer for n in self.nodes.values() if n.subgraph == sg), default=0)
            for sg in ("policy", "control")
        }
        self.seq_out: dict[str, set[str]] = {i: set() for i in self.nodes}
        self.rel: dict[str, set[str]] = {i: set() for i in self.nodes}
        self.hub_out: set[str] = set()
        for e in self.edges:
            if e.kind == "seq":
                self.seq_out[e.src].add(e.dst)
            elif e.kind == "rel":
                self.rel[e.src].add(e.dst)
                self.rel[e.dst].add(e.src)
            else:
                self.hub_out.add(e.dst)

    def layer(self, subgraph: str, layer: int) -> list[str]:
        return [i for i, n in self.nodes.items() if n.subgraph == subgraph and n.layer == layer]

    def layer_name(self, subgraph: str, layer: int) -> str:
        names = self.layer_names.get(subgraph, [])
        return names[layer - 1] if layer - 1 < len(names) else f"{subgraph}-{layer}"

    def partition_counts(self) -> dict[str, int]:
        sg = [n.subgraph for n in self.nodes.values()]
        ek = [self.nodes[e.src].subgraph if e.kind != "hub" else "hub" for e in self.edges]
        return {
            "N_S": sg.count("scene"),
            "N_H": sg.count("policy"),
            "N_L": sg.count("control"),
            "E_S": ek.count("hub"),
            "E_H": ek.count("policy"),
            "E_L": ek.count("control"),
        }

    def node_embedding(self, node_id: str, embedder: Embedder) -> np.ndarray:
        key = (id(embedder), node_id)
        vec = self._cache.get(key)
        if vec is None:
            vec = embedder.embed(self.nodes[node_id].value)
            with self._lock:
                vec = self._cache.setdefault(key, vec)
        return vec


def _validate(g: KnowledgeGraph) -> None:
    hubs = [n for n in g.nodes.values() if n.subgraph == "scene"]
    if len(hubs) > 1:
        raise StructureError("multiple hubs: " + ", ".join(n.id for n in hubs))
    if not hubs:
        raise StructureError("no hub node")
    if hubs[0].layer != 0:
        raise StructureError(f"hub {hubs[0].id} must be on layer 0")
    for n in g.nodes.values():
        if n.subgraph not in SUBGRAPHS:
            raise StructureError(f"node {n.id} has unknown subgraph {n.subgraph!r}")
        if n.subgraph != "scene" and n.layer < 1:
            raise StructureError(f"node {n.id} must be on layer >= 1")
    for e in g.edges:
        for end in (e.src, e.dst):
            if end not in g.nodes:
                raise StructureError(f"dangling edge endpoint {end!r} in {e.kind} edge {e.src}->{e.dst}")
        a, b = g.nodes[e.src], g.nodes[e.dst]
        where = f"{e.kind} edge {e.src}->{e.dst}"
        if e.kind == "hub":
            if a.subgraph != "scene" or b.subgraph == "scene" or b.layer != 1:
                raise StructureError(f"{where} must run from the hub to a layer-1 node")
        elif e.kind == "seq":
            if a.subgraph == "scene" or a.subgraph != b.subgraph:
                raise StructureError(f"{where} crosses subgraphs")
            if b.layer != a.layer + 1:
                raise StructureError(f"{where} skips a layer ({a.layer} -> {b.layer})")
        elif e.kind == "rel":
            if a.subgraph == "scene" or a.subgraph != b.subgraph or a.layer != b.layer:
                raise StructureError(f"cross-layer rel edge {e.src}->{e.dst}")
            if a.id == b.id:
                raise StructureError(f"rel edge {e.src}->{e.dst} is a self-loop")
        else:
            raise StructureError(f"unknown edge kind {e.kind!r}")
    incoming: dict[str, set[str]] = {i: set() for i in g.nodes}
    for e in g.edges:
        if e.kind == "seq":
            incoming[e.dst].add(e.src)
    reachable = {i for i, n in g.nodes.items() if n.layer == 1}
    for n in sorted(g.nodes.values(), key=lambda n: n.layer):
        if n.layer >= 2:
            if incoming[n.id] & reachable:
                reachable.add(n.id)
            else:
                raise StructureError(f"node {n.id} is not seq-reachable from layer 1")


def build_graph(document) -> KnowledgeGraph:
    """Build a graph from a parsed KB dict, a JSON string, or a file path."""
    if isinstance(document, (str, os.PathLike)) and not str(document).lstrip().startswith("{"):
        try:
            with open(document) as fh:
                document = fh.read()
        except OSError as exc:
            raise ParseError(f"cannot read {document}: {exc}") from exc
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(document, dict) or document.get("schema") != SCHEMA_VERSION:
        raise ParseError(f"KB must be an object with \"schema\": {SCHEMA_VERSION}")
    nodes: dict[str, KnowledgeNode] = {}
    try:
        for raw in document["nodes"]:
            nid = str(raw["id"])
            if nid in nodes:
                raise StructureError(f"duplicate node id {nid!r}")
            nodes[nid] = KnowledgeNode(
                nid,
                str(raw["subgraph"]),
                int(raw["layer"]),
                str(raw["value"]),
                frozenset(normalize_text(s) for s in raw.get("synonyms", [])),
            )
        edges = [KnowledgeEdge(str(e["from"]), str(e["to"]), str(e["kind"])) for e in document["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StructureError):
            raise
        raise ParseError(f"malformed KB entry: {exc!r}") from exc
    return KnowledgeGraph(nodes, edges, document.get("layer_names"))


def default_kb_text() -> str:
    return resources.files("conesafe").joinpath("data/default_kb.json").read_text()


def default_graph() -> KnowledgeGraph:
    return build_graph(default_kb_text())


def syn_match(node: KnowledgeNode, q: str) -> bool:
    qn = normalize_text(q)
    return qn == normalize_text(node.value) or qn in node.synset


def score(
    node: KnowledgeNode,
    q: str,
    w_sem: float = 0.7,
    embedder: Embedder | None = None,
    graph: KnowledgeGraph | None = None,
) -> float:
    """Hybrid score: ``w_sem * max(cos, 0) + (1 - w_sem) * [exact or synonym match]``."""
    embedder = embedder or _default_embedder
    z_node = graph.node_embedding(node.id, embedder) if graph is not None else embedder.embed(node.value)
    cos = max(0.0, cosine(z_node, embedder.embed(q)))
    return w_sem * cos + (1.0 - w_sem) * (1.0 if syn_match(node, q) else 0.0)


@dataclass(frozen=True)
class Query:
    subgraph: str
    components: tuple[str, ...]
    w_sem: float = 0.7
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.subgraph not in ("policy", "control"):
            raise ValueError("query must target the policy or control subgraph")
        if len(self.components) < 1:
            raise ValueError("query needs at least one component")
        if not 0.0 <= self.w_sem <= 1.0:
            raise ValueError("w_sem must lie in [0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class RetrievedPath:
    subgraph: str
    nodes: tuple[str, ...]
    values: tuple[str, ...]
    scores: tuple[float, ...]
    objective: float
    hub_value: str
    layer_names: tuple[str, ...]
    relaxed: tuple[bool, ...] = field(default=())


PHI_MIN = 0.05


def retrieve(
    graph: KnowledgeGraph,
    query: Query,
    embedder: Embedder | None = None,
    elastic: bool = True,
    phi_min: float = PHI_MIN,
    phi: dict[str, float] | None = None,
) -> RetrievedPath:
    """Exact maximizer of sum_l log(score_l + eps) over admissible layered paths.

    Layer 1 admits hub-adjacent nodes. Layer l >= 2 admits b from a when
    a -> b is a seq edge, or when a has a rel neighbour c with c -> b (one
    lateral hop before descending). With ``elastic``, a layer whose
    admitted candidates all score below ``phi_min`` (or that has none) is
    widened to every node of the layer, scores floored at eps.

    ``phi`` overrides node scores (node id -> score) and is meant for tests.
    """
    sg, L = query.subgraph, len(query.components)
    if L > graph.depth[sg]:
        raise NoPath(f"query has {L} components but the {sg} subgraph has depth {graph.depth[sg]}")
    embedder = embedder or _default_embedder
    eps = query.epsilon

    def phi_of(nid: str, l: int) -> float:
        if phi is not None:
            return phi[nid]
        return score(graph.nodes[nid], query.components[l], query.w_sem, embedder, graph)

    # best[node] = (objective, path, scores); ties go to the smaller path tuple
    best: dict[str, tuple[float, tuple[str, ...], tuple[float, ...]]] = {}
    relaxed_flags = []
    for l in range(L):
        layer_ids = graph.layer(sg, l + 1)
        if l == 0:
            preds = {b: [None] for b in layer_ids if b in graph.hub_out}
        else:
            preds = {}
            for a in best:
                for b in _successors(graph, a):
                    preds.setdefault(b, []).append(a)
        scores = {b: phi_of(b, l) for b in (preds if not elastic else layer_ids)}
        relaxed = False
        if elastic and (not preds or max(scores[b] for b in preds) < phi_min):
            relaxed = True
            prev = [None] if l == 0 else list(best)
            preds = {b: prev for b in layer_ids}
            scores = {b: max(scores[b], eps) for b in layer_ids}
        if not preds:
            raise NoPath(f"no admissible candidate on {sg} layer {l + 1}")
        relaxed_flags.append(relaxed)
        nxt = {}
        for b in sorted(preds):
            gain = math.log(scores[b] + eps)
            cands = []
            for a in preds[b]:
                if a is None:
                    cands.append((gain, (b,), (scores[b],)))
                else:
                    val, path, sc = best[a]
                    cands.append((val + gain, path + (b,), sc + (scores[b],)))
            nxt[b] = _pick(cands)
        best = nxt
    val, path, sc = _pick(list(best.values()))
    return RetrievedPath(
        sg,
        path,
        tuple(graph.nodes[i].value for i in path),
        sc,
        val,
        graph.hub.value,
        tuple(graph.layer_name(sg, l + 1) for l in range(L)),
        tuple(relaxed_flags),
    )


def _successors(graph: KnowledgeGraph, a: str) -> set[str]:
    out = set(graph.seq_out[a])
    for c in graph.rel[a]:
        out |= graph.seq_out[c]
    return out


def _pick(cands):
    top = max(c[0] for c in cands)
    return min((c for c in cands if c[0] == top), key=lambda c: c[1])


def render_context(path: RetrievedPath | None, hub_value: str | None = None) -> str:
    """Hub line first, then one ``layer-name: value`` line per retrieved layer."""
    if path is None:
        return f"scene: {hub_value}" if hub_value else ""
    lines = [f"scene: {path.hub_value}"]
    lines += [f"{name}: {value}" for name, value in zip(path.layer_names, path.values)]
    return "\n".join(lines)


THREAT_CLEAR = 2.0
THREAT_CRITICAL = 0.5


def threat_bucket(min_clearance: float) -> str:
    if min_clearance > THREAT_CLEAR:
        return "clear"
    if min_clearance >= THREAT_CRITICAL:
        return "near"
    return "critical"


SECTORS = ("east", "north-east", "north", "north-west", "west", "south-west", "south", "south-east")


def bearing_sector(vec) -> str:
    ang = math.atan2(vec[1], vec[0])
    return SECTORS[int(round(ang / (math.pi / 4))) % 8]


class Retriever:
    """Issues the policy and control queries for one observation and renders both."""

    def __init__(self, graph: KnowledgeGraph | None = None, embedder: Embedder | None = None, w_sem: float = 0.7):
        self.graph = graph or default_graph()
        self.embedder = embedder or HashEmbedder()
        self.w_sem = w_sem

    def context(self, min_clearance: float, bearing, action_class: str) -> str:
        policy = retrieve(
            self.graph,
            Query("policy", (threat_bucket(min_clearance), bearing_sector(bearing)), self.w_sem),
            self.embedder,
        )
        control = retrieve(self.graph, Query("control", (action_class,), self.w_sem), self.embedder)
        ctl_lines = render_context(control).split("\n")[1:]
        return "\n".join([render_context(policy), *ctl_lines])
