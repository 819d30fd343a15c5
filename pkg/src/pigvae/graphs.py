"""Graph data model, random-graph families, edits, batching, dataset I/O.

Graphs are simple and undirected: a symmetric 0/1 adjacency with zero
diagonal plus an ``n x d_v`` node-feature matrix (synthetic graphs carry a
single constant feature channel).  All sampling is driven by numpy's PCG64
generator so datasets are reproducible from (family, params, seed) alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

DATASET_FORMAT = "pigvae-graphs"
DATASET_VERSION = 1

FAMILIES = (
    "erdos_renyi",
    "barabasi_albert",
    "ego",
    "geometric",
    "regular",
    "powerlaw_tree",
    "watts_strogatz",
    "extended_ba",
    "newman_ws",
    "dual_ba",
)


class DataError(ValueError):
    """Malformed dataset file or invalid generation parameters."""


@dataclass
class Graph:
    """An undirected graph with node features and an optional family record."""

    n: int
    node_features: np.ndarray
    adjacency: np.ndarray
    family: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int8)
        self.node_features = np.asarray(self.node_features, dtype=np.float32)
        if self.n < 1:
            raise DataError("graph needs at least one node")
        if self.adjacency.shape != (self.n, self.n):
            raise DataError(f"adjacency shape {self.adjacency.shape} != ({self.n}, {self.n})")
        if self.node_features.shape[0] != self.n:
            raise DataError("node_features row count != n")
        if np.any(self.adjacency != self.adjacency.T):
            raise DataError("adjacency must be symmetric")
        if np.any(np.diag(self.adjacency) != 0):
            raise DataError("adjacency must have a zero diagonal")

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def edge_list(self) -> list[tuple[int, int]]:
        iu, ju = np.triu_indices(self.n, k=1)
        keep = self.adjacency[iu, ju] > 0
        return list(zip(iu[keep].tolist(), ju[keep].tolist()))

    def degree_sequence(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def __eq__(self, other):
        return (
            isinstance(other, Graph)
            and self.n == other.n
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.node_features, other.node_features)
        )


@dataclass
class Permutation:
    """A bijection on node indices; ``mapping[i]`` is the input node placed at slot i."""

    mapping: np.ndarray

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if not np.array_equal(np.sort(self.mapping), np.arange(len(self.mapping))):
            raise DataError("mapping is not a bijection on 0..n-1")

    @property
    def n(self) -> int:
        return len(self.mapping)

    def matrix(self) -> np.ndarray:
        return np.eye(self.n)[self.mapping]

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.n)
        return Permutation(inv)

    @staticmethod
    def random(n: int, rng: np.random.Generator) -> "Permutation":
        return Permutation(rng.permutation(n))

    @staticmethod
    def identity(n: int) -> "Permutation":
        return Permutation(np.arange(n))


def permute_graph(g: Graph, p: Permutation) -> Graph:
    """Relabel nodes: X' = P X and A' = P A P^T; output is isomorphic to input."""
    if p.n != g.n:
        raise DataError(f"permutation size {p.n} != graph size {g.n}")
    m = p.mapping
    return Graph(
        n=g.n,
        node_features=g.node_features[m],
        adjacency=g.adjacency[np.ix_(m, m)],
        family=g.family,
        params=dict(g.params),
    )


# -- random-graph families ----------------------------------------------------


def _from_networkx(gnx, n: int, family: str, params: dict) -> Graph:
    gnx = nx.convert_node_labels_to_integers(gnx, ordering="sorted")
    adj = np.zeros((n, n), dtype=np.int8)
    for u, v in gnx.edges():
        if u != v:
            adj[u, v] = adj[v, u] = 1
    return Graph(n, np.ones((n, 1), dtype=np.float32), adj, family, params)


def gen_graph(family: str, n: int, params: dict, seed: int) -> Graph:
    """Sample one graph from a named family, deterministically in ``seed``."""
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    p = dict(params)
    try:
        if family == "erdos_renyi":
            prob = float(p["p"])
            if not 0.0 <= prob <= 1.0:
                raise DataError(f"erdos_renyi needs 0 <= p <= 1, got {prob}")
            gnx = nx.gnp_random_graph(n, prob, seed=rng)
        elif family == "barabasi_albert":
            m = int(p["m"])
            if not 1 <= m < n:
                raise DataError(f"barabasi_albert needs 1 <= m < n, got m={m}, n={n}")
            gnx = nx.barabasi_albert_graph(n, m, seed=rng)
        elif family == "ego":
            # Radius-1 neighbourhood of the max-degree node of an ER(2n, 0.3)
            # graph, truncated to n nodes (centre kept first).
            base = nx.gnp_random_graph(2 * n, float(p.get("p", 0.3)), seed=rng)
            center = max(base.degree, key=lambda kv: (kv[1], -kv[0]))[0]
            members = [center] + sorted(base.neighbors(center))
            members = members[:n]
            gnx = base.subgraph(members).copy()
            n = gnx.number_of_nodes()
        elif family == "geometric":
            radius = float(p["radius"])
            pos = {i: rng.uniform(size=2) for i in range(n)}
            gnx = nx.random_geometric_graph(n, radius, pos=pos)
        elif family == "regular":
            d = int(p["degree"])
            if (n * d) % 2 != 0 or d >= n:
                raise DataError(f"no d-regular graph with n={n}, d={d}")
            gnx = nx.random_regular_graph(d, n, seed=rng)
        elif family == "powerlaw_tree":
            gamma = float(p.get("gamma", 3.0))
            gnx = nx.random_powerlaw_tree(n, gamma=gamma, seed=rng, tries=100000)
        elif family == "watts_strogatz":
            k, rw = int(p["k"]), float(p["rewire"])
            if k >= n:
                raise DataError(f"watts_strogatz needs k < n, got k={k}, n={n}")
            gnx = nx.watts_strogatz_graph(n, k, rw, seed=rng)
        elif family == "extended_ba":
            m = int(p.get("m", 2))
            q1, q2 = float(p["p"]), float(p["q"])
            gnx = nx.extended_barabasi_albert_graph(n, m, q1, q2, seed=rng)
        elif family == "newman_ws":
            k, ap = int(p["k"]), float(p["add_prob"])
            if k >= n:
                raise DataError(f"newman_ws needs k < n, got k={k}, n={n}")
            gnx = nx.newman_watts_strogatz_graph(n, k, ap, seed=rng)
        elif family == "dual_ba":
            m1, m2, pb = int(p["m1"]), int(p["m2"]), float(p.get("p", 0.5))
            gnx = nx.dual_barabasi_albert_graph(n, m1, m2, pb, seed=rng)
        else:
            raise DataError(f"unknown graph family: {family}")
    except nx.NetworkXError as e:
        raise DataError(f"{family} generation failed: {e}") from e
    return _from_networkx(gnx, n, family, p)


def edit_sequence(g: Graph, k: int, seed: int) -> list[Graph]:
    """``k`` successive single edge substitutions (remove one edge, add one non-edge).

    Consecutive graphs differ by exactly one substitution, so the edit distance
    to step ``i`` is bounded by ``2 i``.
    """
    rng = np.random.default_rng(seed)
    out: list[Graph] = []
    adj = g.adjacency.copy()
    n = g.n
    for step in range(k):
        iu, ju = np.triu_indices(n, k=1)
        present = adj[iu, ju] > 0
        edges = np.flatnonzero(present)
        holes = np.flatnonzero(~present)
        if len(edges) == 0 or len(holes) == 0:
            raise DataError(f"no legal edge substitution at step {step}")
        e = edges[rng.integers(len(edges))]
        h = holes[rng.integers(len(holes))]
        adj = adj.copy()
        adj[iu[e], ju[e]] = adj[ju[e], iu[e]] = 0
        adj[iu[h], ju[h]] = adj[ju[h], iu[h]] = 1
        out.append(
            Graph(n, g.node_features.copy(), adj.copy(), g.family, dict(g.params))
        )
    return out


def topological_distances(g: Graph, cap: int = 8) -> np.ndarray:
    """All-pairs BFS hop counts; unreachable and >= cap entries clamp to ``cap``."""
    adj = g.adjacency.astype(np.int32)
    dist = np.full((g.n, g.n), cap, dtype=np.int64)
    np.fill_diagonal(dist, 0)
    known = np.eye(g.n, dtype=bool)
    frontier = (adj > 0) & ~known
    d = 1
    while frontier.any() and d < cap:
        dist[frontier] = d
        known |= frontier
        frontier = ((frontier.astype(np.int32) @ adj) > 0) & ~known
        d += 1
    return dist


def build_edge_features(g: Graph, use_topo: bool = False, cap: int = 8) -> np.ndarray:
    """Per-pair edge features: [present, absent] one-hot, optionally + distance buckets.

    The diagonal is all-zero in every channel; self-identity is carried by the
    node features when messages are built.
    """
    d_e = 2 + (cap if use_topo else 0)
    feats = np.zeros((g.n, g.n, d_e), dtype=np.float32)
    off = ~np.eye(g.n, dtype=bool)
    feats[:, :, 0] = g.adjacency * off
    feats[:, :, 1] = (1 - g.adjacency) * off
    if use_topo:
        dist = topological_distances(g, cap)
        for d in range(1, cap + 1):
            feats[:, :, 2 + d - 1] = (dist == d) & off
    return feats


# -- batching -------------------------------------------------------------------


@dataclass
class PaddedBatch:
    """Stacked graph tensors with a validity mask for variable-size batching."""

    node_features: np.ndarray  # (B, N, d_v)
    edge_features: np.ndarray  # (B, N, N, d_e)
    mask: np.ndarray  # (B, N) bool
    sizes: np.ndarray  # (B,) real-node counts (excluding any embedding slot)
    has_embedding_slot: bool = False

    @property
    def batch_size(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_max(self) -> int:
        return self.node_features.shape[1]


def pad_batch(graphs: list[Graph], use_topo: bool = False, cap: int = 8) -> PaddedBatch:
    """Stack graphs into zero-padded tensors (no embedding slot)."""
    if not graphs:
        raise DataError("pad_batch needs a non-empty list of graphs")
    n_max = max(g.n for g in graphs)
    d_v = graphs[0].node_features.shape[1]
    d_e = 2 + (cap if use_topo else 0)
    b = len(graphs)
    node = np.zeros((b, n_max, d_v), dtype=np.float32)
    edge = np.zeros((b, n_max, n_max, d_e), dtype=np.float32)
    mask = np.zeros((b, n_max), dtype=bool)
    sizes = np.zeros(b, dtype=np.int64)
    for i, g in enumerate(graphs):
        node[i, : g.n] = g.node_features
        edge[i, : g.n, : g.n] = build_edge_features(g, use_topo=use_topo, cap=cap)
        mask[i, : g.n] = True
        sizes[i] = g.n
    return PaddedBatch(node, edge, mask, sizes)


def unpad_batch(batch: PaddedBatch) -> list[Graph]:
    """Inverse of :func:`pad_batch` (edge-presence channel -> adjacency)."""
    if batch.has_embedding_slot:
        raise DataError("unpad_batch expects a raw batch without an embedding slot")
    out = []
    for i in range(batch.batch_size):
        n = int(batch.sizes[i])
        adj = batch.edge_features[i, :n, :n, 0].astype(np.int8)
        out.append(Graph(n, batch.node_features[i, :n].copy(), adj))
    return out


# -- dataset I/O ------------------------------------------------------------------


def write_dataset(path, graphs: list[Graph]) -> None:
    """Write graphs as JSON lines under a version header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION}) + "\n")
        for g in graphs:
            rec = {
                "n": g.n,
                "edges": [[int(i), int(j)] for i, j in g.edge_list()],
                "family": g.family or "",
                "params": g.params,
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[Graph]:
    """Read a dataset written by :func:`write_dataset`; strict about format."""
    graphs: list[Graph] = []
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            return []
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DataError(f"line 1: malformed header: {e}") from e
        if header.get("format") != DATASET_FORMAT:
            raise DataError(f"line 1: not a {DATASET_FORMAT} file")
        if header.get("version") != DATASET_VERSION:
            raise DataError(f"line 1: unsupported version {header.get('version')}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                n = int(rec["n"])
                adj = np.zeros((n, n), dtype=np.int8)
                for i, j in rec["edges"]:
                    adj[i, j] = adj[j, i] = 1
                graphs.append(
                    Graph(
                        n,
                        np.ones((n, 1), dtype=np.float32),
                        adj,
                        rec.get("family") or None,
                        rec.get("params", {}),
                    )
                )
            except (KeyError, ValueError, IndexError, json.JSONDecodeError) as e:
                raise DataError(f"line {lineno}: malformed graph record: {e}") from e
    return graphs


# -- the 10-family training grid ----------------------------------------------


#: Parameter grid for the mixed-family dataset.  Appendix-level generation
#: parameters are not published for this setup; these ranges are this
#: project's documented stand-in (see README).
MIX10_GRID: dict[str, list[dict]] = {
    "erdos_renyi": [{"p": 0.25}, {"p": 0.35}, {"p": 0.5}],
    "barabasi_albert": [{"m": 1}, {"m": 2}, {"m": 3}, {"m": 4}],
    "ego": [{"p": 0.3}],
    "geometric": [{"radius": 0.3}, {"radius": 0.4}, {"radius": 0.5}],
    "regular": [{"degree": 3}, {"degree": 4}],
    "powerlaw_tree": [{"gamma": 3.0}],
    "watts_strogatz": [{"k": 4, "rewire": 0.1}, {"k": 4, "rewire": 0.3}],
    "extended_ba": [{"m": 2, "p": 0.1, "q": 0.1}, {"m": 2, "p": 0.3, "q": 0.3}],
    "newman_ws": [{"k": 4, "add_prob": 0.1}, {"k": 4, "add_prob": 0.3}],
    "dual_ba": [{"m1": 1, "m2": 3, "p": 0.5}, {"m1": 2, "m2": 4, "p": 0.5}],
}

MIX10_N_RANGE = (8, 16)


def sample_mix10(count: int, seed: int, n_range: tuple[int, int] = MIX10_N_RANGE) -> list[Graph]:
    """Stratified sample over the 10-family grid, n uniform in ``n_range``."""
    combos = [(fam, params) for fam in FAMILIES for params in MIX10_GRID[fam]]
    rng = np.random.default_rng(seed)
    out: list[Graph] = []
    for i in range(count):
        fam, params = combos[i % len(combos)]
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        if fam == "regular" and (n * params["degree"]) % 2 != 0:
            n += 1
        if fam in ("watts_strogatz", "newman_ws"):
            n = max(n, params["k"] + 1)
        if fam == "dual_ba":
            n = max(n, params["m2"] + 1)
        out.append(gen_graph(fam, n, params, seed=int(rng.integers(2**63 - 1))))
    return out
