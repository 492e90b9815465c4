"""Node representation learning on the CDS graph.

Two implementations of the same update live here:

  * propagate(): the production path, vectorized over the flat edge
    arrays and differentiable end to end (gradients reach the node
    table, the interval table and both weight matrices, including the
    paths through the attention weights).
  * user_message()/item_message()/propagate_reference(): a per-node
    transcription used as the correctness oracle.

Per layer, each target node r mixes messages from its in-neighbors and
itself with softmax-normalized cosine attention:

  e'_r = LeakyReLU( sum_c gamma_rc * content(c -> r) )

where content is W1-projected source embedding plus a W2-projected
elementwise interaction term for non-self edges, and predecessor-item
sources blend their embedding with the edge's interval embedding using
coefficient alpha (alpha = 1 disables the interval path entirely).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .graph import ITEM_FROM_ITEM, SELF_LOOP, CdsGraph
from .numeric import SparseMatrix, Tensor
from .params import NORM_FLOOR, ModelParameters


@dataclass
class AttentionWeights:
    """Per-edge raw cosine scores and normalized weights (self loops included)."""

    src: np.ndarray
    dst: np.ndarray
    kind: np.ndarray
    bucket: np.ndarray
    scores: np.ndarray
    gamma: np.ndarray
    n_zero_norm: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def _build_index(self):
        if not self._index:
            for pos, (s, t) in enumerate(zip(self.src, self.dst)):
                self._index[(int(t), int(s))] = pos

    def gamma_of(self, dst: int, src: int) -> float:
        self._build_index()
        return float(self.gamma[self._index[(dst, src)]])

    def score_of(self, dst: int, src: int) -> float:
        self._build_index()
        return float(self.scores[self._index[(dst, src)]])

    def row_sum(self, dst: int) -> float:
        return float(self.gamma[self.dst == dst].sum())


@dataclass
class NodeRepresentations:
    """Stack of per-layer node tables plus derived account embeddings."""

    layers: list          # Tensors, layers[0] is the raw node table
    account_embeddings: Tensor
    edge_gammas: list     # ndarray per layer, diagnostics only
    n_zero_norm: int = 0

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


def _edge_cosines(emb: np.ndarray, src: np.ndarray, dst: np.ndarray):
    """Cosine of every (src, dst) embedding pair, with floored norms."""
    es, ed = emb[src], emb[dst]
    dots = (es * ed).sum(axis=1)
    ns = np.sqrt((es * es).sum(axis=1))
    nd = np.sqrt((ed * ed).sum(axis=1))
    denom = np.maximum(ns, NORM_FLOOR) * np.maximum(nd, NORM_FLOOR)
    return dots / denom


def _count_zero_norms(emb: np.ndarray, strict: bool) -> int:
    norms = np.sqrt((emb * emb).sum(axis=1))
    n_zero = int((norms < NORM_FLOOR).sum())
    if n_zero and strict:
        raise ValueError(f"{n_zero} zero-norm embeddings encountered in strict cosine mode")
    return n_zero


def attention_scores(graph: CdsGraph, embeddings, uniform: bool = False,
                     strict: bool = False) -> AttentionWeights:
    """Diagnostic attention weights for the current embedding table.

    With uniform=True every in-neighbor (and the self loop) of a target
    gets weight 1/degree instead of the softmaxed cosine.
    """
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    edges = graph.message_edges()
    n_zero = _count_zero_norms(emb, strict)
    if uniform:
        deg = graph.in_degrees().astype(float)
        gamma = 1.0 / deg[edges.dst]
        scores = np.zeros(edges.n_edges)
    else:
        scores = _edge_cosines(emb, edges.src, edges.dst)
        seg_max = np.full(graph.n_nodes, -np.inf)
        np.maximum.at(seg_max, edges.dst, scores)
        e = np.exp(scores - seg_max[edges.dst])
        denom = np.zeros(graph.n_nodes)
        np.add.at(denom, edges.dst, e)
        gamma = e / denom[edges.dst]
    return AttentionWeights(edges.src, edges.dst, edges.kind, edges.bucket,
                            scores, gamma, n_zero)


def attention_laplacian(graph: CdsGraph, weights: AttentionWeights) -> SparseMatrix:
    """Materialize the attention weights as a row-stochastic sparse matrix.

    Row r holds the weights of node r's in-neighborhood plus its self
    loop, so each row with any entry sums to one.
    """
    entries = [(int(t), int(s), float(g))
               for t, s, g in zip(weights.dst, weights.src, weights.gamma)]
    return SparseMatrix.from_entries(graph.n_nodes, graph.n_nodes, entries)


def interval_routing_matrix(graph: CdsGraph, weights: AttentionWeights) -> SparseMatrix:
    """Route attention mass of predecessor edges onto interval buckets.

    The (n_nodes x n_buckets) result, right-multiplied by the interval
    embedding table, yields each item row's attention-weighted interval
    message; rows of non-item nodes are empty.
    """
    mass: dict[tuple, float] = {}
    sel = weights.kind == ITEM_FROM_ITEM
    for t, b, g in zip(weights.dst[sel], weights.bucket[sel], weights.gamma[sel]):
        key = (int(t), int(b))
        mass[key] = mass.get(key, 0.0) + float(g)
    entries = [(r, c, v) for (r, c), v in mass.items()]
    return SparseMatrix.from_entries(graph.n_nodes, graph.bucketizer.n_buckets, entries)


def propagate(graph: CdsGraph, params: ModelParameters, *, alpha: float,
              leaky_slope: float = 0.2, n_layers: int = 1,
              uniform_attention: bool = False, dropout_rate: float = 0.0,
              rng: np.random.Generator | None = None, training: bool = False,
              strict_cosine: bool = False) -> NodeRepresentations:
    """Run the layer-wise propagation over all nodes at once.

    Attention is recomputed from the previous layer's table at each
    layer. Dropout (when training) hits the summed messages before the
    activation.
    """
    if not 0.0 <= alpha <= 1.0:
        raise nm.ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    edges = graph.message_edges()
    n = graph.n_nodes
    is_ii = edges.kind == ITEM_FROM_ITEM
    not_self = (edges.kind != SELF_LOOP).astype(float)
    w1, w2 = params["prop_w1"], params["prop_w2"]

    layers = [params["node_emb"]]
    gammas = []
    n_zero_total = 0
    for _ in range(n_layers):
        e_prev = layers[-1]
        n_zero_total += _count_zero_norms(e_prev.data, strict_cosine)
        e_src = nm.gather_rows(e_prev, edges.src)
        if uniform_attention:
            deg = graph.in_degrees().astype(float)
            gamma = Tensor(1.0 / deg[edges.dst])
        else:
            e_dst = nm.gather_rows(e_prev, edges.dst)
            dots = nm.tsum(nm.mul(e_src, e_dst), axis=1)
            n_src = nm.sqrt(nm.tsum(nm.mul(e_src, e_src), axis=1))
            n_dst = nm.sqrt(nm.tsum(nm.mul(e_dst, e_dst), axis=1))
            denom = nm.mul(nm.clamp_min(n_src, NORM_FLOOR), nm.clamp_min(n_dst, NORM_FLOOR))
            scores = nm.div(dots, denom)
            gamma = nm.segment_softmax(scores, edges.dst, n)
        gammas.append(gamma.data.copy())

        if alpha == 1.0:
            content = e_src
        else:
            coef_src = np.where(is_ii, alpha, 1.0)[:, None]
            coef_gap = np.where(is_ii, 1.0 - alpha, 0.0)[:, None]
            gap_rows = nm.gather_rows(params["interval_emb"], edges.bucket)
            content = nm.add(nm.mul(e_src, coef_src), nm.mul(gap_rows, coef_gap))
        gamma_col = nm.reshape(gamma, (edges.n_edges, 1))
        w1_side = nm.segment_sum(nm.mul(content, gamma_col), edges.dst, n)
        neigh = nm.segment_sum(nm.mul(e_src, nm.mul(gamma_col, not_self[:, None])),
                               edges.dst, n)
        w2_side = nm.mul(neigh, e_prev)
        pre = nm.add(nm.matmul(w1_side, w1), nm.matmul(w2_side, w2))
        if training and dropout_rate > 0.0:
            if rng is None:
                raise ValueError("dropout requires an rng in training mode")
            pre = nm.dropout(pre, dropout_rate, rng)
        layers.append(nm.leaky_relu(pre, leaky_slope))

    accounts = merge_accounts(layers[-1], graph)
    return NodeRepresentations(layers, accounts, gammas, n_zero_total)


def merge_accounts(node_table: Tensor, graph: CdsGraph) -> Tensor:
    """Average each account's H latent-user rows of the node table."""
    idx = graph.user_offset + np.arange(graph.n_accounts * graph.h)
    users = nm.gather_rows(node_table, idx.reshape(graph.n_accounts, graph.h))
    return nm.tmean(users, axis=1)


def merge_account(latent_embeddings) -> Tensor:
    """Arithmetic mean of one account's latent-user vectors (H x d)."""
    stack = latent_embeddings if isinstance(latent_embeddings, Tensor) else Tensor(latent_embeddings)
    return nm.tmean(stack, axis=0)


def account_level_item(latent_item_representations) -> Tensor:
    """Arithmetic mean of an item's per-latent-user representations."""
    return merge_account(latent_item_representations)


# ---------------------------------------------------------------------------
# per-node reference path (test oracle)


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def user_message(graph: CdsGraph, params: ModelParameters,
                 weights: AttentionWeights, latent_user: int,
                 leaky_slope: float = 0.2) -> np.ndarray:
    """Aggregate one latent user's messages, term by term."""
    emb = params["node_emb"].data
    w1, w2 = params["prop_w1"].data, params["prop_w2"].data
    e_u = emb[latent_user]
    total = weights.gamma_of(latent_user, latent_user) * (e_u @ w1)
    ns = graph.neighbor_sets(latent_user)
    for item in ns.items_a + ns.items_b:
        g = weights.gamma_of(latent_user, item)
        e_i = emb[item]
        total = total + g * ((e_i @ w1) + ((e_i * e_u) @ w2))
    return _leaky(total, leaky_slope)


def item_message(graph: CdsGraph, params: ModelParameters,
                 weights: AttentionWeights, item: int, alpha: float,
                 leaky_slope: float = 0.2) -> np.ndarray:
    """Aggregate one item's messages from users, predecessors and itself."""
    emb = params["node_emb"].data
    gaps = params["interval_emb"].data
    w1, w2 = params["prop_w1"].data, params["prop_w2"].data
    pairs = graph.item_pairs_a if graph.is_item_a(item) else graph.item_pairs_b
    local = item if graph.is_item_a(item) else item - graph.item_b_offset
    to_local = (lambda n: n) if graph.is_item_a(item) else (lambda n: n - graph.item_b_offset)

    e_i = emb[item]
    total = weights.gamma_of(item, item) * (e_i @ w1)
    ns = graph.neighbor_sets(item)
    for user in ns.users:
        g = weights.gamma_of(item, user)
        e_u = emb[user]
        total = total + g * ((e_u @ w1) + ((e_u * e_i) @ w2))
    for pred in ns.item_predecessors:
        g = weights.gamma_of(item, pred)
        e_p = emb[pred]
        bucket = pairs[(to_local(pred), local)]
        blended = alpha * e_p + (1.0 - alpha) * gaps[bucket]
        total = total + g * ((blended @ w1) + ((e_p * e_i) @ w2))
    return _leaky(total, leaky_slope)


def propagate_reference(graph: CdsGraph, params: ModelParameters, *, alpha: float,
                        leaky_slope: float = 0.2, n_layers: int = 1,
                        uniform_attention: bool = False) -> np.ndarray:
    """Node-by-node transcription of the propagation rule; test oracle only."""
    table = params["node_emb"].data.copy()
    work = ModelParameters({
        "node_emb": Tensor(table),
        "interval_emb": params["interval_emb"],
        "prop_w1": params["prop_w1"],
        "prop_w2": params["prop_w2"],
    })
    for _ in range(n_layers):
        weights = attention_scores(graph, work["node_emb"].data, uniform=uniform_attention)
        nxt = np.empty_like(work["node_emb"].data)
        for node in range(graph.n_nodes):
            if graph.is_user(node):
                nxt[node] = user_message(graph, work, weights, node, leaky_slope)
            else:
                nxt[node] = item_message(graph, work, weights, node, alpha, leaky_slope)
        work = ModelParameters({**{k: work[k] for k in ("interval_emb", "prop_w1", "prop_w2")},
                                "node_emb": Tensor(nxt)})
    return work["node_emb"].data
