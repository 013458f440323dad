"""The differentiable LSTTM network.

Parameters live in a flat ``dict[str, ndarray]`` whose key prefix names the
partition: ``s.`` short-term graph, ``f.`` fusion and DeepFM ranker, ``l.``
long-term graph.  A forward pass wraps them in autodiff nodes (leaves for the
partition being trained, constants for the rest), so the gradient block on the
long-term partition is simply "never a leaf during L_T training".

All encoders run batched: a :class:`TwoHopPlan` holds the sampled neighbor
indices for a set of center nodes and their one-hop neighbors, built once in
numpy, and the forward pass is a handful of dense gathers and matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .datasim import ITEM_FIELD_VOCAB, USER_FIELD_VOCAB, entity_fields
from .graphstore import ITEM, USER, GraphSnapshot, PathSet

N_HOURS = 24
PAD = -1
MASKED_LOGIT = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_users: int
    n_items: int  # internal + external; internal ids come first
    n_internal_items: int
    n_positions: int
    dim: int = 16
    tower: tuple[int, ...] = (64, 32)
    user_field_vocab: tuple[int, ...] = USER_FIELD_VOCAB
    item_field_vocab: tuple[int, ...] = ITEM_FIELD_VOCAB
    leaky_slope: float = 0.2
    embed_init: float = 0.05
    gating: bool = True
    graph_aggregation: bool = True

    @classmethod
    def from_header(cls, header: Mapping, **kw) -> ModelConfig:
        return cls(
            n_users=header["n_users"],
            n_items=header["n_internal_items"] + header["n_external_items"],
            n_internal_items=header["n_internal_items"],
            n_positions=header["n_positions"],
            user_field_vocab=tuple(header.get("user_fields", USER_FIELD_VOCAB)),
            item_field_vocab=tuple(header.get("item_fields", ITEM_FIELD_VOCAB)),
            **kw,
        )


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Embeddings uniform in +-embed_init; weights uniform in +-sqrt(3 / fan_in)."""
    rng = np.random.default_rng(seed)
    d = cfg.dim
    p: dict[str, np.ndarray] = {}

    def emb(name, rows):
        p[name] = rng.uniform(-cfg.embed_init, cfg.embed_init, (rows, d))

    def dense(name, fan_in, fan_out):
        bound = np.sqrt(3.0 / fan_in)
        p[name] = rng.uniform(-bound, bound, (fan_in, fan_out))

    def gat(prefix):
        dense(prefix + ".Wc", d, d)
        dense(prefix + ".Wn", d, d)
        dense(prefix + ".a", 2 * d, 1)

    for f, size in enumerate(cfg.user_field_vocab):
        emb(f"s.user_field.{f}", size)
    for f, size in enumerate(cfg.item_field_vocab):
        emb(f"s.item_field.{f}", size)
    dense("s.user_proj", d * len(cfg.user_field_vocab), d)
    dense("s.item_proj", d * len(cfg.item_field_vocab), d)
    for name in ("s.user.1", "s.user.2", "s.item.1"):
        gat(name)

    emb("l.user_emb", cfg.n_users)
    emb("l.item_emb", cfg.n_items)
    for name in ("l.user.1", "l.user.2", "l.item.1", "l.item.2"):
        gat(name)

    emb("f.item_emb", cfg.n_internal_items)
    emb("f.hour_emb", N_HOURS)
    emb("f.pos_emb", cfg.n_positions)
    dense("f.gate_s", 2 * d, 1)
    dense("f.gate_l", 2 * d, 1)
    if not cfg.gating:
        dense("f.concat_proj", 2 * d, d)
    n_fields = 4
    dense("f.lin", n_fields * d, 1)
    p["f.bias"] = np.zeros((1, 1))
    widths = (n_fields * d, *cfg.tower)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        dense(f"f.tower.{i}.W", a, b)
        p[f"f.tower.{i}.b"] = np.zeros((1, b))
    dense("f.tower.out.W", widths[-1], 1)
    p["f.tower.out.b"] = np.zeros((1, 1))
    return p


def partition(params: Mapping[str, np.ndarray], groups: str) -> list[str]:
    """Names of the parameters in the given partitions, e.g. ``"sf"``."""
    return [k for k in params if k[0] in groups]


def as_nodes(params: Mapping[str, np.ndarray], trainable: str = "sf") -> dict[str, Node]:
    return {k: (ad.leaf(v, k) if k[0] in trainable else ad.const(v)) for k, v in params.items()}


# ---------------------------------------------------------------------------
# neighbor plans


@dataclass
class NeighborTables:
    """Per-node sampled neighbor ids, padded with -1."""

    user_nbr: np.ndarray  # (n_users, K) item ids
    item_nbr: np.ndarray  # (n_items, K) user ids


def neighbor_tables(
    snap: GraphSnapshot,
    n_users: int,
    n_items: int,
    k: int,
    mode: str = "temporal",
    seed: int = 0,
    users=None,
    items=None,
) -> NeighborTables:
    """Sample neighbor tables for all (or the listed) users and items."""
    user_nbr = np.full((n_users, k), PAD, dtype=np.int64)
    item_nbr = np.full((n_items, k), PAD, dtype=np.int64)
    graph = snap.graph
    users = graph.users if users is None else users
    items = list(graph.internal_items) + list(graph.external_items) if items is None else items
    for table, kind, ids in ((user_nbr, USER, users), (item_nbr, ITEM, items)):
        for i in ids:
            if mode == "temporal":
                nb = snap.temporal_neighbors((kind, i), k)
            else:
                nb = snap.uniform_neighbors((kind, i), k, seed)
            if nb:
                table[i, : len(nb)] = [n[1] for n in nb]
    return NeighborTables(user_nbr, item_nbr)


@dataclass
class TwoHopPlan:
    """Indices for a two-layer aggregation over ``centers``.

    ``outer_ids`` are nodes of the center type (centers plus two-hop nodes),
    ``mid_ids`` nodes of the other type (one-hop).  Neighbor index arrays point
    into those id lists; ``-1`` padding is replaced by 0 and masked out.
    """

    centers: np.ndarray
    outer_ids: np.ndarray
    mid_ids: np.ndarray
    center_pos: np.ndarray
    center_nbr: np.ndarray
    center_mask: np.ndarray
    mid_nbr: np.ndarray
    mid_mask: np.ndarray


def _index_into(ids: np.ndarray, universe: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = ids != PAD
    idx = np.zeros(ids.shape, dtype=np.int64)
    if universe.size:
        idx[mask] = np.searchsorted(universe, ids[mask])
    return idx, mask


def two_hop_plan(centers, center_table: np.ndarray, mid_table: np.ndarray) -> TwoHopPlan:
    centers = np.asarray(centers, dtype=np.int64)
    c_nbr = center_table[centers]
    mid_ids = np.unique(c_nbr[c_nbr != PAD])
    m_nbr = mid_table[mid_ids]
    outer_ids = np.unique(np.concatenate([centers, m_nbr[m_nbr != PAD]]))
    center_nbr, center_mask = _index_into(c_nbr, mid_ids)
    mid_nbr, mid_mask = _index_into(m_nbr, outer_ids)
    return TwoHopPlan(
        centers=centers,
        outer_ids=outer_ids,
        mid_ids=mid_ids,
        center_pos=np.searchsorted(outer_ids, centers),
        center_nbr=center_nbr,
        center_mask=center_mask,
        mid_nbr=mid_nbr,
        mid_mask=mid_mask,
    )


# ---------------------------------------------------------------------------
# building blocks


def node_input(field_ids: np.ndarray, tables: list[Node], proj: Node) -> Node:
    """Concatenate the six field embeddings and project to the model width."""
    field_ids = np.atleast_2d(np.asarray(field_ids, dtype=np.int64))
    if field_ids.shape[1] != len(tables):
        raise ValueError(f"expected {len(tables)} fields, got {field_ids.shape[1]}")
    for f, t in enumerate(tables):
        col = field_ids[:, f]
        if col.size and (col.min() < 0 or col.max() >= t.shape[0]):
            raise ValueError(f"field {f} id out of vocabulary (size {t.shape[0]})")
    return ad.matmul(ad.concat([ad.gather(t, field_ids[:, f]) for f, t in enumerate(tables)], axis=1), proj)


@dataclass
class GatLayer:
    Wc: Node  # applied to the center (W_u for a user center)
    Wn: Node  # applied to neighbors, in both attention and message (W_d^k)
    a: Node  # attention vector over [Wc x_center || Wn x_nbr]

    @classmethod
    def from_params(cls, P: Mapping[str, Node], prefix: str) -> GatLayer:
        return cls(P[prefix + ".Wc"], P[prefix + ".Wn"], P[prefix + ".a"])


def _attention_logits(center: Node, pool_h: Node, nbr: np.ndarray, layer: GatLayer, slope: float) -> Node:
    n, k = nbr.shape
    d = center.shape[1]
    a_c = ad.gather(layer.a, np.arange(d))
    a_n = ad.gather(layer.a, np.arange(d, 2 * d))
    s = ad.matmul(ad.matmul(center, layer.Wc), a_c)
    t = ad.matmul(pool_h, a_n)
    e = ad.add(ad.gather(s, np.repeat(np.arange(n), k)), ad.gather(t, nbr.ravel()))
    return ad.reshape(ad.leaky_relu(e, slope), (n, k))


def gat_attention(center: Node, neighbors: Node, layer: GatLayer, slope: float = 0.2) -> Node:
    """Attention weights of one center (1 x d) over its neighbors (m x d)."""
    if neighbors.shape[0] == 0:
        raise ValueError("gat_attention needs at least one neighbor; use the cold-node fallback")
    nbr = np.arange(neighbors.shape[0])[None, :]
    pool_h = ad.matmul(neighbors, layer.Wn)
    return ad.softmax(_attention_logits(center, pool_h, nbr, layer, slope))


def gat_layer(center: Node, pool: Node, nbr: np.ndarray, mask: np.ndarray, layer: GatLayer, slope: float = 0.2) -> Node:
    """One attention-weighted aggregation step.

    ``center`` is (n x d); row i aggregates ``pool[nbr[i, j]]`` over the
    unmasked j.  Rows with no neighbors return the center row unchanged.
    """
    n, k = nbr.shape
    if k == 0 or pool.shape[0] == 0 or not mask.any():
        return center
    d = center.shape[1]
    pool_h = ad.matmul(pool, layer.Wn)
    logits = _attention_logits(center, pool_h, nbr, layer, slope)
    alpha = ad.softmax(ad.add(logits, ad.const(np.where(mask, 0.0, MASKED_LOGIT))))
    msg = ad.mul(ad.gather(pool_h, nbr.ravel()), ad.reshape(alpha, (n * k, 1)))
    # sums each block of k message rows: (n, k*d) @ stacked identities (k*d, d)
    agg = ad.matmul(ad.reshape(msg, (n, k * d)), ad.const(np.tile(np.eye(d), (k, 1))))
    out = ad.leaky_relu(agg, slope)
    has = mask.any(axis=1, keepdims=True).astype(np.float64)
    if has.all():
        return out
    return ad.add(ad.mul(out, ad.const(has)), ad.mul(center, ad.const(1.0 - has)))


def encode_two_hop(
    plan: TwoHopPlan,
    outer0: Node,
    mid0: Node,
    center_layers: tuple[GatLayer, GatLayer],
    mid_layer: GatLayer,
    slope: float = 0.2,
) -> Node:
    """Second-layer representations of ``plan.centers``.

    ``outer0`` / ``mid0`` are layer-0 vectors for ``plan.outer_ids`` /
    ``plan.mid_ids``.
    """
    c0 = ad.gather(outer0, plan.center_pos)
    c1 = gat_layer(c0, mid0, plan.center_nbr, plan.center_mask, center_layers[0], slope)
    m1 = gat_layer(mid0, outer0, plan.mid_nbr, plan.mid_mask, mid_layer, slope)
    return gat_layer(c1, m1, plan.center_nbr, plan.center_mask, center_layers[1], slope)


# ---------------------------------------------------------------------------
# the network


class LSTTM:
    """Feature tables and forward passes for one model configuration."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.user_fields = entity_fields("user", np.arange(cfg.n_users), cfg.user_field_vocab)
        self.item_fields = entity_fields("item", np.arange(cfg.n_items), cfg.item_field_vocab)

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return init_params(self.cfg, seed)

    # --- layer 0

    def user_input(self, P, ids) -> Node:
        tables = [P[f"s.user_field.{f}"] for f in range(len(self.cfg.user_field_vocab))]
        return node_input(self.user_fields[ids], tables, P["s.user_proj"])

    def item_input(self, P, ids) -> Node:
        tables = [P[f"s.item_field.{f}"] for f in range(len(self.cfg.item_field_vocab))]
        return node_input(self.item_fields[ids], tables, P["s.item_proj"])

    # --- encoders

    def short_term(self, P, plan: TwoHopPlan) -> Node:
        """u^s for ``plan.centers`` (users) over the internal graph."""
        if not self.cfg.graph_aggregation:
            return self.user_input(P, plan.centers)
        return encode_two_hop(
            plan,
            self.user_input(P, plan.outer_ids),
            self.item_input(P, plan.mid_ids),
            (GatLayer.from_params(P, "s.user.1"), GatLayer.from_params(P, "s.user.2")),
            GatLayer.from_params(P, "s.item.1"),
            self.cfg.leaky_slope,
        )

    def long_term(self, P, tables: NeighborTables, side: str = USER, centers=None) -> Node:
        """ū^l (``side=USER``) or d̄^l (``side=ITEM``) over the global graph."""
        cfg = self.cfg
        own, other = ("user", "item") if side == USER else ("item", "user")
        n_own = cfg.n_users if side == USER else cfg.n_items
        centers = np.arange(n_own) if centers is None else np.asarray(centers)
        own_emb, other_emb = P[f"l.{own}_emb"], P[f"l.{other}_emb"]
        if not cfg.graph_aggregation:
            return ad.gather(own_emb, centers)
        c_tab, m_tab = (tables.user_nbr, tables.item_nbr) if side == USER else (tables.item_nbr, tables.user_nbr)
        plan = two_hop_plan(centers, c_tab, m_tab)
        return encode_two_hop(
            plan,
            ad.gather(own_emb, plan.outer_ids),
            ad.gather(other_emb, plan.mid_ids),
            (GatLayer.from_params(P, f"l.{own}.1"), GatLayer.from_params(P, f"l.{own}.2")),
            GatLayer.from_params(P, f"l.{other}.1"),
            cfg.leaky_slope,
        )

    # --- fusion and ranking

    def fuse(self, P, u_s: Node, u_l: Node, d_s: Node) -> tuple[Node, Node | None]:
        if not self.cfg.gating:
            return ad.matmul(ad.concat([u_s, u_l], axis=1), P["f.concat_proj"]), None
        return gate_fuse(u_s, u_l, d_s, P["f.gate_s"], P["f.gate_l"])

    def logits(self, P, chunk: Chunk, u_long: Node) -> Node:
        """Pre-sigmoid click scores for one chunk of instances."""
        u_all = self.short_term(P, chunk.plan)
        u_s = ad.gather(u_all, chunk.user_row)
        u_l = ad.gather(u_long, chunk.user)
        d_s = ad.gather(P["f.item_emb"], chunk.item)
        u, _ = self.fuse(P, u_s, u_l, d_s)
        context = [ad.gather(P["f.hour_emb"], chunk.hour), ad.gather(P["f.pos_emb"], chunk.position)]
        return deepfm_logit([u, d_s, *context], P, len(self.cfg.tower))

    def batch_logits(self, P, batch: list[Chunk], u_long: Node) -> Node:
        parts = [self.logits(P, c, u_long) for c in batch if len(c)]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)

    def ce(self, P, batch: list[Chunk], u_long: Node) -> Node:
        """Cross-entropy L_T over a batch of chunks."""
        z = self.batch_logits(P, batch, u_long)
        y = np.concatenate([c.label for c in batch if len(c)]).astype(np.float64)
        return ce_from_logits(z, y)


@dataclass
class Chunk:
    """Instances that share one short-term snapshot, with their sampling plan."""

    user: np.ndarray
    item: np.ndarray
    hour: np.ndarray
    position: np.ndarray
    label: np.ndarray
    plan: TwoHopPlan
    user_row: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.user_row is None:
            self.user_row = np.searchsorted(self.plan.centers, self.user)

    def __len__(self) -> int:
        return len(self.user)


def make_chunk(tables: NeighborTables, user, item, hour, position, label) -> Chunk:
    user = np.asarray(user, dtype=np.int64)
    plan = two_hop_plan(np.unique(user), tables.user_nbr, tables.item_nbr)
    return Chunk(user, np.asarray(item, np.int64), np.asarray(hour, np.int64), np.asarray(position, np.int64),
                 np.asarray(label, np.int64), plan)


def gate_fuse(u_s: Node, u_l: Node, d_s: Node, w_s: Node, w_l: Node) -> tuple[Node, Node]:
    """Item-conditioned convex combination of the short- and long-term vectors.

    Works on single vectors (1 x d) or batches (n x d); returns ``(u, weights)``
    with weights of shape (n x 2).
    """
    g_s = ad.matmul(ad.concat([u_s, d_s], axis=1), w_s)
    g_l = ad.matmul(ad.concat([u_l, d_s], axis=1), w_l)
    weights = ad.softmax(ad.concat([g_s, g_l], axis=1))
    first = ad.matmul(weights, ad.const(np.array([[1.0], [0.0]])))
    second = ad.matmul(weights, ad.const(np.array([[0.0], [1.0]])))
    return ad.add(ad.mul(u_s, first), ad.mul(u_l, second)), weights


def fm_second_order(fields: list[Node]) -> Node:
    """Sum of pairwise dot products between field embeddings, per row."""
    terms = [
        ad.sum(ad.mul(fields[i], fields[j]), axis=1)
        for i in range(len(fields))
        for j in range(i + 1, len(fields))
    ]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def deepfm_logit(fields: list[Node], P: Mapping[str, Node], n_hidden: int, slope: float = 0.2) -> Node:
    x = ad.concat(fields, axis=1)
    first = ad.add(ad.matmul(x, P["f.lin"]), P["f.bias"])
    h = x
    for i in range(n_hidden):
        h = ad.leaky_relu(ad.add(ad.matmul(h, P[f"f.tower.{i}.W"]), P[f"f.tower.{i}.b"]), slope)
    deep = ad.add(ad.matmul(h, P["f.tower.out.W"]), P["f.tower.out.b"])
    return ad.add(ad.add(first, fm_second_order(fields)), deep)


def deepfm_score(u: Node, d_s: Node, context: list[Node], P: Mapping[str, Node], n_hidden: int) -> Node:
    """Click probability p(i, j) in (0, 1)."""
    return ad.sigmoid(deepfm_logit([u, d_s, *context], P, n_hidden))


# ---------------------------------------------------------------------------
# losses


def ce_loss(p: Node, labels) -> Node:
    """Mean cross-entropy of probabilities ``p`` against 0/1 ``labels``."""
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    if y.size == 0:
        raise ValueError("ce_loss needs at least one instance")
    if np.any(p.value <= 0.0) or np.any(p.value >= 1.0):
        raise ValueError("ce_loss: probabilities must lie strictly inside (0, 1)")
    one_minus = ad.add(ad.mul(p, -1.0), 1.0)
    total = ad.add(ad.mul(ad.log(p), ad.const(y)), ad.mul(ad.log(one_minus), ad.const(1.0 - y)))
    return ad.mul(ad.mean(total), -1.0)


def ce_from_logits(z: Node, labels) -> Node:
    """The same loss from pre-sigmoid scores: -mean(log sigmoid(+-z))."""
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    signed = ad.mul(z, ad.const(2.0 * y - 1.0))
    return ad.mul(ad.mean(ad.log(ad.sigmoid(signed))), -1.0)


def path_pairs(paths: PathSet, n_users: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of every (i < j) pair of distinct nodes on every path.

    Users map to rows ``0..n_users-1``; item ``d`` maps to ``n_users + d``.
    """
    if not paths.paths:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    rows = np.array([[n[1] + (n_users if n[0] == ITEM else 0) for n in p] for p in paths.paths], dtype=np.int64)
    i, j = np.triu_indices(rows.shape[1], k=1)
    a, b = rows[:, i].ravel(), rows[:, j].ravel()
    keep = a != b
    return a[keep], b[keep]


def neighbor_similarity_loss(
    paths: PathSet,
    user_repr: Node,
    item_repr: Node,
    negatives_per_pair: int = 2,
    seed: int = 0,
) -> Node:
    """Path co-occurrence loss over long-term representations.

    ``-(sum log sigmoid(q_i . q_j) + sum log sigmoid(-q_i . q_neg)) / n_pairs``;
    negatives are drawn uniformly over all user and item rows.
    """
    if negatives_per_pair < 0:
        raise ValueError("negatives_per_pair must be >= 0")
    n_users = user_repr.shape[0]
    a, b = path_pairs(paths, n_users)
    if a.size == 0:
        return ad.const(np.asarray(0.0))
    table = ad.concat([user_repr, item_repr], axis=0)
    qa = ad.gather(table, a)
    pos = ad.sum(ad.log(ad.sigmoid(ad.sum(ad.mul(qa, ad.gather(table, b)), axis=1))))
    total = pos
    if negatives_per_pair:
        rng = np.random.default_rng(seed)
        neg = rng.integers(0, table.shape[0], size=a.size * negatives_per_pair)
        qa_rep = ad.gather(table, np.repeat(a, negatives_per_pair))
        dots = ad.sum(ad.mul(qa_rep, ad.gather(table, neg)), axis=1)
        total = ad.add(pos, ad.sum(ad.log(ad.sigmoid(ad.mul(dots, -1.0)))))
    return ad.mul(total, -1.0 / a.size)
