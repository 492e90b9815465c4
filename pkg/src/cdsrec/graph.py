"""Cross-domain sequential graph construction.

Accounts are expanded into H latent-user nodes; items of both domains and
the latent users are linked by account-item edges (per domain) and by
directed item-item edges wherever two items appear adjacently in a
sequence. Item-item edges carry a discretized inter-event gap.

Node id layout (row order of every embedding/Laplacian downstream):
  [0, p)                domain-A items
  [p, p + n*H)          latent users, account-major
  [p + n*H, p + n*H+q)  domain-B items
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import ConfigError

DOMAIN_A = "A"
DOMAIN_B = "B"
DOMAINS = (DOMAIN_A, DOMAIN_B)

# message-edge kinds (src -> dst semantics)
SELF_LOOP = 0
ITEM_FROM_ITEM = 1
USER_FROM_ITEM = 2
ITEM_FROM_USER = 3


class DataError(ValueError):
    """Raised when input interaction data violates the format contract."""


@dataclass(frozen=True)
class InteractionSequence:
    """One account's time-ordered events in a single domain."""

    account_id: int
    domain: str
    events: tuple  # ((item_id, timestamp_seconds), ...)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r} for account {self.account_id}")
        if not self.events:
            raise DataError(f"empty sequence for account {self.account_id} domain {self.domain}")
        ts = [t for _, t in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DataError(
                f"timestamps not sorted for account {self.account_id} domain {self.domain}"
            )

    def items(self) -> list:
        return [i for i, _ in self.events]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class IntervalBucketizer:
    """Clips raw inter-event gaps and maps them to a finite bucket id."""

    clip_min: int = 60
    clip_max: int = 2 ** 20
    scheme: str = "log2"
    n_buckets: int = 21

    def __post_init__(self):
        if self.clip_min < 1:
            raise ConfigError(f"clip_min must be >= 1, got {self.clip_min}")
        if self.clip_max <= self.clip_min:
            raise ConfigError(f"clip_max must exceed clip_min, got {self.clip_max}")
        if self.scheme not in ("linear", "log2"):
            raise ConfigError(f"unknown bucket scheme {self.scheme!r}")
        if self.n_buckets < 1:
            raise ConfigError(f"n_buckets must be >= 1, got {self.n_buckets}")

    def bucket(self, delta_seconds: int) -> int:
        clipped = min(max(int(delta_seconds), self.clip_min), self.clip_max)
        if self.scheme == "linear":
            span = self.clip_max - self.clip_min
            raw = (clipped - self.clip_min) * self.n_buckets // span
        else:
            raw = int(math.log2(clipped / self.clip_min))
        return min(raw, self.n_buckets - 1)


def bucket_interval(delta_seconds: int, bucketizer: IntervalBucketizer) -> int:
    if delta_seconds < 0:
        raise ValueError(f"negative interval {delta_seconds}")
    return bucketizer.bucket(delta_seconds)


@dataclass
class NeighborSets:
    """In-neighbors of one node, partitioned by role."""

    items_a: list = field(default_factory=list)
    items_b: list = field(default_factory=list)
    users: list = field(default_factory=list)
    item_predecessors: list = field(default_factory=list)


@dataclass
class MessageEdges:
    """Flat edge arrays consumed by propagation, sorted by (dst, kind, src).

    Every node carries a self loop; `bucket` is meaningful only where
    kind == ITEM_FROM_ITEM (0 elsewhere).
    """

    src: np.ndarray
    dst: np.ndarray
    kind: np.ndarray
    bucket: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.src.size)


class CdsGraph:
    """Immutable cross-domain sequential graph; build via build_graph()."""

    def __init__(self, n_accounts, n_items_a, n_items_b, h, bucketizer,
                 account_items_a, account_items_b, item_pairs_a, item_pairs_b):
        self.n_accounts = n_accounts
        self.n_items_a = n_items_a
        self.n_items_b = n_items_b
        self.h = h
        self.bucketizer = bucketizer
        # account -> sorted item ids (domain-local) the account interacted with
        self.account_items_a = account_items_a
        self.account_items_b = account_items_b
        # (prev_item, next_item) -> interval bucket, domain-local ids
        self.item_pairs_a = item_pairs_a
        self.item_pairs_b = item_pairs_b
        self._edges: MessageEdges | None = None

    # --- node id layout -------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.n_items_a + self.n_accounts * self.h + self.n_items_b

    @property
    def user_offset(self) -> int:
        return self.n_items_a

    @property
    def item_b_offset(self) -> int:
        return self.n_items_a + self.n_accounts * self.h

    def item_a_node(self, i: int) -> int:
        return i

    def user_node(self, account: int, latent: int) -> int:
        return self.user_offset + account * self.h + latent

    def item_b_node(self, j: int) -> int:
        return self.item_b_offset + j

    def is_item_a(self, node: int) -> bool:
        return 0 <= node < self.n_items_a

    def is_user(self, node: int) -> bool:
        return self.user_offset <= node < self.item_b_offset

    def is_item_b(self, node: int) -> bool:
        return self.item_b_offset <= node < self.n_nodes

    def account_of(self, user_node: int) -> int:
        return (user_node - self.user_offset) // self.h

    # --- summary counts ---------------------------------------------------
    def edge_counts(self) -> dict:
        ui_a = sum(len(v) for v in self.account_items_a.values()) * self.h
        ui_b = sum(len(v) for v in self.account_items_b.values()) * self.h
        return {
            "user_item_a": ui_a,
            "user_item_b": ui_b,
            "item_item_a": len(self.item_pairs_a),
            "item_item_b": len(self.item_pairs_b),
        }

    # --- edge views -------------------------------------------------------
    def user_item_edges(self, domain: str):
        """Yield (user_node, item_node) pairs for one domain, deduplicated."""
        items = self.account_items_a if domain == DOMAIN_A else self.account_items_b
        to_node = self.item_a_node if domain == DOMAIN_A else self.item_b_node
        for account in sorted(items):
            for latent in range(self.h):
                u = self.user_node(account, latent)
                for item in items[account]:
                    yield (u, to_node(item))

    def item_item_edges(self, domain: str):
        """Yield (prev_node, next_node, bucket) for one domain."""
        pairs = self.item_pairs_a if domain == DOMAIN_A else self.item_pairs_b
        to_node = self.item_a_node if domain == DOMAIN_A else self.item_b_node
        for (prev, nxt), bucket in sorted(pairs.items()):
            yield (to_node(prev), to_node(nxt), bucket)

    def neighbor_sets(self, node: int) -> NeighborSets:
        """Partitioned in-neighbors (message sources) of one node."""
        if not 0 <= node < self.n_nodes:
            raise IndexError(f"node {node} outside [0, {self.n_nodes})")
        out = NeighborSets()
        if self.is_user(node):
            account = self.account_of(node)
            out.items_a = [self.item_a_node(i) for i in self.account_items_a.get(account, [])]
            out.items_b = [self.item_b_node(j) for j in self.account_items_b.get(account, [])]
            return out
        if self.is_item_a(node):
            pairs, items, to_node = self.item_pairs_a, self.account_items_a, self.item_a_node
            local = node
        else:
            pairs, items, to_node = self.item_pairs_b, self.account_items_b, self.item_b_node
            local = node - self.item_b_offset
        out.item_predecessors = sorted(
            to_node(prev) for (prev, nxt) in pairs if nxt == local
        )
        for account in sorted(items):
            if local in items[account]:
                out.users.extend(self.user_node(account, l) for l in range(self.h))
        return out

    def message_edges(self) -> MessageEdges:
        """All message-passing edges incl. self loops, lazily built and cached."""
        if self._edges is not None:
            return self._edges
        src, dst, kind, bucket = [], [], [], []

        for node in range(self.n_nodes):
            src.append(node)
            dst.append(node)
            kind.append(SELF_LOOP)
            bucket.append(0)
        for domain in DOMAINS:
            for u, item in self.user_item_edges(domain):
                src.append(item)
                dst.append(u)
                kind.append(USER_FROM_ITEM)
                bucket.append(0)
                src.append(u)
                dst.append(item)
                kind.append(ITEM_FROM_USER)
                bucket.append(0)
            for prev, nxt, b in self.item_item_edges(domain):
                src.append(prev)
                dst.append(nxt)
                kind.append(ITEM_FROM_ITEM)
                bucket.append(b)

        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        kind = np.asarray(kind, dtype=np.int64)
        bucket = np.asarray(bucket, dtype=np.int64)
        order = np.lexsort((src, kind, dst))
        self._edges = MessageEdges(src[order], dst[order], kind[order], bucket[order])
        return self._edges

    def in_degrees(self) -> np.ndarray:
        """In-neighbor count per node, self loop included."""
        edges = self.message_edges()
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, edges.dst, 1)
        return deg


def build_graph(sequences, h: int, bucketizer: IntervalBucketizer,
                n_accounts: int | None = None,
                n_items_a: int | None = None,
                n_items_b: int | None = None,
                include_item_edges: bool = True) -> CdsGraph:
    """Assemble a CdsGraph from interaction sequences.

    Table sizes default to max-id + 1 over the input; pass them explicitly
    when the id tables are larger than what the sequences cover (items
    seen only at test time still need node slots). Duplicate adjacent item
    pairs keep the bucket of the most recent occurrence.
    """
    if h < 1:
        raise ConfigError(f"latent users per account must be >= 1, got {h}")

    max_acc = max((s.account_id for s in sequences), default=-1)
    max_a = max((i for s in sequences if s.domain == DOMAIN_A for i in s.items()), default=-1)
    max_b = max((i for s in sequences if s.domain == DOMAIN_B for i in s.items()), default=-1)
    n_accounts = max_acc + 1 if n_accounts is None else n_accounts
    n_items_a = max_a + 1 if n_items_a is None else n_items_a
    n_items_b = max_b + 1 if n_items_b is None else n_items_b

    account_items_a: dict[int, list] = {}
    account_items_b: dict[int, list] = {}
    # pair -> (last timestamp, bucket); ties resolved toward the larger bucket
    ranked_pairs_a: dict[tuple, tuple] = {}
    ranked_pairs_b: dict[tuple, tuple] = {}
    seen_items_a: dict[int, set] = {}
    seen_items_b: dict[int, set] = {}

    for seq in sequences:
        n_items = n_items_a if seq.domain == DOMAIN_A else n_items_b
        if not 0 <= seq.account_id < n_accounts:
            raise DataError(
                f"account id {seq.account_id} outside [0, {n_accounts}) "
                f"(domain {seq.domain} sequence)"
            )
        seen = seen_items_a if seq.domain == DOMAIN_A else seen_items_b
        ranked = ranked_pairs_a if seq.domain == DOMAIN_A else ranked_pairs_b
        bucket_of = seen.setdefault(seq.account_id, set())
        prev_item = prev_ts = None
        for pos, (item, ts) in enumerate(seq.events):
            if not 0 <= item < n_items:
                raise DataError(
                    f"item id {item} outside [0, {n_items}) at account {seq.account_id} "
                    f"domain {seq.domain} event {pos}"
                )
            bucket_of.add(item)
            if include_item_edges and prev_item is not None and prev_item != item:
                b = bucketizer.bucket(ts - prev_ts)
                key = (prev_item, item)
                stamp = (ts, b)
                if key not in ranked or stamp > ranked[key]:
                    ranked[key] = stamp
            prev_item, prev_ts = item, ts

    for acc, items in seen_items_a.items():
        account_items_a[acc] = sorted(items)
    for acc, items in seen_items_b.items():
        account_items_b[acc] = sorted(items)
    item_pairs_a = {k: v[1] for k, v in ranked_pairs_a.items()}
    item_pairs_b = {k: v[1] for k, v in ranked_pairs_b.items()}

    return CdsGraph(n_accounts, n_items_a, n_items_b, h, bucketizer,
                    account_items_a, account_items_b, item_pairs_a, item_pairs_b)
