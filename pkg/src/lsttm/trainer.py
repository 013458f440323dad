"""Temporal meta-learning of the short-term and fusion partitions, asynchronous
neighbor-similarity training of the long-term partition, and the simulated
daily / hourly serving schedule.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .datasim import SECONDS_PER_HOUR, EventLog, to_kv
from .graphstore import EXTERNAL, INTERNAL, ITEM, USER, InteractionGraph
from .optim import INNER_RULES, Adagrad, inner_update, meta_gradient

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-meta", "no-external", "no-gating", "no-gat-ln")


@dataclass(frozen=True)
class TrainerConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.01
    tasks_per_batch: int = 8
    support_size: int = 128
    query_size: int = 128
    k_neighbors: int = 30
    adagrad_eps: float = 1e-8
    lambda_t: float = 1.0
    lambda_n: float = 1.0
    meta_mode: str = "first-order"
    inner_rule: str = "sgd"
    maml_epochs: int = 30
    long_term_epochs: int = 20
    long_term_lr: float = 0.05
    paths_per_node: int = 1
    walk_length: int = 10
    paths_per_step: int = 512
    negatives_per_pair: int = 2
    user_groups: int = 0
    online_mode: str = "cumulative"
    eval_support_size: int = 0
    rescale_long_term: bool = True
    variant: str = "full"
    dim: int = 16
    tower: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("step sizes must be non-negative")
        for name in ("tasks_per_batch", "support_size", "query_size", "k_neighbors", "walk_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.meta_mode not in ("first-order", "exact"):
            raise ValueError(f"unknown meta_mode {self.meta_mode!r}")
        if self.inner_rule not in INNER_RULES:
            raise ValueError(f"unknown inner_rule {self.inner_rule!r}")
        if self.online_mode not in ("cumulative", "prefix"):
            raise ValueError(f"unknown online_mode {self.online_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def model_config(self, header: Mapping) -> M.ModelConfig:
        return M.ModelConfig.from_header(
            header,
            dim=self.dim,
            tower=tuple(self.tower),
            gating=self.variant != "no-gating",
            graph_aggregation=self.variant != "no-gat-ln",
        )

    def digest(self) -> str:
        return hashlib.sha256(to_kv(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# instances and graphs


@dataclass
class Instances:
    """Internal impressions (the rows L_T is computed on)."""

    user: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    label: np.ndarray
    position: np.ndarray

    @classmethod
    def from_log(cls, events: EventLog) -> Instances:
        m = events.source == 0
        return cls(events.user[m], events.item[m], events.ts[m], events.label[m], events.position[m])

    def __len__(self) -> int:
        return len(self.ts)

    @property
    def global_hour(self) -> np.ndarray:
        return self.ts // SECONDS_PER_HOUR

    def concat(self, other: Instances) -> Instances:
        return Instances(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in _INST))


_INST = ("user", "item", "ts", "label", "position")


def build_graphs(events: EventLog, external: bool = True) -> tuple[InteractionGraph, InteractionGraph]:
    """Short-term (internal clicks) and long-term (all clicks) graphs."""
    short, long = InteractionGraph("short"), InteractionGraph("long")
    clicked = events.label == 1
    for u, d, t, s in zip(*(a[clicked].tolist() for a in (events.user, events.item, events.ts, events.source))):
        if s == 0:
            short.add_edge(u, d, t, INTERNAL)
            long.add_edge(u, d, t, INTERNAL)
        elif external:
            long.add_edge(u, d, t, EXTERNAL)
    return short, long


class TemporalContext:
    """Instances plus graphs, with per-hour short-term neighbor tables.

    The instances of global hour ``h`` are always encoded against the
    short-term snapshot that ends just before ``h`` starts.
    """

    def __init__(self, net: M.LSTTM, instances: Instances, short: InteractionGraph, k: int):
        self.net = net
        self.inst = instances
        self.short = short
        self.k = k
        self.hour = instances.global_hour
        self._tables: dict[int, M.NeighborTables] = {}

    def tables(self, hour: int) -> M.NeighborTables:
        t = self._tables.get(hour)
        if t is None:
            snap = self.short.snapshot(hour * SECONDS_PER_HOUR - 1)
            cfg = self.net.cfg
            t = M.neighbor_tables(snap, cfg.n_users, cfg.n_items, self.k, "temporal")
            self._tables[hour] = t
        return t

    def chunks(self, rows: np.ndarray) -> list[M.Chunk]:
        rows = np.asarray(rows, dtype=np.int64)
        out = []
        hours = self.hour[rows]
        for h in np.unique(hours):
            r = rows[hours == h]
            i = self.inst
            out.append(M.make_chunk(self.tables(int(h)), i.user[r], i.item[r], (i.ts[r] // SECONDS_PER_HOUR) % 24,
                                    i.position[r], i.label[r]))
        return out

    def forget_before(self, hour: int) -> None:
        for h in [h for h in self._tables if h < hour]:
            del self._tables[h]


def long_term_tables(net: M.LSTTM, long: InteractionGraph, k: int, seed: int) -> M.NeighborTables:
    snap = long.snapshot(max(long.max_timestamp, 0))
    return M.neighbor_tables(snap, net.cfg.n_users, net.cfg.n_items, k, "uniform", seed)


def long_term_users(net: M.LSTTM, params: Mapping[str, np.ndarray], tables: M.NeighborTables,
                    rescale: bool = False) -> np.ndarray:
    """ū^l for every user, as a plain array (the fixed-within-a-day representation).

    With ``rescale`` the table is column-centered and divided by its mean row
    norm, so the fusion layers see unit-scale vectors however far L_N shrank them.
    """
    u = net.long_term(M.as_nodes(params, ""), tables, USER).value
    if rescale:
        u = u - u.mean(axis=0)
        scale = float(np.linalg.norm(u, axis=1).mean())
        if scale > 0:
            u = u / scale
    return u


def lt_grad_fn(net: M.LSTTM, u_long: np.ndarray, ctx: TemporalContext):
    """``grad_fn(params, rows)`` for L_T; only s. and f. parameters receive gradients."""
    const_long = ad.const(u_long)

    def grad_fn(params, rows):
        P = M.as_nodes(params, "sf")
        loss = net.ce(P, ctx.chunks(rows), const_long)
        names = [k for k in params if k[0] in "sf"]
        grads = ad.backward(loss, [P[k] for k in names])
        return float(loss.value), {k: grads[P[k]] for k in names}

    return grad_fn


# ---------------------------------------------------------------------------
# temporal tasks


@dataclass
class TemporalTask:
    support_hour: int  # global hour index
    query_hour: int
    day: int
    hour_id: int  # hour of day of the support set
    support: np.ndarray  # instance rows
    query: np.ndarray
    group: int | None = None


def build_tasks(instances: Instances, groups: np.ndarray | None = None) -> list[TemporalTask]:
    """One task per adjacent pair of non-empty hours (per user group if given)."""
    hour = instances.global_hour
    keys = [None] if groups is None else np.unique(groups[instances.user]).tolist()
    tasks = []
    for g in keys:
        mask = np.ones(len(instances), bool) if g is None else groups[instances.user] == g
        rows = np.flatnonzero(mask)
        by_hour = {int(h): rows[hour[rows] == h] for h in np.unique(hour[rows])}
        for h in sorted(by_hour):
            if h + 1 in by_hour:
                tasks.append(TemporalTask(h, h + 1, h // 24, h % 24, by_hour[h], by_hour[h + 1], g))
    return tasks


def sample_task_batch(pool: Sequence[TemporalTask], n: int, seed) -> list[TemporalTask]:
    """``n`` tasks with distinct hours of day, spread over distinct days first."""
    if len(pool) < n:
        raise ValueError(f"pool of {len(pool)} tasks is smaller than the batch size {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    chosen: list[int] = []
    hours: set[int] = set()
    days: set[int] = set()
    for need_new_day in (True, False):
        for i in order:
            if len(chosen) == n:
                break
            t = pool[i]
            if i in chosen or t.hour_id in hours or (need_new_day and t.day in days):
                continue
            chosen.append(int(i))
            hours.add(t.hour_id)
            days.add(t.day)
    if len(chosen) < n:
        log.warning("only %d distinct hours available for a batch of %d; relaxing distinctness", len(chosen), n)
        chosen.extend(int(i) for i in order if i not in chosen)
        chosen = chosen[:n]
    return [pool[i] for i in chosen]


def _subsample(rows: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if size <= 0 or len(rows) <= size:
        return rows
    return np.sort(rng.choice(rows, size=size, replace=False))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    accumulators: dict[str, np.ndarray]
    header: dict
    config: TrainerConfig
    short_edges: np.ndarray  # (n, 3): user, item, ts in insertion order
    long_edges: np.ndarray
    day: int  # last full-train day (exclusive boundary of the training data)
    last_hour: int = -1  # last global hour applied by online_step
    base_params: dict[str, np.ndarray] = field(default_factory=dict)
    day_instances: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def copy(self) -> Checkpoint:
        return dataclasses.replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            accumulators={k: v.copy() for k, v in self.accumulators.items()},
            short_edges=self.short_edges.copy(),
            day_instances=self.day_instances.copy(),
        )

    def graphs(self) -> tuple[InteractionGraph, InteractionGraph]:
        n_int = self.header["n_internal_items"]
        short, long = InteractionGraph("short"), InteractionGraph("long")
        for u, d, t in self.short_edges.astype(np.int64).tolist():
            short.add_edge(u, d, t, INTERNAL)
        for u, d, t in self.long_edges.astype(np.int64).tolist():
            long.add_edge(u, d, t, INTERNAL if d < n_int else EXTERNAL)
        return short, long


def graph_edges(g: InteractionGraph) -> np.ndarray:
    e = g.edges()
    if not e:
        return np.zeros((0, 3))
    return np.asarray([(u, d, t) for _, u, d, t in e], dtype=np.float64)


# ---------------------------------------------------------------------------
# the trainer


class Trainer:
    """Owns parameters, optimizer state and graphs for one training run."""

    def __init__(self, config: TrainerConfig, header: Mapping):
        self.config = config
        self.header = dict(header)
        self.net = M.LSTTM(config.model_config(header))
        self.params = self.net.init_params(config.seed)
        self.opt = Adagrad(config.outer_lr, config.adagrad_eps)
        self.long_opt = Adagrad(config.long_term_lr, config.adagrad_eps)
        self.history: list[tuple[str, int, float]] = []

    # --- loss callbacks

    def ln_loss(self, P, tables: M.NeighborTables, paths, seed: int):
        u = self.net.long_term(P, tables, USER)
        d = self.net.long_term(P, tables, ITEM)
        return M.neighbor_similarity_loss(paths, u, d, self.config.negatives_per_pair, seed)

    # --- long-term phase

    def train_long_term(self, long: InteractionGraph, epochs: int | None = None) -> list[float]:
        """Adagrad descent of L_N on θ_l over fresh DeepWalk paths each epoch."""
        cfg = self.config
        epochs = cfg.long_term_epochs if epochs is None else epochs
        if long.n_edges == 0:
            raise ValueError("long-term graph is empty")
        snap = long.snapshot(long.max_timestamp)
        tables = long_term_tables(self.net, long, cfg.k_neighbors, cfg.seed)
        losses = []
        for epoch in range(epochs):
            paths = snap.deepwalk_paths(cfg.paths_per_node, cfg.walk_length, seed=hash_seed(cfg.seed, 11, epoch))
            order = np.random.default_rng(hash_seed(cfg.seed, 12, epoch)).permutation(len(paths))
            epoch_loss = []
            for step, start in enumerate(range(0, len(order), cfg.paths_per_step)):
                sub = type(paths)([paths.paths[i] for i in order[start:start + cfg.paths_per_step]], paths.length, paths.seed)
                P = M.as_nodes(self.params, "l")
                loss = self.ln_loss(P, tables, sub, hash_seed(cfg.seed, 13, epoch, step))
                names = [k for k in self.params if k[0] == "l"]
                grads = ad.backward(loss, [P[k] for k in names])
                g = {k: grads[P[k]] for k in names}
                self.params = self.long_opt.step(self.params, g, cfg.lambda_n)
                epoch_loss.append(float(loss.value))
            losses.append(float(np.mean(epoch_loss)))
            self.history.append(("L_N", epoch, losses[-1]))
        return losses

    # --- short-term / fusion phase

    def meta_train(self, ctx: TemporalContext, u_long: np.ndarray, epochs: int | None = None) -> list[float]:
        """Temporal MAML epochs (or plain mini-batch training for ``no-meta``)."""
        cfg = self.config
        epochs = cfg.maml_epochs if epochs is None else epochs
        groups = None
        if cfg.user_groups > 0:
            groups = self.net.user_fields[:, 0] % cfg.user_groups
        pool = build_tasks(ctx.inst, groups)
        if not pool:
            raise ValueError("no temporal tasks: need at least two adjacent non-empty hours")
        n = min(cfg.tasks_per_batch, len(pool))
        steps = max(1, len(pool) // n)
        grad_fn = lt_grad_fn(self.net, u_long, ctx)
        losses = []
        for epoch in range(epochs):
            epoch_loss = []
            for step in range(steps):
                batch = sample_task_batch(pool, n, hash_seed(cfg.seed, 21, epoch, step))
                pairs = []
                for t in batch:
                    rng = np.random.default_rng(hash_seed(cfg.seed, 22, epoch, t.support_hour, t.group or 0))
                    pairs.append((_subsample(t.support, cfg.support_size, rng), _subsample(t.query, cfg.query_size, rng)))
                epoch_loss.append(self.meta_step(grad_fn, pairs))
            losses.append(float(np.mean(epoch_loss)))
            self.history.append(("L_T", epoch, losses[-1]))
        return losses

    def meta_step(self, grad_fn, pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
        cfg = self.config
        total = None
        losses = []
        for support, query in pairs:
            if cfg.variant == "no-meta":
                loss, g = grad_fn(self.params, np.concatenate([support, query]))
            else:
                loss, g, _ = meta_gradient(self.params, grad_fn, support, query, cfg.inner_lr, cfg.meta_mode, cfg.inner_rule)
            losses.append(loss)
            total = g if total is None else {k: total[k] + g[k] for k in total}
        mean = {k: v / len(pairs) for k, v in total.items()}
        self.params = self.opt.step(self.params, mean, cfg.lambda_t)
        return float(np.mean(losses))

    # --- checkpoints

    def checkpoint(self, short: InteractionGraph, long: InteractionGraph, day: int) -> Checkpoint:
        return Checkpoint(
            params={k: v.copy() for k, v in self.params.items()},
            accumulators={f"{k}": v.copy() for k, v in {**prefixed("opt", self.opt.acc), **prefixed("long", self.long_opt.acc)}.items()},
            header=self.header,
            config=self.config,
            short_edges=graph_edges(short),
            long_edges=graph_edges(long),
            day=day,
            base_params={k: v.copy() for k, v in self.params.items() if k[0] in "sf"},
        )


def prefixed(prefix: str, d: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in d.items()}


def hash_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts."""
    return int.from_bytes(hashlib.sha256(repr(tuple(int(p) for p in parts)).encode()).digest()[:8], "little") >> 1


# ---------------------------------------------------------------------------
# schedule


def daily_full_train(events: EventLog, config: TrainerConfig, day: int | None = None) -> Checkpoint:
    """Long-term phase, then temporal-MAML phase, on every event before ``day``."""
    if day is not None:
        events = events.take(events.day < day)
    hours = np.unique(events.global_hour[events.source == 0])
    if len(hours) < 2:
        raise ValueError("training events must span at least two hours")
    day = int(events.day.max()) + 1 if day is None else day
    trainer = Trainer(config, events.header)
    short, long = build_graphs(events, external=config.variant != "no-external")
    if config.variant != "no-gat-ln":
        trainer.train_long_term(long)
    tables = long_term_tables(trainer.net, long, config.k_neighbors, config.seed)
    u_long = long_term_users(trainer.net, trainer.params, tables, config.rescale_long_term)
    ctx = TemporalContext(trainer.net, Instances.from_log(events), short, config.k_neighbors)
    trainer.meta_train(ctx, u_long)
    ckpt = trainer.checkpoint(short, long, day)
    ckpt.history = trainer.history
    return ckpt


class Session:
    """A checkpoint made live: rebuilt graphs, the fixed long-term user vectors and
    a cache of short-term neighbor tables."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        cfg = ckpt.config
        self.net = M.LSTTM(cfg.model_config(ckpt.header))
        self.short, self.long = ckpt.graphs()
        tables = long_term_tables(self.net, self.long, cfg.k_neighbors, cfg.seed)
        self.u_long = long_term_users(self.net, ckpt.params, tables, cfg.rescale_long_term)

    def context(self, instances: Instances) -> TemporalContext:
        return TemporalContext(self.net, instances, self.short, self.ckpt.config.k_neighbors)

    def grad_fn(self, ctx: TemporalContext):
        return lt_grad_fn(self.net, self.u_long, ctx)

    def scores(self, params: Mapping[str, np.ndarray], ctx: TemporalContext, rows) -> np.ndarray:
        P = M.as_nodes(params, "")
        chunks = ctx.chunks(rows)
        if not chunks:
            return np.zeros(0)
        z = self.net.batch_logits(P, chunks, ad.const(self.u_long)).value.ravel()
        # chunks come out grouped by hour; restore the caller's row order
        order = np.concatenate([np.flatnonzero(ctx.hour[rows] == h) for h in np.unique(ctx.hour[rows])])
        out = np.empty(len(rows))
        out[order] = 1.0 / (1.0 + np.exp(-z))
        return out


def online_step(ckpt: Checkpoint, events: EventLog, session: Session | None = None) -> Checkpoint:
    """Append one hour of events and take one plain gradient step on θ_s, θ_f."""
    out = ckpt.copy()
    if len(events) == 0:
        return out
    hours = np.unique(events.global_hour)
    if len(hours) != 1:
        raise ValueError(f"online_step expects events from a single hour, got {len(hours)} hours")
    hour = int(hours[0])
    if hour <= ckpt.last_hour:
        raise ValueError(f"hour {hour} is not after the last update (hour {ckpt.last_hour})")
    out.last_hour = hour
    session = session or Session(ckpt)
    clicked = (events.label == 1) & (events.source == 0)
    new_edges = np.stack([events.user[clicked], events.item[clicked], events.ts[clicked]], axis=1).astype(np.float64)
    for u, d, t in new_edges.astype(np.int64).tolist():
        session.short.add_edge(u, d, t, INTERNAL)
    out.short_edges = np.concatenate([out.short_edges, new_edges]) if len(new_edges) else out.short_edges
    inst = Instances.from_log(events)
    if len(inst) == 0:
        return out
    rows_arr = np.stack([getattr(inst, f) for f in _INST], axis=1).astype(np.float64)
    out.day_instances = np.concatenate([out.day_instances, rows_arr])
    cfg = ckpt.config
    if cfg.online_mode == "prefix" and ckpt.base_params:
        day_inst = Instances(*(out.day_instances[:, j].astype(np.int64) for j in range(len(_INST))))
        ctx = session.context(day_inst)
        start = {**ckpt.params, **ckpt.base_params}
        out.params = inner_update(start, session.grad_fn(ctx), np.arange(len(day_inst)), cfg.inner_lr, cfg.inner_rule)
    else:
        ctx = session.context(inst)
        out.params = inner_update(ckpt.params, session.grad_fn(ctx), np.arange(len(inst)), cfg.inner_lr, cfg.inner_rule)
    return out


# ---------------------------------------------------------------------------
# checkpoint file format

MAGIC = b"LSTTM-CKPT\x001\n"


def _config_json(cfg: TrainerConfig) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v) for f in dataclasses.fields(cfg)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Manifest (JSON) followed by flat little-endian float64 arrays; written atomically."""
    import os

    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    arrays += [(f"base/{k}", v) for k, v in sorted(ckpt.base_params.items())]
    arrays += [(f"acc/{k}", v) for k, v in sorted(ckpt.accumulators.items())]
    arrays += [("graph/short", ckpt.short_edges), ("graph/long", ckpt.long_edges), ("day/instances", ckpt.day_instances)]
    entries, offset = [], 0
    for name, a in arrays:
        a = np.asarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    manifest = {
        "arrays": entries,
        "clock": {"day": ckpt.day, "last_hour": ckpt.last_hour},
        "config": _config_json(ckpt.config),
        "config_hash": ckpt.config_hash,
        "header": ckpt.header,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("ascii")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for _, a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    n = int.from_bytes(data[pos:pos + 8], "little")
    manifest = json.loads(data[pos + 8:pos + 8 + n])
    body = memoryview(data)[pos + 8 + n:]
    arrays = {}
    for e in manifest["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(body, dtype="<f8", count=size, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float64)
    cfg_raw = manifest["config"]
    cfg_raw["tower"] = tuple(cfg_raw["tower"])
    config = TrainerConfig(**cfg_raw)
    if config.digest() != manifest["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return Checkpoint(
        params=group("param/"),
        accumulators=group("acc/"),
        header=manifest["header"],
        config=config,
        short_edges=arrays["graph/short"],
        long_edges=arrays["graph/long"],
        day=manifest["clock"]["day"],
        last_hour=manifest["clock"]["last_hour"],
        base_params=group("base/"),
        day_instances=arrays["day/instances"],
    )
