"""Temporal CTR evaluation: hourly AUC with one-step adaptation on the earlier
hours of the test day, period grouping, online metrics and ablation runs."""

from __future__ import annotations

import dataclasses
import json
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .datasim import EventLog, split
from .graphstore import INTERNAL
from .optim import inner_update
from .trainer import VARIANTS, Checkpoint, Instances, Session, TrainerConfig, daily_full_train, hash_seed

PERIODS = ((0, 8), (8, 16), (16, 24))


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2).

    Computed from the rank-sum with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc is undefined without both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    # rank sums of tied groups are multiples of 1/2, so this stays exact in float64
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(P * N) reference definition."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p, n = scores[labels == 1], scores[labels != 1]
    if len(p) == 0 or len(n) == 0:
        raise ValueError("auc is undefined without both positive and negative labels")
    wins = (p[:, None] > n[None, :]).sum() + 0.5 * (p[:, None] == n[None, :]).sum()
    return float(wins / (len(p) * len(n)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class HourlyReport:
    model: str
    seeds: list[int]
    per_seed: list[list[float | None]]  # one 24-entry list per seed; None marks an omitted hour
    config_hash: str = ""
    flags: list[str] = field(default_factory=list)

    @property
    def hours(self) -> list[float | None]:
        """Median over seeds of each hour's AUC."""
        out = []
        for h in range(24):
            vals = [run[h] for run in self.per_seed if run[h] is not None]
            out.append(statistics.median(vals) if vals else None)
        return out

    @property
    def periods(self) -> list[float | None]:
        hours = self.hours
        out = []
        for lo, hi in PERIODS:
            vals = [a for a in hours[lo:hi] if a is not None]
            out.append(float(np.mean(vals)) if vals else None)
        return out

    def mean_auc(self, lo: int = 0, hi: int = 24) -> float:
        vals = [a for a in self.hours[lo:hi] if a is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for seed, run in zip(self.seeds, self.per_seed):
            for hour, a in enumerate(run):
                out.append({"model": self.model, "seed": seed, "hour": hour, "auc": a, "config_hash": self.config_hash})
        return out

    @classmethod
    def from_rows(cls, rows: Iterable[dict]) -> list[HourlyReport]:
        by_model: dict[str, dict] = {}
        for r in rows:
            if r.get("kind") == "flag":
                by_model.setdefault(r["model"], {"runs": {}, "hash": "", "flags": []})["flags"].append(r["flag"])
                continue
            m = by_model.setdefault(r["model"], {"runs": {}, "hash": "", "flags": []})
            m["hash"] = r.get("config_hash", "")
            m["runs"].setdefault(r["seed"], [None] * 24)[r["hour"]] = r["auc"]
        return [
            cls(model, list(m["runs"]), [m["runs"][s] for s in m["runs"]], m["hash"], m["flags"])
            for model, m in by_model.items()
        ]

    def table(self) -> str:
        return format_table([self])


def format_table(reports: Sequence[HourlyReport]) -> str:
    width = max([len("model")] + [len(r.model) for r in reports])
    lines = [f"{'model':<{width}}  period1  period2  period3  seeds"]
    for r in reports:
        cells = "  ".join(f"{p:7.4f}" if p is not None else "    n/a" for p in r.periods)
        lines.append(f"{r.model:<{width}}  {cells}  {len(r.seeds)}")
    return "\n".join(lines)


def write_reports(reports: Sequence[HourlyReport], path) -> None:
    """Line-delimited JSON rows (model, seed, hour, auc), written atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w") as fh:
            for r in reports:
                for row in r.rows():
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
                for flag in r.flags:
                    fh.write(json.dumps({"kind": "flag", "model": r.model, "flag": flag}, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_reports(path) -> list[HourlyReport]:
    with open(path) as fh:
        return HourlyReport.from_rows(json.loads(line) for line in fh if line.strip())


# ---------------------------------------------------------------------------
# temporal protocol


def temporal_eval(
    ckpt: Checkpoint,
    test: EventLog,
    model_name: str = "LSTTM",
    support_size: int | None = None,
    seed: int | None = None,
) -> tuple[list[float | None], list[str]]:
    """Hourly AUC on the test day.

    Hour ``t`` is scored after one plain gradient step from the checkpoint on
    every test instance of hours ``< t`` (optionally subsampled to
    ``support_size``).  The checkpoint itself is never modified.
    """
    cfg = ckpt.config
    support_size = cfg.eval_support_size if support_size is None else support_size
    seed = cfg.seed if seed is None else seed
    session = Session(ckpt)
    inst = Instances.from_log(test)
    if len(inst) == 0:
        raise ValueError("test log has no internal instances")
    for e in test.take((test.source == 0) & (test.label == 1)).records():
        session.short.add_edge(e.user, e.item, e.timestamp, INTERNAL)
    ctx = session.context(inst)
    grad_fn = session.grad_fn(ctx)
    day_start = int(inst.global_hour.min()) // 24 * 24
    hours = inst.global_hour - day_start
    aucs: list[float | None] = []
    flags: list[str] = []
    for t in range(24):
        query = np.flatnonzero(hours == t)
        support = np.flatnonzero(hours < t)
        if support_size and len(support) > support_size:
            rng = np.random.default_rng(hash_seed(seed, 31, t))
            support = np.sort(rng.choice(support, size=support_size, replace=False))
        params = ckpt.params
        if len(support):
            params = inner_update(ckpt.params, grad_fn, support, cfg.inner_lr, cfg.inner_rule)
        labels = inst.label[query]
        if len(query) == 0 or labels.min() == labels.max():
            aucs.append(None)
            flags.append(f"{model_name}: hour {t} omitted (single-class or empty)")
            continue
        aucs.append(auc(session.scores(params, ctx, query), labels))
    return aucs, flags


def evaluate_report(ckpt: Checkpoint, test: EventLog, model_name: str = "LSTTM") -> HourlyReport:
    aucs, flags = temporal_eval(ckpt, test, model_name)
    return HourlyReport(model_name, [ckpt.config.seed], [aucs], ckpt.config_hash, flags)


# ---------------------------------------------------------------------------
# online metrics


@dataclass(frozen=True)
class OnlineMetrics:
    ctr: float
    acn: float
    hcr: float
    dt: float


def online_metrics(stream: EventLog) -> OnlineMetrics:
    """CTR, clicks per user, has-click rate and dwell time per user over internal rows."""
    rows = stream.take(stream.source == 0)
    impressions = len(rows)
    users = np.unique(rows.user)
    if impressions == 0 or len(users) == 0:
        raise ValueError("online metrics need at least one impression and one user")
    clicks = int(rows.label.sum())
    clickers = len(np.unique(rows.user[rows.label == 1]))
    return OnlineMetrics(
        ctr=clicks / impressions,
        acn=clicks / len(users),
        hcr=clickers / len(users),
        dt=float(rows.dwell.sum()) / len(users),
    )


# ---------------------------------------------------------------------------
# ablations


def run_ablation(variant: str, events: EventLog, config: TrainerConfig, seeds: Sequence[int]) -> HourlyReport:
    """Train and evaluate ``variant`` once per seed on the same train/test split."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    boundary = int(events.day.max())
    train, test = split(events, boundary)
    runs, flags, digest = [], [], ""
    for s in seeds:
        cfg = dataclasses.replace(config, variant=variant, seed=s)
        ckpt = daily_full_train(train, cfg, boundary)
        aucs, f = temporal_eval(ckpt, test, variant)
        runs.append(aucs)
        flags.extend(f)
        digest = ckpt.config_hash
    return HourlyReport(variant, list(seeds), runs, digest, flags)
