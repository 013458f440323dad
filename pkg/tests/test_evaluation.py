import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsttm.datasim import EventLog
from lsttm.evaluation import (
    HourlyReport,
    auc,
    auc_pairwise,
    format_table,
    online_metrics,
    read_reports,
    run_ablation,
    temporal_eval,
    write_reports,
)

from conftest import TINY_TRAIN


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_random_twenty_matches_brute_force():
    rng = np.random.default_rng(0)
    s, y = rng.random(20), np.r_[np.ones(8), np.zeros(12)]
    assert auc(s, y) == auc_pairwise(s, y)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=200))
def test_auc_equals_pairwise_definition(rows):
    scores = np.array([r[0] for r in rows], dtype=float) / 7
    labels = np.array([int(r[1]) for r in rows])
    if labels.min() == labels.max():
        return
    assert auc(scores, labels) == auc_pairwise(scores, labels)


def test_report_periods_are_hour_means():
    r = HourlyReport("m", [0], [[0.8] * 8 + [0.9] * 8 + [0.7] * 8])
    assert r.periods == pytest.approx([0.8, 0.9, 0.7], abs=1e-15)


def test_report_median_over_seeds_and_missing_hours():
    runs = [[0.6] * 24, [0.7] * 24, [0.9] * 24]
    runs[1][3] = None
    r = HourlyReport("m", [0, 1, 2], runs)
    assert r.hours[0] == 0.7 and r.hours[3] == pytest.approx(0.75)


def test_report_rows_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    reps = [HourlyReport(name, [0, 1, 2], [rng.random(24).tolist() for _ in range(3)], "abc", ["x"]) for name in ("full", "no-meta")]
    reps[0].per_seed[1][5] = None
    write_reports(reps, tmp_path / "r.jsonl")
    back = read_reports(tmp_path / "r.jsonl")
    assert [(r.model, r.seeds, r.per_seed, r.config_hash, r.flags) for r in back] == \
           [(r.model, r.seeds, r.per_seed, r.config_hash, r.flags) for r in reps]
    write_reports(back, tmp_path / "again.jsonl")
    assert (tmp_path / "r.jsonl").read_bytes() == (tmp_path / "again.jsonl").read_bytes()


def test_table_has_one_row_per_model():
    reps = [HourlyReport(v, [0], [[0.5] * 24]) for v in ("full", "no-meta", "no-external", "no-gating", "no-gat-ln")]
    lines = format_table(reps).splitlines()
    assert len(lines) == 6 and all(len(l.split()) == 5 for l in lines[1:])


def test_all_equal_scores_give_half_every_hour(tiny_split, tiny_ckpt):
    _, test = tiny_split
    flat = dataclasses.replace(tiny_ckpt, params={k: np.zeros_like(v) for k, v in tiny_ckpt.params.items()})
    aucs, flags = temporal_eval(flat, test)
    assert all(a is None or abs(a - 0.5) <= 1e-12 for a in aucs)
    assert sum(a is not None for a in aucs) >= 20


def test_eval_is_repeatable_and_leaves_checkpoint_alone(tiny_split, tiny_ckpt):
    _, test = tiny_split
    before = {k: v.tobytes() for k, v in tiny_ckpt.params.items()}
    a, _ = temporal_eval(tiny_ckpt, test)
    b, _ = temporal_eval(tiny_ckpt, test)
    assert a == b
    assert {k: v.tobytes() for k, v in tiny_ckpt.params.items()} == before


def test_hour_result_ignores_later_hours(tiny_split, tiny_ckpt):
    _, test = tiny_split
    later = test.hour >= 12
    scrambled = dataclasses.replace(test, label=test.label.copy(), item=test.item.copy())
    rng = np.random.default_rng(0)
    scrambled.label[later] = rng.permutation(test.label[later])
    scrambled.item[later] = rng.permutation(test.item[later])
    a, _ = temporal_eval(tiny_ckpt, test)
    b, _ = temporal_eval(tiny_ckpt, scrambled)
    assert a[:12] == b[:12]


def test_hour_zero_uses_the_checkpoint_unchanged(tiny_split, tiny_ckpt):
    _, test = tiny_split
    from lsttm.trainer import Instances, Session

    a, _ = temporal_eval(tiny_ckpt, test)
    s = Session(tiny_ckpt)
    inst = Instances.from_log(test)
    q = np.flatnonzero(test.take(test.source == 0).hour == 0)
    assert a[0] == auc(s.scores(tiny_ckpt.params, s.context(inst), q), inst.label[q])


def test_single_class_hour_is_flagged(tiny_split, tiny_ckpt):
    _, test = tiny_split
    t = dataclasses.replace(test, label=test.label.copy())
    t.label[t.hour == 4] = 0
    aucs, flags = temporal_eval(tiny_ckpt, t)
    assert aucs[4] is None and any("hour 4" in f for f in flags)


def _stream(users, labels, dwell):
    n = len(users)
    z = np.zeros(n, np.int64)
    return EventLog({}, np.asarray(users), z, np.arange(n), z, np.asarray(labels), z, z, np.asarray(dwell))


def test_online_metric_examples():
    m = online_metrics(_stream(np.arange(100) % 10, [1] * 10 + [0] * 90, [5] * 10 + [0] * 90))
    assert m.ctr == 0.10
    m = online_metrics(_stream([0, 1, 2, 3], [1, 1, 1, 0], [1, 1, 1, 0]))
    assert m.hcr == 0.75


def test_online_metrics_match_recount():
    rng = np.random.default_rng(3)
    users = rng.integers(0, 30, 500)
    labels = rng.integers(0, 2, 500)
    dwell = labels * rng.integers(1, 100, 500)
    m = online_metrics(_stream(users, labels, dwell))
    per_user = {}
    for u, y, w in zip(users, labels, dwell):
        c = per_user.setdefault(u, [0, 0])
        c[0] += y
        c[1] += w
    n = len(per_user)
    assert m.ctr == sum(labels) / 500
    assert m.acn == sum(c[0] for c in per_user.values()) / n
    assert m.hcr == sum(c[0] > 0 for c in per_user.values()) / n
    assert m.dt == sum(c[1] for c in per_user.values()) / n


def test_online_metrics_reject_empty():
    with pytest.raises(ValueError):
        online_metrics(_stream([], [], []))


def test_ablation_rejects_unknown_variant(tiny_log):
    with pytest.raises(ValueError):
        run_ablation("no-everything", tiny_log, TINY_TRAIN, [0])


def test_no_gating_report_schema(tiny_log):
    r = run_ablation("no-gating", tiny_log, TINY_TRAIN, [0, 1])
    assert r.model == "no-gating" and r.seeds == [0, 1]
    assert len(r.per_seed) == 2 and all(len(run) == 24 for run in r.per_seed)
    assert len(r.periods) == 3
