import dataclasses

import pytest

from lsttm.datasim import SimConfig, generate, split
from lsttm.trainer import TrainerConfig, daily_full_train

TINY_SIM = SimConfig(n_users=40, n_internal_items=12, n_external_items=20, days=3,
                     internal_per_user_day=24, external_per_user_day=12, seed=1)
TINY_TRAIN = TrainerConfig(maml_epochs=2, long_term_epochs=2, tasks_per_batch=4, support_size=32, query_size=32,
                           k_neighbors=4, walk_length=4, paths_per_step=64, dim=4, tower=(6,), seed=0)


@pytest.fixture(scope="session")
def tiny_log():
    return generate(TINY_SIM)


@pytest.fixture(scope="session")
def tiny_split(tiny_log):
    return split(tiny_log, int(tiny_log.day.max()))


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_split):
    train, _ = tiny_split
    return daily_full_train(train, TINY_TRAIN, int(train.day.max()) + 1)


def tiny_config(**kw):
    return dataclasses.replace(TINY_TRAIN, **kw)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
