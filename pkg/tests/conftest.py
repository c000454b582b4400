import numpy as np
import pytest

from factorrec.config import TrainConfig
from factorrec.graph import build_graph, split_holdout
from factorrec.synthetic import planted_factor_data
from factorrec.trainer import init_params, train

TOY_INTERACTIONS = [("u1", "i1"), ("u1", "i2"), ("u2", "i2"), ("u2", "i3"), ("u2", "i4"), ("u3", "i4"), ("u3", "i1")]
TOY_ITEM_ENTITY = [("i1", "e1"), ("i1", "e2"), ("i2", "e2"), ("i3", "e3"), ("i4", "e1"), ("i4", "e3")]


def toy_config(**kw):
    base = dict(C1=2, C2=2, D=3, gamma=0.5, l2_weight=0.01, init_scale=0.5, seed=3, mc_samples=2)
    base.update(kw)
    return TrainConfig(**base)


def params64(graph, config):
    return {k: v.astype(np.float64) for k, v in init_params(graph, config).items()}


@pytest.fixture(scope="session")
def toy_graph():
    return build_graph(TOY_INTERACTIONS, TOY_ITEM_ENTITY)


@pytest.fixture(scope="session")
def planted():
    inter, ie, clusters = planted_factor_data(seed=0)
    graph = build_graph(inter, ie)
    split = split_holdout(graph, seed=0, n_val=20, n_test=30)
    return graph, split, clusters


@pytest.fixture(scope="session")
def trained_small(planted):
    """A few epochs on the planted data; enough for explanation and faithfulness checks."""
    graph, split, clusters = planted
    cfg = TrainConfig(C1=2, C2=2, D=8, gamma=0.1, lr=0.01, l2_weight=1e-6, batch_size=16, epochs=8, seed=0,
                      mc_samples=4, select_k=10)
    return split, cfg, train(split, cfg)


@pytest.fixture(scope="session")
def faith_model():
    """Four overlapping-preference clusters; hard enough that Recall@10 is well below 1."""
    inter, ie, _ = planted_factor_data(seed=0, n_users=200, n_clusters=4, items_per_cluster=30,
                                       entities_per_cluster=10, interactions_per_user=12, preferred_share=0.75)
    split = split_holdout(build_graph(inter, ie), seed=0, n_val=30, n_test=50)
    cfg = TrainConfig(C1=4, C2=4, D=8, gamma=0.1, lr=0.01, l2_weight=1e-6, batch_size=32, epochs=10, seed=0,
                      mc_samples=4, select_k=10)
    return split, cfg, train(split, cfg).checkpoint.params


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion (printed in the terminal summary)."""

    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
