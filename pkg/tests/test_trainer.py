import dataclasses
import os
from types import SimpleNamespace

import numpy as np
import pytest

from factorrec import trainer
from factorrec.config import TrainConfig
from factorrec.decoder import LossBreakdown, draw_noise, elbo_loss
from factorrec.graph import build_graph, split_holdout
from factorrec.numerics import SeededRng
from factorrec.synthetic import planted_factor_data
from factorrec.trainer import (
    CheckpointDigestError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    TrainingDiverged,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    train,
)

FAST = dict(C1=2, C2=2, D=4, gamma=0.1, lr=0.01, batch_size=16, epochs=2, seed=5, select_k=10)


def test_init_deterministic_and_shapes(toy_graph):
    cfg = TrainConfig(**FAST)
    a, b = init_params(toy_graph, cfg), init_params(toy_graph, cfg)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    np.testing.assert_allclose(np.linalg.norm(a["item_prototypes"], axis=1), 1.0, rtol=1e-6)
    zero = init_params(toy_graph, dataclasses.replace(cfg, init_scale=0.0))
    assert all(np.all(v == 0) for v in zero.values())


def test_lastfm_shapes():
    cfg = TrainConfig(D=16, C1=4, C2=4)
    g = SimpleNamespace(n_users=1872, n_items=3846, n_entities=5520)
    shapes = param_shapes(g, cfg)
    assert shapes["entity_base"] == (5520, 16)
    assert cfg.user_dim == 128
    assert cfg.item_dim == 80


def test_train_deterministic(planted, tmp_path):
    _, split, _ = planted
    cfg = TrainConfig(**FAST)
    r1, r2 = train(split, cfg), train(split, cfg)
    assert r1.log == r2.log
    save_checkpoint(r1.checkpoint, tmp_path / "a.bin")
    save_checkpoint(r2.checkpoint, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert len(r1.log) == 2 and {"epoch", "loss", "nll", "kl", "val_ndcg@10"} <= set(r1.log[0])


def test_objective_decreases_first_ten_epochs():
    """Full-data objective at a fixed noise draw, measured after each of the first 10 epochs."""
    inter, ie, _ = planted_factor_data(seed=0)
    split = split_holdout(build_graph(inter, ie), seed=0, n_val=50, n_test=40)
    cfg = TrainConfig(C1=2, C2=2, D=32, gamma=0.1, lr=0.005, l2_weight=1e-6, batch_size=16, epochs=10,
                      seed=0, mc_samples=16, select_k=100)
    g = split.train_graph
    users = np.flatnonzero(g.user_degree() > 0)
    noise = draw_noise(SeededRng(99), len(users), dataclasses.replace(cfg, mc_samples=32))
    losses = []
    for k in range(1, 11):
        r = train(split, dataclasses.replace(cfg, epochs=k))
        losses.append(elbo_loss(users, g, r.final_params, cfg, noise=noise).total)
    assert all(np.diff(losses) < 0), losses


def test_divergence_reported(planted, monkeypatch):
    _, split, _ = planted

    def bad(*a, **kw):
        return LossBreakdown(float("nan"), 0.0, 0.0, float("nan")), {}

    monkeypatch.setattr(trainer, "elbo_loss", bad)
    with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
        train(split, TrainConfig(**FAST))


@pytest.fixture(scope="module")
def ckpt(planted):
    _, split, _ = planted
    return train(split, TrainConfig(**FAST)).checkpoint


def test_checkpoint_roundtrip_byte_identical(ckpt, tmp_path):
    save_checkpoint(ckpt, tmp_path / "a.bin")
    loaded = load_checkpoint(tmp_path / "a.bin", expected_digest=ckpt.idmap_digest)
    save_checkpoint(loaded, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert loaded.config == ckpt.config and loaded.epoch == ckpt.epoch
    for k in ckpt.params:
        np.testing.assert_array_equal(loaded.params[k], ckpt.params[k])
    assert loaded.optimizer.step_count == ckpt.optimizer.step_count


def test_checkpoint_errors(ckpt, tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    data = path.read_bytes()
    with pytest.raises(CheckpointDigestError):
        load_checkpoint(path, expected_digest=b"\0" * 32)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(data[:-1] + bytes([data[-1] ^ 0xFF]))
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(bad)
    bad.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(bad)
    bad.write_bytes(data[:8] + (99).to_bytes(4, "little") + data[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    bad.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    codes = {CheckpointError.code, CheckpointVersionError.code, CheckpointDigestError.code,
             CheckpointTruncatedError.code}
    assert len(codes) == 4


def test_checkpoint_never_partial(ckpt, tmp_path):
    path = tmp_path / "d.bin"
    broken = dataclasses.replace(ckpt, idmap_digest=b"short")
    with pytest.raises(CheckpointError):
        save_checkpoint(broken, path)
    assert os.listdir(tmp_path) == []
    save_checkpoint(ckpt, path)
    before = path.read_bytes()
    with pytest.raises(CheckpointError):
        save_checkpoint(broken, path)
    assert path.read_bytes() == before
    assert os.listdir(tmp_path) == ["d.bin"]
