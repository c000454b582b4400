"""Parameter initialization, the epoch/batch ELBO training loop, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .decoder import elbo_loss, param_names
from .metrics import evaluate
from .numerics import DTYPE, AdamState, SeededRng, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FRECCKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(Exception):
    code = 1


class CheckpointVersionError(CheckpointError):
    code = 2


class CheckpointDigestError(CheckpointError):
    code = 3


class CheckpointTruncatedError(CheckpointError):
    """File is shorter than its records claim or fails the trailing checksum."""

    code = 4


def param_shapes(graph, config):
    d, c1, c2 = config.D, config.C1, config.C2
    shapes = {
        "entity_base": (graph.n_entities, d),
        "item_base": (graph.n_items, d),
        "entity_prototypes": (c1, d),
        "item_prototypes": (c2, d),
        "ent_map_mu": (d, d),
        "ent_map_logsigma": (d, d),
        "itm_map_mu": (d, d),
        "itm_map_logsigma": (d, d),
        "dict_base": (graph.n_items, d),
        "dict_ent": (graph.n_items, c1, d),
    }
    return {k: shapes[k] for k in param_names(config)}


def init_params(graph, config, rng=None):
    """i.i.d. normal(0, init_scale) entries; prototype rows rescaled to unit norm."""
    rng = rng or SeededRng(config.seed).spawn(0)
    params = {}
    for name, shape in param_shapes(graph, config).items():
        params[name] = (rng.normal(shape, dtype=np.float64) * config.init_scale).astype(DTYPE)
    for name in ("entity_prototypes", "item_prototypes"):
        p = params[name]
        norms = np.linalg.norm(p, axis=1, keepdims=True)
        params[name] = np.where(norms > 1e-12, p / np.where(norms > 1e-12, norms, 1), p).astype(DTYPE)
    return params


@dataclass
class ModelCheckpoint:
    config: TrainConfig
    params: dict
    optimizer: AdamState
    epoch: int
    idmap_digest: bytes
    version: int = CHECKPOINT_VERSION


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: list = field(default_factory=list)
    final_params: dict = None


def train(split, config: TrainConfig, progress=None):
    """Optimize the ELBO with Adam; keep the epoch with best validation NDCG@select_k."""
    graph = split.train_graph
    deg = graph.user_degree()
    train_users = np.flatnonzero(deg > 0)
    if len(train_users) == 0:
        raise ValueError("no users with training interactions")
    root = SeededRng(config.seed)
    params = init_params(graph, config, root.spawn(0))
    shuffle_rng = root.spawn(1)
    noise_rng = root.spawn(2)
    state = AdamState.fresh(params)
    history = []
    best = None
    for epoch in range(1, config.epochs + 1):
        order = train_users[shuffle_rng.permutation(len(train_users))]
        totals = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            loss, grads = elbo_loss(batch, graph, params, config, rng=noise_rng, with_grads=True)
            if not np.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b} (users {batch[:5].tolist()}...)")
            params, state = adam_step(params, grads, state, config.lr)
            for k, v in params.items():
                if not np.all(np.isfinite(v)):
                    raise TrainingDiverged(f"non-finite parameter {k} after epoch {epoch}, batch {b}")
            totals.append((loss.total, loss.negative_log_likelihood, loss.kl))
        arr = np.asarray(totals)
        entry = {"epoch": epoch, "loss": float(arr[:, 0].mean()), "nll": float(arr[:, 1].mean()),
                 "kl": float(arr[:, 2].mean())}
        if len(split.val_users):
            report = evaluate(params, config, split, "val", (config.select_k,))
            entry[f"val_ndcg@{config.select_k}"] = report.mean_ndcg[config.select_k]
            score = entry[f"val_ndcg@{config.select_k}"]
        else:
            score = -entry["loss"]
        history.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if progress:
            progress(entry)
        if best is None or score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()}, state.copy())
    _, epoch, best_params, best_state = best
    ckpt = ModelCheckpoint(config, best_params, best_state, epoch, graph.ids.digest())
    return TrainResult(ckpt, history, params)


# --- checkpoint container ------------------------------------------------------


def _encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    cfg = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    opt = ckpt.optimizer
    tensors = [(f"param/{k}", ckpt.params[k]) for k in sorted(ckpt.params)]
    tensors += [(f"adam_m/{k}", opt.first_moment[k]) for k in sorted(opt.first_moment)]
    tensors += [(f"adam_v/{k}", opt.second_moment[k]) for k in sorted(opt.second_moment)]
    out = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(cfg)), cfg]
    out.append(struct.pack("<IQddd", ckpt.epoch, opt.step_count, opt.beta1, opt.beta2, opt.eps))
    if len(ckpt.idmap_digest) != 32:
        raise CheckpointError("id-map digest must be 32 bytes")
    out.append(ckpt.idmap_digest)
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out.append(struct.pack("<HB", len(nb), arr.ndim))
        out.append(nb)
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: ModelCheckpoint, path):
    """Write atomically: the target is only replaced by a complete file."""
    import os
    import tempfile

    data = _encode_checkpoint(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError("checkpoint ends before its declared contents")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_digest=None) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointTruncatedError("file too short to be a checkpoint")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    if len(data) < 44 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointTruncatedError("checksum mismatch: file truncated or corrupt")
    r = _Reader(data[:-32])
    r.take(12)
    (cfg_len,) = r.unpack("<I")
    config = TrainConfig(**json.loads(r.take(cfg_len).decode("utf-8")))
    epoch, step, b1, b2, eps = r.unpack("<IQddd")
    digest = r.take(32)
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointDigestError("checkpoint was trained on a graph with a different id-map")
    (n,) = r.unpack("<I")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(n):
        name_len, rank = r.unpack("<HB")
        name = r.take(name_len).decode("utf-8")
        dims = r.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(DTYPE)
        group, key = name.split("/", 1)
        groups[group][key] = arr
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last record")
    state = AdamState(groups["adam_m"], groups["adam_v"], step, b1, b2, eps)
    return ModelCheckpoint(config, groups["param"], state, epoch, digest, version)
