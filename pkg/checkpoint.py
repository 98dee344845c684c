"""
Checkpoint (".mvck") files.

    b"MVCK" | uint32 header length | JSON header | MVTF record per tensor

The header lists every tensor in file order. Loading parses and validates the
whole file before any model or optimizer state is assigned.
"""

import io
import json
import logging
import os
import struct
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import ConfigDict, ValidationError
from torch import nn

from config import config_hash, model_hash
from schemas import ExperimentConfig, Frozen
from tensorfile import TensorFileError, read_tensor, write_tensor

logger = logging.getLogger(__name__)

MAGIC = b"MVCK"
_PREFIX = struct.Struct("<4sI")

TensorKind = Literal["param", "exp_avg", "exp_avg_sq"]


class CheckpointError(ValueError):
    pass


class TensorEntry(Frozen):
    name: str
    kind: TensorKind
    shape: list[int]


class CheckpointHeader(Frozen):
    config_hash: str
    model_hash: str
    step: int
    variant_tag: str
    latent_mode: str
    occupancy_head: bool
    tensors: list[TensorEntry]
    optimizer: dict[str, float] = {}
    optimizer_steps: dict[str, float] = {}
    metric_digest: str = ""


class Checkpoint(Frozen):
    header: CheckpointHeader
    arrays: dict[str, np.ndarray]  # key "<kind>:<name>"

    model_config = ConfigDict(extra="forbid", frozen=True, arbitrary_types_allowed=True)

    def params(self) -> dict[str, np.ndarray]:
        return {e.name: self.arrays[f"param:{e.name}"] for e in self.header.tensors if e.kind == "param"}


def _optimizer_names(model: nn.Module, optimizer: torch.optim.Optimizer) -> dict[int, str]:
    by_id = {id(p): name for name, p in model.named_parameters()}
    return {id(p): by_id[id(p)] for group in optimizer.param_groups for p in group["params"]}


def checkpoint_save(
    path: str | Path,
    model: nn.Module,
    cfg: ExperimentConfig,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
    metric_digest: str = "",
) -> Path:
    path = Path(path)
    state = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    entries = [TensorEntry(name=name, kind="param", shape=list(arr.shape)) for name, arr in state.items()]
    records: list[np.ndarray] = list(state.values())

    opt_scalars: dict[str, float] = {}
    opt_steps: dict[str, float] = {}
    if optimizer is not None:
        group = optimizer.param_groups[0]
        opt_scalars = {
            "lr": float(group["lr"]),
            "beta1": float(group["betas"][0]),
            "beta2": float(group["betas"][1]),
            "eps": float(group["eps"]),
            "weight_decay": float(group["weight_decay"]),
        }
        names = _optimizer_names(model, optimizer)
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                opt_steps[name] = float(st["step"])
                for kind in ("exp_avg", "exp_avg_sq"):
                    arr = st[kind].detach().cpu().numpy()
                    entries.append(TensorEntry(name=name, kind=kind, shape=list(arr.shape)))
                    records.append(arr)

    header = CheckpointHeader(
        config_hash=config_hash(cfg),
        model_hash=model_hash(cfg),
        step=step,
        variant_tag=cfg.variant_tag,
        latent_mode=cfg.latent_mode,
        occupancy_head=cfg.occupancy_head,
        tensors=entries,
        optimizer=opt_scalars,
        optimizer_steps=opt_steps,
        metric_digest=metric_digest,
    )
    blob = header.model_dump_json().encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, len(blob)))
        f.write(blob)
        for arr in records:
            write_tensor(f, arr)
    os.replace(tmp, path)
    logger.info("checkpoint saved | path=%s step=%d tensors=%d", path, step, len(records))
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated prefix")
    magic, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    start = _PREFIX.size
    if start + header_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = CheckpointHeader.model_validate(json.loads(data[start : start + header_len]))
    except (json.JSONDecodeError, ValidationError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    stream = io.BytesIO(data[start + header_len :])
    arrays: dict[str, np.ndarray] = {}
    for entry in header.tensors:
        try:
            arr = read_tensor(stream)
        except TensorFileError as e:
            raise CheckpointError(f"{path}: tensor {entry.kind}:{entry.name}: {e}") from e
        if list(arr.shape) != entry.shape:
            raise CheckpointError(f"{path}: tensor {entry.name} has shape {arr.shape}, header says {entry.shape}")
        arrays[f"{entry.kind}:{entry.name}"] = arr
    trailing = len(data) - start - header_len - stream.tell()
    if trailing:
        raise CheckpointError(f"{path}: {trailing} trailing bytes")
    return Checkpoint(header=header, arrays=arrays)


def checkpoint_load(
    path: str | Path,
    model: nn.Module,
    cfg: ExperimentConfig,
    optimizer: torch.optim.Optimizer | None = None,
    match: Literal["config", "model"] = "config",
    allow_missing: set[str] | None = None,
    force: bool = False,
) -> Checkpoint:
    """
    match="config": resume, the full config hash must agree.
    match="model": pre-trained weights, only the architecture hash must agree;
    parameters named in `allow_missing` keep their fresh initialization.
    """
    ckpt = read_checkpoint(path)
    h = ckpt.header
    expected = config_hash(cfg) if match == "config" else model_hash(cfg)
    found = h.config_hash if match == "config" else h.model_hash
    if found != expected:
        if not force:
            raise CheckpointError(f"{path}: {match} hash {found} does not match {expected}")
        logger.warning("loading despite %s hash mismatch | file=%s expected=%s", match, found, expected)

    target = model.state_dict()
    params = ckpt.params()
    allowed = allow_missing or set()
    missing = set(target) - set(params) - allowed
    unexpected = set(params) - set(target)
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing {sorted(missing)} unexpected {sorted(unexpected)}")
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(target[name].shape):
            raise CheckpointError(f"{path}: {name} shape {arr.shape} != model {tuple(target[name].shape)}")

    opt_updates = []
    if optimizer is not None and h.optimizer_steps:
        by_name = {name: p for name, p in model.named_parameters()}
        for name, step in h.optimizer_steps.items():
            if name not in by_name:
                raise CheckpointError(f"{path}: optimizer state for unknown parameter {name}")
            opt_updates.append((by_name[name], step, ckpt.arrays[f"exp_avg:{name}"], ckpt.arrays[f"exp_avg_sq:{name}"]))

    # every check passed; assign
    with torch.no_grad():
        for name, arr in params.items():
            target[name].copy_(torch.as_tensor(arr))
    for p, step, exp_avg, exp_avg_sq in opt_updates:
        optimizer.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.as_tensor(exp_avg, dtype=p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(exp_avg_sq, dtype=p.dtype).clone(),
        }
    logger.info("checkpoint loaded | path=%s step=%d match=%s", path, h.step, match)
    return ckpt
