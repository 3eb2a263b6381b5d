"""Versioned binary checkpoint.

Layout (all integers little-endian)::

    magic        8 bytes   b"DDINOCKP"
    version      u32
    header_len   u64
    header       header_len bytes of UTF-8 JSON (sorted keys, compact)
    n_tensors    u32
    n_tensors x:
        name_len u16, name (UTF-8)
        dtype    u8        1 = float64
        ndim     u8
        dims     ndim x u64
        data     prod(dims) x f64, row-major

The JSON header holds the encoder/train configs, the step, the scalar
distillation state, optimiser hyper-parameters and step counters, and the
seeds of the named RNG streams (all randomness is derived from those seeds
and the step index, so nothing else is needed to resume). Tensors are named
``student/<param>``, ``teacher/<param>``, ``state/center``,
``state/ref_center`` (only with separate reference centering),
``optim/exp_avg/<param>`` and ``optim/exp_avg_sq/<param>``. Floating state
is always stored at 64 bits, so float32 runs round-trip exactly.
"""
from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, from_dict
from .distill import STREAM_INIT, STREAM_PERM, STREAM_VIEWS, TrainConfig, Trainer
from .encoder import EncoderConfig

MAGIC = b"DDINOCKP"
FORMAT_VERSION = 1
_F64 = 1


class CheckpointError(RuntimeError):
    pass


def _write_tensor(buf: io.BytesIO, name: str, value: torch.Tensor) -> None:
    arr = np.asarray(value.detach().cpu().to(torch.float64).numpy(), dtype="<f8", order="C")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", _F64, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def encode(header: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        _write_tensor(buf, name, value)
    return buf.getvalue()


def decode(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        (hlen,) = struct.unpack_from("<Q", data, 12)
        pos = 20
        header = json.loads(data[pos : pos + hlen].decode())
        pos += hlen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype != _F64:
                raise CheckpointError(f"tensor {name}: unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            tensors[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return header, tensors


def trainer_payload(trainer: Trainer) -> tuple[dict, dict[str, torch.Tensor]]:
    state = trainer.state
    tensors: dict[str, torch.Tensor] = {}
    for name, p in trainer.student.named_parameters():
        tensors[f"student/{name}"] = p
    for name, p in trainer.teacher.named_parameters():
        tensors[f"teacher/{name}"] = p
    tensors["state/center"] = state.center
    if state.ref_center is not None:
        tensors["state/ref_center"] = state.ref_center

    names = [n for n, _ in trainer.student.named_parameters()]
    index = {id(p): n for n, p in trainer.student.named_parameters()}
    opt_steps = {}
    for group in trainer.optimizer.param_groups:
        for p in group["params"]:
            st = trainer.optimizer.state.get(p)
            if not st:
                continue
            n = index[id(p)]
            opt_steps[n] = int(st["step"])
            tensors[f"optim/exp_avg/{n}"] = st["exp_avg"]
            tensors[f"optim/exp_avg_sq/{n}"] = st["exp_avg_sq"]
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": dataclasses.asdict(trainer.encoder_config),
        "train_config": dataclasses.asdict(trainer.config),
        "step": state.step,
        "state": {
            "center_momentum": state.center_momentum,
            "student_temp": state.student_temp,
            "teacher_temp": state.teacher_temp,
            "ema_momentum": state.ema_momentum,
            "lr": state.lr,
        },
        "optimizer": {
            "param_order": names,
            "steps": opt_steps,
            "groups": [
                {k: v for k, v in g.items() if k != "params" and isinstance(v, (int, float, bool, list, tuple))}
                for g in trainer.optimizer.param_groups
            ],
        },
        "rng": {
            "seed": trainer.config.seed,
            "data_seed": trainer.config.data_seed,
            "streams": {"perm": STREAM_PERM, "views": STREAM_VIEWS, "init": STREAM_INIT},
        },
    }
    return header, tensors


def save_trainer(trainer: Trainer, path: str | os.PathLike) -> bytes:
    data = encode(*trainer_payload(trainer))
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(data)


def configs_from_header(header: dict) -> tuple[EncoderConfig, TrainConfig]:
    try:
        return (
            from_dict(EncoderConfig, header["encoder_config"], "encoder"),
            from_dict(TrainConfig, header["train_config"], "train"),
        )
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None


def load_trainer(path: str | os.PathLike) -> Trainer:
    header, tensors = read_checkpoint(path)
    enc_cfg, train_cfg = configs_from_header(header)
    trainer = Trainer(enc_cfg, train_cfg)
    dtype = train_cfg.dtype
    try:
        with torch.no_grad():
            for prefix, model in (("student", trainer.student), ("teacher", trainer.teacher)):
                for name, p in model.named_parameters():
                    p.copy_(tensors[f"{prefix}/{name}"].to(dtype))
        st = trainer.state
        st.center = tensors["state/center"].to(dtype)
        if st.ref_center is not None:
            st.ref_center = tensors["state/ref_center"].to(dtype)
        st.step = int(header["step"])
        for key, val in header["state"].items():
            setattr(st, key, val)
        params = dict(trainer.student.named_parameters())
        opt = header["optimizer"]
        for group, saved in zip(trainer.optimizer.param_groups, opt["groups"]):
            group.update({k: tuple(v) if isinstance(v, list) else v for k, v in saved.items()})
        for n, step in opt["steps"].items():
            trainer.optimizer.state[params[n]] = {
                "step": torch.tensor(float(step), dtype=torch.float32),
                "exp_avg": tensors[f"optim/exp_avg/{n}"].to(dtype).clone(),
                "exp_avg_sq": tensors[f"optim/exp_avg_sq/{n}"].to(dtype).clone(),
            }
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing entry {exc}") from None
    return trainer
