"""Single-file checkpoint format.

Layout (all integers little-endian u32):

    magic   b"DLF1"
    version u32
    blob    u32 length + canonical-JSON config (base net, hyper net,
            training setup, operator specs)
    table   u32 tensor count, then per tensor:
            u32 name length + UTF-8 name,
            u32 rank + u32 dims,
            float32 little-endian data

Tensor names are sorted, the JSON is canonical (sorted keys, fixed
separators), and data is always float32, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .basenet import BaseNetConfig
from .errors import ContractViolation
from .hypernet import LearnedSlotSpec, WeightLearningNet
from .operators import OperatorSpec

MAGIC = b"DLF1"
VERSION = 1


def _canonical_json(blob: dict) -> bytes:
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _base_to_dict(cfg: BaseNetConfig) -> dict:
    return {
        "depth": cfg.depth,
        "channels": cfg.channels,
        "kernel": cfg.kernel,
        "input_channels": cfg.input_channels,
        "output_channels": cfg.output_channels,
        "downsample_layer": cfg.downsample_layer,
        "upsample_layer": cfg.upsample_layer,
        "residual_start": cfg.residual_start,
        "residual_end": cfg.residual_end,
        "dilation_rate": cfg.dilation_rate,
        "norm_after": list(cfg.norm_after),
        "conv_bias": cfg.conv_bias,
    }


def _base_from_dict(d: dict) -> BaseNetConfig:
    d = dict(d)
    d["norm_after"] = tuple(d["norm_after"])
    return BaseNetConfig(**d)


def _spec_to_dict(spec: OperatorSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["ranges"] = [list(r) for r in spec.ranges]
    d["values"] = list(spec.values) if spec.values is not None else None
    return d


def _spec_from_dict(d: dict) -> OperatorSpec:
    return OperatorSpec(
        name=d["name"],
        param_names=tuple(d["param_names"]),
        ranges=tuple(tuple(r) for r in d["ranges"]),
        spaces=tuple(d["spaces"]),
        operator_id=d["operator_id"],
        kind=d["kind"],
        values=tuple(d["values"]) if d.get("values") is not None else None,
    )


def build_blob(net: WeightLearningNet, train_cfg=None) -> dict:
    blob = {
        "base": _base_to_dict(net.config),
        "hyper": {
            "mode": net.slot_spec.mode,
            "layer": net.slot_spec.layer,
            "m": net.m,
            "fc_depth": net.fc_depth,
            "fc_relu": net.fc_relu,
        },
    }
    if train_cfg is not None:
        blob["train"] = {
            "operators": list(train_cfg.operators),
            "joint": train_cfg.joint,
            "gamma_dim": train_cfg.gamma_dim,
            "patch_size": train_cfg.patch_size,
            "batch_size": train_cfg.batch_size,
            "steps": train_cfg.steps,
            "learning_rate": train_cfg.learning_rate,
            "seed": train_cfg.seed,
            "eval_images": train_cfg.eval_images,
            "gamma_values": {k: list(v) for k, v in train_cfg.gamma_values.items()},
        }
        blob["operator_specs"] = [_spec_to_dict(s) for s in train_cfg.specs()]
    return blob


def _write_tensor(out: io.BufferedWriter, name: str, data: np.ndarray):
    nb = name.encode("utf-8")
    out.write(struct.pack("<I", len(nb)))
    out.write(nb)
    out.write(struct.pack("<I", data.ndim))
    out.write(struct.pack(f"<{data.ndim}I", *data.shape))
    out.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def save_checkpoint(path: str, net: WeightLearningNet, train_cfg=None, blob: dict | None = None) -> None:
    if blob is None:
        blob = build_blob(net, train_cfg)
    payload = _canonical_json(blob)
    entries = net.named_parameters()
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<I", VERSION))
        out.write(struct.pack("<I", len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            _write_tensor(out, name, tensor.data)


@dataclass
class LoadedCheckpoint:
    net: WeightLearningNet
    blob: dict

    @property
    def base(self) -> BaseNetConfig:
        return self.net.config

    def operator_specs(self) -> list[OperatorSpec]:
        return [_spec_from_dict(d) for d in self.blob.get("operator_specs", [])]

    @property
    def joint(self) -> bool:
        return bool(self.blob.get("train", {}).get("joint", False))

    @property
    def gamma_dim(self) -> int:
        return self.net.m

    def train_config(self):
        """Rebuild the TrainConfig this checkpoint was produced with."""
        from .training import HyperConfig, TrainConfig

        t = self.blob.get("train")
        if t is None:
            raise ContractViolation("checkpoint carries no training configuration")
        h = self.blob["hyper"]
        return TrainConfig(
            operators=list(t["operators"]),
            base=self.net.config,
            hyper=HyperConfig(mode=h["mode"], layer=h["layer"], fc_depth=h["fc_depth"], fc_relu=h["fc_relu"]),
            patch_size=t["patch_size"],
            batch_size=t["batch_size"],
            steps=t["steps"],
            learning_rate=t["learning_rate"],
            seed=t["seed"],
            eval_images=t["eval_images"],
            gamma_values={k: tuple(v) for k, v in t.get("gamma_values", {}).items()},
        )


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContractViolation("truncated checkpoint file")
    return data


def load_checkpoint(path: str) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise ContractViolation("not a DLF1 checkpoint")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read(fh, 4))
        blob = json.loads(_read(fh, blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read(fh, 4 * n), dtype="<f4").reshape(shape)
            tensors[name] = np.array(data)  # own, writable copy

    base = _base_from_dict(blob["base"])
    h = blob["hyper"]
    params = {}
    shared = {}
    for name, arr in tensors.items():
        group, key = name.split(".", 1)
        tensor = Tensor(arr.astype(np.float32), requires_grad=True)
        if group == "params":
            params[key] = tensor
        elif group == "shared":
            shared[key] = tensor
        else:
            raise ContractViolation(f"unknown tensor group in checkpoint: {name}")
    net = WeightLearningNet(
        base,
        LearnedSlotSpec(h["mode"], h["layer"]),
        m=h["m"],
        fc_depth=h["fc_depth"],
        fc_relu=h["fc_relu"],
        params=params,
        shared=shared,
    )
    return LoadedCheckpoint(net=net, blob=blob)
