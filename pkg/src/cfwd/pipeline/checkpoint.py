"""Versioned binary checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"CFWDCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length N
    20      N     UTF-8 JSON header
    20+N    ...   payload: float32 little-endian tensors, concatenated in record order

The header holds ``config`` (TrainConfig keys), ``schedule`` (kind, T,
beta_start, beta_end), ``iteration`` and one section per model
(``denoiser``, ``hfpm``) with its ``fingerprint`` and ordered ``records``:
``{"name", "shape", "offset", "count"}`` where ``offset``/``count`` are in
float32 elements relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..denoiser import ConditionalUNet
from ..diffusion import NoiseSchedule
from ..errors import CheckpointMismatch, CorruptData, MissingFile
from ..hfpm import HFPM
from .config import TrainConfig

MAGIC = b"CFWDCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    denoiser: OrderedDict  # name -> float32 numpy array
    denoiser_fingerprint: str
    hfpm: OrderedDict
    hfpm_fingerprint: str
    schedule: dict
    config: TrainConfig
    iteration: int
    format_version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, denoiser: ConditionalUNet, hfpm: HFPM, schedule: NoiseSchedule, config: TrainConfig, iteration: int):
        def state(m):
            return OrderedDict((k, v.detach().cpu().numpy().astype(np.float32).copy()) for k, v in m.state_dict().items())

        return cls(
            state(denoiser), denoiser.fingerprint, state(hfpm), hfpm.fingerprint,
            schedule.descriptor(), config, int(iteration),
        )

    def build_models(self) -> tuple[ConditionalUNet, HFPM]:
        cfg = self.config
        denoiser = ConditionalUNet(cfg.channels, cfg.base_channels, cfg.unet_levels)
        hfpm = HFPM(cfg.channels, cfg.hfpm_width)
        for model, fp, params in ((denoiser, self.denoiser_fingerprint, self.denoiser),
                                  (hfpm, self.hfpm_fingerprint, self.hfpm)):
            if model.fingerprint != fp:
                raise CheckpointMismatch(f"fingerprint {fp!r} does not match config ({model.fingerprint!r})")
            expected = model.state_dict()
            if list(expected) != list(params):
                raise CheckpointMismatch(f"{fp}: parameter names differ from architecture")
            for name, arr in params.items():
                if tuple(expected[name].shape) != arr.shape:
                    raise CheckpointMismatch(f"{fp}: {name} has shape {arr.shape}, expected {tuple(expected[name].shape)}")
            model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
            model.eval()
        return denoiser, hfpm

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_descriptor(self.schedule)


def _section(params: OrderedDict, fingerprint: str, start: int):
    records, offset = [], start
    for name, arr in params.items():
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    return {"fingerprint": fingerprint, "records": records}, offset


def to_bytes(ckpt: Checkpoint) -> bytes:
    den, end = _section(ckpt.denoiser, ckpt.denoiser_fingerprint, 0)
    hf, _ = _section(ckpt.hfpm, ckpt.hfpm_fingerprint, end)
    header = {
        "config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule,
        "iteration": ckpt.iteration,
        "denoiser": den,
        "hfpm": hf,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob]
    for params in (ckpt.denoiser, ckpt.hfpm):
        for arr in params.values():
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CorruptData("not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CorruptData("checkpoint truncated inside the fixed header")
    version, n = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointMismatch(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[20 : 20 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptData(f"unreadable checkpoint header: {exc}") from exc
    payload = np.frombuffer(data, dtype="<f4", offset=20 + n)

    def read(section):
        out = OrderedDict()
        for r in section["records"]:
            if r["offset"] + r["count"] > payload.size:
                raise CorruptData(f"record {r['name']} runs past end of payload")
            arr = payload[r["offset"] : r["offset"] + r["count"]].astype(np.float32)
            out[r["name"]] = arr.reshape(r["shape"])
        return out

    cfg = header["config"]
    cfg["layer_weights"] = tuple(cfg["layer_weights"])
    return Checkpoint(
        read(header["denoiser"]), header["denoiser"]["fingerprint"],
        read(header["hfpm"]), header["hfpm"]["fingerprint"],
        header["schedule"], TrainConfig.from_dict(cfg), int(header["iteration"]), version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no checkpoint at {path}")
    ckpt = from_bytes(path.read_bytes())
    ckpt.build_models()  # validates fingerprints and shapes
    return ckpt
