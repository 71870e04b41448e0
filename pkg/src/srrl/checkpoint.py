"""Versioned JSON checkpoints with decimal, row-major tensor data."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams
from .schedule import NoiseSchedule, make_linear_schedule

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_text(params: DenoiserParams, schedule: NoiseSchedule, provenance: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end},
        "network": {
            "dim": params.dim,
            "num_classes": params.num_classes,
            "num_steps": params.num_steps,
            "hidden": list(params.hidden),
            "time_embed": params.time_embed,
            "adapter_enabled": params.adapter_enabled,
            "adapter_rank": params.adapter_rank,
            "adapter_scale": params.adapter_scale,
        },
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in params.tensors.items()
        },
        "provenance": provenance or {},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_checkpoint(path, params: DenoiserParams, schedule: NoiseSchedule, provenance: dict | None = None) -> None:
    Path(path).write_text(checkpoint_text(params, schedule, provenance), encoding="utf-8")


def parse_checkpoint(text: str) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        s = doc["schedule"]
        schedule = make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])
        net = doc["network"]
        tensors = {}
        for name, entry in doc["tensors"].items():
            arr = np.array(entry["data"], dtype=np.float64)
            tensors[name] = arr.reshape(entry["shape"])
        params = DenoiserParams(
            dim=net["dim"],
            num_classes=net["num_classes"],
            num_steps=net["num_steps"],
            hidden=tuple(net["hidden"]),
            time_embed=net["time_embed"],
            tensors=tensors,
            adapter_enabled=net["adapter_enabled"],
            adapter_rank=net["adapter_rank"],
            adapter_scale=net["adapter_scale"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return params, schedule, doc.get("provenance", {})


def load_checkpoint(path) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))
