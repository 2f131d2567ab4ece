"""Checkpoint persistence: model config + schedule + tensors in the
standard manifest/blob format, with backbone/adapter namespaces."""

from __future__ import annotations

import numpy as np

from .adapter import backbone_hash
from .autodiff import Tensor
from .blobio import config_hash, read_blob, write_blob
from .denoiser import DitConfig
from .errors import UsageError
from .schedule import DiffusionSchedule, schedule_from_descriptor


def save_checkpoint(stem: str, params: dict, cfg: DitConfig,
                    sched: DiffusionSchedule, step: int, seed: int,
                    stage: int, adapter: dict | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> str:
    meta = {
        "kind": "checkpoint",
        "stage": stage,
        "step": step,
        "seed": seed,
        "dit_config": cfg.to_json(),
        "config_hash": config_hash(cfg.to_json()),
        "schedule": sched.descriptor(),
        "rng_state": rng_state or {},
        "backbone_hash": backbone_hash(params),
    }
    if extra:
        meta.update(extra)
    tensors = {f"backbone/{k}": v.data for k, v in params.items()}
    if adapter is not None:
        tensors.update({f"adapter/{k}": v.data for k, v in adapter.items()})
    return write_blob(stem, tensors, meta)


def load_checkpoint(path: str) -> dict:
    """Returns {params, adapter, cfg, sched, meta}; tensors are trainable."""
    meta, tensors = read_blob(path)
    if meta.get("kind") != "checkpoint":
        raise UsageError(f"{path} is not a checkpoint")
    cfg = DitConfig.from_json(meta["dit_config"])
    sched = schedule_from_descriptor(meta["schedule"])
    params, adapter = {}, {}
    for name, arr in tensors.items():
        space, key = name.split("/", 1)
        t = Tensor(arr.astype(np.float64), requires_grad=True)
        (params if space == "backbone" else adapter)[key] = t
    return {"params": params, "adapter": adapter or None, "cfg": cfg,
            "sched": sched, "meta": meta}
