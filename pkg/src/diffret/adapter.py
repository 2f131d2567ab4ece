"""Query-conditioned control branch.

A trainable copy of the encoder blocks plus zero-initialized linear
layers: Z1 lifts the query embedding into the first control-block input,
and a per-depth Z2 folds each control-block output back onto the backbone
skip.  At initialization the branch output equals the backbone skips
exactly, so attaching it does not change the model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .denoiser import DitConfig, block_forward, block_param_shapes, encode, decode
from .errors import ConfigError
from . import denoiser


def init_adapter(backbone: dict, cfg: DitConfig) -> dict:
    """Control blocks copied from the backbone encoder; Z1/Z2 all zero."""
    adapter = {}
    for l in range(cfg.depth):
        for name in block_param_shapes(cfg):
            src = backbone[f"enc{l}.{name}"]
            adapter[f"ctrl{l}.{name}"] = Tensor(src.data.copy(),
                                                requires_grad=True)
    D = cfg.hidden
    adapter["z1.W"] = Tensor(np.zeros((D, cfg.d_vl)), requires_grad=True)
    adapter["z1.b"] = Tensor(np.zeros(D), requires_grad=True)
    for l in range(cfg.depth):
        adapter[f"z2_{l}.W"] = Tensor(np.zeros((D, D)), requires_grad=True)
        adapter[f"z2_{l}.b"] = Tensor(np.zeros(D), requires_grad=True)
    return adapter


def adapter_param_count_formula(cfg: DitConfig) -> int:
    """encoder-copy + Z1 + depth * Z2, in closed form."""
    D = cfg.hidden
    block = sum(int(np.prod(s)) if s else 1
                for s in block_param_shapes(cfg).values())
    z1 = D * cfg.d_vl + D
    z2 = D * D + D
    return cfg.depth * block + z1 + cfg.depth * z2


def control_forward(adapter: dict, params: dict, cfg: DitConfig,
                    enc_state: dict, z_query: Tensor) -> list:
    """Per-depth control outputs y_c consumed by the decoder.

    ``enc_state`` is the dict produced by denoiser.encode for the same
    input; its block inputs/outputs provide the backbone terms.
    """
    inputs, skips = enc_state["inputs"], enc_state["skips"]
    if len(skips) != cfg.depth:
        raise ConfigError(f"encoder state depth {len(skips)} != {cfg.depth}")
    tau, text, mask = enc_state["tau"], enc_state["text"], enc_state["text_mask"]
    batch = enc_state["batch"]
    lift = (z_query @ adapter["z1.W"].transpose(1, 0) + adapter["z1.b"])
    h_c = inputs[0] + lift.reshape(batch, 1, cfg.hidden)
    y_c = []
    for l in range(cfg.depth):
        c_out = block_forward(adapter, cfg, f"ctrl{l}", h_c, tau, text, mask)
        y_l = skips[l] + (c_out @ adapter[f"z2_{l}.W"].transpose(1, 0)
                          + adapter[f"z2_{l}.b"])
        y_c.append(y_l)
        h_c = y_l
    return y_c


@dataclass
class ComposedModel:
    """Backbone with the control branch routed into the decoder skips."""

    params: dict
    cfg: DitConfig
    adapter: dict | None = None
    delta: float = 1.0

    def denoise_t(self, z: Tensor, n, text=None, text_mask=None,
                  z_query: Tensor | None = None) -> Tensor:
        state = encode(self.params, self.cfg, z, n, text, text_mask)
        if self.adapter is not None and z_query is not None:
            skips = control_forward(self.adapter, self.params, self.cfg,
                                    state, z_query)
            delta = self.delta
        else:
            # control absent: the plain Stage-1 network with unit skips
            skips, delta = state["skips"], 1.0
        return decode(self.params, self.cfg, skips, state["tau"],
                      state["text"], state["text_mask"], state["batch"],
                      delta)

    def denoise(self, z: np.ndarray, n, conditions=None,
                z_query: np.ndarray | None = None) -> np.ndarray:
        from . import autodiff as ad
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = np.broadcast_to(np.atleast_1d(n), (z.shape[0],))
        text = mask = None
        if conditions is not None:
            embs, mask = denoiser.prepare_text(conditions)
            text = Tensor(embs)
        zq = None
        if z_query is not None:
            zq = Tensor(np.atleast_2d(np.asarray(z_query, dtype=np.float64)))
        with ad.no_grad():
            return self.denoise_t(Tensor(z), n, text, mask, zq).data


def attach(params: dict, adapter: dict, cfg: DitConfig,
           delta: float = 1.0) -> ComposedModel:
    need = {f"ctrl{l}.{n}" for l in range(cfg.depth)
            for n in block_param_shapes(cfg)}
    need |= {"z1.W", "z1.b"} | {f"z2_{l}.{s}" for l in range(cfg.depth)
                                for s in ("W", "b")}
    if set(adapter) != need:
        raise ConfigError("adapter tensors do not match the model config")
    return ComposedModel(params=params, cfg=cfg, adapter=adapter, delta=delta)


def detach(model: ComposedModel) -> dict:
    """Plain backbone; decoder skips revert to the encoder outputs."""
    return model.params


def freeze_backbone(model: ComposedModel) -> dict:
    """Mark backbone tensors non-trainable; returns the trainability mask."""
    mask = {}
    for name, t in model.params.items():
        t.requires_grad = False
        mask[name] = False
    if model.adapter:
        for name in model.adapter:
            mask["adapter/" + name] = True
    return mask


def backbone_hash(params: dict) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()
