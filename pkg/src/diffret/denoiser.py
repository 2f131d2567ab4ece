"""Conditional encoder-decoder diffusion transformer on pseudo-spatial maps.

A flat embedding is projected to a (C, H, W) map, patchified into tokens,
and run through L encoder and L decoder transformer blocks with AdaLN time
modulation, optional text cross-attention, and zero-gated residuals.
Decoder block m consumes the skip y_{L-m+1}; the per-depth skips are the
seam where the control branch plugs in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .rng import stream


@dataclass(frozen=True)
class DitConfig:
    d_vl: int = 64
    channels: int = 4
    height: int = 8
    width: int = 8
    patch: int = 2
    hidden: int = 64
    heads: int = 4
    depth: int = 2          # encoder blocks == decoder blocks
    d_text: int = 32

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("height and width must be divisible by patch")
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if min(self.d_vl, self.channels, self.hidden, self.heads,
               self.depth, self.d_text, self.patch) < 1:
            raise ConfigError("all dimensions must be positive")

    @property
    def map_size(self) -> int:
        return self.channels * self.height * self.width

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("d_vl", "channels", "height", "width", "patch", "hidden",
                 "heads", "depth", "d_text")}

    @classmethod
    def from_json(cls, d: dict) -> "DitConfig":
        return cls(**d)


PAPER_SCALE = DitConfig(d_vl=1536, channels=4, height=32, width=32, patch=2,
                        hidden=1152, heads=16, depth=14, d_text=1152)


# -- parameters ---------------------------------------------------------------

def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    # redraw outside two standard deviations
    for _ in range(8):
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(bad.sum())
    return np.clip(x, -2.0, 2.0) * std


def _sinusoidal(positions: np.ndarray, dim: int, base: float = 1e4) -> np.ndarray:
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (1,))], axis=-1)
    return out


def block_param_shapes(cfg: DitConfig) -> dict:
    D, Dt = cfg.hidden, cfg.d_text
    shapes = {}
    for sub in ("ada_sa", "ada_ca", "ada_ff"):
        shapes[f"{sub}.W"] = (2 * D, D)
        shapes[f"{sub}.b"] = (2 * D,)
    for sub in ("sa", "ca"):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{sub}.{w}"] = (D, D)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{sub}.{b}"] = (D,)
    shapes["ff.W1"] = (4 * D, D)
    shapes["ff.b1"] = (4 * D,)
    shapes["ff.W2"] = (D, 4 * D)
    shapes["ff.b2"] = (D,)
    for g in ("g_sa", "g_ca", "g_ff"):
        shapes[g] = ()
    return shapes


def param_shapes(cfg: DitConfig) -> dict:
    D = cfg.hidden
    shapes = {
        "proj_in.W": (cfg.map_size, cfg.d_vl),
        "proj_in.b": (cfg.map_size,),
        "patch.W": (D, cfg.patch_dim),
        "patch.b": (D,),
        "pos": (cfg.tokens, D),
        "time.W1": (D, D), "time.b1": (D,),
        "time.W2": (D, D), "time.b2": (D,),
        "text.W": (D, cfg.d_text), "text.b": (D,),
        "head.W": (cfg.patch_dim, D), "head.b": (cfg.patch_dim,),
        "out.W": (cfg.d_vl, cfg.map_size), "out.b": (cfg.d_vl,),
    }
    for side in ("enc", "dec"):
        for l in range(cfg.depth):
            for name, shp in block_param_shapes(cfg).items():
                shapes[f"{side}{l}.{name}"] = shp
    return shapes


def init_params(cfg: DitConfig, seed: int) -> dict:
    """Fresh parameters: truncated-normal projections, zeroed AdaLN
    regressors and residual gates, sinusoidal position table."""
    params = {}
    for name, shp in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if name == "pos":
            data = _sinusoidal(np.arange(cfg.tokens), cfg.hidden)
        elif "ada_" in name or short.startswith("g_") or short.startswith("b"):
            data = np.zeros(shp)
        else:
            data = _trunc_normal(stream(seed, "init", name), shp)
        params[name] = Tensor(data, requires_grad=True)
    return params


def param_count(params: dict) -> int:
    return sum(t.data.size for t in params.values())


def param_count_formula(cfg: DitConfig) -> int:
    """Closed-form parameter count; must match the materialized params."""
    D, Dt = cfg.hidden, cfg.d_text
    block = (3 * (2 * D * D + 2 * D)   # AdaLN regressors
             + 2 * 4 * (D * D + D)     # MHSA + MHCA
             + (4 * D * D + 4 * D)     # FFN up
             + (4 * D * D + D)         # FFN down
             + 3)                      # residual gates
    return (cfg.map_size * cfg.d_vl + cfg.map_size
            + D * cfg.patch_dim + D
            + cfg.tokens * D
            + 2 * (D * D + D)
            + D * Dt + D
            + cfg.patch_dim * D + cfg.patch_dim
            + cfg.d_vl * cfg.map_size + cfg.d_vl
            + 2 * cfg.depth * block)


# -- forward pieces -----------------------------------------------------------

def _lin(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W.transpose(1, 0) + b


def time_embed(params: dict, cfg: DitConfig, n) -> Tensor:
    """Map integer timesteps (B,) to modulation vectors (B, D)."""
    feats = Tensor(_sinusoidal(np.atleast_1d(n), cfg.hidden))
    h = ad.silu(_lin(feats, params["time.W1"], params["time.b1"]))
    return _lin(h, params["time.W2"], params["time.b2"])


def _modulate(x: Tensor, tau: Tensor, params: dict, prefix: str) -> Tensor:
    D = x.shape[-1]
    reg = _lin(ad.silu(tau), params[prefix + ".W"], params[prefix + ".b"])
    B = reg.shape[0]
    scale = reg[:, :D].reshape(B, 1, D)
    shift = reg[:, D:].reshape(B, 1, D)
    return ad.layer_norm(x) * (1.0 + scale) + shift


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
               key_mask: np.ndarray | None = None) -> Tensor:
    B, Mq, D = q.shape
    Mk = k.shape[1]
    Dh = D // heads
    qh = q.reshape(B, Mq, heads, Dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Mk, heads, Dh).transpose(0, 2, 3, 1)
    vh = v.reshape(B, Mk, heads, Dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh) * (Dh ** -0.5)
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e30).reshape(B, 1, 1, Mk)
        scores = scores + Tensor(bias)
    w = ad.softmax(scores, axis=-1)
    return (w @ vh).transpose(0, 2, 1, 3).reshape(B, Mq, D)


def _mha(x: Tensor, ctx: Tensor, params: dict, prefix: str, heads: int,
         key_mask=None) -> Tensor:
    p = lambda s: params[f"{prefix}.{s}"]
    out = _attention(_lin(x, p("Wq"), p("bq")), _lin(ctx, p("Wk"), p("bk")),
                     _lin(ctx, p("Wv"), p("bv")), heads, key_mask)
    return _lin(out, p("Wo"), p("bo"))


def block_forward(params: dict, cfg: DitConfig, prefix: str, x: Tensor,
                  tau: Tensor, text: Tensor | None,
                  text_mask: np.ndarray | None) -> Tensor:
    """One transformer block: zero-gated MHSA, MHCA (skipped when text is
    absent, giving an exact unconditional branch), and FFN residuals."""
    h = _modulate(x, tau, params, f"{prefix}.ada_sa")
    x = x + params[f"{prefix}.g_sa"] * _mha(h, h, params, f"{prefix}.sa",
                                            cfg.heads)
    if text is not None:
        h = _modulate(x, tau, params, f"{prefix}.ada_ca")
        x = x + params[f"{prefix}.g_ca"] * _mha(h, text, params,
                                                f"{prefix}.ca", cfg.heads,
                                                text_mask)
    h = _modulate(x, tau, params, f"{prefix}.ada_ff")
    ff = _lin(ad.gelu(_lin(h, params[f"{prefix}.ff.W1"],
                           params[f"{prefix}.ff.b1"])),
              params[f"{prefix}.ff.W2"], params[f"{prefix}.ff.b2"])
    x = x + params[f"{prefix}.g_ff"] * ff
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite activations after block {prefix}")
    return x


def _patchify(h: Tensor, cfg: DitConfig, batch: int) -> Tensor:
    p, C = cfg.patch, cfg.channels
    gh, gw = cfg.height // p, cfg.width // p
    t = h.reshape(batch, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(batch, cfg.tokens, cfg.patch_dim)


def _unpatchify(t: Tensor, cfg: DitConfig, batch: int) -> Tensor:
    p, C = cfg.patch, cfg.channels
    gh, gw = cfg.height // p, cfg.width // p
    h = t.reshape(batch, gh, gw, C, p, p).transpose(0, 3, 1, 4, 2, 5)
    return h.reshape(batch, cfg.map_size)


def prepare_text(conditions: list) -> tuple:
    """Pad a batch of TextCondition objects to (B, K, d_text) plus mask."""
    K = max(c.token_embs.shape[0] for c in conditions)
    d = conditions[0].token_embs.shape[1]
    embs = np.zeros((len(conditions), K, d))
    mask = np.zeros((len(conditions), K), dtype=bool)
    for i, c in enumerate(conditions):
        k = c.token_embs.shape[0]
        embs[i, :k] = c.token_embs
        mask[i, :k] = True
    return embs, mask


def encode(params: dict, cfg: DitConfig, z: Tensor, n,
           text: Tensor | None, text_mask=None) -> dict:
    """Projector, patchify, and the encoder stack.

    Returns the initial token state, per-block inputs and outputs (the
    skips y_1..y_L), the time embedding, and the projected text tokens.
    """
    if z.shape[-1] != cfg.d_vl:
        raise ConfigError(f"expected input width {cfg.d_vl}, got {z.shape[-1]}")
    batch = z.shape[0]
    tau = time_embed(params, cfg, n)
    text_proj = None
    if text is not None:
        text_proj = _lin(text, params["text.W"], params["text.b"])
    h_map = _lin(z, params["proj_in.W"], params["proj_in.b"])
    x = _lin(_patchify(h_map, cfg, batch), params["patch.W"],
             params["patch.b"]) + params["pos"]
    inputs, skips = [], []
    for l in range(cfg.depth):
        inputs.append(x)
        x = block_forward(params, cfg, f"enc{l}", x, tau, text_proj, text_mask)
        skips.append(x)
    return {"batch": batch, "tau": tau, "text": text_proj,
            "text_mask": text_mask, "x0": inputs[0], "inputs": inputs,
            "skips": skips}


def decode(params: dict, cfg: DitConfig, skips: list, tau: Tensor,
           text: Tensor | None, text_mask, batch: int,
           delta: float = 1.0) -> Tensor:
    """Decoder stack over delta-scaled skips, then back to a flat vector."""
    if len(skips) != cfg.depth:
        raise ConfigError(f"expected {cfg.depth} skips, got {len(skips)}")
    h = Tensor(np.zeros((batch, cfg.tokens, cfg.hidden)))
    for m in range(cfg.depth):
        h = block_forward(params, cfg, f"dec{m}", h + delta * skips[-1 - m],
                          tau, text, text_mask)
    t = _lin(h, params["head.W"], params["head.b"])
    return _lin(_unpatchify(t, cfg, batch), params["out.W"], params["out.b"])


def denoise_t(params: dict, cfg: DitConfig, z: Tensor, n,
              text: Tensor | None = None, text_mask=None,
              control: list | None = None, delta: float = 1.0) -> Tensor:
    """Full noise prediction as a differentiable Tensor.

    ``control``, when given, replaces the encoder skips with the control
    branch outputs (see control_adapter); ``delta`` scales whichever skip
    set the decoder consumes.
    """
    state = encode(params, cfg, z, n, text, text_mask)
    skips = control if control is not None else state["skips"]
    return decode(params, cfg, skips, state["tau"], state["text"],
                  state["text_mask"], state["batch"], delta)


def denoise(params: dict, cfg: DitConfig, z: np.ndarray, n,
            conditions: list | None = None, control: list | None = None,
            delta: float = 1.0) -> np.ndarray:
    """Inference-mode noise prediction for a batch of vectors (B, d_vl)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = np.broadcast_to(np.atleast_1d(n), (z.shape[0],))
    text = text_mask = None
    if conditions is not None:
        embs, text_mask = prepare_text(conditions)
        text = Tensor(embs)
    with ad.no_grad():
        ctl = [Tensor(c) if isinstance(c, np.ndarray) else c
               for c in control] if control is not None else None
        return denoise_t(params, cfg, Tensor(z), n, text, text_mask,
                         ctl, delta).data
