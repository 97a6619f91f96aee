"""Per-view frame codec: patchify + shared two-layer projections.

Stands in for a pretrained video autoencoder at desk scale. One codec is
shared by both camera views and the tactile stream; it is trained once on
reconstruction ("stage 0") and frozen for all later stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .optim import AdamWState, adamw_step


@dataclass
class CodecConfig:
    frame_size: int = 32
    patch: int = 8
    d_model: int = 64
    hidden: int = 128
    train_steps: int = 1500
    batch: int = 64
    lr: float = 3e-3
    eval_every: int = 100
    plateau_evals: int = 4
    plateau_tol: float = 0.01
    heldout_frac: float = 0.1

    @property
    def grid(self):
        return self.frame_size // self.patch

    @property
    def patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch * self.patch


def init_codec_params(cfg: CodecConfig, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)

    def proj(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))

    def bias(n):
        return ad.parameter(np.zeros(n, dtype=dtype))

    return {
        "enc.w1": proj(cfg.patch_dim, cfg.hidden), "enc.b1": bias(cfg.hidden),
        "enc.w2": proj(cfg.hidden, cfg.d_model), "enc.b2": bias(cfg.d_model),
        "dec.w1": proj(cfg.d_model, cfg.hidden), "dec.b1": bias(cfg.hidden),
        "dec.w2": proj(cfg.hidden, cfg.patch_dim), "dec.b2": bias(cfg.patch_dim),
    }


def patchify(frames: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """[..., H, W] -> [..., P, patch_dim] in row-major patch order."""
    g, p = cfg.grid, cfg.patch
    lead = frames.shape[:-2]
    x = frames.reshape(*lead, g, p, g, p)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, g * g, p * p)


def unpatchify(patches: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    g, p = cfg.grid, cfg.patch
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, g, g, p, p)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, g * p, g * p)


def encode_t(frames_t: ad.Tensor, params, cfg: CodecConfig) -> ad.Tensor:
    """Graph-mode encode of pre-patchified input [..., P, patch_dim]."""
    h = ad.gelu(ad.add(ad.matmul(frames_t, params["enc.w1"]), params["enc.b1"]))
    return ad.add(ad.matmul(h, params["enc.w2"]), params["enc.b2"])


def decode_t(tokens_t: ad.Tensor, params, cfg: CodecConfig) -> ad.Tensor:
    h = ad.gelu(ad.add(ad.matmul(tokens_t, params["dec.w1"]), params["dec.b1"]))
    return ad.add(ad.matmul(h, params["dec.w2"]), params["dec.b2"])


def encode(frame: np.ndarray, params, cfg: CodecConfig) -> np.ndarray:
    """Frame(s) [..., H, W] -> latent tokens [..., P, d_model]."""
    x = patchify(np.asarray(frame), cfg)
    return encode_t(ad.tensor(x.astype(params["enc.w1"].dtype)), params, cfg).data


def decode(tokens: np.ndarray, params, cfg: CodecConfig) -> np.ndarray:
    """Latent tokens -> frame(s), clamped to [0, 1]."""
    t = ad.tensor(np.asarray(tokens).astype(params["dec.w1"].dtype))
    patches = decode_t(t, params, cfg).data
    return np.clip(unpatchify(patches, cfg), 0.0, 1.0)


def reconstruction_loss(frames_np, params, cfg: CodecConfig):
    x = ad.tensor(patchify(frames_np, cfg).astype(params["enc.w1"].dtype))
    out = decode_t(encode_t(x, params, cfg), params, cfg)
    return ad.mean_square(ad.sub(out, x))


def train_codec(frames: np.ndarray, cfg: CodecConfig, seed=0, log=None):
    """Minimize reconstruction MSE over a frame pool [N, H, W].

    Returns (params, history). Frames from all views share one codec. The
    last `heldout_frac` of the pool is the early-stopping panel.
    """
    if frames.shape[0] < 4:
        raise ValueError("train_codec: need a non-trivial frame pool")
    n_held = max(1, int(frames.shape[0] * cfg.heldout_frac))
    train, held = frames[:-n_held], frames[-n_held:]
    held_eval = held[:: max(1, len(held) // 256)]

    params = init_codec_params(cfg, seed=seed)
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(seed + 1)
    history = []
    best = np.inf
    stale = 0
    for step_i in range(cfg.train_steps):
        idx = rng.integers(0, train.shape[0], size=cfg.batch)
        loss = reconstruction_loss(train[idx], params, cfg)
        if not np.isfinite(loss.data):
            raise FloatingPointError(
                f"train_codec: loss diverged at step {step_i} (seed={seed})")
        ad.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        adamw_step(params, grads, state, lr=cfg.lr)
        if (step_i + 1) % cfg.eval_every == 0:
            h = float(reconstruction_loss(held_eval, params, cfg).data)
            history.append((step_i + 1, float(loss.data), h))
            if log:
                log(step_i + 1, float(loss.data), h)
            if h < best * (1.0 - cfg.plateau_tol):
                best = h
                stale = 0
            else:
                stale += 1
                if stale >= cfg.plateau_evals:
                    break
    return params, history


def latent_stats(params, cfg: CodecConfig, frames: np.ndarray):
    """Per-channel token mean/std over a frame pool, for flow-matching scale."""
    tokens = encode(frames, params, cfg).reshape(-1, cfg.d_model)
    return tokens.mean(axis=0), np.maximum(tokens.std(axis=0), 1e-6)
