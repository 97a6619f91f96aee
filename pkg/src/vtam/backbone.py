"""Multi-view latent world model trained with flow matching.

Tokens keep a [batch, view, frame, patch, channel] layout. Each block runs
per-view self-attention, then self-attention over the concatenation of all
views, then a feed-forward, every sublayer gated by zero-initialized AdaLN
modulation from per-frame timestep embeddings (conditioning frames are
embedded at t=0, noisy future frames at the sampled t). The network output
is exactly zero at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import AdamWState, adamw_step


@dataclass
class BackboneConfig:
    views: int = 3
    blocks: int = 4            # paper-scale reference: 28
    d_model: int = 64          # paper-scale reference: 2048
    heads: int = 4             # paper-scale reference: 32
    patches: int = 16
    cond_frames: int = 1
    future_frames: int = 3     # chunk = 4 frames vs the reference 9
    frame_stride: int = 6      # sim steps between chunk frames (24 actions / 4 frames)
    ff_mult: int = 4
    d_time: int = 64

    @property
    def chunk_frames(self):
        return self.cond_frames + self.future_frames

    @property
    def tokens_per_frame_all_views(self):
        return self.views * self.patches


@dataclass
class FlowSample:
    z0: np.ndarray
    eps: np.ndarray
    t: np.ndarray          # scalar per batch entry
    z_t: np.ndarray
    v_star: np.ndarray


def make_flow_sample(z0: np.ndarray, eps: np.ndarray, t) -> FlowSample:
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"make_flow_sample: shape mismatch {z0.shape} vs {eps.shape}")
    t_arr = np.asarray(t, dtype=z0.dtype).reshape(-1, *([1] * (z0.ndim - 1)))
    if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
        raise ValueError("make_flow_sample: t must lie in (0, 1]")
    z_t = (1.0 - t_arr) * z0 + t_arr * eps
    return FlowSample(z0=z0, eps=eps, t=np.asarray(t), z_t=z_t, v_star=eps - z0)


def timestep_features(t_frames: np.ndarray, d_time: int) -> np.ndarray:
    """Sinusoidal features of per-frame timesteps, [B, F] -> [B, F, d_time]."""
    half = d_time // 2
    freqs = np.power(200.0, np.arange(half) / max(1, half - 1))
    ang = np.asarray(t_frames)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_backbone_params(cfg: BackboneConfig, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)

    def proj(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))

    def zeros(*shape):
        return ad.parameter(np.zeros(shape, dtype=dtype))

    def emb(*shape):
        return ad.parameter((0.02 * rng.standard_normal(shape)).astype(dtype))

    d, dt = cfg.d_model, cfg.d_time
    params = {
        "emb.frame": emb(cfg.chunk_frames, d),
        "emb.view": emb(cfg.views, d),
        "emb.patch": emb(cfg.patches, d),
        "time.w1": proj(dt, dt), "time.b1": zeros(dt),
        "time.w2": proj(dt, dt), "time.b2": zeros(dt),
        "final.mod": zeros(dt, 2 * d), "final.mod_b": zeros(2 * d),
        "final.out": zeros(d, d),
    }
    for b in range(cfg.blocks):
        for sub in ("intra", "cross"):
            params[f"blk{b}.{sub}.wq"] = proj(d, d)
            params[f"blk{b}.{sub}.wk"] = proj(d, d)
            params[f"blk{b}.{sub}.wv"] = proj(d, d)
            params[f"blk{b}.{sub}.wo"] = proj(d, d)
            params[f"blk{b}.{sub}.mod"] = zeros(dt, 3 * d)
            params[f"blk{b}.{sub}.mod_b"] = zeros(3 * d)
        params[f"blk{b}.ff.w1"] = proj(d, cfg.ff_mult * d)
        params[f"blk{b}.ff.b1"] = zeros(cfg.ff_mult * d)
        params[f"blk{b}.ff.w2"] = proj(cfg.ff_mult * d, d)
        params[f"blk{b}.ff.b2"] = zeros(d)
        params[f"blk{b}.ff.mod"] = zeros(dt, 3 * d)
        params[f"blk{b}.ff.mod_b"] = zeros(3 * d)
    return params


def _modulation(t_emb, w, b, d):
    """[B, F, d_time] -> three [B, 1, F, 1, d] tensors (scale, shift, gate)."""
    m = ad.add(ad.matmul(t_emb, w), b)
    B_, F_ = m.shape[0], m.shape[1]
    m = ad.reshape(m, (B_, 1, F_, 1, 3 * d))
    return m[..., 0:d], m[..., d:2 * d], m[..., 2 * d:3 * d]


def _heads_split(x, heads):
    """[..., S, d] -> [..., H, S, dh]"""
    *lead, S, d = x.shape
    dh = d // heads
    x = ad.reshape(x, (*lead, S, heads, dh))
    return ad.swapaxes(x, -3, -2)


def _heads_merge(x):
    """[..., H, S, dh] -> [..., S, d]"""
    x = ad.swapaxes(x, -3, -2)
    *lead, S, H, dh = x.shape
    return ad.reshape(x, (*lead, S, H * dh))


def _attention_sublayer(y, p, prefix, heads, probs_sink=None):
    q = _heads_split(ad.matmul(y, p[f"{prefix}.wq"]), heads)
    k = _heads_split(ad.matmul(y, p[f"{prefix}.wk"]), heads)
    v = _heads_split(ad.matmul(y, p[f"{prefix}.wv"]), heads)
    out = _heads_merge(ad.attention(q, k, v, probs_sink=probs_sink))
    return ad.matmul(out, p[f"{prefix}.wo"])


def backbone_forward(latents, t, params, cfg: BackboneConfig, views=None,
                     cross_per_view=False, collect_hiddens=True):
    """Run the backbone.

    latents: Tensor or ndarray [B, V, F, P, d] (future frames already
    interpolated to their noise level). t: per-frame timesteps [B, F]
    (conditioning frames at 0). Returns (velocity Tensor [B, V, F, P, d],
    hiddens: list of per-block [B, V*F*P, d] Tensors, length = blocks).

    `views` restricts the model to a subset of view indices (degenerate
    configs); `cross_per_view` runs the cross-view sublayer independently
    per view, which must match exactly when only one view is active.
    """
    x = latents if isinstance(latents, ad.Tensor) else ad.tensor(latents)
    view_idx = list(range(cfg.views)) if views is None else list(views)
    B_, V_, F_, P_, D_ = x.shape
    if V_ != len(view_idx):
        raise ValueError(f"backbone_forward: got {V_} views, expected {len(view_idx)}")
    if F_ != cfg.chunk_frames or P_ != cfg.patches or D_ != cfg.d_model:
        raise ValueError(f"backbone_forward: bad token shape {x.shape}")

    p = params
    dtype = p["emb.frame"].dtype
    feats = ad.tensor(timestep_features(np.asarray(t), cfg.d_time).astype(dtype))
    t_emb = ad.add(ad.matmul(ad.silu(ad.add(ad.matmul(feats, p["time.w1"]), p["time.b1"])),
                             p["time.w2"]), p["time.b2"])

    frame_e = ad.reshape(p["emb.frame"], (1, 1, F_, 1, D_))
    patch_e = ad.reshape(p["emb.patch"], (1, 1, 1, P_, D_))
    view_e = ad.reshape(p["emb.view"][view_idx, :], (1, V_, 1, 1, D_))
    x = ad.add(ad.add(ad.add(x, frame_e), patch_e), view_e)

    hiddens = []
    for b in range(cfg.blocks):
        # per-view self-attention
        scale, shift, gate = _modulation(t_emb, p[f"blk{b}.intra.mod"],
                                         p[f"blk{b}.intra.mod_b"], D_)
        y = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        y = ad.reshape(y, (B_, V_, F_ * P_, D_))
        out = _attention_sublayer(y, p, f"blk{b}.intra", cfg.heads)
        out = ad.reshape(out, (B_, V_, F_, P_, D_))
        x = ad.add(x, ad.mul(gate, out))

        # attention over the concatenation of every view's tokens
        scale, shift, gate = _modulation(t_emb, p[f"blk{b}.cross.mod"],
                                         p[f"blk{b}.cross.mod_b"], D_)
        y = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        if cross_per_view:
            y = ad.reshape(y, (B_, V_, F_ * P_, D_))
            out = _attention_sublayer(y, p, f"blk{b}.cross", cfg.heads)
            out = ad.reshape(out, (B_, V_, F_, P_, D_))
        else:
            y = ad.reshape(y, (B_, V_ * F_ * P_, D_))
            out = _attention_sublayer(y, p, f"blk{b}.cross", cfg.heads)
            out = ad.reshape(out, (B_, V_, F_, P_, D_))
        x = ad.add(x, ad.mul(gate, out))

        # feed-forward
        scale, shift, gate = _modulation(t_emb, p[f"blk{b}.ff.mod"],
                                         p[f"blk{b}.ff.mod_b"], D_)
        y = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        h = ad.gelu(ad.add(ad.matmul(y, p[f"blk{b}.ff.w1"]), p[f"blk{b}.ff.b1"]))
        out = ad.add(ad.matmul(h, p[f"blk{b}.ff.w2"]), p[f"blk{b}.ff.b2"])
        x = ad.add(x, ad.mul(gate, out))

        if collect_hiddens:
            hiddens.append(ad.reshape(x, (B_, V_ * F_ * P_, D_)))

    m = ad.add(ad.matmul(t_emb, p["final.mod"]), p["final.mod_b"])
    m = ad.reshape(m, (B_, 1, F_, 1, 2 * D_))
    y = ad.add(ad.mul(ad.layer_norm(x), ad.add(m[..., 0:D_], 1.0)), m[..., D_:2 * D_])
    velocity = ad.matmul(y, p["final.out"])
    return velocity, hiddens


def stage1_loss(pred_velocity, v_star, conditioning_mask):
    """Masked MSE over future-frame tokens only.

    conditioning_mask: [F] with 1.0 at future frames, 0.0 at conditioning
    frames. Masked positions get exactly zero loss and gradient.
    """
    mask = np.asarray(conditioning_mask, dtype=np.float64)
    B_, V_, F_, P_, D_ = pred_velocity.shape
    m = ad.constant(mask.reshape(1, 1, F_, 1, 1).astype(np.asarray(v_star).dtype))
    diff = ad.sub(pred_velocity, ad.constant(v_star))
    masked = ad.mul(diff, m)
    count = B_ * V_ * float(mask.sum()) * P_ * D_
    return ad.scale(ad.tsum(ad.mul(masked, masked)), 1.0 / count)


def euler_sample(velocity_fn, z_init: np.ndarray, steps: int):
    """Integrate dz/dt = v from t=1 (noise) to t=0 on a uniform grid."""
    if steps < 1:
        raise ValueError("euler_sample: steps must be >= 1")
    z = np.array(z_init, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        t_k = 1.0 - k / steps
        v = np.asarray(velocity_fn(z, t_k))
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"euler_sample: non-finite velocity at step {k} (t={t_k:.4f})")
        z = z - dt * v
    return z


def predict_future_latents(cond_latents: np.ndarray, params, cfg: BackboneConfig,
                           steps: int, seed: int, views=None):
    """Sample future-frame latents given clean conditioning frames.

    cond_latents: [B, V, C, P, d] (normalized). Returns [B, V, Ff, P, d].
    """
    rng = np.random.default_rng(seed)
    B_, V_, C_, P_, D_ = cond_latents.shape
    Ff = cfg.future_frames
    dtype = params["emb.frame"].dtype
    z1 = rng.standard_normal((B_, V_, Ff, P_, D_)).astype(dtype)

    def velocity(z, t_k):
        full = np.concatenate([cond_latents.astype(dtype), z.astype(dtype)], axis=2)
        t_frames = np.concatenate([np.zeros((B_, C_)), np.full((B_, Ff), t_k)], axis=1)
        vel, _ = backbone_forward(full, t_frames, params, cfg, views=views,
                                  collect_hiddens=False)
        return vel.data[:, :, C_:, :, :]

    return euler_sample(velocity, z1, steps)


@dataclass
class Stage1Config:
    steps: int = 3000          # paper-scale reference: 50k
    batch: int = 8
    lr: float = 3e-4
    warmup: int = 100          # paper-scale reference: 1000
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.95
    clip_norm: float = 1.0
    cond_noise: float = 0.1    # first-frame noise injection scale
    caption_dropout: float = 0.06  # no captions exist at desk scale: recorded, no effect
    eval_every: int = 100
    eval_batches: int = 4


def lr_at(step_i, base_lr, warmup):
    if warmup > 0 and step_i < warmup:
        return base_lr * (step_i + 1) / warmup
    return base_lr


class ChunkSampler:
    """Uniform (episode, start) chunks from a [N, T, V, P, d] latent cache."""

    def __init__(self, latents, cfg: BackboneConfig, episode_idx, rng):
        self.latents = latents
        self.cfg = cfg
        self.episodes = np.asarray(episode_idx)
        self.rng = rng
        T = latents.shape[1]
        self.max_start = T - 1 - cfg.frame_stride * (cfg.chunk_frames - 1)
        self.action_max_start = T - cfg.frame_stride * cfg.chunk_frames
        if self.action_max_start < 0:
            raise ValueError("episode too short for the configured chunk")

    def frame_indices(self, t0):
        return t0 + self.cfg.frame_stride * np.arange(self.cfg.chunk_frames)

    def sample(self, batch):
        eps = self.episodes[self.rng.integers(0, len(self.episodes), size=batch)]
        t0s = self.rng.integers(0, self.action_max_start + 1, size=batch)
        chunks = np.stack([
            self.latents[e][self.frame_indices(t0)] for e, t0 in zip(eps, t0s)
        ])  # [B, F, V, P, d]
        return np.swapaxes(chunks, 1, 2), eps, t0s  # [B, V, F, P, d]


def train_stage1(latents, cfg: BackboneConfig, tcfg: Stage1Config, seed=0,
                 episode_split=None, metrics_cb=None, views=None, params=None):
    """Flow-matching training on future-frame prediction.

    latents: [N, T, V, P, d], already normalized per channel. Returns
    (params, rows) where rows are (step, train_loss, heldout_loss, lr).
    """
    n_eps = latents.shape[0]
    if episode_split is None:
        n_held = max(1, n_eps // 10)
        train_idx = np.arange(0, n_eps - n_held)
        held_idx = np.arange(n_eps - n_held, n_eps)
    else:
        train_idx, held_idx = episode_split

    if params is None:
        params = init_backbone_params(cfg, seed=seed)
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(seed + 11)
    sampler = ChunkSampler(latents, cfg, train_idx, rng)
    held_sampler = ChunkSampler(latents, cfg, held_idx, np.random.default_rng(seed + 13))
    held_panel = [held_sampler.sample(tcfg.batch) for _ in range(tcfg.eval_batches)]

    C = cfg.cond_frames
    mask = np.concatenate([np.zeros(C), np.ones(cfg.future_frames)])

    def batch_loss(chunk, rng_local, train=True):
        B_ = chunk.shape[0]
        z0 = chunk[:, :, C:, :, :]
        eps_noise = rng_local.standard_normal(z0.shape).astype(chunk.dtype)
        t = 1.0 - rng_local.uniform(0.0, 1.0, size=B_)
        fs = make_flow_sample(z0, eps_noise, t)
        cond = chunk[:, :, :C, :, :].copy()
        if train and tcfg.cond_noise > 0:
            cond = cond + tcfg.cond_noise * rng_local.standard_normal(cond.shape).astype(chunk.dtype)
        full = np.concatenate([cond, fs.z_t.astype(chunk.dtype)], axis=2)
        t_frames = np.concatenate([np.zeros((B_, C)), np.tile(t[:, None], (1, cfg.future_frames))], axis=1)
        vel, _ = backbone_forward(full, t_frames, params, cfg, views=views,
                                  collect_hiddens=False)
        v_full = np.concatenate([np.zeros_like(cond), fs.v_star.astype(chunk.dtype)], axis=2)
        return stage1_loss(vel, v_full, mask)

    rows = []
    held_loss = float("nan")
    for step_i in range(tcfg.steps):
        chunk, _, _ = sampler.sample(tcfg.batch)
        loss = batch_loss(chunk, rng)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"train_stage1: loss diverged at step {step_i}")
        ad.backward(loss)
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in params.items()}
        lr = lr_at(step_i, tcfg.lr, tcfg.warmup)
        adamw_step(params, grads, state, lr=lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                   weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
        if (step_i + 1) % tcfg.eval_every == 0 or step_i == tcfg.steps - 1:
            eval_rng = np.random.default_rng(seed + 17)
            held_loss = float(np.mean([
                batch_loss(c[0], eval_rng, train=False).data for c in held_panel
            ]))
        rows.append((step_i + 1, float(loss.data), held_loss, lr))
        if metrics_cb:
            metrics_cb(rows[-1])
    return params, rows


def zero_velocity_baseline(latents, cfg: BackboneConfig, seed=0, batches=8, batch=8,
                           episode_idx=None):
    """Held-out E||v*||^2 of the zero predictor, the stage-1 yardstick."""
    if episode_idx is None:
        episode_idx = np.arange(latents.shape[0])
    rng = np.random.default_rng(seed)
    sampler = ChunkSampler(latents, cfg, episode_idx, rng)
    C = cfg.cond_frames
    vals = []
    for _ in range(batches):
        chunk, _, _ = sampler.sample(batch)
        z0 = chunk[:, :, C:, :, :]
        eps_noise = rng.standard_normal(z0.shape)
        t = 1.0 - rng.uniform(0.0, 1.0, size=chunk.shape[0])
        fs = make_flow_sample(z0, eps_noise, t)
        vals.append(float(np.mean(fs.v_star ** 2)))
    return float(np.mean(vals))
