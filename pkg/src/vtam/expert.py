"""Conditional action-state-force denoising head.

A parallel branch with the same depth as the world backbone: per layer,
self-attention over the action-token sequence, cross-attention onto that
layer's backbone hidden states, and a feed-forward, all AdaLN-modulated by
the shared flow timestep. The denoising target packs [action; force; state]
per chunk step; the condition token is the current state with the action
and force segments zero-padded, prepended to the token sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import (BackboneConfig, euler_sample, make_flow_sample,
                       backbone_forward, timestep_features, lr_at)
from .optim import AdamWState, adamw_step

VARIANTS = ("full", "no_force_reg", "vision_only", "late_fusion")


@dataclass
class ExpertConfig:
    layers: int = 4            # mirrors backbone depth
    d_model: int = 64
    heads: int = 4
    chunk_len: int = 24        # paper-scale reference: 54
    d_action: int = 4
    d_force: int = 3
    d_state: int = 16
    ff_mult: int = 4
    d_time: int = 64
    sample_steps: int = 5
    lambda_state: float = 1.0
    lambda_force: float = 1.0

    @property
    def d_pack(self):
        return self.d_action + self.d_force + self.d_state

    def cond_dim(self, variant="full"):
        return self.d_pack + (self.d_force if variant == "late_fusion" else 0)


def pack_target(a, f, s):
    return np.concatenate([a, f, s], axis=-1)


def unpack_target(z, cfg: ExpertConfig):
    da, df = cfg.d_action, cfg.d_force
    return z[..., :da], z[..., da:da + df], z[..., da + df:]


def build_target(a_chunk, force_labels, s_chunk, stats, cfg: ExpertConfig):
    """Normalize components with dataset stats and pack [L, d_pack]."""
    a = np.asarray(a_chunk)
    f = np.asarray(force_labels)
    s = np.asarray(s_chunk)
    if not (a.shape[0] == f.shape[0] == s.shape[0]):
        raise ValueError("build_target: chunk lengths differ")
    a_n = (a - stats["action"]["mean"]) / stats["action"]["std"]
    f_n = (f - stats["force"]["mean"]) / stats["force"]["std"]
    s_n = (s - stats["state"]["mean"]) / stats["state"]["std"]
    return pack_target(a_n, f_n, s_n)


def build_condition(s_current, stats, cfg: ExpertConfig, raw_force=None):
    """Zero-padded condition token: [0_(d_a+d_f); normalized state].

    `raw_force` (late-fusion variant) appends the current virtual-force
    estimate, normalized with the same dataset statistics as the targets.
    """
    s_n = (np.asarray(s_current) - stats["state"]["mean"]) / stats["state"]["std"]
    c = np.concatenate([np.zeros(cfg.d_action + cfg.d_force), s_n])
    if raw_force is not None:
        f_n = (np.asarray(raw_force) - stats["force"]["mean"]) / stats["force"]["std"]
        c = np.concatenate([c, f_n])
    return c


def init_expert_params(cfg: ExpertConfig, variant="full", seed=0, dtype=np.float32):
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
        "in.w": proj(cfg.d_pack, d), "in.b": zeros(d),
        "cond.w": proj(cfg.cond_dim(variant), d), "cond.b": zeros(d),
        "emb.pos": emb(cfg.chunk_len + 1, d),
        "time.w1": proj(dt, dt), "time.b1": zeros(dt),
        "time.w2": proj(dt, dt), "time.b2": zeros(dt),
        "final.mod": zeros(dt, 2 * d), "final.mod_b": zeros(2 * d),
        "final.out": zeros(d, cfg.d_pack),
    }
    for l in range(cfg.layers):
        for sub in ("self", "xattn"):
            params[f"lyr{l}.{sub}.wq"] = proj(d, d)
            params[f"lyr{l}.{sub}.wk"] = proj(d, d)
            params[f"lyr{l}.{sub}.wv"] = proj(d, d)
            params[f"lyr{l}.{sub}.wo"] = proj(d, d)
            params[f"lyr{l}.{sub}.mod"] = zeros(dt, 3 * d)
            params[f"lyr{l}.{sub}.mod_b"] = zeros(3 * d)
        params[f"lyr{l}.ff.w1"] = proj(d, cfg.ff_mult * d)
        params[f"lyr{l}.ff.b1"] = zeros(cfg.ff_mult * d)
        params[f"lyr{l}.ff.w2"] = proj(cfg.ff_mult * d, d)
        params[f"lyr{l}.ff.b2"] = zeros(d)
        params[f"lyr{l}.ff.mod"] = zeros(dt, 3 * d)
        params[f"lyr{l}.ff.mod_b"] = zeros(3 * d)
    return params


def _mod(t_emb, w, b, d):
    m = ad.add(ad.matmul(t_emb, w), b)
    m = ad.reshape(m, (m.shape[0], 1, 3 * d))
    return m[..., 0:d], m[..., d:2 * d], m[..., 2 * d:3 * d]


def _split_heads(x, heads):
    B_, S_, D_ = x.shape
    return ad.swapaxes(ad.reshape(x, (B_, S_, heads, D_ // heads)), 1, 2)


def _merge_heads(x):
    B_, H_, S_, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B_, S_, H_ * dh))


def expert_forward(z_t, t, c, backbone_hiddens, params, cfg: ExpertConfig,
                   probs_sink=None):
    """Predict the packed velocity for the action-token chunk.

    z_t: [B, L, d_pack] noisy packed targets; t: [B] shared timestep;
    c: [B, d_cond] condition vector; backbone_hiddens: per-layer Tensors
    [B, S, d_model], one per expert layer. probs_sink collects raw
    cross-attention probabilities for diagnostics.
    """
    if len(backbone_hiddens) != cfg.layers:
        raise ValueError(f"expert_forward: got {len(backbone_hiddens)} hidden states, "
                         f"expected {cfg.layers}")
    p = params
    dtype = p["in.w"].dtype
    z = z_t if isinstance(z_t, ad.Tensor) else ad.tensor(np.asarray(z_t).astype(dtype))
    cv = c if isinstance(c, ad.Tensor) else ad.tensor(np.asarray(c).astype(dtype))
    B_, L_, _ = z.shape

    feats = ad.tensor(timestep_features(np.asarray(t).reshape(B_, 1), cfg.d_time)
                      .reshape(B_, cfg.d_time).astype(dtype))
    t_emb = ad.add(ad.matmul(ad.silu(ad.add(ad.matmul(feats, p["time.w1"]), p["time.b1"])),
                             p["time.w2"]), p["time.b2"])

    cond_tok = ad.reshape(ad.add(ad.matmul(cv, p["cond.w"]), p["cond.b"]),
                          (B_, 1, cfg.d_model))
    act_tok = ad.add(ad.matmul(z, p["in.w"]), p["in.b"])
    x = ad.concat([cond_tok, act_tok], axis=1)
    x = ad.add(x, ad.reshape(p["emb.pos"], (1, L_ + 1, cfg.d_model)))

    D_ = cfg.d_model
    for l in range(cfg.layers):
        scale, shift, gate = _mod(t_emb, p[f"lyr{l}.self.mod"], p[f"lyr{l}.self.mod_b"], D_)
        y = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        q = _split_heads(ad.matmul(y, p[f"lyr{l}.self.wq"]), cfg.heads)
        k = _split_heads(ad.matmul(y, p[f"lyr{l}.self.wk"]), cfg.heads)
        v = _split_heads(ad.matmul(y, p[f"lyr{l}.self.wv"]), cfg.heads)
        out = ad.matmul(_merge_heads(ad.attention(q, k, v)), p[f"lyr{l}.self.wo"])
        x = ad.add(x, ad.mul(gate, out))

        scale, shift, gate = _mod(t_emb, p[f"lyr{l}.xattn.mod"], p[f"lyr{l}.xattn.mod_b"], D_)
        y = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        h = backbone_hiddens[l]
        if not isinstance(h, ad.Tensor):
            h = ad.tensor(np.asarray(h).astype(dtype))
        q = _split_heads(ad.matmul(y, p[f"lyr{l}.xattn.wq"]), cfg.heads)
        k = _split_heads(ad.matmul(h, p[f"lyr{l}.xattn.wk"]), cfg.heads)
        v = _split_heads(ad.matmul(h, p[f"lyr{l}.xattn.wv"]), cfg.heads)
        out = ad.matmul(_merge_heads(ad.attention(q, k, v, probs_sink=probs_sink)),
                        p[f"lyr{l}.xattn.wo"])
        x = ad.add(x, ad.mul(gate, out))

        scale, shift, gate = _mod(t_emb, p[f"lyr{l}.ff.mod"], p[f"lyr{l}.ff.mod_b"], D_)
        y = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        hh = ad.gelu(ad.add(ad.matmul(y, p[f"lyr{l}.ff.w1"]), p[f"lyr{l}.ff.b1"]))
        out = ad.add(ad.matmul(hh, p[f"lyr{l}.ff.w2"]), p[f"lyr{l}.ff.b2"])
        x = ad.add(x, ad.mul(gate, out))

    m = ad.add(ad.matmul(t_emb, p["final.mod"]), p["final.mod_b"])
    m = ad.reshape(m, (B_, 1, 2 * D_))
    y = ad.add(ad.mul(ad.layer_norm(x), ad.add(m[..., 0:D_], 1.0)), m[..., D_:2 * D_])
    y = y[:, 1:, :]  # drop the condition position
    return ad.matmul(y, p["final.out"])


def stage2_loss(pred_velocity, v_star, cfg: ExpertConfig, lambda1=None, lambda2=None):
    """Per-slice velocity MSE: total = action + l1*state + l2*force.

    Returns (total Tensor, action, state, force floats-on-demand Tensors).
    The slices are disjoint, so with lambda2=0 the force slice receives an
    exactly-zero gradient.
    """
    l1 = cfg.lambda_state if lambda1 is None else lambda1
    l2 = cfg.lambda_force if lambda2 is None else lambda2
    tgt = v_star if isinstance(v_star, ad.Tensor) else ad.constant(
        np.asarray(v_star).astype(pred_velocity.dtype))
    if pred_velocity.shape != tgt.shape:
        raise ValueError(f"stage2_loss: shape mismatch {pred_velocity.shape} vs {tgt.shape}")
    diff = ad.sub(pred_velocity, tgt)
    da, df = cfg.d_action, cfg.d_force
    l_action = ad.mean_square(diff[..., :da])
    l_force = ad.mean_square(diff[..., da:da + df])
    l_state = ad.mean_square(diff[..., da + df:])
    total = ad.add(l_action, ad.add(ad.scale(l_state, l1), ad.scale(l_force, l2)))
    return total, l_action, l_state, l_force


def joint_sample(cond_latents, condition, backbone_params, expert_params,
                 bcfg: BackboneConfig, ecfg: ExpertConfig, steps, seed,
                 probs_sink=None):
    """Euler-denoise future video latents and the action chunk on a shared grid.

    cond_latents: [B, V, C, P, d] normalized clean conditioning latents.
    condition: [B, d_cond]. Returns (packed [B, L, d_pack], video latents).
    """
    if steps < 1:
        raise ValueError("joint_sample: steps must be >= 1")
    rng = np.random.default_rng(seed)
    dtype = backbone_params["emb.frame"].dtype
    B_, V_, C_, P_, D_ = cond_latents.shape
    Ff = bcfg.future_frames
    z_vid = rng.standard_normal((B_, V_, Ff, P_, D_)).astype(dtype)
    z_act = rng.standard_normal((B_, ecfg.chunk_len, ecfg.d_pack)).astype(dtype)

    dt = 1.0 / steps
    for k in range(steps):
        t_k = 1.0 - k / steps
        full = np.concatenate([cond_latents.astype(dtype), z_vid], axis=2)
        t_frames = np.concatenate([np.zeros((B_, C_)), np.full((B_, Ff), t_k)], axis=1)
        vel_vid, hiddens = backbone_forward(full, t_frames, backbone_params, bcfg)
        vel_act = expert_forward(z_act, np.full(B_, t_k), condition, hiddens,
                                 expert_params, ecfg,
                                 probs_sink=probs_sink if k == steps - 1 else None)
        if not (np.all(np.isfinite(vel_vid.data)) and np.all(np.isfinite(vel_act.data))):
            raise FloatingPointError(f"joint_sample: non-finite velocity at step {k}")
        z_vid = z_vid - dt * vel_vid.data[:, :, C_:, :, :]
        z_act = z_act - dt * vel_act.data
    return z_act, z_vid


@dataclass
class Stage2Config:
    steps: int = 2000          # paper-scale reference: 20k
    batch: int = 8
    lr: float = 3e-4           # paper-scale reference: 5e-5 on a pretrained trunk
    warmup: int = 100
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.95
    clip_norm: float = 1.0
    eval_every: int = 100
    grad_ratio_every: int = 1  # tactile input-gradient ratio cadence (steps)


def tactile_grad_ratio_from_grad(latent_grad, tactile_view=2):
    """||dL/d tactile-view latents|| / ||dL/d all-view latents||."""
    g = np.asarray(latent_grad, dtype=np.float64)
    total = float(np.sqrt(np.sum(g * g)))
    if total < 1e-12:
        return 0.0
    tac = float(np.sqrt(np.sum(g[:, tactile_view] ** 2)))
    return tac / total


def train_stage2(latent_cache, targets, conditions, backbone_params,
                 bcfg: BackboneConfig, ecfg: ExpertConfig, scfg: Stage2Config,
                 variant="full", seed=0, episode_split=None, metrics_cb=None):
    """Train the expert against a frozen backbone.

    latent_cache: [N, T, V, P, d] normalized (variant-appropriate view
    content). targets: [N, T0, L, d_pack] packed normalized denoise targets
    per chunk start (T0 = usable starts). conditions: [N, T0, d_cond].
    Returns (expert params, rows of per-step metrics).
    """
    if variant not in VARIANTS:
        raise ValueError(f"train_stage2: unknown variant {variant!r}")
    n_eps = latent_cache.shape[0]
    if episode_split is None:
        n_held = max(1, n_eps // 10)
        train_idx = np.arange(0, n_eps - n_held)
    else:
        train_idx = episode_split[0]

    frozen = {k: ad.tensor(p.data) for k, p in backbone_params.items()}
    params = init_expert_params(ecfg, variant=variant, seed=seed + 29)
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(seed + 31)
    lambda2 = 0.0 if variant == "no_force_reg" else ecfg.lambda_force
    C = bcfg.cond_frames
    T0 = targets.shape[1]

    rows = []
    for step_i in range(scfg.steps):
        eps_i = train_idx[rng.integers(0, len(train_idx), size=scfg.batch)]
        t0s = rng.integers(0, T0, size=scfg.batch)
        frame_idx = t0s[:, None] + bcfg.frame_stride * np.arange(bcfg.chunk_frames)[None, :]
        chunk = np.stack([latent_cache[e][fi] for e, fi in zip(eps_i, frame_idx)])
        chunk = np.swapaxes(chunk, 1, 2)  # [B, V, F, P, d]
        z0 = np.stack([targets[e, t0] for e, t0 in zip(eps_i, t0s)])
        cond_vec = np.stack([conditions[e, t0] for e, t0 in zip(eps_i, t0s)])

        B_ = chunk.shape[0]
        t = 1.0 - rng.uniform(0.0, 1.0, size=B_)
        fs_act = make_flow_sample(z0, rng.standard_normal(z0.shape), t)
        eps_vid = rng.standard_normal(chunk[:, :, C:].shape)
        t_bc = t.reshape(-1, 1, 1, 1, 1)
        vid_zt = (1.0 - t_bc) * chunk[:, :, C:] + t_bc * eps_vid
        full = np.concatenate([chunk[:, :, :C], vid_zt], axis=2).astype(np.float32)

        latents_in = ad.tensor(full, requires_grad=True)
        t_frames = np.concatenate([np.zeros((B_, C)),
                                   np.tile(t[:, None], (1, bcfg.future_frames))], axis=1)
        _, hiddens = backbone_forward(latents_in, t_frames, frozen, bcfg)
        pred = expert_forward(fs_act.z_t, t, cond_vec, hiddens, params, ecfg)
        total, l_a, l_s, l_f = stage2_loss(pred, fs_act.v_star, ecfg, lambda2=lambda2)
        if not np.isfinite(total.data):
            raise FloatingPointError(f"train_stage2[{variant}]: loss diverged at step {step_i}")
        ad.backward(total)
        ratio = tactile_grad_ratio_from_grad(
            latents_in.grad if latents_in.grad is not None else np.zeros_like(full))
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in params.items()}
        lr = lr_at(step_i, scfg.lr, scfg.warmup)
        adamw_step(params, grads, state, lr=lr, beta1=scfg.beta1, beta2=scfg.beta2,
                   weight_decay=scfg.weight_decay, clip_norm=scfg.clip_norm)
        rows.append((step_i + 1, float(total.data), float(l_a.data),
                     float(l_s.data), float(l_f.data), ratio))
        if metrics_cb:
            metrics_cb(rows[-1])
    return params, rows
