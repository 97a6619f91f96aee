"""Training pipeline, ablation harness, and evaluation artifacts.

Stages run in order: data -> codec -> stage1 -> stage2(variant) -> eval.
Every artifact embeds the producing config hash; finished stages are
skipped on re-run when their artifact carries the current hash.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import (Stage1Config, backbone_forward, init_backbone_params,
                       predict_future_latents, train_stage1, zero_velocity_baseline)
from .checkpoint import decode_text, encode_text, load_params, load_tensors, save_params
from .codec import CodecConfig, encode, decode, latent_stats, train_codec
from .config import RunConfig
from .env import (EnvConfig, generate_dataset, load_dataset, normalize,
                  denormalize, rollout_policy)
from .expert import (ExpertConfig, Stage2Config, VARIANTS, build_condition,
                     build_target, expert_forward, init_expert_params,
                     joint_sample, make_flow_sample, stage2_loss,
                     tactile_grad_ratio_from_grad, train_stage2)
from .pgm import tile_grid, write_pgm
from .tactile import force_labels, optical_flow, virtual_force

TACTILE_VIEW = 2


# ---------------------------------------------------------------------------
# artifact helpers


def _write_csv(path, header, rows, config_hash):
    lines = [f"# config_hash={config_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    meta = {}
    while lines and lines[0].startswith("#"):
        k, _, v = lines.pop(0)[1:].strip().partition("=")
        meta[k.strip()] = v.strip()
    header = lines.pop(0).split(",")
    rows = [line.split(",") for line in lines]
    return meta, header, rows


def _ckpt_hash(path):
    try:
        tensors = load_tensors(path)
    except (OSError, ValueError):
        return None
    if "meta.config_hash" not in tensors:
        return None
    return decode_text(tensors["meta.config_hash"])


def _stage_done(path, config_hash):
    return Path(path).exists() and _ckpt_hash(path) == config_hash


# ---------------------------------------------------------------------------
# stages


def stage_data(cfg: RunConfig, run_dir: Path, log=print):
    data_dir = run_dir / "data"
    manifest_path = data_dir / "manifest.json"
    h = cfg.config_hash()
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_hash") == h:
            log(f"[data] reusing {manifest['n_episodes']} episodes")
            return load_dataset(data_dir)
    log(f"[data] generating {cfg.data.n_episodes} episodes")
    generate_dataset(cfg.data.n_episodes, cfg.data.seed, cfg.env, data_dir,
                     config_hash=h,
                     force_label_fn=lambda ep: force_labels(ep.tactile))
    return load_dataset(data_dir)


def _frame_pool(episodes):
    views = []
    for ep in episodes:
        views.extend([ep.view1, ep.view2, ep.tactile])
    return np.concatenate(views, axis=0)


def stage_codec(cfg: RunConfig, run_dir: Path, episodes, log=print):
    path = run_dir / "codec.ckpt"
    h = cfg.config_hash()
    params = None
    if _stage_done(path, h):
        log("[codec] reusing checkpoint")
        params = {k: ad.parameter(v) for k, v in
                  load_tensors(path).items() if k.startswith("codec.")}
        params = {k[len("codec."):]: p for k, p in params.items()}
        tensors = load_tensors(path)
        return params, (tensors["codec.latent_mean"], tensors["codec.latent_std"])
    log("[codec] training")
    pool = _frame_pool(episodes)
    rng = np.random.default_rng(cfg.run_seed)
    pool = pool[rng.permutation(pool.shape[0])]
    params, _ = train_codec(pool, cfg.codec, seed=cfg.run_seed)
    mean, std = latent_stats(params, cfg.codec, pool[:4000])
    extra = {"codec.latent_mean": mean.astype(np.float32),
             "codec.latent_std": std.astype(np.float32),
             "meta.config_hash": encode_text(h)}
    save_params(path, params, prefix="codec.", extra=extra)
    return params, (mean.astype(np.float32), std.astype(np.float32))


def build_latent_cache(cfg: RunConfig, episodes, codec_params, lstats,
                       mean_tactile=None):
    """Encode every frame. [N, T, V, P, d], normalized per channel.

    With `mean_tactile`, the tactile stream is replaced by that single
    frame everywhere (information removed, shapes unchanged).
    """
    mean, std = lstats
    n, T = len(episodes), episodes[0].length
    P, D = cfg.codec.patches, cfg.codec.d_model
    cache = np.zeros((n, T, 3, P, D), dtype=np.float32)
    mean_tokens = None
    if mean_tactile is not None:
        mean_tokens = encode(mean_tactile, codec_params, cfg.codec)
    for i, ep in enumerate(episodes):
        for v, frames in enumerate((ep.view1, ep.view2, ep.tactile)):
            if v == TACTILE_VIEW and mean_tokens is not None:
                cache[i, :, v] = mean_tokens[None]
            else:
                cache[i, :, v] = encode(frames, codec_params, cfg.codec)
    cache = (cache - mean.reshape(1, 1, 1, 1, -1)) / std.reshape(1, 1, 1, 1, -1)
    return cache.astype(np.float32)


def episode_split(cfg: RunConfig, n_episodes):
    n_held = max(1, int(n_episodes * cfg.data.heldout_frac))
    return np.arange(0, n_episodes - n_held), np.arange(n_episodes - n_held, n_episodes)


def stage_stage1(cfg: RunConfig, run_dir: Path, cache, name="stage1", log=print):
    path = run_dir / f"{name}.ckpt"
    csv_path = run_dir / f"{name}_metrics.csv"
    h = cfg.config_hash()
    if _stage_done(path, h):
        log(f"[{name}] reusing checkpoint")
        params = init_backbone_params(cfg.backbone, seed=cfg.run_seed)
        load_params(path, params, prefix="backbone.")
        return params
    log(f"[{name}] training {cfg.stage1.steps} steps")
    split = episode_split(cfg, cache.shape[0])
    t_start = time.perf_counter()
    rows_out = []

    def cb(row):
        rows_out.append((*row, time.perf_counter() - t_start))
        if row[0] % 500 == 0:
            log(f"[{name}] step {row[0]} train {row[1]:.4f} heldout {row[2]:.4f}")

    params, _ = train_stage1(cache, cfg.backbone, cfg.stage1, seed=cfg.run_seed,
                             episode_split=split, metrics_cb=cb)
    _write_csv(csv_path, ("step", "train_loss", "heldout_loss", "lr", "wallclock_s"),
               rows_out, h)
    save_params(path, params, prefix="backbone.",
                extra={"meta.config_hash": encode_text(h)})
    return params


def chunk_force_labels(labels_ep, t0, ecfg: ExpertConfig, stride, chunk_frames):
    """Force labels per action step by nearest chunk-frame lookup.

    The chunk carries tactile frames only at t0 + stride*k; each of the
    (denser) action steps takes the label of its nearest chunk frame.
    """
    offsets = stride * np.arange(chunk_frames)
    steps = np.arange(ecfg.chunk_len)
    nearest = offsets[np.argmin(np.abs(steps[:, None] - offsets[None, :]), axis=1)]
    return labels_ep[t0 + nearest]


def build_stage2_arrays(cfg: RunConfig, episodes, labels, stats, variant):
    """Packed targets [N, T0, L, d_pack] and conditions [N, T0, d_cond]."""
    ecfg = cfg.expert
    stride = cfg.backbone.frame_stride
    T = episodes[0].length
    T0 = T - stride * cfg.backbone.chunk_frames + 1
    n = len(episodes)
    targets = np.zeros((n, T0, ecfg.chunk_len, ecfg.d_pack), dtype=np.float32)
    conditions = np.zeros((n, T0, ecfg.cond_dim(variant)), dtype=np.float32)
    for i, ep in enumerate(episodes):
        for t0 in range(T0):
            f_chunk = chunk_force_labels(labels[i], t0, ecfg, stride,
                                         cfg.backbone.chunk_frames)
            tgt = build_target(ep.action[t0:t0 + ecfg.chunk_len], f_chunk,
                               ep.state[t0:t0 + ecfg.chunk_len], stats, ecfg)
            if variant == "no_force_reg":
                tgt[..., ecfg.d_action:ecfg.d_action + ecfg.d_force] = 0.0
            targets[i, t0] = tgt
            raw_force = labels[i][t0] if variant == "late_fusion" else None
            conditions[i, t0] = build_condition(ep.state[t0], stats, ecfg,
                                                raw_force=raw_force)
    return targets, conditions


def stage_stage2(cfg: RunConfig, run_dir: Path, variant, backbone_params, cache,
                 episodes, labels, stats, log=print):
    path = run_dir / f"stage2_{variant}.ckpt"
    csv_path = run_dir / f"stage2_{variant}_metrics.csv"
    h = cfg.config_hash()
    if _stage_done(path, h):
        log(f"[stage2:{variant}] reusing checkpoint")
        params = init_expert_params(cfg.expert, variant=variant, seed=cfg.run_seed + 29)
        load_params(path, params, prefix="expert.")
        return params
    log(f"[stage2:{variant}] training {cfg.stage2.steps} steps")
    targets, conditions = build_stage2_arrays(cfg, episodes, labels, stats, variant)
    split = episode_split(cfg, cache.shape[0])
    t_start = time.perf_counter()
    rows_out = []

    def cb(row):
        rows_out.append((*row, time.perf_counter() - t_start))
        if row[0] % 500 == 0:
            log(f"[stage2:{variant}] step {row[0]} total {row[1]:.4f} ratio {row[5]:.3f}")

    params, _ = train_stage2(cache, targets, conditions, backbone_params,
                             cfg.backbone, cfg.expert, cfg.stage2, variant=variant,
                             seed=cfg.run_seed, episode_split=(split[0], split[1]),
                             metrics_cb=cb)
    _write_csv(csv_path,
               ("step", "total", "L_action", "L_state", "L_force",
                "tactile_grad_ratio", "wallclock_s"),
               rows_out, h)
    save_params(path, params, prefix="expert.",
                extra={"meta.config_hash": encode_text(h)})
    return params


# ---------------------------------------------------------------------------
# learned policy


class LearnedPolicy:
    """Chunked policy over the trained checkpoints.

    Stateful per trial (call reset): keeps the no-contact reference frame
    for the late-fusion force estimate and a chunk counter for seeding.
    """

    def __init__(self, cfg: RunConfig, codec_params, lstats, backbone_params,
                 expert_params, stats, variant="full", mean_tactile=None,
                 base_seed=0):
        self.cfg = cfg
        self.codec_params = codec_params
        self.mean, self.std = lstats
        self.backbone_params = backbone_params
        self.expert_params = expert_params
        self.stats = stats
        self.variant = variant
        self.mean_tactile = mean_tactile
        self.base_seed = base_seed
        self.reset(0)

    def reset(self, trial_seed):
        self.trial_seed = int(trial_seed)
        self.chunk_index = 0
        self.reference_tactile = None

    def __call__(self, history):
        obs = history[-1]
        if self.reference_tactile is None:
            self.reference_tactile = np.asarray(obs.tactile, dtype=np.float64)
        tactile = obs.tactile
        if self.variant in ("vision_only", "late_fusion"):
            tactile = self.mean_tactile
        frames = np.stack([obs.view1, obs.view2, tactile])
        tokens = encode(frames, self.codec_params, self.cfg.codec)
        tokens = (tokens - self.mean.reshape(1, 1, -1)) / self.std.reshape(1, 1, -1)
        cond_latents = tokens[None, :, None, :, :].astype(np.float32)

        raw_force = None
        if self.variant == "late_fusion":
            flow = optical_flow(self.reference_tactile, np.asarray(obs.tactile, np.float64))
            raw_force = virtual_force(flow).as_array()
        c = build_condition(obs.state_vec, self.stats, self.cfg.expert,
                            raw_force=raw_force)[None]

        seed = (self.base_seed * 1_000_003 + self.trial_seed * 101 + self.chunk_index) % (2**31)
        self.chunk_index += 1
        z_act, _ = joint_sample(cond_latents, c, self.backbone_params,
                                self.expert_params, self.cfg.backbone, self.cfg.expert,
                                steps=self.cfg.expert.sample_steps, seed=seed)
        a_n = z_act[0, :, :self.cfg.expert.d_action]
        return denormalize(a_n, self.stats["action"])


# ---------------------------------------------------------------------------
# diagnostics and reports


def collapse_metrics(cfg: RunConfig, backbone_params, expert_params, cache,
                     targets, conditions, episode_idx, variant="full", seed=123,
                     batch=8):
    """(tactile_grad_ratio, tactile_attention_mass) on a held-out batch."""
    rng = np.random.default_rng(seed)
    bcfg, ecfg = cfg.backbone, cfg.expert
    C = bcfg.cond_frames
    T0 = targets.shape[1]
    eps_i = episode_idx[rng.integers(0, len(episode_idx), size=batch)]
    t0s = rng.integers(0, T0, size=batch)
    frame_idx = t0s[:, None] + bcfg.frame_stride * np.arange(bcfg.chunk_frames)[None, :]
    chunk = np.swapaxes(np.stack([cache[e][fi] for e, fi in zip(eps_i, frame_idx)]), 1, 2)
    z0 = np.stack([targets[e, t0] for e, t0 in zip(eps_i, t0s)])
    cond_vec = np.stack([conditions[e, t0] for e, t0 in zip(eps_i, t0s)])

    t = 1.0 - rng.uniform(0.0, 1.0, size=batch)
    fs = make_flow_sample(z0, rng.standard_normal(z0.shape), t)
    eps_vid = rng.standard_normal(chunk[:, :, C:].shape)
    t_bc = t.reshape(-1, 1, 1, 1, 1)
    vid_zt = (1.0 - t_bc) * chunk[:, :, C:] + t_bc * eps_vid
    full = np.concatenate([chunk[:, :, :C], vid_zt], axis=2).astype(np.float32)

    frozen = {k: ad.tensor(p.data) for k, p in backbone_params.items()}
    latents_in = ad.tensor(full, requires_grad=True)
    t_frames = np.concatenate([np.zeros((batch, C)),
                               np.tile(t[:, None], (1, bcfg.future_frames))], axis=1)
    _, hiddens = backbone_forward(latents_in, t_frames, frozen, bcfg)
    probs = []
    lambda2 = 0.0 if variant == "no_force_reg" else ecfg.lambda_force
    pred = expert_forward(fs.z_t, t, cond_vec, hiddens, expert_params, ecfg,
                          probs_sink=probs)
    total, _, _, _ = stage2_loss(pred, fs.v_star, ecfg, lambda2=lambda2)
    ad.backward(total)
    ratio = tactile_grad_ratio_from_grad(
        latents_in.grad if latents_in.grad is not None else np.zeros_like(full))

    # cross-attention mass on tactile positions (token layout is view-major)
    per_view = bcfg.chunk_frames * bcfg.patches
    lo, hi = TACTILE_VIEW * per_view, (TACTILE_VIEW + 1) * per_view
    masses = [p[..., lo:hi].sum(axis=-1).mean() for p in probs]
    return float(ratio), float(np.mean(masses))


@dataclass
class AblationReport:
    variants: dict
    seeds: tuple
    n_trials: int

    def to_json(self):
        return json.dumps({"seeds": list(self.seeds), "n_trials": self.n_trials,
                           "variants": self.variants}, indent=1)


def evaluate_policy(cfg: RunConfig, policy: LearnedPolicy, n_trials, seed,
                    out_dir=None, strip_every=10, config_hash=""):
    """Closed-loop trials; optionally writes per-trial view strips."""
    logs = []
    succ = brk = slp = 0
    for trial in range(n_trials):
        trial_seed = seed * 7919 + trial
        policy.reset(trial_seed)
        rep = rollout_policy(policy, 1, trial_seed, cfg.env,
                             chunk_len=cfg.expert.chunk_len,
                             frame_recorder=strip_every if out_dir else None)
        t = rep.trials[0]
        succ += t.success
        brk += t.broken
        slp += t.slipped
        logs.append((trial, t.seed, int(t.success), int(t.broken), int(t.slipped),
                     float(t.final_object_dist), t.diagnostic))
        if out_dir is not None and hasattr(t, "frames") and t.frames:
            strip = tile_grid([list(t.frames)])
            write_pgm(Path(out_dir) / f"trial_{trial:03d}_strip.pgm", strip,
                      comment=f"config_hash={config_hash}")
    report = {
        "n_trials": n_trials,
        "success_rate": succ / n_trials,
        "break_rate": brk / n_trials,
        "slip_rate": slp / n_trials,
    }
    if out_dir is not None:
        _write_csv(Path(out_dir) / "trials.csv",
                   ("trial", "seed", "success", "broken", "slipped",
                    "final_object_dist", "diagnostic"), logs, config_hash)
    return report, logs


def run_pipeline(cfg: RunConfig, run_dir, variants=None, log=print):
    """Data -> codec -> stage1 (full + vision-only trunk) -> stage2 variants.

    Returns a dict with params, caches and arrays for downstream use.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    variants = list(variants or cfg.ablate.variants)

    episodes, manifest, aux = stage_data(cfg, run_dir, log=log)
    labels = aux["force_labels"]
    mean_tactile = aux["mean_tactile"]
    stats = manifest["normalization"]
    for key in ("action", "state", "force"):
        stats[key] = {"mean": np.asarray(stats[key]["mean"]),
                      "std": np.asarray(stats[key]["std"])}

    codec_params, lstats = stage_codec(cfg, run_dir, episodes, log=log)
    cache_full = build_latent_cache(cfg, episodes, codec_params, lstats)
    cache_meantac = build_latent_cache(cfg, episodes, codec_params, lstats,
                                       mean_tactile=mean_tactile)

    backbone_full = stage_stage1(cfg, run_dir, cache_full, name="stage1", log=log)
    backbone_vision = None
    if "vision_only" in variants:
        backbone_vision = stage_stage1(cfg, run_dir, cache_meantac,
                                       name="stage1_vision_only", log=log)

    experts = {}
    for variant in variants:
        if variant == "vision_only":
            bb, cache = backbone_vision, cache_meantac
        elif variant == "late_fusion":
            bb, cache = backbone_full, cache_meantac
        else:
            bb, cache = backbone_full, cache_full
        experts[variant] = stage_stage2(cfg, run_dir, variant, bb, cache,
                                        episodes, labels, stats, log=log)

    return {
        "config_hash": h,
        "episodes": episodes,
        "manifest": manifest,
        "labels": labels,
        "mean_tactile": mean_tactile,
        "stats": stats,
        "codec": codec_params,
        "lstats": lstats,
        "cache_full": cache_full,
        "cache_meantac": cache_meantac,
        "backbone_full": backbone_full,
        "backbone_vision": backbone_vision,
        "experts": experts,
    }


def _variant_parts(cfg, art, variant):
    if variant == "vision_only":
        return art["backbone_vision"], art["cache_meantac"]
    if variant == "late_fusion":
        return art["backbone_full"], art["cache_meantac"]
    return art["backbone_full"], art["cache_full"]


def make_policy(cfg: RunConfig, art, variant, base_seed=0):
    bb, _ = _variant_parts(cfg, art, variant)
    return LearnedPolicy(cfg, art["codec"], art["lstats"], bb,
                         art["experts"][variant], art["stats"], variant=variant,
                         mean_tactile=art["mean_tactile"], base_seed=base_seed)


def ablate(cfg: RunConfig, run_dir, art, variants=None, seeds=None, n_trials=None,
           log=print):
    """Closed-loop comparison of the trained variants plus collapse metrics."""
    variants = list(variants or cfg.ablate.variants)
    seeds = list(seeds if seeds is not None else cfg.ablate.seeds)
    n_trials = int(n_trials or cfg.ablate.n_trials)
    if n_trials < 1:
        raise ValueError("ablate: n_trials must be >= 1")
    run_dir = Path(run_dir)
    h = art["config_hash"]
    held = episode_split(cfg, len(art["episodes"]))[1]

    threads = int(os.environ.get("VTAM_THREADS", "1"))
    results = {}
    rows = []
    for variant in variants:
        bb, cache = _variant_parts(cfg, art, variant)
        targets, conditions = build_stage2_arrays(cfg, art["episodes"], art["labels"],
                                                  art["stats"], variant)
        ratio, mass = collapse_metrics(cfg, bb, art["experts"][variant], cache,
                                       targets, conditions, held, variant=variant)

        def run_seed(s):
            policy = make_policy(cfg, art, variant, base_seed=s)
            report, _ = evaluate_policy(cfg, policy, n_trials, s)
            return report

        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=threads) as pool:
                reports = list(pool.map(run_seed, seeds))
        else:
            reports = [run_seed(s) for s in seeds]
        success = float(np.mean([r["success_rate"] for r in reports]))
        breaks = float(np.mean([r["break_rate"] for r in reports]))
        slips = float(np.mean([r["slip_rate"] for r in reports]))
        results[variant] = {
            "success_rate": success, "break_rate": breaks, "slip_rate": slips,
            "per_seed_success": [r["success_rate"] for r in reports],
            "n_trials": n_trials, "seeds": seeds,
            "tactile_grad_ratio": ratio, "tactile_attention_mass": mass,
        }
        rows.append((variant, success, breaks, slips, n_trials,
                     ";".join(map(str, seeds)), ratio, mass))
        log(f"[ablate] {variant}: success {success:.2%} (break {breaks:.2%} "
            f"slip {slips:.2%}) grad_ratio {ratio:.3f} attn_mass {mass:.3f}")

    report = AblationReport(variants=results, seeds=tuple(seeds), n_trials=n_trials)
    (run_dir / "ablation_report.json").write_text(report.to_json())
    _write_csv(run_dir / "ablation_report.csv",
               ("variant", "success_rate", "break_rate", "slip_rate", "n_trials",
                "seeds", "tactile_grad_ratio", "tactile_attention_mass"),
               rows, h)
    return report


def predict_visualize(cfg: RunConfig, run_dir, art, episode_index=None, t0=18,
                      steps=None, seed=55, log=print):
    """Side-by-side ground-truth vs sampled future frames per view."""
    run_dir = Path(run_dir)
    out_dir = run_dir / "predict"
    out_dir.mkdir(exist_ok=True)
    h = art["config_hash"]
    bcfg = cfg.backbone
    train_idx, held_idx = episode_split(cfg, len(art["episodes"]))
    if episode_index is None:
        episode_index = int(held_idx[0])
    steps = steps or cfg.expert.sample_steps

    cache = art["cache_full"]
    cond = cache[episode_index, t0][None, :, None, :, :]
    pred = predict_future_latents(cond, art["backbone_full"], bcfg, steps, seed)

    mean, std = art["lstats"]
    ep = art["episodes"][episode_index]
    frames_by_view = (ep.view1, ep.view2, ep.tactile)
    future_idx = t0 + bcfg.frame_stride * np.arange(1, bcfg.chunk_frames)
    names = ("view1", "view2", "tactile")
    mses, base_mses = [], []
    mean_frames = [np.mean([art["episodes"][i].view1 for i in train_idx], axis=(0, 1)),
                   np.mean([art["episodes"][i].view2 for i in train_idx], axis=(0, 1)),
                   np.mean([art["episodes"][i].tactile for i in train_idx], axis=(0, 1))]
    for v, name in enumerate(names):
        tokens = pred[0, v] * std.reshape(1, 1, -1) + mean.reshape(1, 1, -1)
        decoded = decode(tokens, art["codec"], cfg.codec)
        gt = frames_by_view[v][future_idx]
        grid = tile_grid([list(gt), list(decoded)])
        write_pgm(out_dir / f"{name}.pgm", grid, comment=f"config_hash={h}")
        mses.append(float(np.mean((decoded - gt) ** 2)))
        base_mses.append(float(np.mean((mean_frames[v][None] - gt) ** 2)))
    log(f"[predict] mse {np.mean(mses):.5f} vs mean-frame {np.mean(base_mses):.5f}")
    return {"mse": mses, "mean_frame_mse": base_mses, "episode": episode_index}


def verify_run(run_dir, cfg: RunConfig = None, log=print):
    """Recompute the config hash and check every artifact that embeds one."""
    run_dir = Path(run_dir)
    if cfg is None:
        from .config import load_config
        cfg = load_config(run_dir / "config.toml")
    h = cfg.config_hash()
    problems = []
    for path in sorted(run_dir.rglob("*")):
        if path.suffix == ".ckpt":
            tag = _ckpt_hash(path)
            if tag != h:
                problems.append(f"{path.name}: hash {tag} != {h}")
        elif path.suffix == ".csv":
            meta, _, _ = read_csv(path)
            if meta.get("config_hash") != h:
                problems.append(f"{path.name}: hash {meta.get('config_hash')} != {h}")
        elif path.suffix == ".pgm":
            from .pgm import read_pgm
            _, comments = read_pgm(path)
            tags = [c.split("=", 1)[1] for c in comments if c.startswith("config_hash=")]
            if not tags or tags[0] != h:
                problems.append(f"{path.name}: missing or stale hash")
        elif path.name == "manifest.json":
            manifest = json.loads(path.read_text())
            if manifest.get("config_hash") != h:
                problems.append(f"{path.name}: hash {manifest.get('config_hash')} != {h}")
    for p in problems:
        log(f"[verify] MISMATCH {p}")
    if not problems:
        log(f"[verify] all artifacts match config hash {h}")
    return problems
