"""Deterministic synthetic visuo-tactile grasp environment.

A gripper must pick a fragile object and place it on a target pad without
crushing (force > F_high breaks it) or under-gripping (force < F_low while
airborne drops it). Per-episode object stiffness, contact width, and tactile
sensor gain are hidden; the cameras render the gripper occluding the object
during the grasp, so grip force is observable only through the tactile
marker image. The scripted expert reads the hidden state, which is exactly
what a learned policy has to recover from touch.

Conventions: arena positions in [0,1], heights in [0, 0.55], one action is
(dx, dy, dheight, gripper width target), one tick is nominally 0.1 s.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import EPISODE_MAGIC, load_tensors, save_tensors

PHASES = ("approach", "grasp", "lift", "place", "done")


@dataclass
class EnvConfig:
    frame_size: int = 32
    episode_len: int = 72
    # task geometry
    ee_start: tuple = (0.5, 0.9, 0.5)
    width_start: float = 0.8
    object_xy_low: float = 0.18
    object_xy_high: float = 0.55
    target_xy: tuple = (0.8, 0.8)
    target_radius: float = 0.10
    grab_tol: float = 0.07
    grasp_height: float = 0.05
    contact_max_h: float = 0.09
    lift_height: float = 0.35
    place_height: float = 0.06
    retreat_height: float = 0.30
    safe_drop_height: float = 0.12
    release_width: float = 0.6
    # actuation limits
    max_step_xy: float = 0.12
    max_step_h: float = 0.10
    width_rate: float = 0.10
    max_height: float = 0.55
    # contact model; force thresholds are in abstract units
    force_low: float = 0.35
    force_high: float = 0.70
    force_lag: float = 0.6
    stiffness_low: float = 1.0
    stiffness_high: float = 10.0
    pre_squeeze_width: float = 0.45
    pen0_low: float = 0.02
    pen0_high: float = 0.055
    sensor_gain_low: float = 0.7
    sensor_gain_high: float = 1.3
    expert_hold_force: float = 0.5
    # phase schedule (steps); squeeze_start is a policy chunk boundary
    approach_end: int = 12
    squeeze_start: int = 24
    lift_start: int = 34
    place_start: int = 39
    done_start: int = 57
    # tactile rendering
    marker_grid: int = 8
    marker_spacing: float = 3.714
    marker_origin: float = 3.0
    radial_gain: float = 0.10
    bump_radius0: float = 4.0
    bump_radius_rate: float = 200.0
    bump_amp_rate: float = 14.0   # amplitude grows with penetration ...
    bump_amp_cap: float = 0.9     # ... up to this many pixels (pre-gain)
    shear_weight: float = 0.7
    shear_drag: float = 4.0
    # expert action noise (std per action dim)
    expert_noise: tuple = (0.005, 0.005, 0.005, 0.004)
    state_dim: int = 16
    action_dim: int = 4


@dataclass
class WorldState:
    ee: np.ndarray                  # (x, y, h)
    width: float
    grasp_force: float
    obj: np.ndarray                 # (x, y, h)
    contact: bool = False
    attached: bool = False
    broken: bool = False
    slipped: bool = False
    phase: str = "approach"
    step_index: int = 0
    clamped: bool = False
    ee_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_action: np.ndarray = field(default_factory=lambda: np.zeros(4))
    # hidden per-episode parameters
    stiffness: float = 4.0
    contact_width: float = 0.49
    sensor_gain: float = 1.0

    def copy(self):
        return replace(self, ee=self.ee.copy(), obj=self.obj.copy(),
                       ee_vel=self.ee_vel.copy(), prev_action=self.prev_action.copy())

    @property
    def terminal(self):
        return self.broken or self.slipped or self.phase == "done"


@dataclass
class Observation:
    view1: np.ndarray
    view2: np.ndarray
    tactile: np.ndarray
    state_vec: np.ndarray


@dataclass
class Episode:
    view1: np.ndarray               # [T, H, W]
    view2: np.ndarray
    tactile: np.ndarray
    state: np.ndarray               # [T, d_s]
    action: np.ndarray              # [T, d_a]
    success: bool
    seed: int
    hidden_states: list = None      # WorldState per step; oracle/metrics only

    @property
    def length(self):
        return self.view1.shape[0]


def init_state(cfg: EnvConfig, rng: np.random.Generator) -> WorldState:
    """Sample a fresh episode: object pose and hidden contact parameters."""
    obj_xy = rng.uniform(cfg.object_xy_low, cfg.object_xy_high, size=2)
    log_k = rng.uniform(math.log(cfg.stiffness_low), math.log(cfg.stiffness_high))
    pen0 = rng.uniform(cfg.pen0_low, cfg.pen0_high)
    gain = rng.uniform(cfg.sensor_gain_low, cfg.sensor_gain_high)
    return WorldState(
        ee=np.array([cfg.ee_start[0], cfg.ee_start[1], cfg.ee_start[2]]),
        width=cfg.width_start,
        grasp_force=0.0,
        obj=np.array([obj_xy[0], obj_xy[1], 0.0]),
        stiffness=math.exp(log_k),
        contact_width=cfg.pre_squeeze_width + pen0,
        sensor_gain=gain,
    )


def phase_for_step(cfg: EnvConfig, step_index: int) -> str:
    if step_index < cfg.approach_end:
        return "approach"
    if step_index < cfg.lift_start:
        return "grasp"
    if step_index < cfg.place_start:
        return "lift"
    if step_index < cfg.done_start:
        return "place"
    return "done"


def step(state: WorldState, action, cfg: EnvConfig):
    """Advance one tick. Invalid actions are clamped, never rejected."""
    s = state.copy()
    a = np.asarray(action, dtype=np.float64).reshape(cfg.action_dim)
    a = np.nan_to_num(a, nan=0.0, posinf=0.0, neginf=0.0)

    dxy = np.clip(a[:2], -cfg.max_step_xy, cfg.max_step_xy)
    dh = float(np.clip(a[2], -cfg.max_step_h, cfg.max_step_h))
    width_target = float(np.clip(a[3], 0.0, 1.0))
    s.clamped = bool(np.any(dxy != a[:2]) or dh != a[2] or width_target != a[3])

    prev_ee = s.ee.copy()
    s.ee[0] = float(np.clip(s.ee[0] + dxy[0], 0.0, 1.0))
    s.ee[1] = float(np.clip(s.ee[1] + dxy[1], 0.0, 1.0))
    s.ee[2] = float(np.clip(s.ee[2] + dh, 0.0, cfg.max_height))
    s.ee_vel = s.ee - prev_ee
    dw = float(np.clip(width_target - s.width, -cfg.width_rate, cfg.width_rate))
    s.width = float(np.clip(s.width + dw, 0.0, 1.0))

    failed = s.broken or s.slipped
    rising = s.ee_vel[2] > 1e-9

    if s.attached and not failed:
        if s.width >= s.contact_width:
            # grip opened: object falls straight down from its current height
            drop_h = s.obj[2]
            s.attached = False
            s.contact = False
            s.grasp_force = 0.0
            s.obj[2] = 0.0
            if drop_h > cfg.safe_drop_height:
                s.slipped = True
        else:
            target = s.stiffness * max(0.0, s.contact_width - s.width)
            s.grasp_force += cfg.force_lag * (target - s.grasp_force)
            s.contact = True
            if s.grasp_force > cfg.force_high:
                s.broken = True
                s.attached = False
                s.contact = False
                s.obj[2] = 0.0
                s.grasp_force = 0.0
            elif s.grasp_force < cfg.force_low:
                drop_h = s.obj[2]
                s.attached = False
                s.contact = False
                s.grasp_force = 0.0
                s.obj[2] = 0.0
                if drop_h > cfg.safe_drop_height:
                    s.slipped = True
            else:
                s.obj[0], s.obj[1] = s.ee[0], s.ee[1]
                s.obj[2] = max(0.0, s.ee[2] - cfg.grasp_height)
    elif not failed:
        was_contact = s.contact
        near = (np.hypot(s.ee[0] - s.obj[0], s.ee[1] - s.obj[1]) <= cfg.grab_tol
                and s.ee[2] <= cfg.contact_max_h)
        s.contact = bool(near and s.width < s.contact_width)
        if s.contact:
            target = s.stiffness * max(0.0, s.contact_width - s.width)
            s.grasp_force += cfg.force_lag * (target - s.grasp_force)
            if s.grasp_force > cfg.force_high:
                s.broken = True
                s.contact = False
                s.grasp_force = 0.0
            elif s.grasp_force >= cfg.force_low:
                s.attached = True
                s.obj[0], s.obj[1] = s.ee[0], s.ee[1]
                s.obj[2] = max(0.0, s.ee[2] - cfg.grasp_height)
        else:
            # an under-gripped object left behind by a rising gripper is a
            # slip; losing contact because the gripper opened is a release
            if (was_contact and rising and s.ee[2] > cfg.contact_max_h
                    and s.width < s.contact_width):
                s.slipped = True
            s.grasp_force = 0.0
    else:
        s.contact = False
        s.attached = False
        s.grasp_force = 0.0

    s.prev_action = a.copy()
    s.step_index += 1
    s.phase = phase_for_step(cfg, s.step_index)
    return s, observe(s, cfg)


# ---------------------------------------------------------------------------
# rendering


def _disk(canvas, cx, cy, r, val):
    h, w = canvas.shape
    yy, xx = np.ogrid[:h, :w]
    canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = val


def _square(canvas, cx, cy, half, val):
    h, w = canvas.shape
    x0, x1 = int(round(cx - half)), int(round(cx + half))
    y0, y1 = int(round(cy - half)), int(round(cy + half))
    canvas[max(0, y0):min(h, y1 + 1), max(0, x0):min(w, x1 + 1)] = val


def render_view1(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Top-down camera. Reads poses only; grip force must never leak here."""
    n = cfg.frame_size
    c = np.full((n, n), 0.04)
    sc = n - 1
    _disk(c, cfg.target_xy[0] * sc, cfg.target_xy[1] * sc, 3.5, 0.22)
    _disk(c, state.obj[0] * sc, state.obj[1] * sc, 2.5, 0.95)
    # gripper drawn last: it occludes the object whenever it is overhead
    _square(c, state.ee[0] * sc, state.ee[1] * sc, 3, 0.60)
    return c.astype(np.float32)


def render_view2(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Side camera, x vs height."""
    n = cfg.frame_size
    c = np.full((n, n), 0.04)
    sc = n - 1
    hmax = 0.6

    def py(h):
        return (1.0 - h / hmax) * sc

    c[n - 2:, :] = 0.25
    tx = int(round(cfg.target_xy[0] * sc))
    c[n - 3:, max(0, tx - 2):tx + 3] = 0.35
    _disk(c, state.obj[0] * sc, py(state.obj[2] + 0.02), 2.0, 0.95)
    _square(c, state.ee[0] * sc, py(state.ee[2]), 2, 0.60)
    return c.astype(np.float32)


def marker_rest_positions(cfg: EnvConfig) -> np.ndarray:
    """8x8 dot lattice with a fixed per-marker jitter.

    A perfectly periodic grid is ambiguous to window-based tracking at
    half-spacing displacements (every dot has an equally good match one
    neighbour over); the jitter makes each neighbourhood unique, like the
    placement irregularities of a real sensor's marker array.
    """
    g = cfg.marker_grid
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    jx = (((5 * ii + 7 * jj) % 9) / 8.0 - 0.5) * 1.8
    jy = (((3 * ii + 11 * jj) % 7) / 6.0 - 0.5) * 1.8
    xs = cfg.marker_origin + cfg.marker_spacing * jj + jx
    ys = cfg.marker_origin + cfg.marker_spacing * ii + jy
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def marker_intensities(cfg: EnvConfig) -> np.ndarray:
    """Fixed per-marker brightness. A uniform grid of identical dots is
    ambiguous under half-spacing translations; distinct dots keep the
    optical-flow problem well posed at every pyramid level."""
    g = cfg.marker_grid
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    ramp = (ii + jj) / (2.0 * (g - 1))
    weave = ((3 * ii + 5 * jj) % 4) / 3.0
    return (0.5 + 0.3 * ramp + 0.2 * weave).ravel()


def _deformation(px, py, state: WorldState, cfg: EnvConfig):
    """Marker displacement (pixels) at rest position (px, py).

    Global radial expansion scales with grip force, a compact bump marks
    the contact footprint (radius tracks penetration depth), and a uniform
    shear carries the tangential load while the object hangs in the grip.
    The per-episode sensor gain multiplies every displacement.
    """
    cx = cy = (cfg.frame_size - 1) / 2.0
    rx, ry = px - cx, py - cy
    gain = state.sensor_gain
    touching = state.contact or state.attached
    ux = np.zeros_like(np.asarray(px, dtype=np.float64))
    uy = np.zeros_like(ux)
    if not touching:
        return ux, uy

    alpha = cfg.radial_gain * gain * state.grasp_force
    ux += alpha * rx
    uy += alpha * ry

    pen = max(0.0, state.contact_width - state.width)
    if pen > 0.0:
        radius = cfg.bump_radius0 + cfg.bump_radius_rate * pen
        peak = gain * min(cfg.bump_amp_cap, cfg.bump_amp_rate * pen)
        r = np.hypot(rx, ry)
        rho = r / radius
        inside = rho < 1.0
        # keep max radial strain ~4*peak/radius < 1 so the warp never folds
        amp = np.where(inside, peak * 4.0 * rho * (1.0 - rho), 0.0)
        safe_r = np.where(r > 1e-9, r, 1.0)
        ux += amp * rx / safe_r
        uy += amp * ry / safe_r

    if state.attached and state.obj[2] > 0.0:
        ux += gain * (-cfg.shear_drag * state.ee_vel[0])
        uy += gain * (cfg.shear_weight - cfg.shear_drag * state.ee_vel[1])
    return ux, uy


def tactile_deformation_field(state: WorldState, cfg: EnvConfig):
    """Dense ground-truth displacement field, for flow-oracle tests."""
    n = cfg.frame_size
    yy, xx = np.mgrid[:n, :n].astype(np.float64)
    ux, uy = _deformation(xx, yy, state, cfg)
    return ux, uy


def _splat(canvas, px, py, mass):
    n = canvas.shape[0]
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    fx = px - x0
    fy = py - y0
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xs, ys = x0 + dx, y0 + dy
        ok = (xs >= 0) & (xs < n) & (ys >= 0) & (ys < n)
        np.add.at(canvas, (ys[ok], xs[ok]), (w * mass)[ok])


_GEL_TEXTURE = {}


def _gel_texture(cfg: EnvConfig):
    """Fixed smooth surface texture of the gel.

    The texture deforms with the markers and gives the flow estimator
    gradient signal between dots, like the micro-texture of a real gel.
    """
    key = cfg.frame_size
    if key not in _GEL_TEXTURE:
        n = cfg.frame_size
        rng = np.random.default_rng(1234509876)
        from scipy.ndimage import gaussian_filter as _gf
        tex = _gf(rng.standard_normal((n, n)), 1.5, mode="wrap")
        tex = (tex - tex.min()) / (tex.max() - tex.min())
        _GEL_TEXTURE[key] = 0.04 + 0.26 * tex
    return _GEL_TEXTURE[key]


def _source_points(state: WorldState, cfg: EnvConfig):
    """Undeformed coordinates q(p) with q + u(q) = p, per output pixel.

    Fixed-point iteration; converges because the rendered strains are kept
    below unity (the warp never folds).
    """
    n = cfg.frame_size
    yy, xx = np.mgrid[:n, :n].astype(np.float64)
    qx, qy = xx.copy(), yy.copy()
    for _ in range(8):
        ux, uy = _deformation(qx.ravel(), qy.ravel(), state, cfg)
        qx = xx - ux.reshape(n, n)
        qy = yy - uy.reshape(n, n)
    return qx, qy


def _sample_bilinear(img, xs, ys):
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def render_tactile(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Deformed gel texture plus bilinear-splatted marker dots.

    The texture is warped backward (albedo moves, brightness is conserved;
    a mass-conserving splat would dim expanded regions and break the
    brightness-constancy assumption the flow stage relies on).
    """
    tex = _gel_texture(cfg)
    touching = state.contact or state.attached
    if touching:
        qx, qy = _source_points(state, cfg)
        canvas = _sample_bilinear(tex, qx, qy)
    else:
        canvas = tex.copy()

    rest = marker_rest_positions(cfg)
    mass = marker_intensities(cfg)
    ux, uy = _deformation(rest[:, 0], rest[:, 1], state, cfg)
    _splat(canvas, rest[:, 0] + ux, rest[:, 1] + uy, mass)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def state_vector(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    vec = np.zeros(cfg.state_dim, dtype=np.float32)
    vec[0:3] = state.ee
    vec[3] = state.width
    vec[4:7] = state.ee_vel
    vec[7:11] = state.prev_action
    vec[11 + PHASES.index(state.phase)] = 1.0
    return vec


def observe(state: WorldState, cfg: EnvConfig) -> Observation:
    return Observation(
        view1=render_view1(state, cfg),
        view2=render_view2(state, cfg),
        tactile=render_tactile(state, cfg),
        state_vec=state_vector(state, cfg),
    )


# ---------------------------------------------------------------------------
# scripted expert


def scripted_expert(state: WorldState, cfg: EnvConfig, rng=None, open_loop=False):
    """Teleoperator stand-in driven by the true hidden state.

    Holds grip force at `expert_hold_force` by solving the hidden
    stiffness/contact-width pair directly. With `open_loop` the contact
    feedback is withheld and a population-average squeeze is used instead,
    which fails on stiff and soft outliers (a deliberate sanity hook).
    """
    a = np.zeros(4)
    if state.terminal or state.broken or state.slipped:
        return a
    t = state.step_index
    ee, obj = state.ee, state.obj
    # grip target recomputed from hidden params every step: echoing the
    # current width would let command noise random-walk the grip force
    if open_loop:
        mean_inv_k = ((1.0 / cfg.stiffness_low - 1.0 / cfg.stiffness_high)
                      / math.log(cfg.stiffness_high / cfg.stiffness_low))
        mean_wc = cfg.pre_squeeze_width + 0.5 * (cfg.pen0_low + cfg.pen0_high)
        w_hold = max(0.0, mean_wc - cfg.expert_hold_force * mean_inv_k)
    else:
        w_hold = max(0.0, state.contact_width - cfg.expert_hold_force / state.stiffness)
    a[3] = w_hold if state.attached else state.width

    if t < cfg.approach_end:
        a[0] = obj[0] - ee[0]
        a[1] = obj[1] - ee[1]
        a[2] = cfg.grasp_height - ee[2]
        a[3] = cfg.width_start
    elif t < cfg.squeeze_start:
        # keep station over the object so action noise cannot drift us off it
        a[0] = obj[0] - ee[0]
        a[1] = obj[1] - ee[1]
        a[2] = cfg.grasp_height - ee[2]
        a[3] = cfg.pre_squeeze_width
    elif t < cfg.lift_start:
        a[3] = w_hold
    elif t < cfg.place_start:
        a[2] = cfg.lift_height - ee[2]
    elif t < cfg.done_start:
        if state.attached:
            dx, dy = cfg.target_xy[0] - ee[0], cfg.target_xy[1] - ee[1]
            safe_open_h = cfg.grasp_height + cfg.safe_drop_height - 0.01
            if np.hypot(dx, dy) > 0.02:
                a[0], a[1] = dx, dy
            elif ee[2] > safe_open_h:
                a[2] = cfg.place_height - ee[2]
            else:
                # drop height is already safe here; open to release
                a[3] = cfg.width_start
        else:
            # released: retreat while opening, so proximity is broken
            # immediately and a closing gripper can never re-grasp
            a[2] = cfg.retreat_height - ee[2]
            a[3] = cfg.width_start
    else:
        return np.zeros(4)

    if rng is not None:
        a = a + rng.normal(0.0, cfg.expert_noise)
    return a


def run_episode(cfg: EnvConfig, seed: int, noise=True, open_loop=False,
                keep_hidden=True) -> Episode:
    """Roll the scripted expert for one full episode."""
    rng = np.random.default_rng(seed)
    state = init_state(cfg, rng)
    noise_rng = np.random.default_rng(seed + 1) if noise else None
    T, n = cfg.episode_len, cfg.frame_size
    views1 = np.zeros((T, n, n), dtype=np.float32)
    views2 = np.zeros((T, n, n), dtype=np.float32)
    tactiles = np.zeros((T, n, n), dtype=np.float32)
    states = np.zeros((T, cfg.state_dim), dtype=np.float32)
    actions = np.zeros((T, cfg.action_dim), dtype=np.float32)
    hidden = []

    obs = observe(state, cfg)
    for t in range(T):
        views1[t], views2[t], tactiles[t] = obs.view1, obs.view2, obs.tactile
        states[t] = obs.state_vec
        if keep_hidden:
            hidden.append(state.copy())
        a = scripted_expert(state, cfg, rng=noise_rng, open_loop=open_loop)
        actions[t] = a
        state, obs = step(state, a, cfg)

    return Episode(views1, views2, tactiles, states, actions,
                   success=episode_success(state, cfg), seed=seed,
                   hidden_states=hidden if keep_hidden else None)


def episode_success(state: WorldState, cfg: EnvConfig) -> bool:
    placed = (np.hypot(state.obj[0] - cfg.target_xy[0],
                       state.obj[1] - cfg.target_xy[1]) <= cfg.target_radius
              and state.obj[2] <= 1e-9)
    return bool(not state.broken and not state.slipped and placed
                and not state.attached)


# ---------------------------------------------------------------------------
# dataset


def episode_seed(dataset_seed: int, index: int) -> int:
    return dataset_seed * 100003 + index


def save_episode(path, ep: Episode):
    save_tensors(path, {
        "view1": ep.view1, "view2": ep.view2, "tactile": ep.tactile,
        "state": ep.state, "action": ep.action,
        "success": np.array([1.0 if ep.success else 0.0], dtype=np.float32),
    }, magic=EPISODE_MAGIC)


def load_episode(path, seed=-1) -> Episode:
    t = load_tensors(path, magic=EPISODE_MAGIC)
    return Episode(t["view1"], t["view2"], t["tactile"], t["state"], t["action"],
                   success=bool(t["success"][0] > 0.5), seed=seed)


def generate_dataset(n_episodes: int, seed: int, cfg: EnvConfig, out_dir,
                     config_hash="", force_label_fn=None):
    """Generate expert episodes, write them plus a stats manifest.

    Every episode must succeed; a failing expert is a bug worth crashing on.
    `force_label_fn(episode) -> [T, 3]` supplies the virtual-force labels
    whose normalization stats are stored alongside action/state stats.
    """
    if n_episodes < 1:
        raise ValueError("generate_dataset: n_episodes must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"generate_dataset: cannot create {out_dir}: {exc}") from exc

    episodes = []
    seeds = []
    for i in range(n_episodes):
        s = episode_seed(seed, i)
        ep = run_episode(cfg, s)
        if not ep.success:
            raise RuntimeError(f"scripted expert failed on episode seed {s}; "
                               "environment margins are broken")
        episodes.append(ep)
        seeds.append(s)
        save_episode(out_dir / f"episode_{i:03d}.bin", ep)

    actions = np.concatenate([e.action for e in episodes])
    states = np.concatenate([e.state for e in episodes])
    mean_tactile = np.mean([e.tactile for e in episodes], axis=(0, 1)).astype(np.float32)

    aux = {"mean_tactile": mean_tactile}
    force_stats = None
    if force_label_fn is not None:
        labels = np.stack([force_label_fn(e) for e in episodes]).astype(np.float32)
        aux["force_labels"] = labels
        flat = labels.reshape(-1, labels.shape[-1])
        force_stats = {"mean": flat.mean(axis=0).tolist(),
                       "std": np.maximum(flat.std(axis=0), 1e-6).tolist()}
    save_tensors(out_dir / "aux.bin", aux)

    manifest = {
        "n_episodes": n_episodes,
        "seed": seed,
        "seeds": seeds,
        "episode_len": cfg.episode_len,
        "frame_size": cfg.frame_size,
        "action_dim": cfg.action_dim,
        "state_dim": cfg.state_dim,
        "config_hash": config_hash,
        "all_success": True,
        "normalization": {
            "action": {"mean": actions.mean(axis=0).tolist(),
                       "std": np.maximum(actions.std(axis=0), 1e-6).tolist()},
            "state": {"mean": states.mean(axis=0).tolist(),
                      "std": np.maximum(states.std(axis=0), 1e-6).tolist()},
            "force": force_stats,
        },
        "files": [f"episode_{i:03d}.bin" for i in range(n_episodes)],
    }
    try:
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise OSError(f"generate_dataset: cannot write manifest in {out_dir}: {exc}") from exc
    return episodes, manifest


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    try:
        manifest = json.loads((data_dir / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"load_dataset: cannot read manifest in {data_dir}: {exc}") from exc
    episodes = [load_episode(data_dir / f, seed=s)
                for f, s in zip(manifest["files"], manifest["seeds"])]
    aux = load_tensors(data_dir / "aux.bin")
    return episodes, manifest, aux


def normalize(x, stats):
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(x, stats):
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    return np.asarray(x, dtype=np.float64) * std + mean


# ---------------------------------------------------------------------------
# closed-loop evaluation


@dataclass
class TrialLog:
    seed: int
    success: bool
    broken: bool
    slipped: bool
    final_object_dist: float
    diagnostic: str = ""


@dataclass
class SuccessReport:
    n_trials: int
    successes: int
    breaks: int
    slips: int
    trials: list

    @property
    def success_rate(self):
        return self.successes / self.n_trials

    @property
    def break_rate(self):
        return self.breaks / self.n_trials

    @property
    def slip_rate(self):
        return self.slips / self.n_trials


def _expert_chunk(state: WorldState, cfg: EnvConfig, chunk_len: int):
    """Unroll the expert on a shadow copy of the env to emit a full chunk."""
    shadow = state.copy()
    actions = []
    for _ in range(chunk_len):
        a = scripted_expert(shadow, cfg)
        actions.append(a)
        shadow, _ = step(shadow, a, cfg)
    return np.stack(actions)


def rollout_policy(policy_fn, n_trials: int, seed: int, cfg: EnvConfig,
                   chunk_len: int = 24, frame_recorder=None) -> SuccessReport:
    """Closed-loop rollouts at chunk granularity.

    `policy_fn(history) -> [chunk_len, d_a]` sees the Observation list up
    to the current step; pass the string "expert" to drive the scripted
    oracle through the same chunked interface. A NaN chunk fails the trial.
    """
    if n_trials < 1:
        raise ValueError("rollout_policy: n_trials must be >= 1")
    logs = []
    for trial in range(n_trials):
        trial_seed = seed * 7919 + trial
        rng = np.random.default_rng(trial_seed)
        state = init_state(cfg, rng)
        obs = observe(state, cfg)
        history = [obs]
        queue = []
        failed_diag = ""
        frames = []
        for t in range(cfg.episode_len):
            if not queue:
                if policy_fn == "expert":
                    chunk = _expert_chunk(state, cfg, chunk_len)
                else:
                    chunk = np.asarray(policy_fn(history), dtype=np.float64)
                if chunk.shape != (chunk_len, cfg.action_dim) or not np.all(np.isfinite(chunk)):
                    failed_diag = (f"policy returned invalid chunk at step {t}: "
                                   f"shape {chunk.shape}, finite={bool(np.all(np.isfinite(chunk)))}")
                    break
                queue = list(chunk)
            a = queue.pop(0)
            state, obs = step(state, a, cfg)
            history.append(obs)
            if frame_recorder is not None and t % frame_recorder == 0:
                frames.append(obs.view1)
        success = episode_success(state, cfg) and not failed_diag
        logs.append(TrialLog(
            seed=trial_seed,
            success=success,
            broken=state.broken,
            slipped=state.slipped,
            final_object_dist=float(np.hypot(state.obj[0] - cfg.target_xy[0],
                                             state.obj[1] - cfg.target_xy[1])),
            diagnostic=failed_diag,
        ))
        if frame_recorder is not None:
            logs[-1].frames = frames  # type: ignore[attr-defined]
    return SuccessReport(
        n_trials=n_trials,
        successes=sum(l.success for l in logs),
        breaks=sum(l.broken for l in logs),
        slips=sum(l.slipped for l in logs),
        trials=logs,
    )
