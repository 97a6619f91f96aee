"""Virtual force proxy from tactile frames.

Dense pyramidal Lucas-Kanade flow against a no-contact reference frame,
then the spatial mean of the flow (tangential shear) and of its divergence
(normal compression proxy). The proxy is geometric: flow units, not
Newtons, and it is linear in the underlying deformation field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter


@dataclass
class FlowParams:
    window: int = 5
    levels: int = 3
    iterations: int = 3
    min_eig: float = 1e-6
    max_step: float = 1.0      # per-iteration update clamp
    update_frac: float = 0.02  # movable pixels: min_eig within this fraction of the level max
    smooth_sigma: float = 1.5  # confidence-weighted flow diffusion per iteration


@dataclass
class FlowField:
    u_x: np.ndarray
    u_y: np.ndarray
    valid_mask: np.ndarray


@dataclass
class VirtualForce:
    f_x: float
    f_y: float
    f_z: float

    def as_array(self):
        return np.array([self.f_x, self.f_y, self.f_z])


def _downsample(img):
    # anti-alias before decimating: sparse marker dots fold into false
    # low frequencies otherwise and the coarse levels become untrackable
    blurred = gaussian_filter(img, 1.0, mode="nearest")
    return blurred[::2, ::2]


def _bilinear_sample(img, xs, ys):
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


def _lk_level(ref, cur, u, v, params: FlowParams):
    h, w = ref.shape
    gy, gx = np.gradient(ref)
    size = params.window
    sxx = uniform_filter(gx * gx, size, mode="nearest")
    sxy = uniform_filter(gx * gy, size, mode="nearest")
    syy = uniform_filter(gy * gy, size, mode="nearest")
    trace = sxx + syy
    det = sxx * syy - sxy * sxy
    min_eig = 0.5 * (trace - np.sqrt(np.maximum(trace * trace - 4.0 * det, 0.0)))
    # weakly conditioned pixels keep the flow they inherited and follow
    # their neighbours through the diffusion step; letting them solve
    # anyway seeds the next pyramid level with confident garbage. The gate
    # is relative to the level's own structure scale because anti-alias
    # blur shrinks gradients at every level.
    movable = min_eig >= max(params.min_eig, params.update_frac * float(min_eig.max()))
    step = params.max_step
    safe_det = np.where(np.abs(det) > 1e-30, det, 1.0)

    conf = np.where(movable, min_eig, 0.0)
    norm = gaussian_filter(conf, params.smooth_sigma, mode="nearest")
    ok = norm > 1e-12

    def diffuse(field):
        # confidence-weighted smoothing: weak pixels follow well-tracked
        # neighbours, and the field stays coherent inside each window
        s = gaussian_filter(conf * field, params.smooth_sigma, mode="nearest")
        return np.where(ok, s / np.where(ok, norm, 1.0), field)

    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    for _ in range(params.iterations):
        warped = _bilinear_sample(cur, xx + u, yy + v)
        err = warped - ref
        # symmetric gradients: averaging template and warped-image gradients
        # keeps the linearization honest as the warp converges
        wgy, wgx = np.gradient(warped)
        agx = 0.5 * (gx + wgx)
        agy = 0.5 * (gy + wgy)
        axx = uniform_filter(agx * agx, size, mode="nearest")
        axy = uniform_filter(agx * agy, size, mode="nearest")
        ayy = uniform_filter(agy * agy, size, mode="nearest")
        adet = axx * ayy - axy * axy
        safe_adet = np.where(np.abs(adet) > 1e-30, adet, 1.0)
        bx = uniform_filter(agx * err, size, mode="nearest")
        by = uniform_filter(agy * err, size, mode="nearest")
        du = -(ayy * bx - axy * by) / safe_adet
        dv = -(axx * by - axy * bx) / safe_adet
        du = np.clip(np.where(movable, du, 0.0), -step, step)
        dv = np.clip(np.where(movable, dv, 0.0), -step, step)
        u = diffuse(u + du)
        v = diffuse(v + dv)
    return u, v


def structure_min_eig(img, window):
    """Smaller eigenvalue of the windowed structure tensor, per pixel."""
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64))
    sxx = uniform_filter(gx * gx, window, mode="nearest")
    sxy = uniform_filter(gx * gy, window, mode="nearest")
    syy = uniform_filter(gy * gy, window, mode="nearest")
    trace = sxx + syy
    det = sxx * syy - sxy * sxy
    return 0.5 * (trace - np.sqrt(np.maximum(trace * trace - 4.0 * det, 0.0)))


def optical_flow(reference, current, params: FlowParams = None) -> FlowField:
    """Dense flow from `reference` to `current` (content moves by +u)."""
    params = params or FlowParams()
    ref = np.asarray(reference, dtype=np.float64)
    cur = np.asarray(current, dtype=np.float64)
    if ref.shape != cur.shape:
        raise ValueError(f"optical_flow: frame shapes differ {ref.shape} vs {cur.shape}")

    ref_pyr, cur_pyr = [ref], [cur]
    for _ in range(params.levels - 1):
        ref_pyr.append(_downsample(ref_pyr[-1]))
        cur_pyr.append(_downsample(cur_pyr[-1]))

    u = np.zeros_like(ref_pyr[-1])
    v = np.zeros_like(ref_pyr[-1])
    for level in reversed(range(params.levels)):
        if level < params.levels - 1:
            u = 2.0 * np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
            v = 2.0 * np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)
            u = u[:ref_pyr[level].shape[0], :ref_pyr[level].shape[1]]
            v = v[:ref_pyr[level].shape[0], :ref_pyr[level].shape[1]]
        u, v = _lk_level(ref_pyr[level], cur_pyr[level], u, v, params)
    # validity comes from the raw reference: between markers the structure
    # tensor is rank-deficient and flow there is extrapolation, not signal
    valid = structure_min_eig(ref, params.window) >= params.min_eig
    return FlowField(u_x=u, u_y=v, valid_mask=valid)


def divergence(flow: FlowField) -> np.ndarray:
    """Central differences inside, one-sided at the borders."""
    return np.gradient(flow.u_x, axis=1) + np.gradient(flow.u_y, axis=0)


def virtual_force(flow: FlowField) -> VirtualForce:
    """Masked spatial means: shear from the flow, compression from its divergence."""
    valid = flow.valid_mask
    if not np.any(valid):
        raise ValueError("no trackable deformation")
    div = divergence(flow)
    # divergence at a pixel mixes its neighbours; require those to be valid
    # too, and skip the border ring where differences are one-sided
    div_valid = valid.copy()
    div_valid[1:-1, :] &= valid[2:, :] & valid[:-2, :]
    div_valid[:, 1:-1] &= valid[:, 2:] & valid[:, :-2]
    h, w = valid.shape
    if h > 8 and w > 8:
        border = np.zeros_like(valid)
        border[3:-3, 3:-3] = True
        if np.any(div_valid & border):
            div_valid &= border
    if not np.any(div_valid):
        div_valid = valid
    return VirtualForce(
        f_x=float(flow.u_x[valid].mean()),
        f_y=float(flow.u_y[valid].mean()),
        f_z=float(div[div_valid].mean()),
    )


def force_labels(tactile_frames, params: FlowParams = None) -> np.ndarray:
    """Per-frame virtual force against frame 0 (which must be contact-free).

    Returns raw [T, 3]; z-score normalization against dataset statistics
    happens where the labels enter a denoising target.
    """
    frames = np.asarray(tactile_frames)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError(f"force_labels: need [T, H, W] frames, got {frames.shape}")
    ref = frames[0]
    out = np.zeros((frames.shape[0], 3))
    for t in range(frames.shape[0]):
        flow = optical_flow(ref, frames[t], params)
        out[t] = virtual_force(flow).as_array()
    return out


def draw_force_overlay(frame, force: VirtualForce, gain=4.0):
    """Burn a center-anchored arrow for (f_x, f_y) into a copy of `frame`."""
    img = np.asarray(frame, dtype=np.float64).copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dx, dy = force.f_x * gain, force.f_y * gain
    steps = max(2, int(4 * max(abs(dx), abs(dy))) + 2)
    for i in range(steps + 1):
        x = int(round(cx + dx * i / steps))
        y = int(round(cy + dy * i / steps))
        if 0 <= y < h and 0 <= x < w:
            img[y, x] = 1.0
    tip_x, tip_y = int(round(cx + dx)), int(round(cy + dy))
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            y, x = tip_y + oy, tip_x + ox
            if 0 <= y < h and 0 <= x < w:
                img[y, x] = 1.0
    return np.clip(img, 0.0, 1.0)
