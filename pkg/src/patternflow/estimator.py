"""Incremental disparity estimation.

Frame 0 gets a coarse exhaustive ZNCC search. Every later frame reuses the
previous result: pattern flow moves it to the new frame (the flow of a
pixel *is* its disparity change), then a narrow ZNCC search against the
reference pattern estimates the residual and a confidence-weighted blend
with the warped prior gives the new map. Because every frame is matched
against the fixed pattern, errors do not accumulate through the recursion.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ._kernels import fuse_residual, pick_block_candidates, reduce_scores, warp_gather, zncc_band_search, zncc_scores_direct
from .flow import FlowMap, FlowParams, compute_pattern_flow
from .geometry import RigModel
from .maps import DisparityMap, Frame, as_array
from .pattern import Pattern
from .preprocess import LCN_EPS, LCN_WINDOW, box_mean, lcn

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_warp", "no_confidence")
_TILE = 32


@dataclass(frozen=True)
class RefineParams:
    patch: int = 9
    search_radius_px: float = 6.0
    init_step_px: float = 2.0
    zncc_floor: float = 0.5
    ratio_floor: float = 1.1
    fuse_weight: float = 0.5
    decay: float = 0.95  # confidence carried through a warp is multiplied by this
    agree_px: float = 0.25  # match/prior disagreement scale for the output confidence

    def __post_init__(self):
        if self.patch < 5 or self.patch % 2 == 0:
            raise ValueError("patch must be odd and >= 5")
        if not self.search_radius_px > 0:
            raise ValueError("search_radius_px must be > 0")
        if not self.init_step_px > 0:
            raise ValueError("init_step_px must be > 0")
        if not 0 < self.zncc_floor < 1:
            raise ValueError("zncc_floor must be in (0, 1)")
        if not self.ratio_floor > 1:
            raise ValueError("ratio_floor must be > 1")
        if not 0 <= self.fuse_weight <= 1:
            raise ValueError("fuse_weight must be in [0, 1]")
        if not 0 <= self.decay <= 1:
            raise ValueError("decay must be in [0, 1]")
        if not self.agree_px > 0:
            raise ValueError("agree_px must be > 0")

    @property
    def half(self) -> int:
        return self.patch // 2

    @property
    def radius(self) -> int:
        return int(np.ceil(self.search_radius_px))


# --- correlation setup ---------------------------------------------------------


class PatternIndex:
    """LCN-normalized pattern at full frame height with per-window mean/std, ready for ZNCC.

    ``blur`` > 0 low-passes the rows with a Gaussian of that sigma after LCN.
    """

    def __init__(self, p: Pattern, height: int, patch: int, blur: float = 0.0,
                 lcn_window=LCN_WINDOW, lcn_eps=LCN_EPS):
        half = patch // 2
        margin = half + lcn_window // 2 + 1
        rows = np.arange(-margin, height + margin) % p.period_rows
        ext = lcn(p.intensity[rows], lcn_window, lcn_eps)
        if blur > 0:
            ext = gaussian_filter1d(ext, blur, axis=1, mode="nearest")
        mean = box_mean(ext, patch)
        sq = box_mean(ext * ext, patch)
        core = slice(margin, margin + height)
        self.half = half
        self.padded = np.ascontiguousarray(ext[margin - half : margin + height + half])
        self.mean = np.ascontiguousarray(mean[core])
        self.std = np.ascontiguousarray(np.sqrt(np.maximum(sq - mean * mean, 0.0))[core])

    def arrays(self):
        return self.padded, self.mean, self.std


_index_cache: dict = {}


def pattern_index(p: Pattern, height: int, patch: int, blur: float = 0.0) -> PatternIndex:
    key = (id(p), height, patch, blur)
    hit = _index_cache.get(key)
    if hit is None or hit[0] is not p:
        hit = (p, PatternIndex(p, height, patch, blur))
        _index_cache[key] = hit
    return hit[1]


def frame_stats(frame_lcn: np.ndarray, patch: int, blur: float = 0.0):
    half = patch // 2
    img = np.ascontiguousarray(frame_lcn, dtype=np.float64)
    if blur > 0:
        img = gaussian_filter1d(img, blur, axis=1, mode="nearest")
    mean = box_mean(img, patch)
    sq = box_mean(img * img, patch)
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return np.pad(img, half, mode="edge"), mean, std


def zncc_scores(frame_lcn, p: Pattern, ys, xs, dlist, patch: int, blur: float = 0.0) -> np.ndarray:
    """Brute-force ZNCC scores, shape ``(len(ys), len(dlist))``; -2 where the pattern patch is cut off."""
    img = as_array(frame_lcn)
    fpad, fmean, fstd = frame_stats(img, patch, blur)
    idx = pattern_index(p, img.shape[0], patch, blur)
    return zncc_scores_direct(
        fpad, fmean, fstd, *idx.arrays(),
        np.asarray(ys, np.int64), np.asarray(xs, np.int64), np.asarray(dlist, np.int64), patch // 2,
    )


def _ratio_gate(peak, second, ratio_floor):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(second > 0, peak / second, np.inf)
    return np.clip((ratio - 1.0) / (ratio_floor - 1.0), 0.0, 1.0)


def _parabola_offset(left, peak, right):
    """Vertex of the parabola through (-1, left), (0, peak), (1, right), within +-0.5."""
    denom = left - 2.0 * peak + right
    have = (left > -2) & (right > -2) & (denom < 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(have, 0.5 * (left - right) / denom, 0.0)
    return np.clip(delta, -0.5, 0.5)


def _disparity_bounds(rig: RigModel) -> tuple[int, int]:
    return int(np.ceil(rig.d_min)), int(np.floor(rig.d_max))


def band_search(frame_lcn, p: Pattern, center, active, rig: RigModel, radius: int, patch: int):
    """Integer ZNCC search over ``center +- radius`` at active pixels (tiled kernel).

    Returns ``(d_int, peak, left, right, second)``.
    """
    img = as_array(frame_lcn)
    fpad, fmean, fstd = frame_stats(img, patch)
    idx = pattern_index(p, img.shape[0], patch)
    d_lo, d_hi = _disparity_bounds(rig)
    off, peak, left, right, second = zncc_band_search(
        fpad, fmean, fstd, *idx.arrays(),
        np.ascontiguousarray(center, dtype=np.int64), np.ascontiguousarray(active, dtype=np.bool_),
        int(radius), d_lo, d_hi, patch // 2, _TILE,
    )
    return center + off, peak, left, right, second


# --- operations ----------------------------------------------------------------


def warp_history(prev: DisparityMap, flow: FlowMap, rig: RigModel, decay: float = 0.95) -> DisparityMap:
    """Carry ``prev`` into the current frame along the pattern flow.

    With ``u`` the upsampled flow, ``d_hat(x) = prev.d(x - u) + u``: the old
    value is gathered from where the pattern came from and the flow is added
    because it equals the disparity change. Confidence is gathered the same
    way and multiplied by ``decay``. Sources that are invalid, outside the
    image or under invalid flow make the pixel invalid. Neighbors that differ
    by more than a pixel (a depth edge) are not blended; the nearer sample wins.
    """
    if flow.factor != rig.downsample_factor:
        raise ValueError("flow resolution does not match the rig's downsample_factor")
    u, fvalid = flow.full_resolution()
    if u.shape != prev.shape:
        raise ValueError("flow and disparity map sizes differ")
    d, valid, conf = warp_gather(
        np.ascontiguousarray(prev.d, dtype=np.float64), np.ascontiguousarray(prev.valid),
        np.ascontiguousarray(prev.confidence, dtype=np.float64), u, fvalid,
        float(rig.d_min), float(rig.d_max), float(decay), 1.0,
    )
    return DisparityMap(d, valid, conf)


def refine(
    frame_lcn,
    p: Pattern,
    prior: DisparityMap,
    rig: RigModel,
    params: RefineParams = RefineParams(),
    fill_holes: bool = False,
) -> DisparityMap:
    """One residual update around ``prior``.

    Integer ZNCC search over ``round(prior) +- r`` within the rig's range, a
    parabola through the scores around the peak for the subpixel part, then

        c = clip(peak, 0, 1) * gate(peak / second_peak)
        a = exp(-0.5 * ((d_new - d_prior) / agree_px)^2)
        w = fuse_weight * c_prior * a
        d = (c * d_new + w * d_prior) / (c + w)

    The agreement factor ``a`` makes the blend robust: a prior the fresh
    match contradicts by much more than ``agree_px`` drops out instead of
    dragging the estimate. Output confidence treats match and prior as
    independent evidence, ``1 - (1 - c)(1 - w)``, times ``a`` where a prior
    exists, so a contradicted prior also loses weight on the next frame.
    A peak below ``zncc_floor`` invalidates the pixel. Pixels without a
    valid prior stay invalid unless ``fill_holes`` asks for a full-range
    search there.
    """
    img = as_array(frame_lcn)
    if prior.shape != img.shape:
        raise ValueError("prior and frame differ in shape")
    active = prior.valid
    center = np.where(active, np.rint(prior.d), 0).astype(np.int64)
    d_int, peak, left, right, second = band_search(img, p, center, active, rig, params.radius, params.patch)

    prior_conf = np.where(active, prior.confidence, 0.0)
    prior_d = prior.d
    if fill_holes and (~active).any():
        holes = ~active
        lo, hi = _disparity_bounds(rig)
        mid = (lo + hi) // 2
        r_full = max(mid - lo, hi - mid)
        hd, hp, hl, hr, hs = band_search(img, p, np.full(img.shape, mid, np.int64), holes, rig, r_full, params.patch)
        d_int = np.where(holes, hd, d_int)
        peak = np.where(holes, hp, peak)
        left = np.where(holes, hl, left)
        right = np.where(holes, hr, right)
        second = np.where(holes, hs, second)
        active = np.ones_like(active)

    d, valid, conf = fuse_residual(
        d_int, peak, left, right, second, np.ascontiguousarray(active, dtype=np.bool_),
        np.ascontiguousarray(prior_d, dtype=np.float64), np.ascontiguousarray(prior_conf, dtype=np.float64),
        params.ratio_floor, params.fuse_weight, params.agree_px, params.zncc_floor, rig.d_min, rig.d_max,
    )
    return DisparityMap(d, valid, conf)


def init_blur_sigma(step: float) -> float:
    """Low-pass sigma used by the coarse search so its correlation peak outlasts the stride."""
    return 0.75 * step if step > 1 else 0.0


def initialize(frame_lcn, p: Pattern, rig: RigModel, params: RefineParams = RefineParams()) -> DisparityMap:
    """Coarse first-frame estimate: exhaustive search at the block centers, no subpixel.

    One pixel per ``downsample_factor`` block is searched over the full
    disparity range in steps of ``init_step_px``. A dot pattern decorrelates
    within a pixel or two, so when the step skips disparities both signals
    are first smoothed along the rows (see :func:`init_blur_sigma`);
    otherwise the true peak can fall between samples and lose to a chance
    match. Every full-resolution pixel then takes whichever of its 2 x 2
    nearest block results correlates best at that pixel, which keeps depth
    edges from being smeared over whole blocks.
    """
    img = as_array(frame_lcn)
    k = rig.downsample_factor
    hr, wr = rig.reduced_shape
    by, bx = np.mgrid[0:hr, 0:wr]
    ys = (by * k + k // 2).ravel()
    xs = (bx * k + k // 2).ravel()
    lo, hi = _disparity_bounds(rig)
    dlist = np.unique(np.rint(np.arange(lo, hi + 1e-9, params.init_step_px)).astype(np.int64))
    blur = init_blur_sigma(params.init_step_px)
    scores = zncc_scores(img, p, ys, xs, dlist, params.patch, blur)

    n = scores.shape[0]
    best = np.empty(n, np.int64)
    peak = np.empty(n)
    second = np.empty(n)
    for m in range(n):
        # no prior to prefer, so the center of the list breaks ties
        b, pk, _, _, sc = reduce_scores(scores[m], len(dlist) // 2)
        best[m], peak[m], second[m] = b, pk, sc
    conf = (np.clip(peak, 0.0, 1.0) * _ratio_gate(peak, second, params.ratio_floor)).reshape(hr, wr)
    valid = (peak >= params.zncc_floor).reshape(hr, wr)
    dblk = dlist[best].reshape(hr, wr)

    fpad, fmean, fstd = frame_stats(img, params.patch, blur)
    idx = pattern_index(p, img.shape[0], params.patch, blur)
    d, score, sy, sx = pick_block_candidates(fpad, fmean, fstd, *idx.arrays(), dblk, valid, k, params.patch // 2)
    ok = score >= params.zncc_floor
    return DisparityMap(np.where(ok, d, 0.0), ok, np.where(ok, conf[sy, sx], 0.0))


# --- sequence driver ----------------------------------------------------------------


@dataclass
class FrameTiming:
    frame_index: int
    ms_flow: float = 0.0
    ms_warp: float = 0.0
    ms_refine: float = 0.0
    ms_total: float = 0.0


@dataclass
class IncrementalEstimator:
    """Holds the previous frame and map; :meth:`step` consumes one frame at a time."""

    rig: RigModel
    pattern: Pattern
    flow_params: FlowParams = field(default_factory=FlowParams)
    refine_params: RefineParams = field(default_factory=RefineParams)
    ablation: str = "full"
    fill_holes: bool = False
    lcn_window: int = LCN_WINDOW
    lcn_eps: float = LCN_EPS
    state: Optional[DisparityMap] = None
    prev_lcn: Optional[np.ndarray] = None
    last_flow: Optional[FlowMap] = None

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.flow_params.factor != self.rig.downsample_factor:
            self.flow_params = FlowParams(**{**self.flow_params.__dict__, "factor": self.rig.downsample_factor})

    def step(self, frame) -> tuple[DisparityMap, FrameTiming]:
        t0 = time.perf_counter()
        index = frame.t if isinstance(frame, Frame) else -1
        timing = FrameTiming(index)
        cur = lcn(as_array(frame), self.lcn_window, self.lcn_eps)
        t1 = time.perf_counter()
        if self.state is None:
            out = initialize(cur, self.pattern, self.rig, self.refine_params)
            self.last_flow = None
            t2 = t3 = t1
        else:
            if self.ablation == "full":
                self.last_flow = compute_pattern_flow(cur, self.prev_lcn, self.flow_params, self.state.valid)
                t2 = time.perf_counter()
                prior = warp_history(self.state, self.last_flow, self.rig, self.refine_params.decay)
            else:
                self.last_flow = None
                t2 = time.perf_counter()
                prior = self.state
                if self.ablation == "no_confidence":
                    prior = DisparityMap(prior.d, prior.valid, np.zeros(prior.shape))
            t3 = time.perf_counter()
            out = refine(cur, self.pattern, prior, self.rig, self.refine_params, self.fill_holes)
        t4 = time.perf_counter()
        timing.ms_flow = (t2 - t1) * 1e3
        timing.ms_warp = (t3 - t2) * 1e3
        timing.ms_refine = (t4 - t3) * 1e3
        # LCN is part of the per-frame cost; book it with the flow stage
        timing.ms_flow += (t1 - t0) * 1e3
        timing.ms_total = (t4 - t0) * 1e3
        self.state = out
        self.prev_lcn = cur
        return out, timing


@dataclass
class SequenceResult:
    maps: list[DisparityMap]
    timings: list[FrameTiming]
    flows: list[Optional[FlowMap]]


def run_sequence(
    manifest,
    rig: RigModel,
    p: Pattern,
    flow_params: FlowParams = FlowParams(),
    refine_params: RefineParams = RefineParams(),
    ablation: str = "full",
    fill_holes: bool = False,
    on_frame: Optional[Callable[[int, DisparityMap, FrameTiming], None]] = None,
    keep_flows: bool = False,
) -> SequenceResult:
    """Estimate disparity for every frame of ``manifest`` in temporal order.

    ``manifest`` is a :class:`~patternflow.manifest.SequenceManifest` or any
    sequence of frames. Frame 0 uses :func:`initialize`; each later frame is
    one warp + refine pass (``no_warp`` skips the warp, ``no_confidence``
    also zeroes the carried confidence).
    """
    est = IncrementalEstimator(rig, p, flow_params, refine_params, ablation, fill_holes)
    n = manifest.n_frames if hasattr(manifest, "load_frame") else len(manifest)
    maps, timings, flows = [], [], []
    for t in range(n):
        frame = manifest.load_frame(t) if hasattr(manifest, "load_frame") else manifest[t]
        if not isinstance(frame, Frame):
            frame = Frame(t, np.asarray(frame))
        out, timing = est.step(frame)
        timing.frame_index = t
        maps.append(out)
        timings.append(timing)
        flows.append(est.last_flow if keep_flows else None)
        log.debug("frame %d: %.1f ms, %.1f%% valid", t, timing.ms_total, 100 * out.valid.mean())
        if on_frame is not None:
            on_frame(t, out, timing)
    return SequenceResult(maps, timings, flows)
