"""Synthetic IR sequences of moving analytic scenes under dot-pattern projection.

Camera at the origin looking down +Z; projector at ``(baseline, 0, 0)`` with
the same intrinsics, so a surface point at depth Z lands at pattern column
``x - f*b/Z`` on the same row. Every pixel gets an exact ground-truth
disparity from analytic ray casting; pixels the projector cannot light
(occluded along the projector ray, or outside the pattern's horizontal extent)
are marked invalid in the ground truth.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import RigModel
from .manifest import SequenceManifest, write_manifest
from .maps import DisparityMap, Frame
from .pattern import Pattern, sample_pattern, save_pattern
from .fileio import write_pfm, write_pgm

_SHADOW_EPS = 1e-7


class RenderError(RuntimeError):
    pass


@dataclass
class Motion:
    """Rigid translation track, evaluated per frame index.

    ``inv_depth_rate`` (1/m per frame), when set, makes the reference depth
    follow ``1/z(t) = 1/z0 + rate*t`` so disparity changes by exactly
    ``f*b*rate`` pixels per frame; it replaces the z component of ``velocity``.
    """

    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    osc_amplitude: float = 0.0
    osc_period: float = 32.0
    inv_depth_rate: Optional[float] = None

    def offset(self, base: np.ndarray, t: float) -> np.ndarray:
        pos = base + np.asarray(self.velocity, dtype=np.float64) * t
        if self.inv_depth_rate is not None:
            pos[2] = 1.0 / (1.0 / base[2] + self.inv_depth_rate * t)
        if self.osc_amplitude:
            pos[2] += self.osc_amplitude * np.sin(2 * np.pi * t / self.osc_period)
        return pos


@dataclass
class Primitive:
    """Base for analytic surfaces; subclasses implement :meth:`intersect`."""

    albedo: float = 1.0
    motion: Motion = field(default_factory=Motion)
    name: str = ""

    def intersect(self, origin: np.ndarray, dirs: np.ndarray, t: float) -> np.ndarray:
        """Ray parameter of the first hit (``origin + s * dirs``), ``inf`` on a miss."""
        raise NotImplementedError


@dataclass
class FrontoPlane(Primitive):
    """Rectangle at constant depth; unbounded when ``half_size`` is None."""

    center: tuple[float, float, float] = (0.0, 0.0, 1.0)
    half_size: Optional[tuple[float, float]] = None

    def intersect(self, origin, dirs, t):
        c = self.motion.offset(np.array(self.center, dtype=np.float64), t)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (c[2] - origin[2]) / dirs[..., 2]
        hit = s > 0
        if self.half_size is not None:
            px = origin[0] + s * dirs[..., 0]
            py = origin[1] + s * dirs[..., 1]
            hit &= (np.abs(px - c[0]) <= self.half_size[0]) & (np.abs(py - c[1]) <= self.half_size[1])
        return np.where(hit, s, np.inf)


@dataclass
class TiltedPlane(Primitive):
    """Rectangle on ``Z = cz + slope_x*(X - cx) + slope_y*(Y - cy)``, bounded in X and Y."""

    center: tuple[float, float, float] = (0.0, 0.0, 1.0)
    slope: tuple[float, float] = (0.0, 0.0)
    half_size: tuple[float, float] = (0.2, 0.2)

    def intersect(self, origin, dirs, t):
        c = self.motion.offset(np.array(self.center, dtype=np.float64), t)
        n = np.array([-self.slope[0], -self.slope[1], 1.0])
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.dot(c - origin, n) / denom
        px = origin[0] + s * dirs[..., 0]
        py = origin[1] + s * dirs[..., 1]
        hit = (s > 0) & (np.abs(px - c[0]) <= self.half_size[0]) & (np.abs(py - c[1]) <= self.half_size[1])
        return np.where(hit, s, np.inf)


@dataclass
class Sphere(Primitive):
    center: tuple[float, float, float] = (0.0, 0.0, 1.0)
    radius: float = 0.1

    def intersect(self, origin, dirs, t):
        c = self.motion.offset(np.array(self.center, dtype=np.float64), t)
        oc = origin - c
        a = np.einsum("...i,...i->...", dirs, dirs)
        half_b = dirs @ oc
        disc = half_b**2 - a * (oc @ oc - self.radius**2)
        root = np.sqrt(np.maximum(disc, 0.0))
        s_near = (-half_b - root) / a
        s_far = (-half_b + root) / a
        s = np.where(s_near > 0, s_near, s_far)
        return np.where((disc >= 0) & (s > 0), s, np.inf)


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    background_plane_depth: float = 2.0
    n_frames: int = 32
    background_albedo: float = 1.0


@dataclass
class NoiseModel:
    gaussian_sigma: float = 0.01
    ambient_level: float = 0.05
    quantize_bits: int = 8  # 0 keeps float intensities

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not 0 <= self.ambient_level < 1:
            raise ValueError("ambient_level must be in [0, 1)")
        if not 0 <= self.quantize_bits <= 16:
            raise ValueError("quantize_bits must be in 0..16")

    @classmethod
    def noise_free(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0)


def _camera_rays(xs, ys, rig: RigModel) -> np.ndarray:
    xs, ys = np.broadcast_arrays(np.asarray(xs, np.float64), np.asarray(ys, np.float64))
    return np.stack([(xs - rig.cx) / rig.focal_px, (ys - rig.cy) / rig.focal_px, np.ones_like(xs)], -1)


def _first_hits(scene: SceneSpec, dirs, t, origin=np.zeros(3)):
    """Depth (camera rays) of the closest surface and the index of what was hit (-1 = background)."""
    depth = np.full(dirs.shape[:-1], float(scene.background_plane_depth))
    which = np.full(dirs.shape[:-1], -1, dtype=np.int32)
    for i, prim in enumerate(scene.primitives):
        s = prim.intersect(origin, dirs, t)
        closer = s < depth
        depth = np.where(closer, s, depth)
        which = np.where(closer, i, which)
    return depth, which


def depth_at(scene: SceneSpec, x, y, t, rig: RigModel):
    """Z of the nearest surface seen through pixel ``(x, y)`` at frame ``t``."""
    depth, _ = _first_hits(scene, _camera_rays(x, y, rig), t)
    return float(depth) if depth.ndim == 0 else depth


def _projector_shadow(scene: SceneSpec, points: np.ndarray, t, rig: RigModel) -> np.ndarray:
    origin = np.array([rig.baseline_m, 0.0, 0.0])
    dirs = points - origin
    shadow = np.zeros(points.shape[:-1], dtype=bool)
    for prim in scene.primitives:
        s = prim.intersect(origin, dirs, t)
        shadow |= s < 1.0 - _SHADOW_EPS
    return shadow


def render_depth(scene: SceneSpec, t: int, rig: RigModel) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame depth map and hit index, with range checking per surface."""
    ys, xs = np.mgrid[0 : rig.height, 0 : rig.width]
    depth, which = _first_hits(scene, _camera_rays(xs, ys, rig), t)
    near, far = rig.z_range
    for i in range(-1, len(scene.primitives)):
        zs = depth[which == i]
        if zs.size and (zs.min() < near or zs.max() > far):
            label = "background" if i < 0 else (scene.primitives[i].name or f"primitive {i}")
            raise RenderError(
                f"frame {t}: {label} depth [{zs.min():.3f}, {zs.max():.3f}] m outside "
                f"the rig range [{near:.3f}, {far:.3f}] m"
            )
    return depth, which


def render_frame(
    scene: SceneSpec,
    t: int,
    rig: RigModel,
    p: Pattern,
    noise: NoiseModel,
    seed: int = 0,
) -> tuple[Frame, DisparityMap]:
    """Render frame ``t`` and its exact ground-truth disparity.

    Noise is drawn from a generator keyed on ``(seed, t)`` so any frame can be
    regenerated on its own.
    """
    depth, which = render_depth(scene, t, rig)
    d = rig.fb / depth
    ys, xs = np.mgrid[0 : rig.height, 0 : rig.width]
    x_p = xs - d

    points = _camera_rays(xs, ys, rig) * depth[..., None]
    lit = ~_projector_shadow(scene, points, t, rig)
    lit &= (x_p >= 0) & (x_p <= p.width - 1)

    albedo = np.full(depth.shape, float(scene.background_albedo))
    for i, prim in enumerate(scene.primitives):
        albedo[which == i] = prim.albedo

    img = np.where(lit, albedo * sample_pattern(p, x_p, ys), 0.0) + noise.ambient_level
    if noise.gaussian_sigma > 0:
        rng = np.random.default_rng([seed, t])
        img = img + rng.normal(0.0, noise.gaussian_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if noise.quantize_bits:
        levels = 2**noise.quantize_bits - 1
        img = np.round(img * levels) / levels

    gt = DisparityMap(d, lit, lit.astype(np.float64))
    return Frame(t, img), gt


def frame_to_pgm_samples(img: np.ndarray, quantize_bits: int) -> tuple[np.ndarray, int]:
    bits = quantize_bits if quantize_bits else 16
    maxval = 2**bits - 1
    return np.round(np.clip(img, 0, 1) * maxval).astype(np.uint16), maxval


def gen_sequence(
    scene: SceneSpec,
    rig: RigModel,
    p: Pattern,
    noise: NoiseModel,
    out_dir,
    seed: int = 0,
) -> SequenceManifest:
    """Render every frame of ``scene`` into ``out_dir`` and write the manifest.

    Layout: ``pattern.pgm``/``pattern.txt``, ``frames/frame_NNNN.pgm``,
    ``gt/disp_NNNN.pfm`` (invalid pixels stored as ``inf``), ``manifest.txt``.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    pattern_header = save_pattern(p, out / "pattern")

    frames, gts = [], []
    for t in range(scene.n_frames):
        frame, gt = render_frame(scene, t, rig, p, noise, seed)
        samples, maxval = frame_to_pgm_samples(frame.intensity, noise.quantize_bits)
        fname = f"frames/frame_{t:04d}.pgm"
        gname = f"gt/disp_{t:04d}.pfm"
        write_pgm(out / fname, samples, maxval)
        write_pfm(out / gname, gt.masked())
        frames.append(fname)
        gts.append(gname)

    manifest = SequenceManifest(
        rig=rig,
        pattern=pattern_header.name,
        frames=frames,
        gt=gts,
        seed=seed,
        root=out,
        extra={
            "noise_sigma": noise.gaussian_sigma,
            "ambient_level": noise.ambient_level,
            "quantize_bits": noise.quantize_bits,
        },
    )
    write_manifest(manifest, out / "manifest.txt")
    return manifest


# --- scene files -----------------------------------------------------------

_PRIMITIVE_TYPES = {"fronto_plane": FrontoPlane, "tilted_plane": TiltedPlane, "sphere": Sphere}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _parse_primitive(name: str, sec: configparser.SectionProxy) -> Primitive:
    kind = sec.get("type")
    if kind not in _PRIMITIVE_TYPES:
        raise ValueError(f"[{sec.name}]: unknown primitive type {kind!r}")
    rate = sec.get("inv_depth_rate", "").strip()
    motion = Motion(
        velocity=_floats(sec.get("velocity", "0 0 0")),
        osc_amplitude=sec.getfloat("osc_amplitude", 0.0),
        osc_period=sec.getfloat("osc_period", 32.0),
        inv_depth_rate=float(rate) if rate else None,
    )
    kw = dict(albedo=sec.getfloat("albedo", 1.0), motion=motion, name=name)
    kw["center"] = _floats(sec.get("center", "0 0 1"))
    if kind == "sphere":
        kw["radius"] = sec.getfloat("radius")
    elif kind == "tilted_plane":
        kw["slope"] = _floats(sec.get("slope", "0 0"))
        kw["half_size"] = _floats(sec.get("half_size"))
    elif "half_size" in sec:
        kw["half_size"] = _floats(sec["half_size"])
    if len(kw["center"]) != 3:
        raise ValueError(f"[{sec.name}]: center needs three values")
    return _PRIMITIVE_TYPES[kind](**kw)


@dataclass
class SceneFile:
    """Everything a scene file describes: rig, pattern and noise settings, and the scene."""

    rig: RigModel
    scene: SceneSpec
    noise: NoiseModel
    pattern_params: dict


def load_scene_file(path: Union[str, Path]) -> SceneFile:
    """Parse an INI scene description (see ``scenes/*.ini`` for examples)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return parse_scene_config(cp)


def parse_scene_config(cp: configparser.ConfigParser) -> SceneFile:
    if "rig" not in cp or "focal_px" not in cp["rig"]:
        raise ValueError("scene file needs a [rig] section with focal_px")
    rig = RigModel.from_dict(dict(cp["rig"]))
    sc = cp["scene"] if "scene" in cp else {}
    prims = [
        _parse_primitive(name.split(".", 1)[1], cp[name])
        for name in cp.sections()
        if name.startswith("primitive.")
    ]
    scene = SceneSpec(
        primitives=prims,
        background_plane_depth=float(sc.get("background_depth", 2.0)),
        n_frames=int(sc.get("n_frames", 32)),
        background_albedo=float(sc.get("background_albedo", 1.0)),
    )
    nz = cp["noise"] if "noise" in cp else {}
    noise = NoiseModel(
        gaussian_sigma=float(nz.get("gaussian_sigma", 0.01)),
        ambient_level=float(nz.get("ambient_level", 0.05)),
        quantize_bits=int(nz.get("quantize_bits", 8)),
    )
    pt = cp["pattern"] if "pattern" in cp else {}
    pattern_params = {
        "width": int(pt.get("width", rig.width)),
        "period_rows": int(pt.get("period_rows", 64)),
        "dot_density": float(pt.get("dot_density", 0.15)),
        "dot_radius_px": float(pt.get("dot_radius_px", 1.5)),
        "patch_width": int(pt.get("patch_width", 11)),
    }
    if "seed" in pt:
        pattern_params["seed"] = int(pt["seed"])
    return SceneFile(rig, scene, noise, pattern_params)


def default_scene_path(name: str = "default") -> Path:
    return Path(__file__).parent / "scenes" / f"{name}.ini"


def available_scenes() -> Sequence[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "scenes").glob("*.ini"))
