"""Synthetic transparent-object RGB-D scenes and dataset loaders.

Scenes are a tilted tabletop with boxes, spheres and cylinders resting on
it, rendered by analytic ray casting. Some objects are transparent: their
sensor depth is dropped, replaced by refracted background depth, or
perturbed with noise, and they appear in RGB only as a faint tinted copy
of the background with rim highlights.

Randomness comes from numpy's PCG64 generator; sample ``i`` of a corpus
with seed ``s`` uses ``PCG64(SeedSequence([s, i]))``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .config import SynthSpec, _format
from .geometry import DepthMap, Intrinsics, detect_boundaries, normals_from_depth, pixel_rays
from .io import read_depth_png, write_depth_png

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MIN_MASK_PIXELS = 12


@dataclass
class SceneSample:
    rgb: np.ndarray
    raw_depth: DepthMap
    gt_depth: DepthMap
    mask: np.ndarray
    normals: np.ndarray
    boundaries: np.ndarray
    intrinsics: Intrinsics
    id: str

    def __post_init__(self):
        shape = self.gt_depth.shape
        if self.rgb.shape != shape + (3,) or self.raw_depth.shape != shape or self.mask.shape != shape:
            raise ValueError(f"sample {self.id}: inconsistent field shapes")


def spec_hash(spec: SynthSpec) -> str:
    text = "".join(f"{f.name}={_format(getattr(spec, f.name))}\n" for f in dataclasses.fields(spec))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_intrinsics(spec: SynthSpec) -> Intrinsics:
    return Intrinsics(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


# ---------------------------------------------------------------- ray casting


def _rotate_about(axis, angle, v):
    axis = axis / np.linalg.norm(axis)
    return v * math.cos(angle) + np.cross(axis, v) * math.sin(angle) + axis * (axis @ v) * (1 - math.cos(angle))


def _hit_sphere(rays, center, radius):
    dd = np.einsum("hwc,hwc->hw", rays, rays)
    dc = rays @ center
    disc = dc**2 - dd * (center @ center - radius**2)
    s = (dc - np.sqrt(np.maximum(disc, 0.0))) / dd
    return np.where((disc >= 0) & (s > 0), s, np.inf)


def _to_local(rays, base, frame):
    """Ray origin and directions expressed in an object frame (rows of ``frame``)."""
    return frame @ (-base), rays @ frame.T


def _hit_box(rays, base, frame, half, height):
    o, d = _to_local(rays, base, frame)
    lo = np.array([-half[0], -half[1], 0.0])
    hi = np.array([half[0], half[1], height])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    near = np.nanmax(np.minimum(t1, t2), axis=-1)
    far = np.nanmin(np.maximum(t1, t2), axis=-1)
    return np.where((near <= far) & (near > 0), near, np.inf)


def _hit_cylinder(rays, base, frame, radius, height):
    o, d = _to_local(rays, base, frame)
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = 2 * (o[0] * d[..., 0] + o[1] * d[..., 1])
    c = o[0] ** 2 + o[1] ** 2 - radius**2
    disc = b**2 - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        s_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
        z_side = o[2] + s_side * d[..., 2]
        side = np.where((disc >= 0) & (s_side > 0) & (z_side >= 0) & (z_side <= height), s_side, np.inf)
        s_top = (height - o[2]) / d[..., 2]
    px = o[0] + s_top * d[..., 0]
    py = o[1] + s_top * d[..., 1]
    top = np.where((s_top > 0) & (px**2 + py**2 <= radius**2), s_top, np.inf)
    return np.minimum(side, top)


def _random_object(rng, spec, rays, z_table, up, e1):
    h, w = z_table.shape
    u = rng.uniform(0.15 * w, 0.85 * w)
    v = rng.uniform(0.25 * h, 0.85 * h)
    ray = np.array([(u - (w - 1) / 2) / spec.focal, (v - (h - 1) / 2) / spec.focal, 1.0])
    table_m = -up
    rho = float(z_table[int(v), int(u)] * (rays[int(v), int(u)] @ table_m))
    base = ray * rho / (ray @ table_m)
    r = rng.uniform(spec.object_radius_min, spec.object_radius_max)
    kind = ("box", "sphere", "cylinder")[rng.integers(3)]
    yaw = rng.uniform(0, math.pi)
    a1 = _rotate_about(up, yaw, e1)
    frame = np.stack([a1, np.cross(up, a1), up])
    if kind == "sphere":
        return kind, _hit_sphere(rays, base + r * up, r)
    height = r * rng.uniform(1.0, 2.5)
    if kind == "box":
        half = (r, r * rng.uniform(0.6, 1.0))
        return kind, _hit_box(rays, base, frame, half, height)
    return kind, _hit_cylinder(rays, base, frame, r, height)


# ------------------------------------------------------------------ shading


def _shade(normals, rays, albedo, light):
    view = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    diffuse = np.clip(np.einsum("hwc,c->hw", normals, light), 0, None)
    refl = 2 * np.einsum("hwc,c->hw", normals, light)[..., None] * normals - light
    spec = np.clip(np.einsum("hwc,hwc->hw", refl, view), 0, None) ** 16
    return albedo * (0.35 + 0.65 * diffuse)[..., None] + 0.15 * spec[..., None]


def _table_albedo(rng, rays, z, up, e1):
    points = rays * z[..., None]
    e2 = np.cross(up, e1)
    x, y = points @ e1, points @ e2
    base = rng.uniform(0.25, 0.85, size=3)
    period = rng.uniform(0.04, 0.15)
    angle = rng.uniform(0, math.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * (x * math.cos(angle) + y * math.sin(angle)) / period)
    contrast = rng.uniform(0.1, 0.35)
    return base * (1 - contrast * stripes)[..., None]


def _shift(img, du, dv):
    """Translate by whole pixels with edge replication."""
    h, w = img.shape[:2]
    ii = np.clip(np.arange(h) - dv, 0, h - 1)
    jj = np.clip(np.arange(w) - du, 0, w - 1)
    return img[ii][:, jj]


# --------------------------------------------------------------- generation


def generate_scene(spec: SynthSpec, rng: np.random.Generator, sample_id: str = "scene",
                   boundary_threshold: float = 0.02, n_objects: int | None = None) -> SceneSample:
    if spec.height % 4 or spec.width % 4:
        raise ValueError(f"resolution {spec.height}x{spec.width} is not divisible by 4")
    K = default_intrinsics(spec)
    rays = pixel_rays((spec.height, spec.width), K)

    tilt = math.radians(rng.uniform(0, spec.table_tilt_max_deg))
    roll = math.radians(rng.uniform(-10, 10))
    m = _rotate_about(np.array([0.0, 0.0, 1.0]), roll, np.array([0.0, math.sin(tilt), math.cos(tilt)]))
    rho = rng.uniform(spec.table_distance_min, spec.table_distance_max)
    z_table = rho / (rays @ m)
    up = -m
    e1 = np.array([1.0, 0.0, 0.0]) - m[0] * m
    e1 /= np.linalg.norm(e1)

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1)) if n_objects is None else n_objects
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.8, -0.2), -1.0])
    light /= np.linalg.norm(light)
    table_albedo = _table_albedo(rng, rays, z_table, up, e1)

    for _attempt in range(50):
        hits, transparent, colors = [], [], []
        for i in range(count):
            _, hit = _random_object(rng, spec, rays, z_table, up, e1)
            hits.append(hit)
            transparent.append(bool(rng.uniform() < spec.transparent_prob))
            colors.append(rng.uniform(0.2, 0.9, size=3))
        if count and not any(transparent):
            transparent[0] = True
        stack = np.stack([z_table] + hits) if hits else z_table[None]
        ids = np.argmin(stack, axis=0) - 1
        opaque = [i for i in range(count) if not transparent[i]]
        opaque_stack = np.stack([z_table] + [hits[i] for i in opaque])
        mask = np.isin(ids, [i for i in range(count) if transparent[i]])
        if count == 0 or mask.sum() >= MIN_MASK_PIXELS:
            break
    else:
        raise RuntimeError("could not place a visible transparent object")

    gt = DepthMap.complete(stack.min(axis=0))
    background = opaque_stack.min(axis=0)
    bg_layer = np.argmin(opaque_stack, axis=0)
    normals = normals_from_depth(gt, K)

    # opaque-only rendering seen through transparent objects
    bg_normals = normals_from_depth(DepthMap.complete(background), K)
    albedo = table_albedo.copy()
    for layer, i in enumerate(opaque, start=1):
        albedo[bg_layer == layer] = colors[i]
    bg_rgb = _shade(bg_normals, rays, albedo, light)

    rgb = bg_rgb.copy()
    raw = gt.values.copy()
    raw_valid = np.ones_like(mask)
    off = spec.refraction_offset
    view = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    facing = np.abs(np.einsum("hwc,hwc->hw", normals, view))
    edges = mask & ~cv2.erode(mask.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
    for i in range(count):
        if not transparent[i]:
            continue
        region = ids == i
        du, dv = (int(x) for x in rng.integers(-off, off + 1, size=2))
        seen = _shift(bg_rgb, du, dv)
        tint = rng.uniform(0.8, 1.0, size=3)
        rim = 0.5 * (1 - facing) ** 2
        rgb[region] = (0.85 * seen * tint + rim[..., None])[region]
        leaked = _shift(background, du, dv)
        u = rng.uniform(size=gt.shape)
        noise = rng.normal(0.0, spec.noise_sigma, size=gt.shape)
        hole = region & (u < spec.hole_prob)
        leak = region & (u >= spec.hole_prob) & (u < spec.hole_prob + spec.leak_prob)
        noisy = region & ~hole & ~leak
        raw_valid[hole] = False
        raw[hole] = 0.0
        raw[leak] = leaked[leak]
        raw[noisy] = np.maximum(gt.values[noisy] + noise[noisy], 0.0)
    rgb[edges] *= 0.7
    rgb = np.clip(rgb, 0.0, 1.0)

    return SceneSample(
        rgb=rgb,
        raw_depth=DepthMap(raw, raw_valid),
        gt_depth=gt,
        mask=mask,
        normals=normals,
        boundaries=detect_boundaries(gt, boundary_threshold),
        intrinsics=K,
        id=sample_id,
    )


def split(ids, fractions, seed: int) -> dict[str, list]:
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty corpus")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ids))
    n = len(ids)
    c1 = round(fractions[0] * n)
    c2 = round((fractions[0] + fractions[1]) * n)
    shuffled = [ids[i] for i in order]
    return {"train": shuffled[:c1], "val": shuffled[c1:c2], "test": shuffled[c2:]}


def corpus_ids(spec: SynthSpec) -> list[str]:
    return [f"s{i:05d}" for i in range(spec.n_train + spec.n_val + spec.n_test)]


def corpus_splits(spec: SynthSpec) -> dict[str, list[str]]:
    n = spec.n_train + spec.n_val + spec.n_test
    return split(corpus_ids(spec), (spec.n_train / n, spec.n_val / n, spec.n_test / n), spec.seed)


def generate_corpus(spec: SynthSpec, root, boundary_threshold: float = 0.02) -> dict[str, list[str]]:
    """Write every split of the corpus under ``root``; returns the id partition."""
    root = Path(root)
    parts = corpus_splits(spec)
    for name, ids in parts.items():
        for sid in ids:
            sample = generate_scene(spec, sample_rng(spec.seed, int(sid[1:])), sid, boundary_threshold)
            save_sample(sample, root / name / sid, spec_hash(spec))
    return parts


# -------------------------------------------------------------- persistence


def save_sample(sample: SceneSample, directory, spec_digest: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    bgr = np.rint(sample.rgb[..., ::-1] * 255).astype(np.uint8)
    cv2.imwrite(str(d / "rgb.png"), bgr)
    write_depth_png(d / "depth_raw.png", sample.raw_depth)
    write_depth_png(d / "depth_gt.png", sample.gt_depth)
    cv2.imwrite(str(d / "mask.png"), sample.mask.astype(np.uint8) * 255)
    K = sample.intrinsics
    meta = {
        "id": sample.id, "height": sample.gt_depth.shape[0], "width": sample.gt_depth.shape[1],
        "fx": repr(K.fx), "fy": repr(K.fy), "cx": repr(K.cx), "cy": repr(K.cy), "spec_hash": spec_digest,
    }
    (d / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))


def _read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _read_image(path, flags=cv2.IMREAD_UNCHANGED):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    img = cv2.imread(str(path), flags)
    if img is None:
        raise ValueError(f"corrupt or unreadable image {path}")
    return img


def _read_rgb(path):
    img = _read_image(path, cv2.IMREAD_COLOR)
    return img[..., ::-1].astype(np.float64) / 255.0


def _read_mask(path):
    img = _read_image(path, cv2.IMREAD_GRAYSCALE)
    return img > 127


def _read_depth(path, scale=1e-3) -> DepthMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".exr":
        import os

        os.environ.setdefault("OPENCV_IO_ENABLE_OPENEXR", "1")
        img = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH | cv2.IMREAD_ANYCOLOR)
        if img is None:
            raise ValueError(f"corrupt or unreadable depth {path}")
        if img.ndim == 3:
            img = img[..., 0]
        return DepthMap.from_sensor(img.astype(np.float64))
    if path.suffix == ".npy":
        return DepthMap.from_sensor(np.load(path).astype(np.float64) * scale)
    return read_depth_png(path, scale)


def resample_rgb(rgb, size):
    h, w = size
    return cv2.resize(rgb, (w, h), interpolation=cv2.INTER_AREA)


def resample_depth(depth: DepthMap, size) -> DepthMap:
    """Area average over valid pixels; a target pixel stays valid if at
    least half of its footprint was valid."""
    h, w = size
    valid = depth.validity.astype(np.float64)
    num = cv2.resize(depth.filled(0.0) * valid, (w, h), interpolation=cv2.INTER_AREA)
    den = cv2.resize(valid, (w, h), interpolation=cv2.INTER_AREA)
    ok = den >= 0.5
    return DepthMap(np.where(ok, num / np.maximum(den, 1e-12), 0.0), ok)


def resample_mask(mask, size):
    h, w = size
    return cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST).astype(bool)


def _assemble(rgb, raw, gt, mask, K, sid, size, boundary_threshold):
    shapes = {rgb.shape[:2], raw.shape, gt.shape, mask.shape}
    if len(shapes) != 1:
        raise ValueError(f"sample {sid}: resolution mismatch between files {sorted(shapes)}")
    if size is not None and tuple(size) != gt.shape:
        sy, sx = size[0] / gt.shape[0], size[1] / gt.shape[1]
        rgb, raw, gt, mask = (resample_rgb(rgb, size), resample_depth(raw, size),
                              resample_depth(gt, size), resample_mask(mask, size))
        K = K.scaled(sx, sy)
    if not gt.validity.any():
        log.warning("sample %s: ground-truth depth has no valid pixels", sid)
    if not raw.validity.any():
        log.warning("sample %s: raw depth has no valid pixels", sid)
    return SceneSample(
        rgb=rgb, raw_depth=raw, gt_depth=gt, mask=mask,
        normals=normals_from_depth(gt, K),
        boundaries=detect_boundaries(gt, boundary_threshold),
        intrinsics=K, id=sid,
    )


def _load_synthetic(root, sid, size, boundary_threshold):
    root = Path(root)
    d = root / sid
    if not d.is_dir():
        hits = [root / s / sid for s in SPLITS if (root / s / sid).is_dir()]
        if not hits:
            raise FileNotFoundError(f"no sample directory for {sid} under {root}")
        d = hits[0]
    meta = _read_meta(d / "meta.txt") if (d / "meta.txt").exists() else None
    if meta is None:
        raise FileNotFoundError(d / "meta.txt")
    K = Intrinsics(float(meta["fx"]), float(meta["fy"]), float(meta["cx"]), float(meta["cy"]))
    return _assemble(_read_rgb(d / "rgb.png"), _read_depth(d / "depth_raw.png"), _read_depth(d / "depth_gt.png"),
                     _read_mask(d / "mask.png"), K, sid, size, boundary_threshold)


def _load_cleargrasp(root, sid, size, boundary_threshold):
    """ClearGrasp layout: ``<root>/{rgb-imgs,depth-imgs-transparent,depth-imgs-opaque,
    segmentation-masks}/<id>-*`` plus ``<root>/camera_intrinsics.txt`` (fx fy cx cy)."""
    root = Path(root)

    def find(folder, suffixes):
        for s in suffixes:
            p = root / folder / f"{sid}-{s}"
            if p.exists():
                return p
        raise FileNotFoundError(root / folder / f"{sid}-{suffixes[0]}")

    rgb = _read_rgb(find("rgb-imgs", ["rgb.jpg", "rgb.png"]))
    raw = _read_depth(find("depth-imgs-transparent", ["depth-rectified.exr", "transparent-depth-img.exr", "depth.png"]))
    gt = _read_depth(find("depth-imgs-opaque", ["opaque-depth-img.exr", "depth-rectified.exr", "depth.png"]))
    mask = _read_mask(find("segmentation-masks", ["segmentation-mask.png", "mask.png"]))
    K = _read_intrinsics(root / "camera_intrinsics.txt")
    return _assemble(rgb, raw, gt, mask, K, sid, size, boundary_threshold)


def _load_transcg(root, sid, size, boundary_threshold):
    """TransCG layout: ``<root>/scenes/<scene>/<perspective>/{rgb1.png, depth1.png,
    depth1-gt.png, depth1-gt-mask.png}`` with ``sid = "<scene>/<perspective>"`` and
    ``<root>/camera_intrinsics.txt`` (fx fy cx cy); depths in millimetres."""
    root = Path(root)
    d = root / "scenes" / sid
    rgb = _read_rgb(d / "rgb1.png")
    raw = _read_depth(d / "depth1.png")
    gt = _read_depth(d / "depth1-gt.png")
    mask = _read_mask(d / "depth1-gt-mask.png")
    K = _read_intrinsics(root / "camera_intrinsics.txt")
    return _assemble(rgb, raw, gt, mask, K, sid, size, boundary_threshold)


def _read_intrinsics(path) -> Intrinsics:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    vals = [float(x) for x in path.read_text().split()]
    if len(vals) != 4:
        raise ValueError(f"{path}: expected 'fx fy cx cy'")
    return Intrinsics(*vals)


LOADERS = {"synthetic": _load_synthetic, "cleargrasp": _load_cleargrasp, "transcg": _load_transcg}


def load_sample(root, kind: str, sample_id: str, size=None, boundary_threshold: float = 0.02) -> SceneSample:
    """Load one sample, converting depths to metres; ``size=(H, W)`` resamples."""
    if kind not in LOADERS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(LOADERS)}")
    return LOADERS[kind](root, sample_id, size, boundary_threshold)


def list_split(root, name: str) -> list[str]:
    d = Path(root) / name
    if not d.is_dir():
        raise FileNotFoundError(d)
    return sorted(p.name for p in d.iterdir() if p.is_dir())


def load_split(root, name: str, boundary_threshold: float = 0.02) -> list[SceneSample]:
    return [load_sample(Path(root) / name, "synthetic", sid, boundary_threshold=boundary_threshold)
            for sid in list_split(root, name)]
