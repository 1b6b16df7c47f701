"""Procedural analytic scenes, exact oracle rendering, multi-view dataset IO.

Scenes are unions of constant-density, constant-albedo primitives, so the
emission-absorption integral has a closed form per ray: sort the boundary
crossings, accumulate transmittance interval by interval. That exact render
is both the training ground truth and the reference the learned renderer is
checked against.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, Ray, look_at, pixel_directions


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    density: float
    albedo: np.ndarray  # RGB in [0,1]
    center: np.ndarray | None = None
    radius: float | None = None
    box_min: np.ndarray | None = None
    box_max: np.ndarray | None = None

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.density < 0 or not np.isfinite(self.density):
            raise ValueError("density must be finite and non-negative")
        if self.kind == "sphere":
            self.center = np.asarray(self.center, dtype=np.float64)
            if self.radius is None or self.radius <= 0:
                raise ValueError("sphere radius must be positive")
        elif self.kind == "box":
            self.box_min = np.asarray(self.box_min, dtype=np.float64)
            self.box_max = np.asarray(self.box_max, dtype=np.float64)
            if not np.all(self.box_min < self.box_max):
                raise ValueError("box min must be strictly below max componentwise")
        else:
            raise ValueError(f"unknown primitive kind: {self.kind}")

    def bounds(self):
        if self.kind == "sphere":
            return self.center - self.radius, self.center + self.radius
        return self.box_min.copy(), self.box_max.copy()

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            return ((points - self.center) ** 2).sum(axis=-1) <= self.radius**2
        return np.all((points >= self.box_min) & (points <= self.box_max), axis=-1)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Entry/exit parameters per ray; (inf, -inf) where the ray misses."""
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        if self.kind == "sphere":
            oc = origins - self.center
            b = (oc * dirs).sum(axis=-1)
            c = (oc * oc).sum(axis=-1) - self.radius**2
            disc = b * b - c
            hit = disc > 0
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = np.where(hit, -b - sq, np.inf)
            t1 = np.where(hit, -b + sq, -np.inf)
            return t0, t1
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            lo = (self.box_min - origins) * inv
            hi = (self.box_max - origins) * inv
        # rays parallel to a slab axis: inside -> (-inf, inf); outside -> an
        # empty (inf, inf) interval that survives the per-axis min/max below
        par = dirs == 0.0
        inside = (origins >= self.box_min) & (origins <= self.box_max)
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, np.inf), hi)
        tmin = np.minimum(lo, hi).max(axis=-1)
        tmax = np.maximum(lo, hi).min(axis=-1)
        hit = tmax > tmin
        return np.where(hit, tmin, np.inf), np.where(hit, tmax, -np.inf)


@dataclass
class SceneSpec:
    primitives: list
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    scene_id: str = "scene"

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)

    @property
    def bbox(self):
        if not self.primitives:
            return np.zeros(3), np.zeros(3)
        los, his = zip(*(p.bounds() for p in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)

    def to_json(self) -> dict:
        prims = []
        for p in self.primitives:
            d = {"kind": p.kind, "density": p.density, "albedo": p.albedo.tolist()}
            if p.kind == "sphere":
                d.update(center=p.center.tolist(), radius=p.radius)
            else:
                d.update(box_min=p.box_min.tolist(), box_max=p.box_max.tolist())
            prims.append(d)
        return {"scene_id": self.scene_id, "background": self.background.tolist(),
                "primitives": prims}

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        prims = []
        for pd in d["primitives"]:
            if pd["kind"] == "sphere":
                prims.append(Primitive("sphere", pd["density"], pd["albedo"],
                                       center=pd["center"], radius=pd["radius"]))
            else:
                prims.append(Primitive("box", pd["density"], pd["albedo"],
                                       box_min=pd["box_min"], box_max=pd["box_max"]))
        return SceneSpec(prims, np.asarray(d["background"]), d.get("scene_id", "scene"))


@dataclass
class GenConfig:
    count_range: tuple = (3, 6)
    density_range: tuple = (1.0, 6.0)
    radius_range: tuple = (0.15, 0.45)
    placement_radius: float = 0.8  # primitive centers inside this ball
    kinds: tuple = ("sphere", "box")
    background: tuple = (1.0, 1.0, 1.0)


def sample_scene(rng: np.random.Generator, cfg: GenConfig, scene_id: str = "scene") -> SceneSpec:
    """Deterministic procedural scene given the rng state."""
    lo, hi = cfg.count_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad primitive count range {cfg.count_range}")
    if cfg.placement_radius <= 0:
        raise ValueError("placement volume is empty")
    n = int(rng.integers(lo, hi + 1))
    prims = []
    for _ in range(n):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        density = float(rng.uniform(*cfg.density_range))
        albedo = rng.uniform(0.05, 0.95, size=3)
        center = rng.uniform(-cfg.placement_radius, cfg.placement_radius, size=3)
        r = float(rng.uniform(*cfg.radius_range))
        if kind == "sphere":
            prims.append(Primitive("sphere", density, albedo, center=center, radius=r))
        else:
            half = rng.uniform(0.5 * r, r, size=3)
            prims.append(Primitive("box", density, albedo,
                                   box_min=center - half, box_max=center + half))
    return SceneSpec(prims, np.asarray(cfg.background), scene_id)


def field_query(scene: SceneSpec, points: np.ndarray):
    """Density and albedo at points; later-listed primitive wins on overlap."""
    points = np.asarray(points, dtype=np.float64)
    flat = points.reshape(-1, 3)
    sigma = np.zeros(flat.shape[0])
    color = np.zeros((flat.shape[0], 3))
    for p in scene.primitives:
        m = p.contains(flat)
        sigma[m] = p.density
        color[m] = p.albedo
    return sigma.reshape(points.shape[:-1]), color.reshape(points.shape[:-1] + (3,))


def oracle_render_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray,
                       t_near, t_far) -> np.ndarray:
    """Exact emission-absorption integral over [t_near, t_far] for each ray."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    R = dirs.shape[0]
    if origins.shape[0] == 1 and R > 1:
        origins = np.broadcast_to(origins, dirs.shape)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (R,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (R,))

    cols = [t_near, t_far]
    for p in scene.primitives:
        t0, t1 = p.intersect(origins, dirs)
        cols.append(np.clip(t0, t_near, t_far))
        cols.append(np.clip(t1, t_near, t_far))
    pts = np.sort(np.stack(cols, axis=1), axis=1)  # (R, 2P+2) breakpoints
    mids = 0.5 * (pts[:, :-1] + pts[:, 1:])
    lengths = pts[:, 1:] - pts[:, :-1]
    mid_xyz = origins[:, None, :] + mids[..., None] * dirs[:, None, :]
    sigma, albedo = field_query(scene, mid_xyz)
    tau = sigma * lengths
    T = np.exp(-np.concatenate([np.zeros((R, 1)), np.cumsum(tau, axis=1)], axis=1))
    w = T[:, :-1] * (1.0 - np.exp(-tau))
    color = (w[..., None] * albedo).sum(axis=1) + T[:, -1:] * scene.background
    return color


def oracle_render(scene: SceneSpec, ray: Ray) -> np.ndarray:
    return oracle_render_rays(scene, ray.origin, ray.direction, ray.t_near, ray.t_far)[0]


def ray_bbox_range(bbox_min, bbox_max, origins, dirs, margin: float = 0.05):
    """Per-ray [t_near, t_far] from bbox entry/exit; misses get a degenerate
    far range so they composite to pure background."""
    margin = max(margin, 1e-9)  # keep the helper box non-degenerate
    helper = Primitive("box", 0.0, (0, 0, 0),
                       box_min=np.asarray(bbox_min) - margin,
                       box_max=np.asarray(bbox_max) + margin)
    t0, t1 = helper.intersect(origins, dirs)
    hit = np.isfinite(t0) & (t1 > 1e-3)
    t_near = np.where(hit, np.maximum(t0, 1e-3), 1.0)
    t_far = np.where(hit, t1, 1.0 + 1e-3)
    return t_near, t_far, hit


# ---------------------------------------------------------------------------
# image and manifest IO

def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("write_ppm expects uint8")
    H, W, C = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H = map(int, parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[3][: W * H * 3], dtype=np.uint8).reshape(H, W, 3)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


@dataclass
class DatasetManifest:
    scene_id: str
    width: int
    height: int
    cameras: list
    image_files: list
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    splits: dict
    root: Path

    def load_image(self, idx: int) -> np.ndarray:
        return read_ppm(self.root / self.image_files[idx]).astype(np.float64) / 255.0


def render_view(scene: SceneSpec, camera: Camera) -> np.ndarray:
    """Oracle render of a full view in [0,1] floats."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    dirs = pixel_directions(camera, xs.ravel(), ys.ravel())
    lo, hi = scene.bbox
    t_near, t_far, _ = ray_bbox_range(lo, hi, camera.center[None, :], dirs)
    img = oracle_render_rays(scene, camera.center[None, :], dirs, t_near, t_far)
    return img.reshape(camera.height, camera.width, 3)


def emit_dataset(scene: SceneSpec, cameras: list, out_dir,
                 n_test: int = 2) -> DatasetManifest:
    """Render every camera with the oracle and write PPMs plus manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, cam in enumerate(cameras):
        img = quantize(render_view(scene, cam))
        name = f"view_{i:03d}.ppm"
        write_ppm(out_dir / name, img)
        files.append(name)
    lo, hi = scene.bbox
    idx = list(range(len(cameras)))
    splits = {"train": idx[: len(idx) - n_test], "test": idx[len(idx) - n_test:]}
    w = cameras[0].width if cameras else 0
    h = cameras[0].height if cameras else 0
    manifest = {
        "scene_id": scene.scene_id,
        "width": w,
        "height": h,
        "cameras": [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                     "pose": [float(x) for x in c.pose.ravel()]} for c in cameras],
        "images": files,
        "bbox": {"min": lo.tolist(), "max": hi.tolist()},
        "splits": splits,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(out_dir / "scene.json", "w") as f:
        json.dump(scene.to_json(), f, indent=1, sort_keys=True)
    return load_manifest(out_dir)


def load_manifest(path) -> DatasetManifest:
    root = Path(path)
    with open(root / "manifest.json") as f:
        d = json.load(f)
    cams = [Camera(c["fx"], c["fy"], c["cx"], c["cy"], d["width"], d["height"],
                   np.asarray(c["pose"]).reshape(3, 4)) for c in d["cameras"]]
    for name in d["images"]:
        if not (root / name).exists():
            raise FileNotFoundError(f"manifest references missing image {root / name}")
    return DatasetManifest(d["scene_id"], d["width"], d["height"], cams, d["images"],
                           np.asarray(d["bbox"]["min"]), np.asarray(d["bbox"]["max"]),
                           d["splits"], root)


def orbit_cameras(n: int, width: int, height: int, radius: float = 2.6,
                  focal: float | None = None, center=(0.0, 0.0, 0.0)) -> list:
    """Cameras on a Fibonacci spiral around the scene, all looking at center."""
    center = np.asarray(center, dtype=np.float64)
    if focal is None:
        focal = 1.2 * max(width, height)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    cams = []
    for i in range(n):
        # mild polar clamp keeps up-vector degeneracy away from the poles
        z = 0.9 * (1.0 - 2.0 * (i + 0.5) / n)
        r = np.sqrt(1.0 - z * z)
        phi = 2.0 * np.pi * i / golden
        eye = center + radius * np.array([r * np.cos(phi), z, r * np.sin(phi)])
        pose = look_at(eye, center, (0.0, 1.0, 0.0))
        cams.append(Camera(focal, focal, width / 2.0, height / 2.0, width, height, pose))
    return cams


def bbox_ray_filter(manifest_or_scene, camera: Camera, rng: np.random.Generator,
                    n_rays: int):
    """Uniformly sample pixels whose rays hit the scene bounding box."""
    if isinstance(manifest_or_scene, SceneSpec):
        lo, hi = manifest_or_scene.bbox
    else:
        lo, hi = manifest_or_scene.bbox_min, manifest_or_scene.bbox_max
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    dirs = pixel_directions(camera, xs.ravel(), ys.ravel())
    _, _, hit = ray_bbox_range(lo, hi, camera.center[None, :], dirs, margin=0.0)
    candidates = np.flatnonzero(hit)
    if candidates.size == 0:
        raise ValueError("scene bounding box projects to no pixels in this view")
    if n_rays == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    pick = candidates[rng.integers(0, candidates.size, size=n_rays)]
    return xs.ravel()[pick], ys.ravel()[pick]
