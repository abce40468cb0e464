"""Simulated time-of-flight scans of a mesh, merged into noisy point clouds.

Each scan is a pinhole depth camera placed on a random sphere around the
shape. Every pixel ray that hits the mesh yields one point, displaced
along the ray by Gaussian depth noise. Scanner artifacts such as
backfolding or reflections are not modeled.
"""

from __future__ import annotations

import shlex
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, _moller_trumbore

VARIANTS = ("no-noise", "med-noise", "max-noise", "var-noise", "sparse", "dense")


@dataclass(frozen=True)
class ScanConfig:
    """Scanner setup. Distances are in multiples of the mesh's longest side L."""

    num_scans: int = 10
    image_width: int = 176
    image_height: int = 144
    radius_range: tuple = (3.0, 5.0)
    lookat_jitter: float = 0.1
    noise_std: float = 0.0
    fov_deg: float = 50.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"radius_range must satisfy 0 < lo <= hi, got {self.radius_range}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image size must be at least 1x1")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must be in (0, 180)")


@dataclass
class PointCloud:
    points: np.ndarray
    scale: float = 1.0  # L of the scanned mesh, in mesh units
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    rotation: np.ndarray  # columns: right, up, forward (camera-to-world)

    @property
    def forward(self):
        return self.rotation[:, 2]

    def rays(self, cfg: ScanConfig):
        """Unit ray directions through every pixel center, row-major."""
        w, h = cfg.image_width, cfg.image_height
        half = np.tan(np.radians(cfg.fov_deg) / 2.0)
        # horizontal field of view spans the image width; square pixels
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * half
        ys = ((np.arange(h) + 0.5) / h * 2.0 - 1.0) * half * h / w
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        local = np.stack([xx.ravel(), -yy.ravel(), np.ones(xx.size)], axis=1)
        dirs = local @ self.rotation.T
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def look_at(position, target, roll=0.0) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    up_hint = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    c, s = np.cos(roll), np.sin(roll)
    right, up = c * right + s * up, -s * right + c * up
    return CameraPose(position, np.stack([right, up, fwd], axis=1))


def random_pose(mesh: TriangleMesh, cfg: ScanConfig, rng) -> CameraPose:
    """Camera on a sphere of radius U[radius_range]*L, aimed near the origin, random roll."""
    L = mesh.longest_side
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(*cfg.radius_range) * L
    target = rng.uniform(-cfg.lookat_jitter, cfg.lookat_jitter, 3) * L
    roll = rng.uniform(0.0, 2 * np.pi)
    return look_at(direction * radius, target, roll)


def simulate_scan(mesh: TriangleMesh, pose: CameraPose, cfg: ScanConfig, rng, noise_std=None):
    """Raycast one depth image; returns the (M, 3) hit points with depth noise.

    ``noise_std`` (in multiples of L) overrides ``cfg.noise_std``. Rays that
    miss the mesh produce no point, so the result may be empty.
    """
    sigma = cfg.noise_std if noise_std is None else noise_std
    dirs = pose.rays(cfg)
    t = render_depth(mesh, pose, cfg, dirs)
    hit = np.isfinite(t)
    depth = t[hit]
    if sigma > 0:
        depth = depth + rng.normal(0.0, sigma * mesh.longest_side, size=depth.shape)
    return pose.position + dirs[hit] * depth[:, None]


def render_depth(mesh: TriangleMesh, pose: CameraPose, cfg: ScanConfig, dirs=None):
    """Ray parameter of the first hit for every pixel ray (inf on miss).

    Each triangle in front of the camera is tested only against the pixels
    inside its projected bounding box (padded by one pixel); triangles
    touching the camera plane are tested against every ray.
    """
    dirs = pose.rays(cfg) if dirs is None else dirs
    w, h = cfg.image_width, cfg.image_height
    half_x = np.tan(np.radians(cfg.fov_deg) / 2.0)
    half_y = half_x * h / w
    a, b, c = mesh.corners
    corners = np.stack([a, b, c], axis=1)  # (T, 3, 3)
    q = (corners - pose.position) @ pose.rotation
    depth_ok = np.all(q[..., 2] > 1e-12, axis=1)
    t_best = np.full(w * h, np.inf)

    front = np.nonzero(depth_ok)[0]
    z = q[front, :, 2]
    col = ((q[front, :, 0] / z) / half_x + 1) / 2 * w - 0.5
    row = ((-q[front, :, 1] / z) / half_y + 1) / 2 * h - 0.5
    c0 = np.clip(np.floor(col.min(axis=1)) - 1, 0, w - 1).astype(np.int64)
    c1 = np.clip(np.ceil(col.max(axis=1)) + 1, 0, w - 1).astype(np.int64)
    r0 = np.clip(np.floor(row.min(axis=1)) - 1, 0, h - 1).astype(np.int64)
    r1 = np.clip(np.ceil(row.max(axis=1)) + 1, 0, h - 1).astype(np.int64)
    visible = (col.max(axis=1) >= -1) & (col.min(axis=1) <= w) & (row.max(axis=1) >= -1) & (row.min(axis=1) <= h)
    front, c0, c1, r0, r1 = front[visible], c0[visible], c1[visible], r0[visible], r1[visible]
    nc = c1 - c0 + 1
    counts = nc * (r1 - r0 + 1)
    tri = np.repeat(front, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ncr = np.repeat(nc, counts)
    pix = (np.repeat(r0, counts) + local // ncr) * w + np.repeat(c0, counts) + local % ncr
    _scatter_hits(t_best, pose.position, dirs, pix, tri, a, b, c)

    behind = np.nonzero(~depth_ok)[0]
    if len(behind):
        pix = np.tile(np.arange(w * h), len(behind))
        tri = np.repeat(behind, w * h)
        _scatter_hits(t_best, pose.position, dirs, pix, tri, a, b, c)
    return t_best


def _scatter_hits(t_best, origin, dirs, pix, tri, a, b, c, chunk=500_000):
    for s in range(0, len(pix), chunk):
        p, k = pix[s:s + chunk], tri[s:s + chunk]
        t, hit = _moller_trumbore(origin, dirs[p], a[k], b[k] - a[k], c[k] - a[k])
        np.minimum.at(t_best, p[hit], t[hit])


def variant_settings(variant, rng):
    """(noise std in multiples of L, number of scans) for a dataset variant."""
    if variant == "no-noise":
        return 0.0, 10
    if variant == "med-noise":
        return 0.01, 10
    if variant == "max-noise":
        return 0.05, 10
    if variant == "var-noise":
        return float(rng.uniform(0.0, 0.05)), int(rng.integers(5, 31))
    if variant == "sparse":
        return 0.01, 5
    if variant == "dense":
        return 0.01, 30
    raise ValueError(f"unknown dataset variant {variant!r}; expected one of {VARIANTS}")


def scan_mesh(mesh: TriangleMesh, cfg: ScanConfig, rng, num_scans=None, noise_std=None) -> np.ndarray:
    """Merge ``num_scans`` scans from random poses, ordered by scan index."""
    n = cfg.num_scans if num_scans is None else num_scans
    seeds = rng.integers(0, 2**63 - 1, size=n)
    parts = []
    for s in seeds:
        scan_rng = np.random.default_rng(int(s))
        pose = random_pose(mesh, cfg, scan_rng)
        parts.append(simulate_scan(mesh, pose, cfg, scan_rng, noise_std))
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def make_variant(mesh: TriangleMesh, variant: str, rng, cfg: ScanConfig | None = None) -> PointCloud:
    """Scan a normalized mesh following one of the dataset variant protocols."""
    cfg = cfg or ScanConfig()
    sigma, num_scans = variant_settings(variant, rng)
    pts = scan_mesh(mesh, cfg, rng, num_scans=num_scans, noise_std=sigma)
    if len(pts) == 0:
        raise ValueError(f"variant {variant!r}: no scan ray hit the mesh")
    prov = {"variant": variant, "noise_std": sigma, "num_scans": num_scans}
    prov.update({k: v for k, v in asdict(replace(cfg, num_scans=num_scans, noise_std=sigma)).items()})
    return PointCloud(pts, mesh.longest_side, prov)


# ---------------------------------------------------------------------------
# dataset manifest: one record per line, whitespace-separated key=value pairs


def format_record(record: dict) -> str:
    return " ".join(f"{k}={shlex.quote(_fmt(v))}" for k, v in record.items())


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_record(line: str) -> dict:
    out = {}
    for tok in shlex.split(line):
        key, _, value = tok.partition("=")
        out[key] = value
    return out


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(format_record(rec) + "\n")


def read_manifest(path) -> list:
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip() and not line.startswith("#")]


def manifest_root(path) -> Path:
    return Path(path).resolve().parent
