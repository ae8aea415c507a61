"""Planar geometry: polygons, poses, cameras, rasterization, image resampling.

Conventions used everywhere in this package:

* World frame: meters; the x axis maps to image columns (u), y to rows (v).
* Image frame: pixel (u, v) = (column, row). The center of pixel (u, v) sits
  at the world point ``workspace_origin + (u, v) / pixels_per_meter``.
* Angles are radians measured from +x toward +y, canonical in [0, 2*pi).
* Images are float arrays in [0, 1], shape (H, W, 3); masks are bool (H, W).
  8-bit only at the PPM/PGM file boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Invalid geometric construction or query."""


class SceneBoundsError(GeometryError):
    """An object extends outside the workspace / camera frame."""


class ImageFormatError(ValueError):
    """Malformed PPM/PGM data."""


# ---------------------------------------------------------------------------
# vectors and angles


def vec2(x: float, y: float) -> np.ndarray:
    return np.array([float(x), float(y)])


def canonical_angle(theta: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    return float(theta) % TWO_PI


def unit_from_angle(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def normalized(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = math.hypot(v[0], v[1])
    if n < 1e-12:
        raise GeometryError("cannot normalize a near-zero vector")
    return v / n


def cross2(a, b):
    """z component of the planar cross product; works on (..., 2) arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def rotate_point(p, theta: float, center=(0.0, 0.0)) -> np.ndarray:
    """Rigid rotation of point(s) ``p`` about ``center`` by ``theta``.

    Accepts a single (2,) point or an (..., 2) array.
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(center, dtype=float)
    d = p - c
    ct, st = math.cos(theta), math.sin(theta)
    out = np.empty_like(d)
    out[..., 0] = ct * d[..., 0] - st * d[..., 1]
    out[..., 1] = st * d[..., 0] + ct * d[..., 1]
    return out + c


# ---------------------------------------------------------------------------
# poses and polygons


@dataclass(frozen=True)
class Pose2:
    """Rigid planar pose; orientation stored canonically in [0, 2*pi)."""

    position: np.ndarray
    orientation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", canonical_angle(self.orientation))
        if not np.all(np.isfinite(self.position)):
            raise GeometryError("pose position must be finite")

    def transform(self, pts) -> np.ndarray:
        """Map body-frame point(s) into the world frame."""
        return rotate_point(pts, self.orientation) + self.position

    def rotated_about(self, dtheta: float, pivot) -> "Pose2":
        """Compose a rotation by ``dtheta`` about a world-frame pivot."""
        pivot = np.asarray(pivot, dtype=float)
        new_pos = rotate_point(self.position, dtheta, pivot)
        return Pose2(new_pos, self.orientation + dtheta)


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    d1 = cross2(q2 - q1, p1 - q1)
    d2 = cross2(q2 - q1, p2 - q1)
    d3 = cross2(p2 - p1, q1 - p1)
    d4 = cross2(p2 - p1, q2 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


@dataclass(frozen=True)
class Polygon:
    """Simple polygon, vertices counter-clockwise in the body frame (meters)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("polygon needs an (N>=3, 2) vertex array")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        d = v - np.roll(v, -1, axis=0)
        if np.any(np.hypot(d[:, 0], d[:, 1]) < 1e-9):
            raise GeometryError("consecutive vertices coincide")
        if _signed_area(v) <= 0:
            raise GeometryError("vertices must wind counter-clockwise (area > 0)")
        n = v.shape[0]
        # O(n^2) simplicity check over non-adjacent edge pairs
        for i in range(n):
            a1, a2 = v[i], v[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue
                if _segments_properly_intersect(a1, a2, v[j], v[(j + 1) % n]):
                    raise GeometryError("polygon is self-intersecting")
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    def world_vertices(self, pose: Pose2) -> np.ndarray:
        return pose.transform(self.vertices)


@dataclass(frozen=True)
class ContactHit:
    """First intersection of a ray with a posed polygon boundary."""

    point: np.ndarray
    outward_normal: np.ndarray
    t: float
    edge_index: int


def points_in_polygon(points, verts) -> np.ndarray:
    """Even-odd containment test for (..., 2) points against (N, 2) vertices."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    v1 = verts
    v2 = np.roll(verts, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(v1, v2):
        crosses = (y1 > y) != (y2 > y)
        if not crosses.any():
            continue
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside[0] if single else inside


def ray_polygon_hits(origins, direction, world_verts):
    """Batched first-hit query: rays from ``origins`` along one ``direction``.

    Returns (hit, t, edge_index) arrays over the M origins. Ties at a vertex
    resolve to the smaller edge index.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))  # (M, 2)
    d = np.asarray(direction, dtype=float)
    a = world_verts  # (E, 2)
    b = np.roll(world_verts, -1, axis=0)
    e = b - a  # (E, 2)
    denom = cross2(d, e)  # (E,)
    ao = a[None, :, :] - o[:, None, :]  # (M, E, 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross2(ao, e[None, :, :]) / denom[None, :]  # (M, E)
        s = cross2(ao, d) / denom[None, :]
    valid = (np.abs(denom)[None, :] > 1e-15) & (s >= -1e-12) & (s <= 1 + 1e-12) & (t >= -1e-9)
    t = np.where(valid, np.maximum(t, 0.0), np.inf)
    # first min wins the argmin -> smaller edge index on exact vertex ties
    edge = np.argmin(t, axis=1)
    tmin = t[np.arange(len(o)), edge]
    hit = np.isfinite(tmin)
    return hit, tmin, edge


def edge_outward_normals(world_verts: np.ndarray) -> np.ndarray:
    """Unit outward normals per edge of a CCW polygon."""
    e = np.roll(world_verts, -1, axis=0) - world_verts
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    return n / np.hypot(n[:, 0], n[:, 1])[:, None]


def ray_polygon_first_hit(origin, direction, poly: Polygon, pose: Pose2):
    """First boundary hit of a single ray on a posed polygon, or None.

    ``direction`` must be unit length. The returned normal is the outward
    edge normal at the hit.
    """
    wv = poly.world_vertices(pose)
    hit, t, edge = ray_polygon_hits(np.asarray(origin, dtype=float)[None, :], direction, wv)
    if not hit[0]:
        return None
    normals = edge_outward_normals(wv)
    i = int(edge[0])
    point = np.asarray(origin, dtype=float) + t[0] * np.asarray(direction, dtype=float)
    return ContactHit(point=point, outward_normal=normals[i], t=float(t[0]), edge_index=i)


# ---------------------------------------------------------------------------
# cameras, textures, scenes


@dataclass(frozen=True)
class Camera:
    """Orthographic top-down camera over the planar workspace."""

    pixels_per_meter: float
    image_size: tuple  # (H, W)
    workspace_origin: np.ndarray  # world point at pixel (0, 0) center

    def __post_init__(self):
        if self.pixels_per_meter <= 0:
            raise GeometryError("pixels_per_meter must be positive")
        object.__setattr__(
            self, "workspace_origin", np.asarray(self.workspace_origin, dtype=float)
        )

    @classmethod
    def for_workspace(cls, extent, image_size) -> "Camera":
        """Camera whose pixel grid tiles the rectangle [0, ex] x [0, ey]."""
        ex, ey = float(extent[0]), float(extent[1])
        h, w = int(image_size[0]), int(image_size[1])
        ppm = w / ex
        if abs(h / ey - ppm) > 1e-9 * ppm:
            raise GeometryError("workspace aspect ratio must match the image")
        origin = np.array([0.5 / ppm, 0.5 / ppm])
        return cls(pixels_per_meter=ppm, image_size=(h, w), workspace_origin=origin)

    @property
    def center_uv(self) -> np.ndarray:
        h, w = self.image_size
        return np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    def pixel_to_world(self, uv) -> np.ndarray:
        return np.asarray(uv, dtype=float) / self.pixels_per_meter + self.workspace_origin

    def world_to_pixel(self, xy) -> np.ndarray:
        return (np.asarray(xy, dtype=float) - self.workspace_origin) * self.pixels_per_meter


@dataclass(frozen=True)
class TextureSpec:
    """Procedural background texture: constant color, checker, or value noise."""

    kind: str = "constant"  # constant | checker | noise
    base: tuple = (0.5, 0.5, 0.5)
    alt: tuple = (0.58, 0.58, 0.58)
    cell_px: int = 8
    amplitude: float = 0.08
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base": list(self.base),
            "alt": list(self.alt),
            "cell_px": self.cell_px,
            "amplitude": self.amplitude,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TextureSpec":
        return cls(
            kind=d["kind"],
            base=tuple(d["base"]),
            alt=tuple(d["alt"]),
            cell_px=int(d["cell_px"]),
            amplitude=float(d["amplitude"]),
            seed=int(d["seed"]),
        )


def render_background(tex: TextureSpec, image_size) -> np.ndarray:
    h, w = image_size
    if tex.kind == "constant":
        img = np.empty((h, w, 3))
        img[:] = tex.base
        return img
    if tex.kind == "checker":
        v, u = np.mgrid[0:h, 0:w]
        cells = ((u // tex.cell_px) + (v // tex.cell_px)) % 2
        img = np.where(cells[..., None] == 0, np.array(tex.base), np.array(tex.alt))
        return img.astype(float)
    if tex.kind == "noise":
        rng = np.random.default_rng(tex.seed)
        cells = max(2, tex.cell_px)
        gh, gw = h // cells + 2, w // cells + 2
        lattice = rng.random((gh, gw))
        v = np.arange(h) / cells
        u = np.arange(w) / cells
        v0 = v.astype(int)
        u0 = u.astype(int)
        fv = (v - v0)[:, None]
        fu = (u - u0)[None, :]
        n = (
            lattice[v0][:, u0] * (1 - fv) * (1 - fu)
            + lattice[v0 + 1][:, u0] * fv * (1 - fu)
            + lattice[v0][:, u0 + 1] * (1 - fv) * fu
            + lattice[v0 + 1][:, u0 + 1] * fv * fu
        )
        img = np.clip(np.array(tex.base) + tex.amplitude * (2 * n[..., None] - 1), 0, 1)
        return img
    raise GeometryError(f"unknown texture kind {tex.kind!r}")


@dataclass(frozen=True)
class SceneObject:
    polygon: Polygon
    pose: Pose2
    color: tuple = (0.2, 0.4, 0.8)

    def with_pose(self, pose: Pose2) -> "SceneObject":
        return replace(self, pose=pose)


@dataclass(frozen=True)
class Workspace:
    """A textured planar workspace with rigid polygonal objects on it."""

    extent: tuple = (0.4, 0.4)
    objects: tuple = ()
    texture: TextureSpec = field(default_factory=TextureSpec)

    def replace_object(self, index: int, obj: SceneObject) -> "Workspace":
        objs = list(self.objects)
        objs[index] = obj
        return replace(self, objects=tuple(objs))

    def without_object(self, index: int) -> "Workspace":
        objs = [o for i, o in enumerate(self.objects) if i != index]
        return replace(self, objects=tuple(objs))


def rasterize_scene(workspace: Workspace, camera: Camera):
    """Render the workspace into an RGB image and a boolean object mask.

    A pixel belongs to the mask exactly when its center lies inside some
    object. Objects whose bounds leave the workspace reject the scene.
    """
    h, w = camera.image_size
    img = render_background(workspace.texture, (h, w))
    mask = np.zeros((h, w), dtype=bool)
    ex, ey = workspace.extent
    for obj in workspace.objects:
        wv = obj.polygon.world_vertices(obj.pose)
        if (
            wv[:, 0].min() < 0
            or wv[:, 1].min() < 0
            or wv[:, 0].max() > ex
            or wv[:, 1].max() > ey
        ):
            raise SceneBoundsError("object outside the workspace bounds")
        lo = np.ceil(camera.world_to_pixel(wv.min(axis=0))).astype(int)
        hi = np.floor(camera.world_to_pixel(wv.max(axis=0))).astype(int)
        u0, v0 = max(lo[0], 0), max(lo[1], 0)
        u1, v1 = min(hi[0], w - 1), min(hi[1], h - 1)
        if u0 > u1 or v0 > v1:
            continue
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        centers = camera.pixel_to_world(np.stack([uu.ravel(), vv.ravel()], axis=1))
        inside = points_in_polygon(centers, wv).reshape(vv.shape)
        sub = mask[v0 : v1 + 1, u0 : u1 + 1]
        sub |= inside
        img[v0 : v1 + 1, u0 : u1 + 1][inside] = obj.color
    return img, mask


# ---------------------------------------------------------------------------
# image resampling


def rotate_image(img: np.ndarray, theta: float, fill) -> np.ndarray:
    """Rotate image content about the image center with bilinear resampling.

    Output pixel x samples the input at ``c + R(theta) (x - c)`` where c is
    the image center ((W-1)/2, (H-1)/2); a feature at input pixel q therefore
    appears at ``rotate_point(q, -theta, c)``. Samples falling outside the
    source take the fill color.
    """
    theta = canonical_angle(theta)
    if theta == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    chans = img.shape[2] if img.ndim == 3 else 1
    src = img if img.ndim == 3 else img[..., None]
    fill = np.broadcast_to(np.asarray(fill, dtype=float), (chans,))
    cu, cv = (w - 1) / 2.0, (h - 1) / 2.0
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    du, dv = uu - cu, vv - cv
    ct, st = math.cos(theta), math.sin(theta)
    su = cu + ct * du - st * dv
    sv = cv + st * du + ct * dv
    u0 = np.floor(su).astype(int)
    v0 = np.floor(sv).astype(int)
    fu = (su - u0)[..., None]
    fv = (sv - v0)[..., None]
    out_of_range = (u0 < -1) | (u0 >= w) | (v0 < -1) | (v0 >= h)
    padded = np.empty((h + 2, w + 2, chans))
    padded[:] = fill
    padded[1 : h + 1, 1 : w + 1] = src
    u0c = np.clip(u0, -1, w - 1) + 1
    v0c = np.clip(v0, -1, h - 1) + 1
    tl = padded[v0c, u0c]
    tr = padded[v0c, u0c + 1]
    bl = padded[v0c + 1, u0c]
    br = padded[v0c + 1, u0c + 1]
    out = (
        tl * (1 - fu) * (1 - fv)
        + tr * fu * (1 - fv)
        + bl * (1 - fu) * fv
        + br * fu * fv
    )
    out[out_of_range] = fill
    return out if img.ndim == 3 else out[..., 0]


def rotate_mask(mask: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a boolean mask (bilinear on {0,1} then threshold at 0.5)."""
    return rotate_image(mask.astype(float), theta, 0.0) >= 0.5


# ---------------------------------------------------------------------------
# PPM / PGM serialization (P6 / P5, 8-bit)


def float_to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    h, w = img.shape[:2]
    data = float_to_u8(img)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    data = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm_tokens(f, n: int):
    tokens = []
    while len(tokens) < n:
        line = f.readline()
        if not line:
            raise ImageFormatError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ImageFormatError(f"expected P6, got {magic!r}")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(f, 3))
        if maxval != 255:
            raise ImageFormatError("only 8-bit PPM supported")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ImageFormatError("truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ImageFormatError(f"expected P5, got {magic!r}")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(f, 3))
        if maxval != 255:
            raise ImageFormatError("only 8-bit PGM supported")
        raw = f.read(w * h)
        if len(raw) != w * h:
            raise ImageFormatError("truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w) >= 128
