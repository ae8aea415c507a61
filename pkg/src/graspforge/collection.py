"""Trial-and-error grasp data collection with the corrective strategy,
label/mask construction, augmentation, and dataset persistence.

A collected sample stores the grasp angle, the grasp pixel, the object mask,
the workspace image and a success label. Successful trials re-record the
image and mask AFTER the object settled into an antipodal contact pose, so
every stored positive depicts a graspable configuration.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Camera,
    Polygon,
    Pose2,
    SceneObject,
    TextureSpec,
    Workspace,
    canonical_angle,
    rasterize_scene,
    read_pgm,
    read_ppm,
    rotate_image,
    rotate_mask,
    rotate_point,
    write_pgm,
    write_ppm,
)
from .mechanics import (
    AntipodalThresholds,
    GraspLine,
    GripperSpec,
    SettleResult,
    closure_settle,
)

N_ANGLE_BINS = 16
BIN_WIDTH = math.pi / 8.0

POSITIVE_WEIGHT = 120.0
NEGATIVE_WEIGHT = 120.0
BACKGROUND_WEIGHT = 0.1

ROTATION_DEGS = tuple(range(-5, 6))  # slight-rotation augmentation grid


class NoObjectError(ValueError):
    """Candidate sampling requires at least one object pixel."""


class CorruptDatasetError(ValueError):
    """Dataset failed count or checksum verification."""


def bin_angle(index: int) -> float:
    return (index % N_ANGLE_BINS) * BIN_WIDTH


def quantize_angle(angle: float) -> int:
    return int(round(canonical_angle(angle) / BIN_WIDTH)) % N_ANGLE_BINS


@dataclass
class GraspSample:
    """One grasp trial: S = (angle, pixel, object mask, image; label)."""

    angle: float  # continuous, radians
    bin_index: int
    pixel: tuple  # (u, v)
    mask: np.ndarray  # bool (H, W)
    image: np.ndarray  # float (H, W, 3)
    label: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass(frozen=True)
class SceneRecipe:
    """Size bounds for procedural objects, tied to the gripper opening so
    both graspable and ungraspable trials occur.

    Every shape family carries parallel face pairs (rectangles, even-sided
    regular polygons, centrally symmetric hulls, fine-faceted discs, L arms),
    so scenes are graspable at SOME angle while random trial angles still
    fail often (slip, corner contacts, axes wider than the opening).
    """

    rect_long: tuple = (0.028, 0.075)
    rect_short: tuple = (0.02, 0.05)
    ngon_radius: tuple = (0.015, 0.03)
    hull_radius: tuple = (0.016, 0.03)
    hull_points: tuple = (3, 5)  # mirrored to 6..10 before the hull
    disc_radius: tuple = (0.013, 0.025)
    l_arm: tuple = (0.04, 0.065)
    l_thickness: tuple = (0.02, 0.03)
    margin: float = 0.05  # keep posed objects this far inside the workspace
    scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "rect_long": list(self.rect_long),
            "rect_short": list(self.rect_short),
            "ngon_radius": list(self.ngon_radius),
            "hull_radius": list(self.hull_radius),
            "hull_points": list(self.hull_points),
            "disc_radius": list(self.disc_radius),
            "l_arm": list(self.l_arm),
            "l_thickness": list(self.l_thickness),
            "margin": self.margin,
            "scale": self.scale,
        }


def _recenter(verts: np.ndarray) -> np.ndarray:
    return verts - verts.mean(axis=0)


def _rect_vertices(w: float, h: float) -> np.ndarray:
    return np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])


def _ngon_vertices(radius: float, sides: int) -> np.ndarray:
    ang = np.linspace(0, 2 * np.pi, sides, endpoint=False)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _min_caliper_width(verts: np.ndarray) -> float:
    """Minimum width of a convex polygon (attained at an edge normal)."""
    e = np.roll(verts, -1, axis=0) - verts
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    n /= np.hypot(n[:, 0], n[:, 1])[:, None]
    proj = verts @ n.T  # (V, E) projections onto each edge normal
    return float((proj.max(axis=0) - proj.min(axis=0)).min())


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = sorted(map(tuple, points))
    if len(pts) < 3:
        raise ValueError("need >= 3 points")

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and (
                (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])
            ) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def _l_vertices(arm_a: float, arm_b: float, thickness: float) -> np.ndarray:
    t = thickness
    return _recenter(
        np.array([[0, 0], [arm_a, 0], [arm_a, t], [t, t], [t, arm_b], [0, arm_b]])
    )


def disc_polygon(radius: float, sides: int = 96) -> Polygon:
    """Fine regular polygon standing in for a disc."""
    return Polygon(_ngon_vertices(radius, sides))


def sample_polygon(rng: np.random.Generator, recipe: SceneRecipe) -> Polygon:
    """Draw one procedural shape: rectangle, even regular n-gon, centrally
    symmetric convex hull, disc, or L-shape."""
    s = recipe.scale
    kind = rng.choice(
        ["rect", "ngon", "hull", "disc", "lshape"], p=[0.22, 0.20, 0.35, 0.05, 0.18]
    )
    if kind == "rect":
        w = rng.uniform(*recipe.rect_long) * s
        h = rng.uniform(*recipe.rect_short) * s
        return Polygon(_rect_vertices(w, h))
    if kind == "ngon":
        n = int(rng.choice([4, 6, 8], p=[0.35, 0.25, 0.4]))
        r = rng.uniform(*recipe.ngon_radius) * s
        return Polygon(_ngon_vertices(r, n))
    if kind == "hull":
        for _ in range(32):
            m = int(rng.integers(recipe.hull_points[0], recipe.hull_points[1] + 1))
            r = rng.uniform(*recipe.hull_radius) * s
            ang = rng.uniform(0, 2 * np.pi, m)
            pts = rng.uniform(0.45 * r, r, m)[:, None] * np.stack(
                [np.cos(ang), np.sin(ang)], axis=1
            )
            pts = np.concatenate([pts, -pts])  # central symmetry: parallel faces
            try:
                hull = _convex_hull(pts)
                if len(hull) >= 4 and _min_caliper_width(hull) >= 0.012 * s:
                    return Polygon(hull)
            except ValueError:
                continue
        raise RuntimeError("hull sampling failed repeatedly")
    if kind == "disc":
        r = rng.uniform(*recipe.disc_radius) * s
        return Polygon(_ngon_vertices(r, 64))
    a = rng.uniform(*recipe.l_arm) * s
    b = rng.uniform(*recipe.l_arm) * s
    t = rng.uniform(*recipe.l_thickness) * s
    return Polygon(_l_vertices(a, b, t))


def _object_color(rng: np.random.Generator) -> tuple:
    hue = rng.uniform(0, 1)
    sat = rng.uniform(0.65, 1.0)
    val = rng.uniform(0.55, 0.95)
    return tuple(round(c, 6) for c in colorsys.hsv_to_rgb(hue, sat, val))


def _pose_inside(
    rng: np.random.Generator, poly: Polygon, extent, margin: float
) -> Pose2 | None:
    radius = float(np.hypot(*poly.vertices.T).max())
    lo = margin + radius
    hi_x, hi_y = extent[0] - margin - radius, extent[1] - margin - radius
    if hi_x <= lo or hi_y <= lo:
        return None
    pos = np.array([rng.uniform(lo, hi_x), rng.uniform(lo, hi_y)])
    return Pose2(pos, rng.uniform(0, 2 * np.pi))


def _poses_clear(obj_a: SceneObject, obj_b: SceneObject, gap: float) -> bool:
    va = obj_a.polygon.world_vertices(obj_a.pose)
    vb = obj_b.polygon.world_vertices(obj_b.pose)
    ca, cb = va.mean(axis=0), vb.mean(axis=0)
    ra = np.hypot(*(va - ca).T).max()
    rb = np.hypot(*(vb - cb).T).max()
    return float(np.hypot(*(ca - cb))) > ra + rb + gap


def generate_scene(
    seed_seq,
    recipe: SceneRecipe,
    extent=(0.4, 0.4),
    texture: TextureSpec | None = None,
    n_objects: int = 1,
    gap: float = 1.0 / 240.0,
) -> Workspace:
    """Deterministic procedural scene with ``n_objects`` non-overlapping
    objects fully inside the workspace."""
    rng = np.random.default_rng(seed_seq)
    texture = texture if texture is not None else TextureSpec()
    objects: list[SceneObject] = []
    for _ in range(n_objects):
        placed = False
        for _ in range(400):
            poly = sample_polygon(rng, recipe)
            pose = _pose_inside(rng, poly, extent, recipe.margin)
            if pose is None:
                continue
            cand = SceneObject(poly, pose, _object_color(rng))
            if all(_poses_clear(cand, o, gap) for o in objects):
                objects.append(cand)
                placed = True
                break
        if not placed:
            raise RuntimeError(f"could not place object {len(objects)} of {n_objects}")
    return Workspace(extent=tuple(extent), objects=tuple(objects), texture=texture)


# ---------------------------------------------------------------------------
# trials


def sample_grasp_candidate(mask: np.ndarray, rng: np.random.Generator):
    """Uniform grasp pixel over the object mask and uniform angle bin."""
    coords = np.argwhere(mask)  # (n, 2) as (v, u)
    if len(coords) == 0:
        raise NoObjectError("mask has no object pixels")
    v, u = coords[rng.integers(len(coords))]
    bin_index = int(rng.integers(N_ANGLE_BINS))
    return (int(u), int(v)), bin_index


def run_trial(
    workspace: Workspace,
    camera: Camera,
    candidate,
    gripper: GripperSpec,
    thresholds: AntipodalThresholds,
    settle_max_iters: int = 40,
) -> tuple[GraspSample, SettleResult]:
    """Execute one grasp trial on a single-object scene.

    On success the workspace image and mask are re-recorded with the settled
    object pose and the sample is labelled 1; on failure the pre-trial image
    and mask are kept unchanged and the label is 0.
    """
    if len(workspace.objects) != 1:
        raise ValueError("collection trials expect a single-object scene")
    (u, v), bin_index = candidate
    angle = bin_angle(bin_index)
    image, mask = rasterize_scene(workspace, camera)
    if not mask[v, u]:
        raise ValueError("grasp pixel must lie on the object mask")
    obj = workspace.objects[0]
    grasp = GraspLine(camera.pixel_to_world((u, v)), angle, frame="world")
    result = closure_settle(
        obj.polygon, obj.pose, grasp, gripper, thresholds, settle_max_iters
    )
    meta = {
        "pre_pose": _pose_to_json(obj.pose),
        "post_pose": _pose_to_json(result.final_pose if result.success else obj.pose),
        "vertices": obj.polygon.vertices.tolist(),
        "color": list(obj.color),
        "texture": workspace.texture.to_dict(),
        "workspace_extent": list(workspace.extent),
        "failure_reason": result.failure_reason,
        "settle_iterations": result.iterations,
    }
    if result.success:
        settled = workspace.replace_object(0, obj.with_pose(result.final_pose))
        image, mask = rasterize_scene(settled, camera)
        label = 1
    else:
        label = 0
    sample = GraspSample(
        angle=angle,
        bin_index=bin_index,
        pixel=(u, v),
        mask=mask,
        image=image,
        label=label,
        meta=meta,
    )
    return sample, result


def collect_sample(
    root_seed: int,
    trial_index: int,
    camera: Camera,
    gripper: GripperSpec,
    thresholds: AntipodalThresholds,
    recipe: SceneRecipe,
    texture: TextureSpec | None = None,
    extent=(0.4, 0.4),
    settle_max_iters: int = 40,
) -> GraspSample:
    """One fully seeded trial; trial seeds derive from (root_seed, index) so
    parallel collection reproduces the serial dataset."""
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(trial_index,))
    rng = np.random.default_rng(ss)
    scene_seed = int(rng.integers(2**63))
    ws = generate_scene(scene_seed, recipe, extent=extent, texture=texture)
    _, mask = rasterize_scene(ws, camera)
    candidate = sample_grasp_candidate(mask, rng)
    sample, _ = run_trial(ws, camera, candidate, gripper, thresholds, settle_max_iters)
    sample.meta["trial_index"] = trial_index
    sample.meta["scene_seed"] = scene_seed
    sample.meta["thresholds"] = {
        "theta1": thresholds.theta1,
        "theta2": thresholds.theta2,
    }
    return sample


def _pose_to_json(pose: Pose2) -> dict:
    return {"position": pose.position.tolist(), "orientation": pose.orientation}


def pose_from_json(d: dict) -> Pose2:
    return Pose2(np.array(d["position"]), d["orientation"])


# ---------------------------------------------------------------------------
# labels and masks


def make_label_and_mask(sample: GraspSample, footprint_radius: int = 3):
    """Build the 3-channel one-hot label map Y and the train mask M.

    Channels are (positive, negative, background). Pixels within the label
    footprint of the grasp pixel AND on the object get the positive or
    negative channel per the trial label; off-object pixels get background;
    on-object pixels without a label are all-zero in Y and zeroed in M.
    """
    h, w = sample.mask.shape
    y = np.zeros((h, w, 3))
    m = np.ones((h, w, 3))
    u0, v0 = sample.pixel
    vv, uu = np.ogrid[0:h, 0:w]
    foot = ((uu - u0) ** 2 + (vv - v0) ** 2 <= footprint_radius**2) & sample.mask
    chan = 0 if sample.label == 1 else 1
    y[..., chan][foot] = 1.0
    y[..., 2][~sample.mask] = 1.0
    unlabeled = sample.mask & ~foot
    m[unlabeled] = 0.0
    return y, m


def apply_weighting(m: np.ndarray) -> np.ndarray:
    """Channel weighting of the train mask: positives and negatives by 120,
    background by 0.1."""
    return m * np.array([POSITIVE_WEIGHT, NEGATIVE_WEIGHT, BACKGROUND_WEIGHT])


# ---------------------------------------------------------------------------
# augmentation


def _background_fill(sample: GraspSample):
    tex = sample.meta.get("texture")
    if tex is not None:
        return np.array(tex["base"], dtype=float)
    # fall back to the median border color
    border = np.concatenate(
        [sample.image[0], sample.image[-1], sample.image[:, 0], sample.image[:, -1]]
    )
    return np.median(border, axis=0)


def _image_center(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


def _flip_sample(sample: GraspSample) -> GraspSample:
    h = sample.mask.shape[0]
    u, v = sample.pixel
    return replace(
        sample,
        angle=canonical_angle(-sample.angle),
        bin_index=(-sample.bin_index) % N_ANGLE_BINS,
        pixel=(u, h - 1 - v),
        mask=sample.mask[::-1].copy(),
        image=sample.image[::-1].copy(),
        meta=dict(sample.meta),
    )


def _rotate_sample(sample: GraspSample, delta: float, fill) -> GraspSample | None:
    """Rotate sample content by ``delta``; the continuous angle gains delta
    and the bin index is re-quantized. None when the grasp pixel leaves the
    frame."""
    h, w = sample.mask.shape
    c = _image_center(sample.image)
    p = rotate_point(np.array(sample.pixel, dtype=float), delta, c)
    u, v = int(round(p[0])), int(round(p[1]))
    if not (0 <= u < w and 0 <= v < h):
        return None
    angle = canonical_angle(sample.angle + delta)
    return replace(
        sample,
        angle=angle,
        bin_index=quantize_angle(angle),
        pixel=(u, v),
        mask=rotate_mask(sample.mask, -delta),
        image=rotate_image(sample.image, -delta, fill),
        meta=dict(sample.meta),
    )


def augment(sample: GraspSample) -> list[GraspSample]:
    """The product {identity, vertical flip} x {rotations -5..+5 deg}.

    Returns up to 22 variants in (flip, rotation) lexicographic order; the
    identity element (no flip, 0 deg) is always present. Variants whose
    transformed grasp pixel leaves the frame are dropped, so the drop count
    is 22 - len(result).
    """
    fill = _background_fill(sample)
    out: list[GraspSample] = []
    for flip in (False, True):
        base = _flip_sample(sample) if flip else sample
        for deg in ROTATION_DEGS:
            if deg == 0:
                var = replace(
                    base,
                    mask=base.mask.copy(),
                    image=base.image.copy(),
                    meta=dict(base.meta),
                )
            else:
                var = _rotate_sample(base, math.radians(deg), fill)
            if var is not None:
                var.meta["augment"] = {"flip": flip, "rotation_deg": deg}
                out.append(var)
    return out


# ---------------------------------------------------------------------------
# dataset persistence
#
# Layout: header.json, manifest.jsonl, images/NNNNNN.ppm, masks/NNNNNN.pgm.


@dataclass
class Dataset:
    path: str
    header: dict
    records: list

    def __len__(self) -> int:
        return len(self.records)

    def load_sample(self, index: int) -> GraspSample:
        rec = self.records[index]
        image = read_ppm(os.path.join(self.path, rec["image"]))
        mask = read_pgm(os.path.join(self.path, rec["mask"]))
        meta = {k: rec[k] for k in ("scene", "split") if k in rec}
        meta.update(rec.get("scene", {}))
        meta["trial_index"] = rec.get("trial_index")
        return GraspSample(
            angle=rec["angle"],
            bin_index=rec["bin"],
            pixel=tuple(rec["pixel"]),
            mask=mask,
            image=image,
            label=rec["label"],
            meta=meta,
        )


def _record_for(sample: GraspSample, index: int, split: str) -> dict:
    scene_keys = (
        "vertices",
        "pre_pose",
        "post_pose",
        "color",
        "texture",
        "workspace_extent",
        "scene_seed",
    )
    return {
        "index": index,
        "angle": sample.angle,
        "bin": sample.bin_index,
        "pixel": [sample.pixel[0], sample.pixel[1]],
        "label": sample.label,
        "split": split,
        "trial_index": sample.meta.get("trial_index", index),
        "image": f"images/{index:06d}.ppm",
        "mask": f"masks/{index:06d}.pgm",
        "scene": {k: sample.meta[k] for k in scene_keys if k in sample.meta},
    }


def write_dataset(path: str, samples, config_echo: dict | None = None) -> Dataset:
    """Write samples to ``path`` (manifest + header + image/mask files)."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    records = []
    n_pos = 0
    for i, sample in enumerate(samples):
        split = sample.meta.get("split", "train")
        rec = _record_for(sample, i, split)
        write_ppm(os.path.join(path, rec["image"]), sample.image)
        write_pgm(os.path.join(path, rec["mask"]), sample.mask)
        records.append(rec)
        n_pos += int(sample.label == 1)
    manifest = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    manifest_bytes = manifest.encode("utf-8")
    header = {
        "total": len(records),
        "positive": n_pos,
        "negative": len(records) - n_pos,
        "manifest_sha256": hashlib.sha256(manifest_bytes).hexdigest(),
        "config": config_echo or {},
    }
    with open(os.path.join(path, "manifest.jsonl"), "wb") as f:
        f.write(manifest_bytes)
    with open(os.path.join(path, "header.json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return Dataset(path=path, header=header, records=records)


def read_dataset(path: str) -> Dataset:
    """Load and verify a dataset; count or checksum mismatches raise
    CorruptDatasetError."""
    try:
        with open(os.path.join(path, "header.json")) as f:
            header = json.load(f)
        with open(os.path.join(path, "manifest.jsonl"), "rb") as f:
            manifest_bytes = f.read()
    except OSError as e:
        raise CorruptDatasetError(f"unreadable dataset at {path}: {e}") from e
    digest = hashlib.sha256(manifest_bytes).hexdigest()
    if digest != header.get("manifest_sha256"):
        raise CorruptDatasetError("manifest checksum mismatch")
    records = [json.loads(line) for line in manifest_bytes.decode("utf-8").splitlines()]
    n_pos = sum(1 for r in records if r["label"] == 1)
    if (
        header.get("total") != len(records)
        or header.get("positive") != n_pos
        or header.get("negative") != len(records) - n_pos
    ):
        raise CorruptDatasetError("header counts disagree with manifest records")
    for rec in records:
        for key in ("image", "mask"):
            if not os.path.exists(os.path.join(path, rec[key])):
                raise CorruptDatasetError(f"missing file {rec[key]}")
    return Dataset(path=path, header=header, records=records)


# ---------------------------------------------------------------------------
# training adapter


class TrainingSet:
    """Builds horizontal-frame training pairs (image, Y, M') from samples.

    The network is trained on the image rotated by the sample's quantized bin
    angle, which makes the stored grasp (approximately) horizontal; the label
    footprint is painted at the correspondingly rotated grasp pixel. Flip /
    slight-rotation augmentation composes into the same single resampling
    step.
    """

    def __init__(self, samples, footprint_radius: int = 3):
        self.samples = list(samples)
        self.footprint_radius = footprint_radius

    def __len__(self) -> int:
        return len(self.samples)

    def n_variants(self) -> int:
        return 2 * len(ROTATION_DEGS)

    def variant(self, flat: int):
        flip, rot = divmod(flat, len(ROTATION_DEGS))
        return bool(flip), ROTATION_DEGS[rot]

    def training_pair(self, index: int, flip: bool = False, rotation_deg: int = 0):
        sample = self.samples[index]
        base = _flip_sample(sample) if flip else sample
        delta = math.radians(rotation_deg)
        # augment rotation by delta then rotation to the horizontal frame by
        # the (unchanged) bin angle: one fused resample by bin_angle - delta
        theta = bin_angle(base.bin_index) - delta
        fill = _background_fill(base)
        image = rotate_image(base.image, theta, fill)
        mask = rotate_mask(base.mask, theta)
        c = _image_center(base.image)
        p = rotate_point(np.array(base.pixel, dtype=float), -theta, c)
        h, w = mask.shape
        u, v = int(round(p[0])), int(round(p[1]))
        u, v = min(max(u, 0), w - 1), min(max(v, 0), h - 1)
        horiz = replace(base, pixel=(u, v), mask=mask, image=image)
        y, m = make_label_and_mask(horiz, self.footprint_radius)
        return image, y, apply_weighting(m)
