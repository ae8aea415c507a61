"""Rotation-stack inference, argmax grasp selection, the analytic antipodal
oracle, and the simulated grasp-evaluation harness.

Slab i of an affordance stack is the per-pixel affordance of a HORIZONTAL
grasp in the image rotated by i*pi/8: a pixel x in slab i corresponds to the
original-frame pixel rotate_point(x, i*pi/8, center) and to the world grasp
angle i*pi/8. Slab arrays are indexed [i, h, w, channel] with (h, w) =
(row, column).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .collection import N_ANGLE_BINS, SceneRecipe, bin_angle, generate_scene
from .geometry import (
    Camera,
    TextureSpec,
    Workspace,
    points_in_polygon,
    rasterize_scene,
    rotate_image,
    rotate_point,
    write_ppm,
)
from .mechanics import (
    AntipodalThresholds,
    GraspLine,
    GripperSpec,
    _antipodal_batch,
    closure_settle,
    contact_batch,
)
from .net import NetworkParams, forward, softmax


@dataclass(frozen=True)
class AffordanceStack:
    """(16, H, W, 3) per-angle affordance maps; per-pixel distributions."""

    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps)
        if m.ndim != 4 or m.shape[0] != N_ANGLE_BINS or m.shape[3] != 3:
            raise ValueError("stack must have shape (16, H, W, 3)")
        sums = m.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("per-pixel affordances must sum to 1")
        object.__setattr__(self, "maps", m)

    @property
    def positive(self) -> np.ndarray:
        """The 16 x H x W graspable-channel stack driving the argmax."""
        return self.maps[..., 0]


@dataclass(frozen=True)
class GraspDecision:
    bin_index: int
    pixel: tuple  # (h, w) in the rotated frame
    score: float
    world_grasp: GraspLine

    def to_dict(self) -> dict:
        return {
            "bin": self.bin_index,
            "pixel": [self.pixel[0], self.pixel[1]],
            "score": self.score,
            "world_center": self.world_grasp.center.tolist(),
            "world_angle": self.world_grasp.angle,
        }


def worker_count() -> int:
    """Worker cap from GRASPFORGE_THREADS (0 or unset = serial)."""
    try:
        return max(0, int(os.environ.get("GRASPFORGE_THREADS", "0")))
    except ValueError:
        return 0


def _border_median(image: np.ndarray) -> np.ndarray:
    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
    return np.median(border, axis=0)


def predict_stack(params: NetworkParams, image: np.ndarray, fill=None) -> AffordanceStack:
    """Softmax network outputs over the 16 rotations of the input image.

    ``fill`` colors out-of-frame pixels of the rotated images; defaults to
    the median border color (the background, for workspace images).
    """
    if fill is None:
        fill = _border_median(image)
    maps = np.empty((N_ANGLE_BINS,) + image.shape[:2] + (3,))
    for i in range(N_ANGLE_BINS):
        rotated = rotate_image(image, bin_angle(i), fill)
        maps[i] = softmax(forward(params, rotated).astype(np.float64))
    return AffordanceStack(maps)


def best_grasp(stack: AffordanceStack, camera: Camera) -> GraspDecision:
    """Global argmax over the positive stack, ties broken by smallest
    (bin, row, column); the winning pixel maps back to the original frame by
    rotating i*pi/8 about the image center, then through the camera."""
    g = stack.positive
    flat = int(np.argmax(g))  # first occurrence = smallest (i, h, w)
    i, h, w = np.unravel_index(flat, g.shape)
    theta = bin_angle(int(i))
    hh, ww = stack.maps.shape[1:3]
    center = np.array([(ww - 1) / 2.0, (hh - 1) / 2.0])
    uv = rotate_point(np.array([w, h], dtype=float), theta, center)
    world = camera.pixel_to_world(uv)
    return GraspDecision(
        bin_index=int(i),
        pixel=(int(h), int(w)),
        score=float(g[i, h, w]),
        world_grasp=GraspLine(world, theta, frame="world"),
    )


def oracle_affordance(
    workspace: Workspace,
    gripper: GripperSpec,
    thresholds: AntipodalThresholds,
    camera: Camera,
) -> AffordanceStack:
    """Hard-label stack from the antipodal predicate evaluated on the true
    scene geometry.

    Per bin, each pixel is classified by a grasp at the pixel's back-rotated
    world point with angle i*pi/8: positive when contacts exist, satisfy the
    antipodal conditions, clear the friction cone and the minimum thickness;
    negative when on an object but not graspable so; background off-object.
    """
    h, w = camera.image_size
    maps = np.zeros((N_ANGLE_BINS, h, w, 3))
    maps[..., 2] = 1.0
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
    center = camera.center_uv
    world_verts = [o.polygon.world_vertices(o.pose) for o in workspace.objects]
    for i in range(N_ANGLE_BINS):
        theta = bin_angle(i)
        world = camera.pixel_to_world(rotate_point(pix, theta, center))
        owner = np.full(len(world), -1)
        for oi, wv in enumerate(world_verts):
            inside = points_in_polygon(world, wv)
            owner[inside & (owner < 0)] = oi
        pos = np.zeros(len(world), dtype=bool)
        neg = np.zeros(len(world), dtype=bool)
        for oi, wv in enumerate(world_verts):
            sel = owner == oi
            if not sel.any():
                continue
            valid, c1, n1, c2, n2 = contact_batch(wv, world[sel], theta, gripper)
            anti, a1, a2, sep = _antipodal_batch(c1, n1, c2, n2, thresholds)
            good = (
                valid
                & anti
                & (sep >= gripper.min_thickness)
                & (np.maximum(a1, a2) <= gripper.friction_angle)
            )
            idx = np.flatnonzero(sel)
            pos[idx[good]] = True
            neg[idx[~good]] = True
        slab = maps[i].reshape(-1, 3)
        slab[pos] = (1.0, 0.0, 0.0)
        slab[neg] = (0.0, 1.0, 0.0)
    return AffordanceStack(maps)


# ---------------------------------------------------------------------------
# evaluation harness


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "singular"  # singular | multiple | clutter | texture_shift
    n_objects: int = 1
    texture: str = "constant"

    def __post_init__(self):
        if self.kind not in ("singular", "multiple", "clutter", "texture_shift"):
            raise ValueError(f"unknown scenario {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_objects": self.n_objects, "texture": self.texture}


def make_texture(name: str, seed: int = 0) -> TextureSpec:
    if name == "constant":
        return TextureSpec(kind="constant", seed=seed)
    if name == "checker":
        return TextureSpec(kind="checker", base=(0.46, 0.46, 0.46),
                           alt=(0.54, 0.54, 0.54), cell_px=8, seed=seed)
    if name == "noise":
        return TextureSpec(kind="noise", base=(0.5, 0.5, 0.5), amplitude=0.08,
                           cell_px=6, seed=seed)
    raise ValueError(f"unknown texture {name!r}")


@dataclass
class EvalContext:
    camera: Camera
    gripper: GripperSpec
    thresholds: AntipodalThresholds
    recipe: SceneRecipe = field(default_factory=SceneRecipe)
    extent: tuple = (0.4, 0.4)
    settle_max_iters: int = 40


def _plan(policy, workspace: Workspace, image: np.ndarray, ctx: EvalContext) -> GraspDecision:
    if policy["kind"] == "oracle":
        stack = oracle_affordance(workspace, ctx.gripper, ctx.thresholds, ctx.camera)
    elif policy["kind"] == "net":
        stack = predict_stack(policy["params"], image)
    else:
        raise ValueError(f"unknown policy {policy['kind']!r}")
    return best_grasp(stack, ctx.camera)


def _run_episode(policy, scenario: ScenarioSpec, ctx: EvalContext, seed_seq) -> dict:
    rng = np.random.default_rng(seed_seq)
    n_obj = scenario.n_objects if scenario.kind in ("multiple", "clutter") else 1
    recipe = ctx.recipe
    if scenario.kind == "clutter":
        recipe = SceneRecipe(**{**recipe.to_dict(), "scale": 0.8 * recipe.scale})
    texture = make_texture(scenario.texture, seed=int(rng.integers(2**31)))
    ws = generate_scene(
        int(rng.integers(2**63)), recipe, extent=ctx.extent, texture=texture,
        n_objects=n_obj,
    )
    successes = 0
    attempts = 0
    bins = [0] * N_ANGLE_BINS
    taxonomy: dict = {}
    fails_per_object = [0] * n_obj
    consecutive_background = 0
    # singular episodes are one attempt; multi/clutter get 3 per object
    max_attempts = 3 * n_obj + 3 if scenario.kind in ("multiple", "clutter") else 1
    while ws.objects and attempts < max_attempts:
        image, _ = rasterize_scene(ws, ctx.camera)
        decision = _plan(policy, ws, image, ctx)
        attempts += 1
        bins[decision.bin_index] += 1
        point = decision.world_grasp.center
        target = next(
            (
                k
                for k, obj in enumerate(ws.objects)
                if points_in_polygon(point, obj.polygon.world_vertices(obj.pose))
            ),
            None,
        )
        if target is None:
            taxonomy["background_grasp"] = taxonomy.get("background_grasp", 0) + 1
            consecutive_background += 1
            if consecutive_background >= 3:
                break
            continue
        consecutive_background = 0
        obj = ws.objects[target]
        result = closure_settle(
            obj.polygon, obj.pose, decision.world_grasp, ctx.gripper,
            ctx.thresholds, ctx.settle_max_iters,
        )
        if result.success:
            successes += 1
            ws = ws.without_object(target)
            fails_per_object.pop(target)
        else:
            taxonomy[result.failure_reason] = taxonomy.get(result.failure_reason, 0) + 1
            ws = ws.replace_object(target, obj.with_pose(result.final_pose))
            fails_per_object[target] += 1
            if fails_per_object[target] >= 3:
                # a thrice-failed object is skipped, as in clutter protocols
                ws = ws.without_object(target)
                fails_per_object.pop(target)
    return {
        "successes": successes,
        "attempts": attempts,
        "bins": bins,
        "taxonomy": taxonomy,
    }


def evaluate_policy(
    policy,
    scenario: ScenarioSpec,
    trials: int,
    seed: int,
    ctx: EvalContext,
    config_echo: dict | None = None,
) -> dict:
    """Run seeded episodes and aggregate a success-rate report.

    Episodes are independently seeded from (seed, episode), so reports are
    identical whether episodes run serially or on a worker pool.
    """
    seqs = [np.random.SeedSequence(entropy=seed, spawn_key=(9000, e)) for e in range(trials)]
    workers = worker_count()
    if workers > 1 and trials > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _run_episode(policy, scenario, ctx, s), seqs))
    else:
        results = [_run_episode(policy, scenario, ctx, s) for s in seqs]
    attempts = sum(r["attempts"] for r in results)
    successes = sum(r["successes"] for r in results)
    taxonomy: dict = {}
    bins = [0] * N_ANGLE_BINS
    for r in results:
        for k, v in r["taxonomy"].items():
            taxonomy[k] = taxonomy.get(k, 0) + v
        bins = [a + b for a, b in zip(bins, r["bins"])]
    report = {
        "scenario": scenario.to_dict(),
        "policy": policy["kind"],
        "trials": trials,
        "attempts": attempts,
        "successes": successes,
        "success_rate": successes / attempts if attempts else None,
        "per_bin_histogram": bins,
        "failure_taxonomy": dict(sorted(taxonomy.items())),
        "config_echo": config_echo or {},
    }
    if scenario.kind == "clutter":
        report["fidelity_caveat"] = (
            "clutter approximated by dense non-overlapping placement "
            "(min gap 1 px); true overlap/occlusion out of scope"
        )
    return report


def save_report(path, report: dict) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def load_report(path) -> dict:
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# rendering


AFFORDANCE_COLORS = np.array(
    [[0, 255, 0], [255, 0, 0], [0, 0, 255]], dtype=float
)  # positive green, negative red, background blue


def stack_to_images(stack: AffordanceStack) -> np.ndarray:
    """Color-render each slab: channel probabilities blend (G, R, B)."""
    probs = stack.maps  # (16, H, W, 3)
    rgb = probs @ (AFFORDANCE_COLORS / 255.0)
    return rgb


def write_stack_ppm(stack: AffordanceStack, prefix: str) -> list:
    paths = []
    rgb = stack_to_images(stack)
    for i in range(N_ANGLE_BINS):
        path = f"{prefix}_{i:02d}.ppm"
        write_ppm(path, rgb[i])
        paths.append(path)
    return paths


def render_label_map(y: np.ndarray) -> np.ndarray:
    """Label map to RGB bytes-scale floats: positive (0,255,0), negative
    (255,0,0), background (0,0,255); unlabeled pixels black."""
    return y @ (AFFORDANCE_COLORS / 255.0)


def draw_grasp_overlay(image: np.ndarray, pixel, angle: float, half_len_px: float) -> np.ndarray:
    """Green grasp-axis line and red center point, the paper's convention."""
    out = image.copy()
    h, w = out.shape[:2]
    u0, v0 = float(pixel[0]), float(pixel[1])
    d = np.array([math.cos(angle), math.sin(angle)])
    for t in np.linspace(-half_len_px, half_len_px, int(4 * half_len_px) + 1):
        u, v = int(round(u0 + t * d[0])), int(round(v0 + t * d[1]))
        if 0 <= u < w and 0 <= v < h:
            out[v, u] = (0.0, 1.0, 0.0)
    u, v = int(round(u0)), int(round(v0))
    if 0 <= u < w and 0 <= v < h:
        out[v, u] = (1.0, 0.0, 0.0)
    return out
