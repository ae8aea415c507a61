"""Flat run configuration with unit-suffixed keys, file + flag override
merging, and construction of the domain objects each command needs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .collection import SceneRecipe
from .geometry import Camera
from .mechanics import AntipodalThresholds, GripperSpec
from .net import TrainConfig


@dataclass
class RunConfig:
    """Every tunable of the pipeline; defaults reproduce the shipped
    calibration. All keys appear in output config echoes."""

    image_size_px: int = 96
    workspace_extent_m: float = 0.4
    max_opening_m: float = 0.085
    friction_angle_deg: float = 45.0
    theta1_deg: float = 12.0
    theta2_deg: float = 170.0
    min_thickness_m: float = 0.01
    footprint_radius_px: int = 3
    settle_max_iters: int = 60
    texture: str = "constant"
    seed: int = 0
    # training
    learning_rate: float = 0.1
    decay_factor: float = 0.95
    decay_every: int = 1000
    batch_size: int = 8
    epochs: int = 14
    augment: str = "stochastic"  # full | stochastic | none
    # scene recipe scale knob (sizes in SceneRecipe defaults x scale)
    object_scale: float = 1.0

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "RunConfig":
        data: dict = {}
        if path:
            with open(path) as f:
                data.update(json.load(f))
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # -- derived domain objects -------------------------------------------

    def camera(self) -> Camera:
        ext = (self.workspace_extent_m, self.workspace_extent_m)
        return Camera.for_workspace(ext, (self.image_size_px, self.image_size_px))

    def gripper(self) -> GripperSpec:
        return GripperSpec(
            max_opening=self.max_opening_m,
            friction_angle=math.radians(self.friction_angle_deg),
            min_thickness=self.min_thickness_m,
        )

    def thresholds(self) -> AntipodalThresholds:
        return AntipodalThresholds(
            theta1=math.radians(self.theta1_deg),
            theta2=math.radians(self.theta2_deg),
        )

    def recipe(self) -> SceneRecipe:
        return SceneRecipe(scale=self.object_scale)

    def extent(self) -> tuple:
        return (self.workspace_extent_m, self.workspace_extent_m)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            decay_factor=self.decay_factor,
            decay_every=self.decay_every,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            augment=self.augment,
        )
