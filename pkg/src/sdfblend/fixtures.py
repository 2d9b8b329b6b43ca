"""Canonical benchmark scenes used by the calibration runs and the
acceptance suite."""

from __future__ import annotations

from .geom import Box, SceneSpec, Sphere, union


def sphere_scene(radius: float = 0.4) -> SceneSpec:
    return SceneSpec(root=Sphere(radius=radius))


def chair_scene() -> SceneSpec:
    """Chair-like CSG fixture: seat slab, back rest, four legs."""
    seat = Box(half_extents=[0.18, 0.18, 0.02], translate=[0, 0, -0.05])
    back = Box(half_extents=[0.18, 0.02, 0.16], translate=[0, 0.16, 0.11])
    legs = [
        Box(half_extents=[0.025, 0.025, 0.14],
            translate=[sx * 0.15, sy * 0.15, -0.21])
        for sx in (-1, 1) for sy in (-1, 1)
    ]
    return SceneSpec(root=union(seat, back, *legs))
