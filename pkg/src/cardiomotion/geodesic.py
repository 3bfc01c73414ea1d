"""Geodesic shooting: EPDiff integration and flow maps.

An initial velocity v0 determines the whole deformation path.  The
velocity evolves by

    dv/dt = -K [ (Dv)^T m + (Dm) v + m div v ],   m = L v,

integrated with forward Euler, and the deformation maps are accumulated
from the per-step velocities:

    forward:  phi_{k+1} = phi_k + dt * (v_k o phi_k)
    inverse:  phi_{k+1}^-1 (x) = phi_k^-1 (x - dt * v_k(x))

Both updates are compositions of grid primitives, so the registration
module can differentiate the same computation in reverse mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrationDivergedError
from .grid import (
    MapField,
    VectorField,
    bilinear_sample,
    compose,
    coordinate_arrays,
    ddx,
    ddy,
    identity_map,
    jacobian_determinant,
    map_to_displacement,
    warp_vector,
)
from .metric import MetricOperator, apply_L, apply_K


@dataclass
class ShootingConfig:
    """Time discretization of [0, 1] plus the metric operator."""

    num_steps: int
    operator: MetricOperator

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


@dataclass
class GeodesicPath:
    """Per-step velocities and the endpoint maps of one geodesic."""

    velocities: list
    inverse_map: MapField
    forward_map: MapField


def epdiff_rhs(op: MetricOperator, v: VectorField) -> VectorField:
    """Right-hand side of the geodesic velocity evolution."""
    vx, vy = v.x_component, v.y_component
    mx = op.multiply(vx)
    my = op.multiply(vy)
    # (Dv)^T m : row r is sum_c dv_c/dx_r * m_c
    ax = ddx(vx) * mx + ddx(vy) * my
    ay = ddy(vx) * mx + ddy(vy) * my
    # (Dm) v : row r is sum_c dm_r/dx_c * v_c
    bx = ddx(mx) * vx + ddy(mx) * vy
    by = ddx(my) * vx + ddy(my) * vy
    # m div v
    div = ddx(vx) + ddy(vy)
    cx = mx * div
    cy = my * div
    return VectorField(
        v.grid,
        -op.multiply(ax + bx + cx, inverse=True),
        -op.multiply(ay + by + cy, inverse=True),
    )


def integrate_epdiff(cfg: ShootingConfig, v0: VectorField) -> list:
    """Forward-Euler velocity sequence [v_0 .. v_{N-1}]."""
    cfg.operator._check(v0)
    dt = 1.0 / cfg.num_steps
    velocities = [v0]
    v = v0
    for k in range(cfg.num_steps - 1):
        rhs = epdiff_rhs(cfg.operator, v)
        vx = v.x_component + dt * rhs.x_component
        vy = v.y_component + dt * rhs.y_component
        if not (np.all(np.isfinite(vx)) and np.all(np.isfinite(vy))):
            raise IntegrationDivergedError(k + 1, "EPDiff integration")
        v = VectorField(v.grid, vx, vy)
        velocities.append(v)
    return velocities


def integrate_inverse_flow(cfg: ShootingConfig, velocities: list) -> MapField:
    """phi_1^-1 accumulated by semi-Lagrangian pullback."""
    if len(velocities) != cfg.num_steps:
        raise ValueError(f"expected {cfg.num_steps} velocities, got {len(velocities)}")
    grid = velocities[0].grid
    dt = 1.0 / cfg.num_steps
    xs, ys = coordinate_arrays(grid)
    px, py = xs.copy(), ys.copy()
    for v in velocities:
        qx = xs - dt * v.x_component
        qy = ys - dt * v.y_component
        px = bilinear_sample(px, qx, qy)
        py = bilinear_sample(py, qx, qy)
    return MapField(grid, VectorField(grid, px, py))


def integrate_forward_flow(cfg: ShootingConfig, velocities: list) -> MapField:
    """phi_1 accumulated by Euler steps along the velocity at the mapped point."""
    if len(velocities) != cfg.num_steps:
        raise ValueError(f"expected {cfg.num_steps} velocities, got {len(velocities)}")
    grid = velocities[0].grid
    dt = 1.0 / cfg.num_steps
    phi = identity_map(grid)
    for v in velocities:
        moved = warp_vector(v, phi)
        phi = MapField(
            grid,
            VectorField(grid, phi.x + dt * moved.x_component, phi.y + dt * moved.y_component),
        )
    return phi


def shoot(cfg: ShootingConfig, v0: VectorField) -> GeodesicPath:
    """Integrate EPDiff from v0 and accumulate both endpoint maps."""
    velocities = integrate_epdiff(cfg, v0)
    return GeodesicPath(
        velocities=velocities,
        inverse_map=integrate_inverse_flow(cfg, velocities),
        forward_map=integrate_forward_flow(cfg, velocities),
    )


__all__ = [
    "ShootingConfig",
    "GeodesicPath",
    "epdiff_rhs",
    "integrate_epdiff",
    "integrate_inverse_flow",
    "integrate_forward_flow",
    "shoot",
]
