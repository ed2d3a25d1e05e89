"""Domain geometry: staggered (MAC) grid on a rectangle and its boundary mesh.

Velocity fields live on cell faces: the x-component u on vertical faces
(shape (nx+1, ny), u[i, j] at (i*hx, (j+1/2)*hy)) and the y-component v on
horizontal faces (shape (nx, ny+1), v[i, j] at ((i+1/2)*hx, j*hy)).  A face
field is stored flattened as ``concatenate([u.ravel(), v.ravel()])``.

Boundary nodes are the midpoints of the boundary edge segments, ordered
counterclockwise starting from the bottom-left segment.  Nodes never sit on
corners, so the corner flags are identically False and the arclength weights
sum to the perimeter exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DomainSpec:
    """Rectangle domain with grid resolutions."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError("nx and ny must both be >= 8 (slip stencil needs 3 rows)")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("side lengths must be positive")


@dataclass(frozen=True)
class Grid:
    """Staggered grid coordinate bookkeeping."""

    nx: int
    ny: int
    lx: float
    ly: float
    hx: float
    hy: float
    xc: np.ndarray  # cell-center x coordinates, shape (nx,)
    yc: np.ndarray  # cell-center y coordinates, shape (ny,)
    xf: np.ndarray  # x-face x coordinates, shape (nx+1,)
    yf: np.ndarray  # y-face y coordinates, shape (ny+1,)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_ufaces(self) -> int:
        return (self.nx + 1) * self.ny

    @property
    def n_vfaces(self) -> int:
        return self.nx * (self.ny + 1)

    @property
    def n_faces(self) -> int:
        return self.n_ufaces + self.n_vfaces

    def split(self, field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a flattened face field into (u, v) arrays."""
        u = field[..., : self.n_ufaces].reshape(field.shape[:-1] + (self.nx + 1, self.ny))
        v = field[..., self.n_ufaces :].reshape(field.shape[:-1] + (self.nx, self.ny + 1))
        return u, v

    def join(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Flatten (u, v) arrays into a single face field."""
        lead = u.shape[:-2]
        return np.concatenate(
            [u.reshape(lead + (self.n_ufaces,)), v.reshape(lead + (self.n_vfaces,))],
            axis=-1,
        )


@dataclass(frozen=True)
class BoundaryMesh:
    """Boundary nodes at edge-segment midpoints, counterclockwise."""

    positions: np.ndarray  # (n_nodes, 2)
    weights: np.ndarray  # (n_nodes,) arclength quadrature weights
    normals: np.ndarray  # (n_nodes, 2) outward unit normals
    tangents: np.ndarray  # (n_nodes, 2) unit tangents, (n, tau) right-handed
    corner: np.ndarray  # (n_nodes,) bool, identically False here
    edge_id: np.ndarray  # (n_nodes,) 0=bottom 1=right 2=top 3=left
    arclength: np.ndarray  # (n_nodes,) arclength coordinate of each node

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def perimeter(self) -> float:
        return float(np.sum(self.weights))


def build_geometry(spec: DomainSpec) -> tuple[Grid, BoundaryMesh]:
    """Build the staggered grid and its boundary mesh."""
    nx, ny, lx, ly = spec.nx, spec.ny, spec.lx, spec.ly
    hx, hy = lx / nx, ly / ny
    if hx * hy <= 0:
        raise ValueError("zero cell area")
    grid = Grid(
        nx=nx,
        ny=ny,
        lx=lx,
        ly=ly,
        hx=hx,
        hy=hy,
        xc=(np.arange(nx) + 0.5) * hx,
        yc=(np.arange(ny) + 0.5) * hy,
        xf=np.arange(nx + 1) * hx,
        yf=np.arange(ny + 1) * hy,
    )

    pos, wts, nrm, tng, eid = [], [], [], [], []
    # bottom, left to right
    for i in range(nx):
        pos.append(((i + 0.5) * hx, 0.0))
        wts.append(hx)
        nrm.append((0.0, -1.0))
        eid.append(0)
    # right, bottom to top
    for j in range(ny):
        pos.append((lx, (j + 0.5) * hy))
        wts.append(hy)
        nrm.append((1.0, 0.0))
        eid.append(1)
    # top, right to left
    for i in range(nx):
        pos.append(((nx - 0.5 - i) * hx, ly))
        wts.append(hx)
        nrm.append((0.0, 1.0))
        eid.append(2)
    # left, top to bottom
    for j in range(ny):
        pos.append((0.0, (ny - 0.5 - j) * hy))
        wts.append(hy)
        nrm.append((-1.0, 0.0))
        eid.append(3)

    nrm = np.asarray(nrm)
    # right-handed (n, tau): tau = rot90(n) = (-n_y, n_x), the CCW direction
    tng = np.column_stack([-nrm[:, 1], nrm[:, 0]])
    wts = np.asarray(wts)
    pos = np.asarray(pos)
    # arclength coordinate measured from the bottom-left corner along CCW
    seg_start = np.concatenate([[0.0], np.cumsum(wts)[:-1]])
    arclength = seg_start + 0.5 * wts

    mesh = BoundaryMesh(
        positions=pos,
        weights=wts,
        normals=nrm,
        tangents=tng,
        corner=np.zeros(len(wts), dtype=bool),
        edge_id=np.asarray(eid),
        arclength=arclength,
    )
    return grid, mesh


def boundary_integral(values: np.ndarray, mesh: BoundaryMesh) -> float:
    """Quadrature of a nodewise boundary scalar: sum(values_i * w_i)."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != mesh.n_nodes:
        raise ValueError(
            f"boundary field has {values.shape[-1]} nodes, mesh has {mesh.n_nodes}"
        )
    return values @ mesh.weights


def enforce_compatibility(a: np.ndarray, mesh: BoundaryMesh) -> np.ndarray:
    """Subtract the weighted mean so the boundary integral vanishes.

    Idempotent; the returned field has boundary_integral == 0 up to round-off.
    """
    a = np.asarray(a, dtype=float)
    mean = (a @ mesh.weights) / mesh.perimeter
    return a - mean[..., None] if a.ndim > 1 else a - mean


def tangential_derivative(values: np.ndarray, mesh: BoundaryMesh) -> np.ndarray:
    """Cyclic centered arclength derivative of a nodewise boundary scalar."""
    values = np.asarray(values, dtype=float)
    s = mesh.arclength
    p = mesh.perimeter
    vp = np.roll(values, -1, axis=-1)
    vm = np.roll(values, 1, axis=-1)
    ds = (np.roll(s, -1) - np.roll(s, 1)) % p
    return (vp - vm) / ds
