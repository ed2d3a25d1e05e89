"""Discrete operators on the staggered grid.

Assembles divergence, gradient, rate-of-strain, face mass matrix, boundary
traces, the V-inner-product Gram matrix

    (u, v)_V = 2 (Du, Dv) + alpha * integral_Gamma u . v dgamma,

a divergence-free zero-normal-trace null-space basis built from interior
streamfunction values, the slip-Stokes eigenbasis, and the stationary Stokes
lifting of non-homogeneous boundary data (y . n = a, slip trace = b).

Conventions: see geometry module for field layout.  The constrained subspace
is parametrized by a streamfunction psi on interior vertices:

    u = d(psi)/dy,  v = -d(psi)/dx,

which makes the discrete divergence vanish identically and the normal trace
zero exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import BoundaryMesh, Grid, boundary_integral


# ---------------------------------------------------------------------------
# index helpers
# ---------------------------------------------------------------------------

def _uidx(grid: Grid, i, j):
    return i * grid.ny + j


def _vidx(grid: Grid, i, j):
    return grid.n_ufaces + i * (grid.ny + 1) + j


def _boundary_face_map(grid: Grid):
    """Per boundary node: flat index of its collocated normal face and the
    sign such that y.n = sign * face_value."""
    nx, ny = grid.nx, grid.ny
    idx, sgn = [], []
    for i in range(nx):  # bottom: n=(0,-1), y.n = -v[i,0]
        idx.append(_vidx(grid, i, 0))
        sgn.append(-1.0)
    for j in range(ny):  # right: y.n = +u[nx,j]
        idx.append(_uidx(grid, nx, j))
        sgn.append(1.0)
    for i in range(nx):  # top (right to left): y.n = +v[nx-1-i, ny]
        idx.append(_vidx(grid, nx - 1 - i, ny))
        sgn.append(1.0)
    for j in range(ny):  # left (top to bottom): y.n = -u[0, ny-1-j]
        idx.append(_uidx(grid, 0, ny - 1 - j))
        sgn.append(-1.0)
    return np.asarray(idx), np.asarray(sgn)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _assemble_div(grid: Grid) -> sp.csr_matrix:
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    rows, cols, vals = [], [], []
    for ci in range(nx):
        for cj in range(ny):
            c = ci * ny + cj
            rows += [c] * 4
            cols += [
                _uidx(grid, ci + 1, cj),
                _uidx(grid, ci, cj),
                _vidx(grid, ci, cj + 1),
                _vidx(grid, ci, cj),
            ]
            vals += [1.0 / hx, -1.0 / hx, 1.0 / hy, -1.0 / hy]
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_cells, grid.n_faces))


def _assemble_grad(grid: Grid) -> sp.csr_matrix:
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    rows, cols, vals = [], [], []
    for i in range(1, nx):
        for j in range(ny):
            f = _uidx(grid, i, j)
            rows += [f, f]
            cols += [i * ny + j, (i - 1) * ny + j]
            vals += [1.0 / hx, -1.0 / hx]
    for i in range(nx):
        for j in range(1, ny):
            f = _vidx(grid, i, j)
            rows += [f, f]
            cols += [i * ny + j, i * ny + j - 1]
            vals += [1.0 / hy, -1.0 / hy]
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_faces, grid.n_cells))


def _assemble_strain(grid: Grid):
    """Strain sample matrix and quadrature weights for 2*int |D|^2.

    Rows: D11 at cells, D22 at cells, D12 at vertices.  The returned weight
    vector w is such that 2*int(D11^2 + D22^2 + 2 D12^2) = (D x)^T diag(w) (D x).
    """
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    nc = grid.n_cells
    nvert = (nx + 1) * (ny + 1)
    rows, cols, vals = [], [], []
    # D11 = u_x at cells
    for ci in range(nx):
        for cj in range(ny):
            r = ci * ny + cj
            rows += [r, r]
            cols += [_uidx(grid, ci + 1, cj), _uidx(grid, ci, cj)]
            vals += [1.0 / hx, -1.0 / hx]
    # D22 = v_y at cells
    for ci in range(nx):
        for cj in range(ny):
            r = nc + ci * ny + cj
            rows += [r, r]
            cols += [_vidx(grid, ci, cj + 1), _vidx(grid, ci, cj)]
            vals += [1.0 / hy, -1.0 / hy]
    # D12 = (u_y + v_x)/2 at vertices (i, j), i=0..nx, j=0..ny
    def vtx(i, j):
        return 2 * nc + i * (ny + 1) + j

    for i in range(nx + 1):
        for j in range(ny + 1):
            r = vtx(i, j)
            # u_y
            if 1 <= j <= ny - 1:
                rows += [r, r]
                cols += [_uidx(grid, i, j), _uidx(grid, i, j - 1)]
                vals += [0.5 / hy, -0.5 / hy]
            elif j == 0:  # second-order one-sided at the bottom edge
                rows += [r, r, r]
                cols += [_uidx(grid, i, 0), _uidx(grid, i, 1), _uidx(grid, i, 2)]
                vals += [-1.0 / hy, 1.5 / hy, -0.5 / hy]
            else:  # j == ny, top edge
                rows += [r, r, r]
                cols += [
                    _uidx(grid, i, ny - 1),
                    _uidx(grid, i, ny - 2),
                    _uidx(grid, i, ny - 3),
                ]
                vals += [1.0 / hy, -1.5 / hy, 0.5 / hy]
            # v_x
            if 1 <= i <= nx - 1:
                rows += [r, r]
                cols += [_vidx(grid, i, j), _vidx(grid, i - 1, j)]
                vals += [0.5 / hx, -0.5 / hx]
            elif i == 0:
                rows += [r, r, r]
                cols += [_vidx(grid, 0, j), _vidx(grid, 1, j), _vidx(grid, 2, j)]
                vals += [-1.0 / hx, 1.5 / hx, -0.5 / hx]
            else:  # i == nx
                rows += [r, r, r]
                cols += [
                    _vidx(grid, nx - 1, j),
                    _vidx(grid, nx - 2, j),
                    _vidx(grid, nx - 3, j),
                ]
                vals += [1.0 / hx, -1.5 / hx, 0.5 / hx]

    D = sp.csr_matrix((vals, (rows, cols)), shape=(2 * nc + nvert, grid.n_faces))

    area = grid.cell_area
    w_vert = np.full((nx + 1, ny + 1), area)
    w_vert[0, :] *= 0.5
    w_vert[-1, :] *= 0.5
    w_vert[:, 0] *= 0.5
    w_vert[:, -1] *= 0.5
    w = np.concatenate(
        [np.full(nc, 2.0 * area), np.full(nc, 2.0 * area), 4.0 * w_vert.ravel()]
    )
    return D, w


def _assemble_mass(grid: Grid) -> np.ndarray:
    nx, ny = grid.nx, grid.ny
    area = grid.cell_area
    mu = np.full((nx + 1, ny), area)
    mu[0, :] *= 0.5
    mu[-1, :] *= 0.5
    mv = np.full((nx, ny + 1), area)
    mv[:, 0] *= 0.5
    mv[:, -1] *= 0.5
    return np.concatenate([mu.ravel(), mv.ravel()])


def _assemble_traces(grid: Grid, mesh: BoundaryMesh):
    """Tangential and normal trace matrices (n_bnodes x n_faces).

    The tangential trace extrapolates the first two tangential-velocity rows
    to the wall (linear extrapolation, second order); the normal trace is the
    collocated boundary-normal face value, exact.
    """
    nx, ny = grid.nx, grid.ny
    nb = mesh.n_nodes
    rows, cols, vals = [], [], []

    def add(r, c4, v4):
        rows.extend([r] * len(c4))
        cols.extend(c4)
        vals.extend(v4)

    r = 0
    for i in range(nx):  # bottom, tau=(1,0): u trace
        add(
            r,
            [_uidx(grid, i, 0), _uidx(grid, i + 1, 0), _uidx(grid, i, 1), _uidx(grid, i + 1, 1)],
            [0.75, 0.75, -0.25, -0.25],
        )
        r += 1
    for j in range(ny):  # right, tau=(0,1): v trace
        add(
            r,
            [_vidx(grid, nx - 1, j), _vidx(grid, nx - 1, j + 1), _vidx(grid, nx - 2, j), _vidx(grid, nx - 2, j + 1)],
            [0.75, 0.75, -0.25, -0.25],
        )
        r += 1
    for i in range(nx):  # top (right to left), tau=(-1,0): -u trace
        ci = nx - 1 - i
        add(
            r,
            [_uidx(grid, ci, ny - 1), _uidx(grid, ci + 1, ny - 1), _uidx(grid, ci, ny - 2), _uidx(grid, ci + 1, ny - 2)],
            [-0.75, -0.75, 0.25, 0.25],
        )
        r += 1
    for j in range(ny):  # left (top to bottom), tau=(0,-1): -v trace
        cj = ny - 1 - j
        add(
            r,
            [_vidx(grid, 0, cj), _vidx(grid, 0, cj + 1), _vidx(grid, 1, cj), _vidx(grid, 1, cj + 1)],
            [-0.75, -0.75, 0.25, 0.25],
        )
        r += 1
    T_tan = sp.csr_matrix((vals, (rows, cols)), shape=(nb, grid.n_faces))

    bidx, bsgn = _boundary_face_map(grid)
    T_nrm = sp.csr_matrix(
        (bsgn, (np.arange(nb), bidx)), shape=(nb, grid.n_faces)
    )
    return T_tan, T_nrm


def _assemble_nullspace(grid: Grid) -> sp.csr_matrix:
    """Streamfunction basis of the div-free, zero-normal-trace subspace."""
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    rows, cols, vals = [], [], []
    for i in range(1, nx):
        for j in range(1, ny):
            c = (i - 1) * (ny - 1) + (j - 1)
            # u[i, j-1] += psi/hy ; u[i, j] -= psi/hy
            rows += [_uidx(grid, i, j - 1), _uidx(grid, i, j)]
            cols += [c, c]
            vals += [1.0 / hy, -1.0 / hy]
            # v[i-1, j] -= psi/hx ; v[i, j] += psi/hx
            rows += [_vidx(grid, i - 1, j), _vidx(grid, i, j)]
            cols += [c, c]
            vals += [-1.0 / hx, 1.0 / hx]
    return sp.csr_matrix(
        (vals, (rows, cols)), shape=(grid.n_faces, (nx - 1) * (ny - 1))
    )


def _assemble_cell_center(grid: Grid):
    """Interpolation to cell centers and the cell-center velocity gradient.

    Icc: (2*nc x n_faces), rows [u_cc; v_cc].
    Gcc: (4*nc x n_faces), rows [u_x; u_y; v_x; v_y] at cell centers.
    """
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    nc = grid.n_cells
    ri, ci_, vi = [], [], []
    for ci in range(nx):
        for cj in range(ny):
            c = ci * ny + cj
            ri += [c, c]
            ci_ += [_uidx(grid, ci, cj), _uidx(grid, ci + 1, cj)]
            vi += [0.5, 0.5]
            ri += [nc + c, nc + c]
            ci_ += [_vidx(grid, ci, cj), _vidx(grid, ci, cj + 1)]
            vi += [0.5, 0.5]
    Icc = sp.csr_matrix((vi, (ri, ci_)), shape=(2 * nc, grid.n_faces))

    rows, cols, vals = [], [], []

    def cell(ci, cj):
        return ci * ny + cj

    for ci in range(nx):
        for cj in range(ny):
            c = cell(ci, cj)
            # u_x exact from faces
            rows += [c, c]
            cols += [_uidx(grid, ci + 1, cj), _uidx(grid, ci, cj)]
            vals += [1.0 / hx, -1.0 / hx]
            # v_y exact from faces
            r = 3 * nc + c
            rows += [r, r]
            cols += [_vidx(grid, ci, cj + 1), _vidx(grid, ci, cj)]
            vals += [1.0 / hy, -1.0 / hy]
    # u_y and v_x by centered differences of the cc-interpolated values,
    # second-order one-sided at boundary cells
    Icc_u = Icc[:nc]
    Icc_v = Icc[nc:]
    Duy = sp.lil_matrix((nc, nc))
    Dvx = sp.lil_matrix((nc, nc))
    for ci in range(nx):
        for cj in range(ny):
            c = cell(ci, cj)
            if 1 <= cj <= ny - 2:
                Duy[c, cell(ci, cj + 1)] = 0.5 / hy
                Duy[c, cell(ci, cj - 1)] = -0.5 / hy
            elif cj == 0:
                Duy[c, cell(ci, 0)] = -1.5 / hy
                Duy[c, cell(ci, 1)] = 2.0 / hy
                Duy[c, cell(ci, 2)] = -0.5 / hy
            else:
                Duy[c, cell(ci, ny - 1)] = 1.5 / hy
                Duy[c, cell(ci, ny - 2)] = -2.0 / hy
                Duy[c, cell(ci, ny - 3)] = 0.5 / hy
            if 1 <= ci <= nx - 2:
                Dvx[c, cell(ci + 1, cj)] = 0.5 / hx
                Dvx[c, cell(ci - 1, cj)] = -0.5 / hx
            elif ci == 0:
                Dvx[c, cell(0, cj)] = -1.5 / hx
                Dvx[c, cell(1, cj)] = 2.0 / hx
                Dvx[c, cell(2, cj)] = -0.5 / hx
            else:
                Dvx[c, cell(nx - 1, cj)] = 1.5 / hx
                Dvx[c, cell(nx - 2, cj)] = -2.0 / hx
                Dvx[c, cell(nx - 3, cj)] = 0.5 / hx
    Gexact = sp.csr_matrix((vals, (rows, cols)), shape=(4 * nc, grid.n_faces))
    Pad = sp.vstack(
        [
            sp.csr_matrix((nc, grid.n_faces)),
            (Duy.tocsr() @ Icc_u),
            (Dvx.tocsr() @ Icc_v),
            sp.csr_matrix((nc, grid.n_faces)),
        ]
    )
    Gcc = (Gexact + Pad).tocsr()
    return Icc, Gcc


@dataclass
class DiscreteOperators:
    """Assembled discrete operators for one (grid, mesh, alpha, nu)."""

    grid: Grid
    mesh: BoundaryMesh
    alpha: float
    nu: float
    Div: sp.csr_matrix  # faces -> cells
    Grad: sp.csr_matrix  # cells -> faces (zero boundary rows)
    Dstrain: sp.csr_matrix  # faces -> strain sample points
    w_strain: np.ndarray  # quadrature weights, 2*int|D|^2 = x^T D^T W D x
    M: np.ndarray  # diagonal face mass
    G_visc: sp.csr_matrix  # 2 (Du, Dv)
    G_V: sp.csr_matrix  # full V-Gram with alpha boundary term
    T_tan: sp.csr_matrix  # tangential trace at boundary nodes
    T_nrm: sp.csr_matrix  # normal trace at boundary nodes (exact)
    Z: sp.csr_matrix  # null-space basis (faces x interior vertices)
    Icc: sp.csr_matrix  # faces -> cell-center velocities (2 comps)
    Gcc: sp.csr_matrix  # faces -> cell-center gradient (4 comps)
    bface_idx: np.ndarray  # boundary-normal face per boundary node
    bface_sgn: np.ndarray  # sign: y.n = sgn * face value
    _lift_cache: dict = field(default_factory=dict, repr=False)

    @property
    def subspace_dim(self) -> int:
        return (self.grid.nx - 1) * (self.grid.ny - 1)

    def h_inner(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((x * self.M) @ y)

    def h_norm(self, x: np.ndarray) -> float:
        return float(np.sqrt((x * self.M) @ x))

    def v_gram_with_coeff(self, coeff: np.ndarray) -> sp.csr_matrix:
        """V-Gram with a nodewise boundary coefficient replacing alpha."""
        coeff = np.broadcast_to(np.asarray(coeff, float), (self.mesh.n_nodes,))
        if np.any(coeff < 0):
            raise ValueError("boundary coefficient must be nonnegative")
        wb = self.mesh.weights * coeff
        B = self.T_tan.T @ sp.diags(wb) @ self.T_tan + self.T_nrm.T @ sp.diags(wb) @ self.T_nrm
        return (self.G_visc + B).tocsr()


def assemble_operators(
    grid: Grid, mesh: BoundaryMesh, alpha: float, nu: float
) -> DiscreteOperators:
    """Assemble all discrete operators.  See module docstring."""
    if nu <= 0:
        raise ValueError("viscosity nu must be positive")
    if alpha < 0:
        raise ValueError("slip coefficient alpha must be nonnegative")
    if grid.cell_area <= 0:
        raise ValueError("zero cell area")
    Div = _assemble_div(grid)
    Grad = _assemble_grad(grid)
    D, w = _assemble_strain(grid)
    M = _assemble_mass(grid)
    T_tan, T_nrm = _assemble_traces(grid, mesh)
    G_visc = (D.T @ sp.diags(w) @ D).tocsr()
    wb = mesh.weights * alpha
    G_V = (
        G_visc
        + T_tan.T @ sp.diags(wb) @ T_tan
        + T_nrm.T @ sp.diags(wb) @ T_nrm
    ).tocsr()
    Z = _assemble_nullspace(grid)
    Icc, Gcc = _assemble_cell_center(grid)
    bidx, bsgn = _boundary_face_map(grid)
    return DiscreteOperators(
        grid=grid,
        mesh=mesh,
        alpha=alpha,
        nu=nu,
        Div=Div,
        Grad=Grad,
        Dstrain=D,
        w_strain=w,
        M=M,
        G_visc=G_visc,
        G_V=G_V,
        T_tan=T_tan,
        T_nrm=T_nrm,
        Z=Z,
        Icc=Icc,
        Gcc=Gcc,
        bface_idx=bidx,
        bface_sgn=bsgn,
    )


# ---------------------------------------------------------------------------
# eigenbasis
# ---------------------------------------------------------------------------

@dataclass
class GalerkinBasis:
    """Slip-Stokes eigenpairs on the constrained subspace.

    Fields e_k are H-orthonormal face velocity fields with
    (e_i, e_j)_V = lambda_i delta_ij for the V-form built with
    ``boundary_coeff`` (the state basis uses alpha; the adjoint variant uses
    alpha + a/nu when a is time-independent).
    """

    n: int
    eigenvalues: np.ndarray  # (n,), ascending, > 0
    fields: np.ndarray  # (n_faces, n), H-orthonormal columns
    boundary_coeff: np.ndarray  # (n_bnodes,)
    is_adjoint_variant: bool = False

    def __post_init__(self):
        # cached mass-weighted fields for projections
        self._mfields = None

    def mass_fields(self, ops: DiscreteOperators) -> np.ndarray:
        if self._mfields is None:
            self._mfields = self.fields * ops.M[:, None]
        return self._mfields


def stokes_eigenbasis(
    ops: DiscreteOperators, n: int, boundary_coeff=None
) -> GalerkinBasis:
    """Dense generalized symmetric eigensolve on the constrained subspace."""
    if boundary_coeff is None:
        boundary_coeff = ops.alpha
    coeff = np.broadcast_to(np.asarray(boundary_coeff, float), (ops.mesh.n_nodes,)).copy()
    if np.any(coeff < 0):
        raise ValueError("boundary_coeff must be nonnegative")
    if n > ops.subspace_dim:
        raise ValueError(
            f"requested {n} modes but subspace dimension is {ops.subspace_dim}"
        )
    G = ops.v_gram_with_coeff(coeff)
    Z = ops.Z
    A = (Z.T @ G @ Z).toarray()
    B = (Z.T @ sp.diags(ops.M) @ Z).toarray()
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    try:
        lam, vecs = scipy.linalg.eigh(A, B)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    lam = lam[:n]
    vecs = vecs[:, :n]
    E = Z @ vecs
    # sign convention: first component with significant magnitude is positive
    for k in range(n):
        col = E[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.max(np.abs(col)))
        if col[nz[0]] < 0:
            E[:, k] = -col
    is_adj = boundary_coeff is not None and not np.allclose(coeff, ops.alpha)
    return GalerkinBasis(
        n=n,
        eigenvalues=lam,
        fields=E,
        boundary_coeff=coeff,
        is_adjoint_variant=bool(is_adj),
    )


def project_to_basis(fld: np.ndarray, basis: GalerkinBasis, ops: DiscreteOperators) -> np.ndarray:
    """H-orthogonal projection coefficients of a face field (or batch)."""
    fld = np.asarray(fld)
    if fld.shape[-1] != ops.grid.n_faces:
        raise ValueError("field length does not match face count")
    return fld @ basis.mass_fields(ops)


def reconstruct(coeffs: np.ndarray, basis: GalerkinBasis) -> np.ndarray:
    """Face field from basis coefficients (or batch)."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != basis.n:
        raise ValueError("coefficient length does not match basis size")
    return coeffs @ basis.fields.T


# ---------------------------------------------------------------------------
# lifting
# ---------------------------------------------------------------------------

@dataclass
class LiftingField:
    """Stationary Stokes lift of boundary data (a, b)."""

    velocity: np.ndarray  # (n_faces,)
    pressure: np.ndarray  # (n_cells,), zero mean
    a: np.ndarray
    b: np.ndarray
    residual_interior: float  # unexplained weak residual on free rows (rel.)
    residual_normal: float  # normal-trace mismatch (rel.)
    residual_slip: float  # slip-trace mismatch (rel.)
    divergence_norm: float  # discrete L2 norm of div (rel.)
    c_estimate: float  # empirical H1 stability ratio (logged, not asserted)


def _lift_solver(ops: DiscreteOperators):
    """Build (and cache) the lifting operator matrices.

    Returns dense maps L_a, L_b (faces x n_b), P_a, P_b (cells x n_b) and the
    Gram matrix used for slip-trace recovery.
    """
    if "L_a" in ops._lift_cache:
        return ops._lift_cache
    grid, mesh = ops.grid, ops.mesh
    nb = mesh.n_nodes
    nf, nc = grid.n_faces, grid.n_cells
    bidx, bsgn = ops.bface_idx, ops.bface_sgn
    free = np.setdiff1d(np.arange(nf), bidx)
    nfree = free.size

    # lifting uses the unit-viscosity Stokes operator: the slip datum b has no
    # viscosity factor in the boundary condition
    K = ops.G_V.tocsc()
    C = (sp.diags(np.full(nc, grid.cell_area)) @ ops.Div).tocsc()  # weighted div
    Sf = sp.csr_matrix(
        (np.ones(nfree), (free, np.arange(nfree))), shape=(nf, nfree)
    )
    K_ff = (Sf.T @ K @ Sf).tocsc()
    C_f = (C @ Sf).tocsc()
    e = np.full(nc, grid.cell_area)
    top = sp.hstack([K_ff, -C_f.T, sp.csc_matrix((nfree, 1))])
    mid = sp.hstack([-C_f, sp.csc_matrix((nc, nc)), sp.csc_matrix(e[:, None])])
    bot = sp.hstack([sp.csc_matrix((1, nfree)), sp.csc_matrix(e[None, :]), sp.csc_matrix((1, 1))])
    saddle = sp.vstack([top, mid, bot]).tocsc()
    lu = spla.splu(saddle)

    # unit-datum right-hand sides
    Bmap = sp.csr_matrix((bsgn, (bidx, np.arange(nb))), shape=(nf, nb))
    A_tanW = (Sf.T @ ops.T_tan.T @ sp.diags(mesh.weights)).toarray()  # (nfree, nb)
    rhs_a = np.zeros((nfree + nc + 1, nb))
    KB = (Sf.T @ K @ Bmap).toarray()
    CB = (C @ Bmap).toarray()
    rhs_a[:nfree] = -KB
    rhs_a[nfree : nfree + nc] = CB
    rhs_b = np.zeros((nfree + nc + 1, nb))
    rhs_b[:nfree] = A_tanW

    sol_a = lu.solve(rhs_a)
    sol_b = lu.solve(rhs_b)
    L_a = np.zeros((nf, nb))
    L_a[free] = sol_a[:nfree]
    L_a += Bmap.toarray()
    L_b = np.zeros((nf, nb))
    L_b[free] = sol_b[:nfree]
    P_a = sol_a[nfree : nfree + nc]
    P_a -= np.mean(P_a, axis=0, keepdims=True)
    P_b = sol_b[nfree : nfree + nc]
    P_b -= np.mean(P_b, axis=0, keepdims=True)

    # Slip-trace recovery by pseudo-inverse.  The 2-point tangential trace has
    # a per-edge checkerboard nullspace (alternating nodal data load the weak
    # form identically to zero), so the recoverable slip datum lives in the
    # quotient by that 4-dimensional invisible space; residuals are reported
    # modulo it.
    U, s, Vt = np.linalg.svd(A_tanW, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10))
    ops._lift_cache.update(
        L_a=L_a,
        L_b=L_b,
        P_a=P_a,
        P_b=P_b,
        A_tanW=A_tanW,
        svd_U=U[:, :rank],
        svd_s=s[:rank],
        svd_Vt=Vt[:rank],
        free=free,
        Sf=Sf,
        C=C,
    )
    return ops._lift_cache


def lift_matrices(ops: DiscreteOperators):
    """Dense lifting operator (velocity and pressure) per unit nodal datum."""
    cache = _lift_solver(ops)
    return cache["L_a"], cache["L_b"], cache["P_a"], cache["P_b"]


def solve_lifting(a: np.ndarray, b: np.ndarray, ops: DiscreteOperators) -> LiftingField:
    """Solve the stationary Stokes lifting problem for data (a, b)."""
    mesh, grid = ops.mesh, ops.grid
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != (mesh.n_nodes,) or b.shape != (mesh.n_nodes,):
        raise ValueError("boundary data must be nodewise scalars")
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    compat = boundary_integral(a, mesh)
    if abs(compat) > 1e-10 * scale * mesh.perimeter:
        raise ValueError(
            f"incompatible normal datum: boundary integral {compat:.3e} exceeds tolerance"
        )
    cache = _lift_solver(ops)
    X = cache["L_a"] @ a + cache["L_b"] @ b
    pi = cache["P_a"] @ a + cache["P_b"] @ b

    data_norm = float(
        np.sqrt((a * mesh.weights) @ a) + np.sqrt((b * mesh.weights) @ b)
    )
    ref = max(data_norm, 1e-300)

    div = ops.Div @ X
    div_norm = float(np.sqrt(grid.cell_area * (div @ div))) / ref
    nrm_res = float(np.max(np.abs(ops.T_nrm @ X - a))) / max(scale, 1e-300)

    # recover the natural slip datum from the free-row weak residual; the
    # comparison is modulo the invisible checkerboard quotient (see
    # _lift_solver) by projecting the data the same way
    r = ops.G_V @ X - cache["C"].T @ pi
    r_f = r[cache["free"]]
    A = cache["A_tanW"]
    U, s, Vt = cache["svd_U"], cache["svd_s"], cache["svd_Vt"]
    b_rec = Vt.T @ ((U.T @ r_f) / s)
    b_vis = Vt.T @ (Vt @ b)
    slip_res = float(np.max(np.abs(b_rec - b_vis))) / max(scale, 1e-300)
    interior_res = float(np.linalg.norm(r_f - A @ b_rec)) / max(
        float(np.linalg.norm(r_f)), 1e-300
    )

    gx = ops.Gcc @ X
    h1 = float(np.sqrt(ops.h_norm(X) ** 2 + grid.cell_area * (gx @ gx)))
    from .geometry import tangential_derivative

    dsa = tangential_derivative(a, mesh)
    data_h = data_norm + float(np.sqrt((dsa * mesh.weights) @ dsa))
    c_est = h1 / max(data_h, 1e-300)

    return LiftingField(
        velocity=X,
        pressure=pi,
        a=a,
        b=b,
        residual_interior=interior_res,
        residual_normal=nrm_res,
        residual_slip=slip_res,
        divergence_norm=div_norm,
        c_estimate=c_est,
    )


# ---------------------------------------------------------------------------
# discrete inequality constants
# ---------------------------------------------------------------------------

@dataclass
class InequalityReport:
    """Empirical discrete constants for the interpolation inequalities."""

    ladyzhenskaya: float  # ||v||_4 <= C ||v||_2^{1/2} ||grad v||_2^{1/2}
    trace: float  # ||v||_{L2(Gamma)} <= C ||v||_2^{1/2} ||grad v||_2^{1/2}
    korn: float  # ||v||_{H1} <= C ||v||_V
    c_hat: float  # ||v||_2^4 <= C ||v||_2^2 ||v||_V^2  (equals 1/lambda_1)
    samples: int


def inequality_constants(
    basis: GalerkinBasis,
    ops: DiscreteOperators,
    n_samples: int = 1000,
    seed: int = 0,
) -> InequalityReport:
    """Maximize inequality ratios over random fields in span(basis)."""
    if basis.n == 0:
        raise ValueError("basis is empty")
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((n_samples, basis.n))
    # include the pure first mode: it attains the CCC ratio 1/lambda_1
    C[0] = 0.0
    C[0, 0] = 1.0
    lam = basis.eigenvalues
    area = ops.grid.cell_area
    nc = ops.grid.n_cells

    F = C @ basis.fields.T  # (S, n_faces)
    h2 = np.einsum("si,si->s", C, C)
    v2 = np.einsum("si,i,si->s", C, lam, C)
    Vcc = F @ ops.Icc.T  # (S, 2*nc)
    speed2 = Vcc[:, :nc] ** 2 + Vcc[:, nc:] ** 2
    l4 = (area * np.sum(speed2**2, axis=1)) ** 0.25
    G = F @ ops.Gcc.T
    gnorm = np.sqrt(area * np.einsum("si,si->s", G, G))
    tt = F @ ops.T_tan.T
    tn = F @ ops.T_nrm.T
    bl2 = np.sqrt((tt**2 + tn**2) @ ops.mesh.weights)
    h = np.sqrt(h2)
    v = np.sqrt(np.maximum(v2, 1e-300))
    h1 = np.sqrt(h2 + gnorm**2)

    denom = np.sqrt(np.maximum(h, 1e-300) * np.maximum(gnorm, 1e-300))
    return InequalityReport(
        ladyzhenskaya=float(np.max(l4 / denom)),
        trace=float(np.max(bl2 / denom)),
        korn=float(np.max(h1 / v)),
        c_hat=float(np.max(h2**2 / (h2 * v2))),
        samples=n_samples,
    )
