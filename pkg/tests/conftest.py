"""Shared fixtures, the finite-difference harness, and small oracles."""

import numpy as np
import pytest
from scipy.optimize import linprog

from meshpose import autodiff as ad
from meshpose.correspondence import CorrelationMatrix
from meshpose.mesh import Mesh


def finite_difference(f, arrays, eps=1e-6):
    """Central-difference gradients of the scalar ``f()`` with respect to
    each array in ``arrays``, mutated in place entry by entry."""
    grads = []
    for x in arrays:
        flat = x.ravel()
        g = np.zeros(flat.shape)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f()
            flat[i] = keep - eps
            lo = f()
            flat[i] = keep
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(x.shape))
    return grads


def rel_err(got, want):
    denom = max(float(np.max(np.abs(want))), 1e-10)
    return float(np.max(np.abs(got - want))) / denom


def lp_transport_cost(z, row_mass, col_mass):
    """Exact unregularized transport optimum via the LP solver."""
    n, m = z.shape
    a_eq = []
    for i in range(n):  # row marginals
        row = np.zeros(n * m)
        row[i * m : (i + 1) * m] = 1.0
        a_eq.append(row)
    for j in range(m):  # column marginals
        col = np.zeros(n * m)
        col[j::m] = 1.0
        a_eq.append(col)
    b_eq = np.concatenate([row_mass, col_mass])
    res = linprog(z.ravel(), A_eq=np.array(a_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.success
    return res.fun


def corr_from_cost(z):
    """Wrap a raw cost matrix as a correlation (C = 1 - Z)."""
    return CorrelationMatrix(values=ad.constant(1.0 - z))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def tetra():
    vertices = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(vertices, faces, name="tetra")


def grid_mesh(rows, cols, jitter=0.0, seed=0):
    """Planar triangulated grid; optional z jitter keeps cotangents generic."""
    r = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:rows, 0:cols]
    z = jitter * r.standard_normal((rows, cols)) if jitter else np.zeros((rows, cols))
    vertices = np.stack([xs.ravel(), ys.ravel(), z.ravel()], axis=1).astype(float)
    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            faces.append([a, b, d])
            faces.append([a, d, c])
    return Mesh(vertices, np.array(faces), name=f"grid{rows}x{cols}")


@pytest.fixture
def grid5():
    return grid_mesh(5, 5, jitter=0.05, seed=3)


def equilateral_grid(rows, cols):
    """Strictly acute triangulation: every cotangent weight is positive, so
    the deformation energy has its global minimum exactly at rigid motions."""
    pts = []
    for i in range(rows):
        for j in range(cols):
            pts.append([j + 0.5 * (i % 2), i * np.sqrt(3) / 2, 0.0])
    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            if i % 2 == 0:
                faces.append([a, b, c])
                faces.append([b, d, c])
            else:
                faces.append([a, b, d])
                faces.append([a, d, c])
    return Mesh(np.array(pts, dtype=float), np.array(faces), name=f"equi{rows}x{cols}")
