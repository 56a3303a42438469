"""Manufactured Stokes problem on the unit square.

The velocity is a solenoidal sine/cosine field and the pressure a zero-mean
bilinear; substituting them into the momentum equation yields the body
force used for convergence studies.  All callables are vectorized over a
trailing coordinate axis.
"""

import numpy as np


def velocity(p):
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    return np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)], axis=-1)


def velocity_gradient(p):
    """Gradient with rows indexing the component: out[..., c, x]."""
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    g = np.empty(p.shape[:-1] + (2, 2))
    g[..., 0, 0] = np.cos(x) * np.cos(y)
    g[..., 0, 1] = -np.sin(x) * np.sin(y)
    g[..., 1, 0] = np.sin(x) * np.sin(y)
    g[..., 1, 1] = -np.cos(x) * np.cos(y)
    return g


def pressure(p):
    p = np.asarray(p, dtype=float)
    return p[..., 0] * p[..., 1] - 0.25


def body_force(nu=1.0):
    """-nu Laplace(u) + grad(p) for the fields above."""

    def f(p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        return np.stack(
            [2.0 * nu * np.sin(x) * np.cos(y) + y,
             -2.0 * nu * np.cos(x) * np.sin(y) + x],
            axis=-1,
        )

    return f


boundary_velocity = velocity
