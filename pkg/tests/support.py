"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from rotfuse import geometry as geo
from rotfuse.model import FusionNet, per_sample_loss
from rotfuse.nncore import grad_check

# below this magnitude, gradients are compared in absolute terms (central-difference roundoff)
GRAD_FLOOR = 1e-5


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_pairs(rng, n, obs_dim):
    """Observations, rotations and geometrically consistent ground truths."""
    xt = rng.standard_normal((n, obs_dim))
    xr = rng.standard_normal((n, obs_dim))
    R = np.stack([geo.random_rotation(rng) for _ in range(n)])
    gr = unit(rng.standard_normal((n, 3)))
    gt = np.einsum("nij,nj->ni", R, gr)
    return xt, xr, R, gt, gr


def model_grad_error(net: FusionNet, xt, xr, R, gt, gr, h=1e-5, floor=GRAD_FLOOR, names=None, kink_tol=None, stats=None):
    """Worst relative error of the full-loss gradient against central differences."""

    def fn(p):
        net.params = p
        res, g = net.loss_and_grads(xt, xr, R, gt, gr)
        return res.total, g

    def batched(p):
        net.params = p
        return per_sample_loss(net.forward(xt, xr, R), gt, gr, net.config.alpha).mean(axis=-1)

    return grad_check(fn, net.params, h=h, floor=floor, batched_loss=batched, names=names, kink_tol=kink_tol, stats=stats)
