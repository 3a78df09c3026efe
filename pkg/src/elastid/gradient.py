"""Derivative of the surrogate misfit with respect to the physical parameters.

The adjoint quantities ``rho^l = d F / d a^l`` are propagated backwards
through the layers and one step past the first layer, which yields the
derivative with respect to the network input. Output denormalization enters
the seed, input normalization the final scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .network import DenseNetwork, ForwardTrace, forward


@dataclass(frozen=True)
class InputGradientResult:
    value: float
    gradient: np.ndarray  # w.r.t. physical (E, nu)
    gradient_normalized: np.ndarray  # w.r.t. the normalized network input


def _check_obs(net: DenseNetwork, u_obs) -> np.ndarray:
    u_obs = np.asarray(u_obs, dtype=float)
    if u_obs.shape != (net.layer_sizes[-1],):
        raise ValidationError(f"u_obs must have shape ({net.layer_sizes[-1]},), got {u_obs.shape}")
    return u_obs


def _misfit(out: np.ndarray, u_obs: np.ndarray) -> float:
    r = out - u_obs
    return 0.5 * float(r @ r)


def misfit_value(net: DenseNetwork, p, u_obs) -> float:
    """``1/2 |N(p) - u_obs|^2`` in physical observation units."""
    u_obs = _check_obs(net, u_obs)
    out, _ = forward(net, np.asarray(p, dtype=float))
    return _misfit(out, u_obs)


def adjoint_sweep(net: DenseNetwork, trace: ForwardTrace, seed: np.ndarray) -> list[np.ndarray]:
    """Backward recursion ``rho^l = W^{l+1}^T (rho^{l+1} * sigma'_{l+1}(z^{l+1}))``.

    Returns ``[rho^0, ..., rho^L]`` with ``rho^L = seed``.
    """
    rhos = [None] * (net.n_layers + 1)
    rhos[-1] = seed
    rho = seed
    for l in range(net.n_layers, 0, -1):
        rho = net.weights[l - 1].T @ (rho * net.activation(l)[1](trace.z[l - 1]))
        rhos[l - 1] = rho
    return rhos


def backprop_to_input(net: DenseNetwork, p, u_obs) -> InputGradientResult:
    p = np.asarray(p, dtype=float)
    u_obs = _check_obs(net, u_obs)
    if p.shape != (net.layer_sizes[0],):
        raise ValidationError(f"p must have shape ({net.layer_sizes[0]},), got {p.shape}")
    out, trace = forward(net, p)
    value = _misfit(out, u_obs)
    # d F / d a^L through the output denormalization
    seed = net.norm.output_scale * (out - u_obs)
    rho0 = adjoint_sweep(net, trace, seed)[0]
    return InputGradientResult(value, rho0 / net.norm.input_scale, rho0)
