#!/usr/bin/env python

"""
Scalar/vector primitives shared by the losses, the encoder and the evaluation code.
Everything is float64; gradients elsewhere in the package are hand-derived and
checked against finite_diff_check.
"""
from typing import Callable

import numpy as np
from scipy.special import softmax, log_softmax, entr

from cdsl.utils import NormTooSmall, InvalidTemperature, InfiniteLoss, IndexOutOfRange, InvalidDistribution


EPS_NORM = 1e-12
DIST_TOL = 1e-9


def as_vector(v):
    return np.asarray(v, dtype=np.float64)


def l2_normalize(v):
    """
    :param v: real vector, or a 2-D array normalized row by row
    :return: v / ||v||
    """
    v = as_vector(v)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise NormTooSmall(f"cannot normalize a vector of norm {float(np.min(norm)):.3g} (<= {EPS_NORM})")
    return v / norm


def l2_normalize_backward(v, upstream):
    """
    Backward pass of l2_normalize: (I - f f^T) upstream / ||v||, row-wise for 2-D input.
    """
    v = as_vector(v)
    upstream = as_vector(upstream)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise NormTooSmall(f"cannot normalize a vector of norm {float(np.min(norm)):.3g} (<= {EPS_NORM})")
    f = v / norm
    radial = np.sum(f * upstream, axis=-1, keepdims=True)
    return (upstream - radial * f) / norm


def check_temperature(tau):
    if not tau > 0:
        raise InvalidTemperature(f"temperature must be positive, got {tau}")


def softmax_temp(scores, tau):
    """
    exp(s_k / tau) / sum_j exp(s_j / tau) along the last axis (max-subtracted by scipy).
    """
    check_temperature(tau)
    return softmax(as_vector(scores) / tau, axis=-1)


def log_softmax_temp(scores, tau):
    check_temperature(tau)
    return log_softmax(as_vector(scores) / tau, axis=-1)


def check_distribution(p):
    p = as_vector(p)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.) > DIST_TOL):
        raise InvalidDistribution("probabilities must be non-negative and sum to 1")
    return p


def entropy(p):
    """
    -sum p log p with 0 log 0 = 0, natural log.
    """
    p = check_distribution(p)
    return entr(p).sum(axis=-1)


def cross_entropy_at(p, index):
    p = check_distribution(p)
    if not 0 <= index < p.shape[-1]:
        raise IndexOutOfRange(f"index {index} outside distribution of length {p.shape[-1]}")
    if p[index] == 0:
        raise InfiniteLoss(f"probability at index {index} is zero")
    return -np.log(p[index])


def finite_diff_grad(fn: Callable, x, h=1e-5):
    x = as_vector(x).copy()
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for k in range(flat_x.size):
        keep = flat_x[k]
        flat_x[k] = keep + h
        f_plus = fn(x)
        flat_x[k] = keep - h
        f_minus = fn(x)
        flat_x[k] = keep
        flat_g[k] = (f_plus - f_minus) / (2. * h)
    return grad


def finite_diff_check(fn: Callable, analytic_grad, x, h=1e-5):
    """
    Compare an analytic gradient against central differences.

    :param fn: scalar function of an array shaped like x
    :param analytic_grad: gradient of fn at x, same shape as x
    :return: max_k |fd_k - g_k| / max(1, |fd_k|, |g_k|)
    """
    analytic_grad = as_vector(analytic_grad)
    fd = finite_diff_grad(fn, x, h=h)
    if fd.size == 0:
        return 0.
    scale = np.maximum(1., np.maximum(np.abs(fd), np.abs(analytic_grad)))
    return float(np.max(np.abs(fd - analytic_grad) / scale))
