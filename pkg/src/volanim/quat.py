"""Quaternion and rotation helpers (scalar-first convention: w, x, y, z).

All routines are vectorized over a leading batch axis where it makes sense.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 (apply q2's rotation first)."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    w1, v1 = q1[..., :1], q1[..., 1:]
    w2, v2 = q2[..., :1], q2[..., 1:]
    w = w1 * w2 - np.sum(v1 * v2, axis=-1, keepdims=True)
    v = w1 * v2 + w2 * v1 + np.cross(v1, v2)
    return np.concatenate([w, v], axis=-1)


def conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about unit `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-12
    # sin(a/2)/a -> 1/2 as a -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), s * v], axis=-1)


def to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (or batch thereof) of unit quaternion(s)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion(s) q (broadcasting batch axes)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def angle_between(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Geodesic rotation angle between two unit quaternions, in [0, pi].

    Uses atan2 of the relative quaternion for precision at small angles;
    insensitive to quaternion sign.
    """
    d = multiply(conjugate(q1), q2)
    vec = np.linalg.norm(d[..., 1:], axis=-1)
    w = np.abs(d[..., 0])
    return 2.0 * np.arctan2(vec, w)


def quaternion_distance(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """min(|q1 - q2|, |q1 + q2|): distance up to the double cover sign."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    return np.minimum(
        np.linalg.norm(q1 - q2, axis=-1), np.linalg.norm(q1 + q2, axis=-1)
    )


def weighted_mean(quats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted quaternion average with signs aligned to the highest-weight
    entry; result normalized. quats (..., K, 4), weights (..., K)."""
    quats = np.asarray(quats, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    ref_idx = np.argmax(weights, axis=-1)
    ref = np.take_along_axis(quats, ref_idx[..., None, None].repeat(4, -1), axis=-2)
    sign = np.where(np.sum(quats * ref, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    acc = np.sum(weights[..., None] * sign * quats, axis=-2)
    return normalize(acc)


def random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly random unit quaternions (Gaussian projection)."""
    q = rng.standard_normal((n, 4))
    return normalize(q)
