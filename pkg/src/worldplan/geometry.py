"""Planar geometry helpers: oriented boxes, separating-axis overlap, pose interpolation.

All poses are ``(x, y, theta)`` in meters / radians. Functions broadcast over
leading dimensions so a whole rollout can be checked in one call.
"""

from __future__ import annotations

import numpy as np


def wrap_angle(angle):
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


def box_corners(poses: np.ndarray, length, width) -> np.ndarray:
    """Corners of oriented boxes, counter-clockwise starting front-left.

    Args:
        poses: ``[..., 3]`` array of box centers and headings.
        length, width: scalars or arrays broadcastable to ``poses[..., 0]``.

    Returns:
        ``[..., 4, 2]`` corner coordinates.
    """
    poses = np.asarray(poses, dtype=float)
    x, y, th = poses[..., 0], poses[..., 1], poses[..., 2]
    c, s = np.cos(th), np.sin(th)
    hl = np.broadcast_to(np.asarray(length, dtype=float) / 2.0, x.shape)
    hw = np.broadcast_to(np.asarray(width, dtype=float) / 2.0, x.shape)
    local = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    lx = local[:, 0] * hl[..., None]
    ly = local[:, 1] * hw[..., None]
    cx = x[..., None] + c[..., None] * lx - s[..., None] * ly
    cy = y[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([cx, cy], axis=-1)


def _edge_axes(corners: np.ndarray) -> np.ndarray:
    # rectangles only need two edge normals each
    e1 = corners[..., 1, :] - corners[..., 0, :]
    e2 = corners[..., 3, :] - corners[..., 0, :]
    return np.stack([e1, e2], axis=-2)


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for two broadcastable stacks of rectangles.

    Boxes that only touch along an edge are not considered overlapping.

    Args:
        a, b: ``[..., 4, 2]`` corner arrays (see :func:`box_corners`).

    Returns:
        Boolean array with the broadcast leading shape.
    """
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    axes = np.concatenate([_edge_axes(a), _edge_axes(b)], axis=-2)  # [..., 4, 2]
    pa = np.einsum("...kd,...ad->...ak", a, axes)
    pb = np.einsum("...kd,...ad->...ak", b, axes)
    separated = (pa.max(-1) <= pb.min(-1)) | (pb.max(-1) <= pa.min(-1))
    return ~separated.any(-1)


def poses_overlap(pa, la, wa, pb, lb, wb) -> np.ndarray:
    """Overlap of boxes given as poses, broadcasting over leading dims.

    Same verdicts as :func:`boxes_overlap` on :func:`box_corners`; pairs whose
    circumscribed circles are disjoint are rejected before the axis test.
    """
    pa, pb = np.asarray(pa, float), np.asarray(pb, float)
    shape = np.broadcast_shapes(pa.shape[:-1], pb.shape[:-1], np.shape(la), np.shape(wa), np.shape(lb), np.shape(wb))
    pa, pb = np.broadcast_to(pa, shape + (3,)), np.broadcast_to(pb, shape + (3,))
    la, wa, lb, wb = (np.broadcast_to(np.asarray(v, float), shape) for v in (la, wa, lb, wb))
    reach = 0.5 * (np.hypot(la, wa) + np.hypot(lb, wb))
    d2 = ((pa[..., :2] - pb[..., :2]) ** 2).sum(-1)
    near = d2 < reach**2
    out = np.zeros(shape, dtype=bool)
    if near.any():
        ca = box_corners(pa[near], la[near], wa[near])
        cb = box_corners(pb[near], lb[near], wb[near])
        out[near] = boxes_overlap(ca, cb)
    return out


def points_in_box(points: np.ndarray, pose, length: float, width: float) -> np.ndarray:
    """Closed point-in-oriented-box test. ``points`` is ``[..., 2]``."""
    points = np.asarray(points, dtype=float)
    x, y, th = float(pose[0]), float(pose[1]), float(pose[2])
    dx = points[..., 0] - x
    dy = points[..., 1] - y
    c, s = np.cos(th), np.sin(th)
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)


def interpolate_poses(times: np.ndarray, poses: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Piecewise-linear pose interpolation with heading unwrapping.

    ``poses`` is ``[..., n, 3]`` sampled at ``times`` (shape ``[n]``, increasing);
    returns ``[..., len(query), 3]``. Queries outside the sample range are clamped.
    """
    poses = np.asarray(poses, dtype=float)
    times = np.asarray(times, dtype=float)
    query = np.asarray(query, dtype=float)
    idx = np.clip(np.searchsorted(times, query, side="right") - 1, 0, len(times) - 2)
    t0, t1 = times[idx], times[idx + 1]
    frac = np.clip((query - t0) / (t1 - t0), 0.0, 1.0)
    unwrapped = poses.copy()
    unwrapped[..., 2] = np.unwrap(poses[..., 2], axis=-1)
    p0 = unwrapped[..., idx, :]
    p1 = unwrapped[..., idx + 1, :]
    out = p0 + (p1 - p0) * frac[:, None]
    out[..., 2] = wrap_angle(out[..., 2])
    return out


def polyline_arclength(polyline: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_to_polyline(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Arc-length coordinate of the closest polyline point for each of ``points[..., 2]``."""
    points = np.asarray(points, dtype=float)
    a = polyline[:-1]
    ab = polyline[1:] - a
    seg_len2 = np.maximum((ab**2).sum(-1), 1e-12)
    s0 = polyline_arclength(polyline)[:-1]
    ap = points[..., None, :] - a
    u = np.clip((ap * ab).sum(-1) / seg_len2, 0.0, 1.0)
    closest = a + u[..., None] * ab
    d2 = ((points[..., None, :] - closest) ** 2).sum(-1)
    best = d2.argmin(-1)
    u_best = np.take_along_axis(u, best[..., None], -1)[..., 0]
    return s0[best] + u_best * np.sqrt(seg_len2[best])


def sample_polyline(polyline: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Poses ``[..., 3]`` at arc lengths ``s`` along a polyline (heading = segment tangent).

    Arc lengths past the end extrapolate along the last segment.
    """
    arclen = polyline_arclength(polyline)
    s = np.asarray(s, dtype=float)
    idx = np.clip(np.searchsorted(arclen, s, side="right") - 1, 0, len(polyline) - 2)
    seg = polyline[idx + 1] - polyline[idx]
    seg_len = np.maximum(np.linalg.norm(seg, axis=-1), 1e-12)
    frac = (s - arclen[idx]) / seg_len
    xy = polyline[idx] + seg * frac[..., None]
    heading = np.arctan2(seg[..., 1], seg[..., 0])
    return np.concatenate([xy, heading[..., None]], axis=-1)
