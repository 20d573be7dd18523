"""Planar geometry for car footprints, road bands, and box obstacles.

All obstacle boxes are axis-aligned and stored as (xmin, xmax, ymin, ymax).
The car footprint is a rectangle in body frame, rotated by the heading and
translated by the position.  Signed distances follow the convention
positive = outside / clear, negative = inside / penetrating.
"""

from __future__ import annotations

import numpy as np


def rotate(points, psi):
    """Rotate planar points by angle(s) psi.  Broadcasts over leading dims."""
    c, s = np.cos(psi), np.sin(psi)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def footprint_corners(pos, psi, body_box):
    """World-frame corners of the rotated, translated footprint rectangle.

    pos: (..., 2), psi: (...), body_box: (xmin, xmax, ymin, ymax) in body frame.
    Returns (..., 4, 2) with corners in CCW order.
    """
    x0, x1, y0, y1 = body_box
    body = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    R = np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)
    world = np.einsum("...ij,kj->...ki", R, body)
    return world + np.asarray(pos)[..., None, :]


def box_sdf(points, box):
    """Signed distance from point(s) to an axis-aligned box."""
    xmin, xmax, ymin, ymax = box
    x, y = points[..., 0], points[..., 1]
    qx = np.maximum(xmin - x, x - xmax)
    qy = np.maximum(ymin - y, y - ymax)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def box_corners(box):
    xmin, xmax, ymin, ymax = box
    return np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])


def _point_segment_dist(p, a, b):
    """Distance from points p (..., 2) to segments a->b (..., 2).  Broadcasts."""
    ab = b - a
    ap = p - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    t = np.clip(np.sum(ap * ab, axis=-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1)


def convex_polygons_distance(P, Q):
    """Euclidean distance between two disjoint convex polygons (vertex arrays)."""
    dmin = np.inf
    for poly_a, poly_b in ((P, Q), (Q, P)):
        a = poly_b
        b = np.roll(poly_b, -1, axis=0)
        d = _point_segment_dist(poly_a[:, None, :], a[None, :, :], b[None, :, :])
        dmin = min(dmin, float(d.min()))
    return dmin


def polygons_intersect(P, Q):
    """Exact separating-axis test for two convex polygons."""
    for poly in (P, Q):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=-1)
        for n in normals:
            pa = P @ n
            pb = Q @ n
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _clip_segment_halfplane(a, b, n, c):
    """Clip segment a->b to halfplane n.x <= c.  Returns (a, b) or None."""
    da, db = a @ n - c, b @ n - c
    if da <= 0 and db <= 0:
        return a, b
    if da > 0 and db > 0:
        return None
    t = da / (da - db)
    p = a + t * (b - a)
    return (a, p) if da <= 0 else (p, b)


def _min_inside_sdf_on_segment(a, b, box):
    """Min of box_sdf over a segment fully inside the box.

    Inside the box the sdf is max of four linear functions of position, so the
    restriction to a segment is piecewise linear: evaluate at endpoints and at
    all pairwise crossings of the four linear pieces.
    """
    xmin, xmax, ymin, ymax = box
    # linear pieces l_i(t) = alpha_i + t * beta_i along p(t) = a + t (b - a)
    dx, dy = b[0] - a[0], b[1] - a[1]
    alphas = np.array([xmin - a[0], a[0] - xmax, ymin - a[1], a[1] - ymax])
    betas = np.array([-dx, dx, -dy, dy])
    ts = [0.0, 1.0]
    for i in range(4):
        for j in range(i + 1, 4):
            db_ = betas[i] - betas[j]
            if abs(db_) > 1e-14:
                t = (alphas[j] - alphas[i]) / db_
                if 0.0 < t < 1.0:
                    ts.append(t)
    vals = [np.max(alphas + t * betas) for t in ts]
    return float(min(vals))


def _overlap_min_sdf(poly, box):
    """Min of box_sdf over a convex polygon that intersects the box (negative)."""
    xmin, xmax, ymin, ymax = box
    best = 0.0
    # polygon corners inside the box
    sd = box_sdf(poly, box)
    best = min(best, float(sd.min()))
    # deepest interior line of the box, if it crosses the polygon
    hx, hy = 0.5 * (xmax - xmin), 0.5 * (ymax - ymin)
    cx, cy = 0.5 * (xmax + xmin), 0.5 * (ymax + ymin)
    if hx >= hy:
        seg = (np.array([xmin + hy, cy]), np.array([xmax - hy, cy]))
    else:
        seg = (np.array([cx, ymin + hx]), np.array([cx, ymax - hx]))
    clipped = _clip_to_polygon(seg[0], seg[1], poly)
    if clipped is not None:
        best = min(best, -min(hx, hy))
    # polygon edges clipped to the box
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        seg = _clip_to_box(a, b, box)
        if seg is not None:
            best = min(best, _min_inside_sdf_on_segment(seg[0], seg[1], box))
    return best


def _clip_to_box(a, b, box):
    xmin, xmax, ymin, ymax = box
    planes = [
        (np.array([-1.0, 0.0]), -xmin),
        (np.array([1.0, 0.0]), xmax),
        (np.array([0.0, -1.0]), -ymin),
        (np.array([0.0, 1.0]), ymax),
    ]
    seg = (a, b)
    for n, c in planes:
        seg = _clip_segment_halfplane(seg[0], seg[1], n, c)
        if seg is None:
            return None
    return seg


def _clip_to_polygon(a, b, poly):
    """Clip a segment to a convex CCW polygon."""
    seg = (a, b)
    for k in range(len(poly)):
        p, q = poly[k], poly[(k + 1) % len(poly)]
        edge = q - p
        n = np.array([edge[1], -edge[0]])  # outward for CCW
        seg = _clip_segment_halfplane(seg[0], seg[1], n, float(n @ p))
        if seg is None:
            return None
    return seg


def polygon_box_min_sdf(poly, box):
    """Exact min over a convex polygon of the signed distance to a box."""
    poly = np.asarray(poly, dtype=float)
    if polygons_intersect(poly, box_corners(box)):
        return _overlap_min_sdf(poly, box)
    return convex_polygons_distance(poly, box_corners(box))


def footprint_boxes_margin(corners, boxes):
    """Min signed distance from footprints to a list of boxes, batched.

    corners: (..., 4, 2) footprint corner arrays; boxes: iterable of
    (xmin, xmax, ymin, ymax).  The separated case is fully vectorized; states
    whose footprint intersects a box are finished off with the exact scalar
    routine.  Returns (...) margins (+inf with no boxes).
    """
    corners = np.asarray(corners, dtype=float)
    lead = corners.shape[:-2]
    flat = corners.reshape(-1, 4, 2)
    out = np.full(flat.shape[0], np.inf)
    for box in boxes:
        bc = box_corners(box)
        # vertex-of-P to edges-of-Q and vice versa (exact when disjoint)
        qa, qb = bc, np.roll(bc, -1, axis=0)
        d1 = _point_segment_dist(
            flat[:, :, None, :], qa[None, None, :, :], qb[None, None, :, :]
        ).min(axis=(1, 2))
        pa, pb = flat, np.roll(flat, -1, axis=1)
        d2 = _point_segment_dist(
            bc[None, :, None, :], pa[:, None, :, :], pb[:, None, :, :]
        ).min(axis=(1, 2))
        dist = np.minimum(d1, d2)
        hit = _sat_intersect_batch(flat, box)
        for i in np.flatnonzero(hit):
            dist[i] = _overlap_min_sdf(flat[i], box)
        out = np.minimum(out, dist)
    return out.reshape(lead)


def _sat_intersect_batch(polys, box):
    """Vectorized separating-axis intersection test, polygons vs one box."""
    xmin, xmax, ymin, ymax = box
    px, py = polys[..., 0], polys[..., 1]
    sep = (px.max(axis=-1) < xmin) | (px.min(axis=-1) > xmax)
    sep |= (py.max(axis=-1) < ymin) | (py.min(axis=-1) > ymax)
    bc = box_corners(box)
    edges = np.roll(polys, -1, axis=-2) - polys
    normals = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
    pp = np.einsum("...ki,...ji->...kj", normals, polys)  # (N, axes, verts)
    pb = np.einsum("...ki,ji->...kj", normals, bc)
    sep_axis = (pp.max(axis=-1) < pb.min(axis=-1)) | (pb.max(axis=-1) < pp.min(axis=-1))
    sep |= sep_axis.any(axis=-1)
    return ~sep


def convex_hull(points):
    """Andrew monotone chain; returns hull vertices in CCW order."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_minkowski_box(poly, half_widths):
    """Minkowski sum of a convex polygon with a centered box (hx, hy)."""
    hx, hy = half_widths
    offsets = np.array([[hx, hy], [hx, -hy], [-hx, hy], [-hx, -hy]])
    pts = (poly[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    return convex_hull(pts)


def polygon_halfplanes(poly):
    """Outward halfplane form A p <= b of a CCW convex polygon."""
    edges = np.roll(poly, -1, axis=0) - poly
    A = np.stack([edges[:, 1], -edges[:, 0]], axis=-1)
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    A = A / np.maximum(norms, 1e-300)
    b = np.sum(A * poly, axis=1)
    return A, b


def points_in_polygon(points, poly, tol=1e-9):
    """Vectorized membership test for points (..., 2) in a convex polygon."""
    A, b = polygon_halfplanes(poly)
    vals = np.einsum("...i,ki->...k", np.asarray(points, dtype=float), A)
    return np.all(vals <= b + tol, axis=-1)
