"""Low-level 2D geometry: polylines, oriented boxes, point-in-region tests.

Everything here is pure and allocation-light; the episode loop calls these
helpers once per agent per step.
"""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a > math.pi:
        a -= TWO_PI
    elif a <= -math.pi:
        a += TWO_PI
    return a


def dist(ax: float, ay: float, bx: float, by: float) -> float:
    return math.hypot(bx - ax, by - ay)


# ---------------------------------------------------------------------------
# polylines


def polyline_arcs(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex; arcs[0] = 0."""
    seg = np.diff(points, axis=0)
    return np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])


def point_at_arc(points: np.ndarray, arcs: np.ndarray, s: float) -> tuple[float, float]:
    """Point at arc length s, clamped to the polyline ends."""
    if s <= 0.0:
        return float(points[0, 0]), float(points[0, 1])
    total = float(arcs[-1])
    if s >= total:
        return float(points[-1, 0]), float(points[-1, 1])
    i = int(np.searchsorted(arcs, s, side="right")) - 1
    seg_len = arcs[i + 1] - arcs[i]
    t = (s - arcs[i]) / seg_len if seg_len > 0 else 0.0
    p = points[i] + t * (points[i + 1] - points[i])
    return float(p[0]), float(p[1])


def tangent_at_arc(points: np.ndarray, arcs: np.ndarray, s: float) -> tuple[float, float]:
    """Unit tangent of the segment containing arc length s."""
    n = len(points)
    i = int(np.searchsorted(arcs, min(max(s, 0.0), float(arcs[-1])), side="right")) - 1
    i = min(max(i, 0), n - 2)
    dx = float(points[i + 1, 0] - points[i, 0])
    dy = float(points[i + 1, 1] - points[i, 1])
    h = math.hypot(dx, dy)
    if h < 1e-12:
        return 1.0, 0.0
    return dx / h, dy / h


def project_to_polyline(x: float, y: float, points: np.ndarray, arcs: np.ndarray) -> tuple[float, float]:
    """Project (x, y) onto the polyline.

    Returns (arc position of the closest point, unsigned lateral distance).
    """
    px = points[:, 0]
    py = points[:, 1]
    ex = px[1:] - px[:-1]
    ey = py[1:] - py[:-1]
    seg2 = ex * ex + ey * ey
    seg2 = np.where(seg2 < 1e-18, 1.0, seg2)
    t = ((x - px[:-1]) * ex + (y - py[:-1]) * ey) / seg2
    t = np.clip(t, 0.0, 1.0)
    cx = px[:-1] + t * ex
    cy = py[:-1] + t * ey
    d2 = (cx - x) ** 2 + (cy - y) ** 2
    i = int(np.argmin(d2))
    seg_len = math.sqrt(float(seg2[i])) if (ex[i] or ey[i]) else 0.0
    return float(arcs[i] + t[i] * seg_len), float(math.sqrt(d2[i]))


class PathLocator:
    """Incremental projection of a forward-moving point onto a polyline.

    Caches the last segment index so per-step projections are O(1) for
    agents that progress monotonically along their route.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self.arcs = polyline_arcs(self.points)
        self.total = float(self.arcs[-1])
        self._idx = 0

    def reset(self) -> None:
        self._idx = 0

    def locate(self, x: float, y: float) -> tuple[float, float]:
        """(arc, lateral distance) of the closest path point near the cache."""
        pts = self.points
        n = len(pts) - 1
        best_i = self._idx
        best_t = 0.0
        best_d2 = float("inf")
        # scan a window ahead of the cached segment, wrap to full scan if lost
        lo = max(0, self._idx - 1)
        hi = min(n, self._idx + 12)
        for i in range(lo, hi):
            d2, t = self._seg_d2(i, x, y)
            if d2 < best_d2:
                best_d2, best_i, best_t = d2, i, t
        if best_d2 > 25.0 and (lo > 0 or hi < n):
            for i in range(n):
                d2, t = self._seg_d2(i, x, y)
                if d2 < best_d2:
                    best_d2, best_i, best_t = d2, i, t
        self._idx = best_i
        seg_len = self.arcs[best_i + 1] - self.arcs[best_i]
        return float(self.arcs[best_i] + best_t * seg_len), math.sqrt(best_d2)

    def _seg_d2(self, i: int, x: float, y: float) -> tuple[float, float]:
        pts = self.points
        ax, ay = pts[i]
        bx, by = pts[i + 1]
        ex, ey = bx - ax, by - ay
        L2 = ex * ex + ey * ey
        if L2 < 1e-18:
            return (x - ax) ** 2 + (y - ay) ** 2, 0.0
        t = ((x - ax) * ex + (y - ay) * ey) / L2
        t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
        cx, cy = ax + t * ex, ay + t * ey
        return (x - cx) ** 2 + (y - cy) ** 2, t

    def point_at(self, s: float) -> tuple[float, float]:
        return point_at_arc(self.points, self.arcs, s)

    def tangent_at(self, s: float) -> tuple[float, float]:
        return tangent_at_arc(self.points, self.arcs, s)


# ---------------------------------------------------------------------------
# oriented boxes


def obb_corners(cx: float, cy: float, heading: float, length: float, width: float):
    """Corners of an oriented box, counter-clockwise starting front-left."""
    c = math.cos(heading)
    s = math.sin(heading)
    hl = 0.5 * length
    hw = 0.5 * width
    return (
        (cx + hl * c - hw * s, cy + hl * s + hw * c),
        (cx - hl * c - hw * s, cy - hl * s + hw * c),
        (cx - hl * c + hw * s, cy - hl * s - hw * c),
        (cx + hl * c + hw * s, cy + hl * s - hw * c),
    )


def sat_obb_overlap(
    ca, cb, heading_a: float, heading_b: float
) -> tuple[float, float, float] | None:
    """Separating-axis test over the 4 box axes.

    ca/cb are corner tuples from obb_corners. Returns (penetration, nx, ny)
    with the normal taken along the minimum-penetration axis, or None when a
    separating axis exists. The normal is not yet oriented a->b.
    """
    best = None
    for h in (heading_a, heading_b):
        c = math.cos(h)
        s = math.sin(h)
        for ax, ay in ((c, s), (-s, c)):
            amin = amax = ca[0][0] * ax + ca[0][1] * ay
            for px, py in ca[1:]:
                d = px * ax + py * ay
                if d < amin:
                    amin = d
                elif d > amax:
                    amax = d
            bmin = bmax = cb[0][0] * ax + cb[0][1] * ay
            for px, py in cb[1:]:
                d = px * ax + py * ay
                if d < bmin:
                    bmin = d
                elif d > bmax:
                    bmax = d
            overlap = min(amax, bmax) - max(amin, bmin)
            if overlap <= 0.0:
                return None
            # canonical axis sign + full-tuple comparison keep the choice
            # independent of argument order when overlaps tie exactly
            if ax < 0.0 or (ax == 0.0 and ay < 0.0):
                ax, ay = -ax, -ay
            cand = (overlap, ax, ay)
            if best is None or cand < best:
                best = cand
    return best


# ---------------------------------------------------------------------------
# point-in-region (even-odd over a set of closed rings)


class RegionIndex:
    """Pre-flattened edges of a set of closed rings for fast even-odd tests."""

    def __init__(self, rings: list[np.ndarray]):
        x1s, y1s, x2s, y2s = [], [], [], []
        for ring in rings:
            r = np.asarray(ring, dtype=float)
            nxt = np.roll(r, -1, axis=0)
            x1s.append(r[:, 0])
            y1s.append(r[:, 1])
            x2s.append(nxt[:, 0])
            y2s.append(nxt[:, 1])
        if x1s:
            self.x1 = np.concatenate(x1s)
            self.y1 = np.concatenate(y1s)
            self.x2 = np.concatenate(x2s)
            self.y2 = np.concatenate(y2s)
        else:
            self.x1 = self.y1 = self.x2 = self.y2 = np.zeros(0)
        self._dy = self.y2 - self.y1
        self._dx = self.x2 - self.x1

    def contains(self, x: float, y: float) -> bool:
        return bool(self.contains_many(np.array([[x, y]]))[0])

    def contains_many(self, pts: np.ndarray) -> np.ndarray:
        """Even-odd containment for an (n, 2) array of points."""
        if len(self.x1) == 0:
            return np.zeros(len(pts), dtype=bool)
        x = pts[:, 0][:, None]
        y = pts[:, 1][:, None]
        straddles = (self.y1 > y) != (self.y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (y - self.y1) / np.where(self._dy == 0.0, 1.0, self._dy)
        xint = self.x1 + t * self._dx
        crossings = straddles & (xint > x)
        return (crossings.sum(axis=1) % 2).astype(bool)

    def min_distance(self, x: float, y: float) -> float:
        """Distance from a point to the nearest ring edge."""
        if len(self.x1) == 0:
            return float("inf")
        ex = self._dx
        ey = self._dy
        L2 = ex * ex + ey * ey
        L2 = np.where(L2 < 1e-18, 1.0, L2)
        t = np.clip(((x - self.x1) * ex + (y - self.y1) * ey) / L2, 0.0, 1.0)
        cx = self.x1 + t * ex
        cy = self.y1 + t * ey
        return float(np.sqrt(np.min((cx - x) ** 2 + (cy - y) ** 2)))
