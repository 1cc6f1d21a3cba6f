"""Closed race tracks built from straight and constant-radius arc segments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

from pennmpc.errors import GeometryError, OffTrackError
from pennmpc.models.schemas import TrackSegment, TrackSpec
from pennmpc.sim.plant import wrap_angle

CLOSURE_TOLERANCE = 1e-6
OFF_TRACK_FACTOR = 5.0  # projection is only defined within this many half-widths
_CHUNK = 4096


@dataclass(frozen=True)
class Track:
    points: np.ndarray  # [N+1, 2], points[-1] == points[0]
    s: np.ndarray  # [N+1] cumulative chord length
    curvature: np.ndarray  # [N+1], 1/m, left turns positive
    half_width: float

    @property
    def total_length(self) -> float:
        return float(self.s[-1])

    @property
    def n_segments(self) -> int:
        return self.points.shape[0] - 1

    @property
    def seg_vectors(self) -> np.ndarray:
        return np.diff(self.points, axis=0)

    @property
    def seg_lengths(self) -> np.ndarray:
        return np.diff(self.s)

    @property
    def seg_headings(self) -> np.ndarray:
        v = self.seg_vectors
        return np.arctan2(v[:, 1], v[:, 0])

    def _locate(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.mod(s, self.total_length)
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, self.n_segments - 1)
        return idx, (s - self.s[idx]) / self.seg_lengths[idx]

    def point_at(self, s) -> np.ndarray:
        idx, frac = self._locate(np.asarray(s, dtype=np.float64))
        return self.points[idx] + frac[..., None] * self.seg_vectors[idx]

    def heading_at(self, s) -> np.ndarray:
        idx, _ = self._locate(np.asarray(s, dtype=np.float64))
        return self.seg_headings[idx]

    def curvature_at(self, s) -> np.ndarray:
        idx, _ = self._locate(np.asarray(s, dtype=np.float64))
        return self.curvature[idx]

    def reversed(self) -> "Track":
        """Same loop driven the other way round (clockwise for a ccw track)."""
        pts = self.points[::-1].copy()
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return Track(pts, np.concatenate([[0.0], np.cumsum(seg)]), -self.curvature[::-1].copy(), self.half_width)


class TrackFrame(NamedTuple):
    s: float
    e_lat: float  # left of the centerline positive
    e_psi: float


def _segment_point(seg: TrackSegment, start: np.ndarray, heading: float, u: np.ndarray) -> np.ndarray:
    if seg.kind == "straight":
        return start + u[:, None] * np.array([math.cos(heading), math.sin(heading)])
    kappa = math.copysign(1.0 / seg.radius, seg.angle)
    h = heading + kappa * u
    return start + np.stack(
        [(np.sin(h) - math.sin(heading)) / kappa, (math.cos(heading) - np.cos(h)) / kappa], axis=1
    )


def build_track(spec: TrackSpec) -> Track:
    """Concatenate the segments exactly, check closure, resample at spec.resample_step."""
    if not spec.segments:
        raise GeometryError("a track needs at least one segment")

    starts, headings, offsets, curvatures = [], [], [], []
    pos, heading, offset = np.zeros(2), 0.0, 0.0
    for seg in spec.segments:
        starts.append(pos)
        headings.append(heading)
        offsets.append(offset)
        L = seg.arc_length
        curvatures.append(0.0 if seg.kind == "straight" else math.copysign(1.0 / seg.radius, seg.angle))
        pos = _segment_point(seg, pos, heading, np.array([L]))[0]
        heading += 0.0 if seg.kind == "straight" else float(seg.angle)
        offset += L

    gap = float(np.linalg.norm(pos))
    turn = heading / (2.0 * math.pi)
    heading_gap = abs(turn - round(turn)) * 2.0 * math.pi
    if gap > CLOSURE_TOLERANCE or heading_gap > CLOSURE_TOLERANCE or round(turn) == 0:
        raise GeometryError(
            f"track does not close: end point is {gap:.4f} m from the start, "
            f"heading off by {heading_gap:.4f} rad, net turn {heading:.4f} rad"
        )

    total = offset
    n = int(math.ceil(total / spec.resample_step))
    grid = np.linspace(0.0, total, n + 1)
    offsets_arr = np.array(offsets)
    which = np.clip(np.searchsorted(offsets_arr, grid, side="right") - 1, 0, len(spec.segments) - 1)
    points = np.empty((n + 1, 2))
    curvature = np.empty(n + 1)
    for k, seg in enumerate(spec.segments):
        mask = which == k
        if mask.any():
            points[mask] = _segment_point(seg, starts[k], headings[k], grid[mask] - offsets_arr[k])
            curvature[mask] = curvatures[k]
    points[-1] = points[0]
    curvature[-1] = curvature[0]
    chord = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return Track(points, np.concatenate([[0.0], np.cumsum(chord)]), curvature, spec.half_width)


def track_frame_batch(xy: np.ndarray, yaw: np.ndarray, track: Track) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project [..., 2] positions onto the centerline; returns (s, e_lat, e_psi, off_track)."""
    xy = np.asarray(xy, dtype=np.float64)
    lead = xy.shape[:-1]
    p = xy.reshape(-1, 2)
    verts = track.points[:-1]
    n_seg = track.n_segments

    nearest = np.empty(p.shape[0], dtype=np.int64)
    for lo in range(0, p.shape[0], _CHUNK):
        chunk = p[lo : lo + _CHUNK]
        d2 = ((chunk[:, None, :] - verts[None, :, :]) ** 2).sum(axis=-1)
        nearest[lo : lo + _CHUNK] = d2.argmin(axis=1)

    vec = track.seg_vectors
    seg_len2 = (vec * vec).sum(axis=1)
    best_d2 = np.full(p.shape[0], np.inf)
    best_seg = np.zeros(p.shape[0], dtype=np.int64)
    best_t = np.zeros(p.shape[0])
    for cand in ((nearest - 1) % n_seg, nearest):
        a = track.points[cand]
        v = vec[cand]
        t = np.clip(((p - a) * v).sum(axis=1) / seg_len2[cand], 0.0, 1.0)
        q = a + t[:, None] * v
        d2 = ((p - q) ** 2).sum(axis=1)
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        best_seg = np.where(better, cand, best_seg)
        best_t = np.where(better, t, best_t)

    a = track.points[best_seg]
    v = vec[best_seg]
    q = a + best_t[:, None] * v
    tangent = v / np.sqrt(seg_len2[best_seg])[:, None]
    rel = p - q
    e_lat = tangent[:, 0] * rel[:, 1] - tangent[:, 1] * rel[:, 0]
    s = np.mod(track.s[best_seg] + best_t * np.sqrt(seg_len2[best_seg]), track.total_length)
    e_psi = wrap_angle(np.asarray(yaw, dtype=np.float64).reshape(-1) - track.seg_headings[best_seg])
    off = np.sqrt(best_d2) > OFF_TRACK_FACTOR * track.half_width
    return s.reshape(lead), e_lat.reshape(lead), e_psi.reshape(lead), off.reshape(lead)


def track_frame(pose, track: Track) -> TrackFrame:
    x, y, yaw = (float(v) for v in pose)
    s, e_lat, e_psi, off = track_frame_batch(np.array([[x, y]]), np.array([yaw]), track)
    if off[0]:
        raise OffTrackError(
            f"pose ({x:.2f}, {y:.2f}) is {abs(e_lat[0]):.2f} m from the centerline "
            f"(limit {OFF_TRACK_FACTOR * track.half_width:.2f} m)"
        )
    return TrackFrame(float(s[0]), float(e_lat[0]), float(e_psi[0]))


def save_track_csv(path: Union[str, Path], track: Track) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("s", "x", "y", "curvature", "half_width"))
        for s, (x, y), k in zip(track.s, track.points, track.curvature):
            writer.writerow([f"{v:.9g}" for v in (s, x, y, k, track.half_width)])
