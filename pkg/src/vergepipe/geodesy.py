"""Great-circle geometry on a spherical Earth.

Bearings are degrees clockwise from true north, normalised to [0, 360).
Distances are metres on a sphere of mean radius 6,371,000 m, which is more
than accurate enough for the 10-20 m panorama spacings this pipeline works
with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

EARTH_RADIUS_M = 6_371_000.0


class CompassOctant(Enum):
    """Eight-way compass sector. ``value * 45.0`` is the centre bearing."""

    N = 0
    NE = 1
    E = 2
    SE = 3
    S = 4
    SW = 5
    W = 6
    NW = 7

    @property
    def center_bearing(self) -> float:
        return self.value * 45.0


class VergeSide(Enum):
    """Side of the road relative to the direction of travel."""

    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class GeoPoint:
    """WGS-84 style latitude/longitude pair in decimal degrees."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range [-90, 90]: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range [-180, 180]: {self.lon}")


def normalize_bearing(degrees: float) -> float:
    """Wrap a bearing into [0, 360). Idempotent."""
    b = degrees % 360.0
    # float rounding can yield exactly 360.0 for tiny negative inputs
    return 0.0 if b >= 360.0 else b


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in metres."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def forward_bearing(origin: GeoPoint, target: GeoPoint) -> float:
    """Initial great-circle azimuth from ``origin`` towards ``target``.

    Raises ValueError for coincident points, where the bearing is undefined.
    """
    if origin.lat == target.lat and origin.lon == target.lon:
        raise ValueError("undefined bearing: coincident points")
    phi1 = math.radians(origin.lat)
    phi2 = math.radians(target.lat)
    dlam = math.radians(target.lon - origin.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return normalize_bearing(math.degrees(math.atan2(y, x)))


def perpendicular_bearing(road: float, side: VergeSide) -> float:
    """Bearing pointing at the verge on ``side`` of a road heading ``road``."""
    offset = 90.0 if side is VergeSide.RIGHT else 270.0
    return normalize_bearing(road + offset)


def octant_of(bearing: float) -> CompassOctant:
    """Octant whose half-open sector [centre - 22.5, centre + 22.5) holds ``bearing``.

    The north sector wraps: [337.5, 360) plus [0, 22.5).
    """
    b = normalize_bearing(bearing)
    return CompassOctant(int((b + 22.5) // 45.0) % 8)


def destination_point(origin: GeoPoint, bearing: float, distance_m: float) -> GeoPoint:
    """Point reached travelling ``distance_m`` from ``origin`` on ``bearing``."""
    delta = distance_m / EARTH_RADIUS_M
    theta = math.radians(normalize_bearing(bearing))
    phi1 = math.radians(origin.lat)
    lam1 = math.radians(origin.lon)
    phi2 = math.asin(
        math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    )
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    lon = math.degrees(lam2)
    # keep longitude in [-180, 180]
    lon = (lon + 180.0) % 360.0 - 180.0
    return GeoPoint(math.degrees(phi2), lon)


def intermediate_point(a: GeoPoint, b: GeoPoint, fraction: float) -> GeoPoint:
    """Point ``fraction`` of the way along the great circle from ``a`` to ``b``."""
    if fraction <= 0.0:
        return a
    if fraction >= 1.0:
        return b
    delta = haversine_distance(a, b) / EARTH_RADIUS_M
    if delta == 0.0:
        return a
    sin_d = math.sin(delta)
    wa = math.sin((1.0 - fraction) * delta) / sin_d
    wb = math.sin(fraction * delta) / sin_d
    phi1, lam1 = math.radians(a.lat), math.radians(a.lon)
    phi2, lam2 = math.radians(b.lat), math.radians(b.lon)
    x = wa * math.cos(phi1) * math.cos(lam1) + wb * math.cos(phi2) * math.cos(lam2)
    y = wa * math.cos(phi1) * math.sin(lam1) + wb * math.cos(phi2) * math.sin(lam2)
    z = wa * math.sin(phi1) + wb * math.sin(phi2)
    lat = math.degrees(math.atan2(z, math.sqrt(x * x + y * y)))
    lon = math.degrees(math.atan2(y, x))
    return GeoPoint(lat, lon)
