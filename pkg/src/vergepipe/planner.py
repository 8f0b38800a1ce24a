"""Turn snapped, scored panorama locations into labelled image requests.

Each matched verge yields three 45-degree-FOV images: one at the matched
octant's centre bearing and one at each flanking octant centre, all
inheriting the matched octant's label (flanking octants usually look along
the road and carry no score of their own). The alternative geometry,
centred on the exact perpendicular instead of the octant centre, is kept
behind ``heading_policy="perpendicular_offsets"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence
from urllib.parse import urlencode

from .geodesy import (
    CompassOctant,
    VergeSide,
    normalize_bearing,
    octant_of,
    perpendicular_bearing,
)
from .panoindex import PanoramaIndex, PanoramaRecord, road_bearing_at
from .survey import Scheme, VergeScore, quantize_score

DEFAULT_FOV = 45.0
DEFAULT_PITCH = 20.0
DEFAULT_SIZE = 640

HEADING_POLICIES = ("octant_centers", "perpendicular_offsets")


@dataclass(frozen=True)
class ImageRequest:
    """One labelled static-image request against a panorama."""

    pano_id: str
    heading: float
    label: int
    raw_score: int
    octant: CompassOctant
    section_id: str
    side: VergeSide
    fov: float = DEFAULT_FOV
    pitch: float = DEFAULT_PITCH
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE

    def __post_init__(self) -> None:
        if not (0.0 < self.fov <= 120.0):
            raise ValueError(f"fov out of range (0, 120]: {self.fov}")
        if not (-90.0 <= self.pitch <= 90.0):
            raise ValueError(f"pitch out of range [-90, 90]: {self.pitch}")
        object.__setattr__(self, "heading", normalize_bearing(self.heading))

    @property
    def identity_key(self) -> str:
        """Stable dedup/cache key over (pano, heading, fov, pitch)."""
        return f"{self.pano_id}|h{self.heading:.2f}|f{self.fov:g}|p{self.pitch:g}"


class SkippedMatch(NamedTuple):
    pano_id: str
    octant: CompassOctant
    reason: str


class MatchOutcome(NamedTuple):
    matches: list[tuple[VergeSide, VergeScore]]
    skipped: list[SkippedMatch]


@dataclass
class ExtractionPlan:
    requests: list[ImageRequest] = field(default_factory=list)
    skipped: list[SkippedMatch] = field(default_factory=list)

    def __post_init__(self) -> None:
        keys = [r.identity_key for r in self.requests]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate identity keys within an extraction plan")


def match_octant_scores(
    pano: PanoramaRecord,
    road_bearing: float,
    scores: Sequence[VergeScore],
) -> MatchOutcome:
    """Match the perpendicular verge on each road side to an octant score.

    A side matches when the octant containing its perpendicular bearing
    carries a score; otherwise that side is skipped with a reason, mirroring
    survey locations whose verge angle falls outside any scored octant.
    """
    by_octant: dict[CompassOctant, VergeScore] = {}
    for score in scores:
        if score.octant in by_octant:
            raise ValueError(f"duplicate score for octant {score.octant.name}")
        by_octant[score.octant] = score

    matches: list[tuple[VergeSide, VergeScore]] = []
    skipped: list[SkippedMatch] = []
    for side in (VergeSide.RIGHT, VergeSide.LEFT):
        octant = octant_of(perpendicular_bearing(road_bearing, side))
        score = by_octant.get(octant)
        if score is None:
            skipped.append(
                SkippedMatch(pano.pano_id, octant, "no score in perpendicular octant")
            )
        else:
            matches.append((side, score))
    return MatchOutcome(matches, skipped)


def _headings_for(
    octant: CompassOctant, road_bearing: float, side: VergeSide, policy: str
) -> tuple[float, float, float]:
    if policy == "octant_centers":
        center = octant.center_bearing
    elif policy == "perpendicular_offsets":
        center = perpendicular_bearing(road_bearing, side)
    else:
        raise ValueError(f"unknown heading policy {policy!r}")
    return (
        normalize_bearing(center - 45.0),
        normalize_bearing(center),
        normalize_bearing(center + 45.0),
    )


def plan_images(
    pano: PanoramaRecord,
    road_bearing: float,
    matches: Sequence[tuple[VergeSide, VergeScore]],
    scheme: Scheme,
    *,
    section_id: str = "",
    rnr: bool = False,
    skipped: Sequence[SkippedMatch] = (),
    heading_policy: str = "octant_centers",
    fov: float = DEFAULT_FOV,
    pitch: float = DEFAULT_PITCH,
    size: int = DEFAULT_SIZE,
) -> ExtractionPlan:
    """Emit three labelled image requests per matched verge.

    All three headings inherit the matched octant's quantised label.
    Requests are sorted by (pano_id, heading) so planning is order-stable.
    """
    requests: list[ImageRequest] = []
    for side, score in matches:
        label = quantize_score(score.species_count, scheme, rnr)
        for heading in _headings_for(score.octant, road_bearing, side, heading_policy):
            requests.append(
                ImageRequest(
                    pano_id=pano.pano_id,
                    heading=heading,
                    label=label,
                    raw_score=score.species_count,
                    octant=score.octant,
                    section_id=section_id,
                    side=side,
                    fov=fov,
                    pitch=pitch,
                    width=size,
                    height=size,
                )
            )
    requests.sort(key=lambda r: (r.pano_id, r.heading))
    return ExtractionPlan(requests=requests, skipped=list(skipped))


# ---------------------------------------------------------------------------
# Grid-sampling pathology
# ---------------------------------------------------------------------------


def _walk_layout(layout: Sequence[PanoramaRecord], position_m: float):
    """Point at ``position_m`` along the polyline through the layout."""
    from .geodesy import haversine_distance, intermediate_point

    remaining = position_m
    for a, b in zip(layout, layout[1:]):
        seg = haversine_distance(a.location, b.location)
        if remaining <= seg or seg == 0.0:
            if seg == 0.0:
                return a.location
            return intermediate_point(a.location, b.location, remaining / seg)
        remaining -= seg
    return layout[-1].location


def simulate_grid_sampling(
    road_layout: Sequence[PanoramaRecord],
    grid_spacing_m: float,
    *,
    fov: float = DEFAULT_FOV,
    pitch: float = DEFAULT_PITCH,
) -> float:
    """Duplication rate of grid-interval image requests over a road layout.

    Walks the road at fixed grid intervals, snaps every grid point to its
    nearest panorama, forms the identity key it would request, and returns
    duplicate_requests / total_requests. Whenever the grid interval drops
    below the local panorama spacing, adjacent grid cells collapse onto one
    panorama and the rate climbs above zero.
    """
    if not road_layout:
        raise ValueError("empty road layout")
    if grid_spacing_m <= 0:
        raise ValueError("grid spacing must be positive")
    from .geodesy import haversine_distance

    index = PanoramaIndex(road_layout)
    total_len = sum(
        haversine_distance(a.location, b.location) for a, b in zip(road_layout, road_layout[1:])
    )
    positions = [0.0]
    while positions[-1] + grid_spacing_m <= total_len + 1e-9:
        positions.append(positions[-1] + grid_spacing_m)

    keys = []
    for pos in positions:
        sample = _walk_layout(road_layout, pos)
        rec, _ = index.nearest(sample)
        heading = road_bearing_at(rec, road_layout) if len(road_layout) >= 2 else 0.0
        keys.append(f"{rec.pano_id}|h{normalize_bearing(heading):.2f}|f{fov:g}|p{pitch:g}")
    duplicates = len(keys) - len(set(keys))
    return duplicates / len(keys)


def simulate_panorama_sampling(
    road_layout: Sequence[PanoramaRecord],
    *,
    fov: float = DEFAULT_FOV,
    pitch: float = DEFAULT_PITCH,
) -> float:
    """Duplication rate when requests are driven by the panoramas themselves."""
    if not road_layout:
        raise ValueError("empty road layout")
    keys = []
    for rec in road_layout:
        heading = road_bearing_at(rec, road_layout) if len(road_layout) >= 2 else 0.0
        keys.append(f"{rec.pano_id}|h{normalize_bearing(heading):.2f}|f{fov:g}|p{pitch:g}")
    return (len(keys) - len(set(keys))) / len(keys)


# ---------------------------------------------------------------------------
# Static-image request serialisation
# ---------------------------------------------------------------------------


def request_query(request: ImageRequest, credential: str | None = None) -> list[tuple[str, str]]:
    """Query parameters in the documented byte-exact order.

    Order is ``pano, heading, fov, pitch, size[, key]`` with the heading
    fixed to two decimals, so serialised requests double as stable cache
    keys.
    """
    params = [
        ("pano", request.pano_id),
        ("heading", f"{request.heading:.2f}"),
        ("fov", f"{request.fov:g}"),
        ("pitch", f"{request.pitch:g}"),
        ("size", f"{request.width}x{request.height}"),
    ]
    if credential:
        params.append(("key", credential))
    return params


def request_url(base_url: str, request: ImageRequest, credential: str | None = None) -> str:
    return base_url + "?" + urlencode(request_query(request, credential))
