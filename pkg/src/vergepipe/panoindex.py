"""Panorama metadata acquisition, caching, and GT-point snapping.

Survey GPS points only describe a road approximately; panorama locations
follow the drive path exactly, so every GT point has to be snapped onto a
panorama before images can be extracted. Naive nearest-neighbour snapping
fails around junctions (the nearest panorama can belong to a different
road), so snapping walks candidates in distance order and accepts the first
one that is chain-consistent with the previously accepted panorama.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .geodesy import GeoPoint, forward_bearing, haversine_distance, intermediate_point
from .survey import SurveySection

DEFAULT_SNAP_THRESHOLD_M = 25.0
DEFAULT_MAX_CHAIN_HOPS = 8
DEFAULT_INTERPOLATION_STEP_M = 10.0


@dataclass(frozen=True)
class PanoramaRecord:
    """One street-view panorama: id, location, capture date, drive-path links."""

    pano_id: str
    location: GeoPoint
    capture_date: tuple[int, int]  # (year, month)
    neighbours: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.pano_id:
            raise ValueError("pano_id must be non-empty")
        year, month = self.capture_date
        if not 1 <= month <= 12:
            raise ValueError(f"capture month out of range 1..12: {month}")

    def to_dict(self) -> dict:
        return {
            "pano_id": self.pano_id,
            "lat": self.location.lat,
            "lon": self.location.lon,
            "year": self.capture_date[0],
            "month": self.capture_date[1],
            "neighbours": list(self.neighbours),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PanoramaRecord":
        return cls(
            pano_id=data["pano_id"],
            location=GeoPoint(data["lat"], data["lon"]),
            capture_date=(int(data["year"]), int(data["month"])),
            neighbours=tuple(data.get("neighbours", ())),
        )


class RejectReason(Enum):
    TOO_FAR = "too_far"
    ROAD_DISCONTINUITY = "road_discontinuity"
    NO_CANDIDATES = "no_candidates"


@dataclass(frozen=True)
class SnapResult:
    """Outcome of snapping one GT point onto the panorama index."""

    source: GeoPoint
    pano: PanoramaRecord | None
    distance_m: float
    accepted: bool
    reject_reason: RejectReason | None = None

    def __post_init__(self) -> None:
        if self.accepted and self.reject_reason is not None:
            raise ValueError("accepted snaps carry no reject reason")


class PanoramaIndex:
    """Materialised set of panorama records with nearest-neighbour queries.

    Adjacency is treated as undirected (fixtures may list links one-way).
    Distance ties are broken by lexicographic pano_id so queries are
    deterministic.
    """

    def __init__(self, records: Iterable[PanoramaRecord]):
        self._by_id: dict[str, PanoramaRecord] = {}
        for rec in records:
            if rec.pano_id in self._by_id:
                raise ValueError(f"duplicate pano_id in index: {rec.pano_id}")
            self._by_id[rec.pano_id] = rec
        self._adjacency: dict[str, set[str]] = {pid: set() for pid in self._by_id}
        for rec in self._by_id.values():
            for nb in rec.neighbours:
                self._adjacency[rec.pano_id].add(nb)
                self._adjacency.setdefault(nb, set()).add(rec.pano_id)

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, pano_id: str) -> bool:
        return pano_id in self._by_id

    def get(self, pano_id: str) -> PanoramaRecord:
        return self._by_id[pano_id]

    def records(self) -> list[PanoramaRecord]:
        return [self._by_id[pid] for pid in sorted(self._by_id)]

    def nearest(self, point: GeoPoint) -> tuple[PanoramaRecord, float] | None:
        best: tuple[float, str] | None = None
        for pid, rec in self._by_id.items():
            d = haversine_distance(point, rec.location)
            if best is None or (d, pid) < best:
                best = (d, pid)
        if best is None:
            return None
        return self._by_id[best[1]], best[0]

    def candidates_within(self, point: GeoPoint, radius_m: float) -> list[tuple[PanoramaRecord, float]]:
        found = []
        for pid, rec in self._by_id.items():
            d = haversine_distance(point, rec.location)
            if d <= radius_m:
                found.append((d, pid))
        found.sort()
        return [(self._by_id[pid], d) for d, pid in found]

    def has_adjacency(self, pano_id: str) -> bool:
        return bool(self._adjacency.get(pano_id))

    def reachable_within_hops(self, src: str, dst: str, max_hops: int) -> bool:
        return self.reachability(src, dst, max_hops) == "reachable"

    def reachability(self, src: str, dst: str, max_hops: int) -> str:
        """BFS verdict: "reachable", "unreachable", or "inconclusive".

        The graph only holds adjacency for materialised records plus the
        neighbour ids they name. Touching a neighbour id with no record
        means the true graph extends beyond what we fetched, so a negative
        answer is inconclusive rather than a proven discontinuity.
        """
        if src == dst:
            return "reachable"
        seen = {src}
        dangling = src not in self._by_id
        frontier = deque([(src, 0)])
        while frontier:
            node, hops = frontier.popleft()
            if hops >= max_hops:
                continue
            for nb in self._adjacency.get(node, ()):
                if nb == dst:
                    return "reachable"
                if nb not in seen:
                    seen.add(nb)
                    if nb not in self._by_id:
                        dangling = True
                    frontier.append((nb, hops + 1))
        return "inconclusive" if dangling else "unreachable"

    def shortest_chain(self, src: str, dst: str) -> list[str] | None:
        """BFS shortest neighbour path src..dst inclusive, or None."""
        if src == dst:
            return [src]
        parent: dict[str, str] = {src: src}
        frontier = deque([src])
        while frontier:
            node = frontier.popleft()
            for nb in sorted(self._adjacency.get(node, ())):
                if nb in parent:
                    continue
                parent[nb] = node
                if nb == dst:
                    path = [dst]
                    while path[-1] != src:
                        path.append(parent[path[-1]])
                    return path[::-1]
                frontier.append(nb)
        return None


# ---------------------------------------------------------------------------
# Metadata backends
# ---------------------------------------------------------------------------


class BackendError(Exception):
    """Base class for metadata/image backend failures."""


class RetryableBackendError(BackendError):
    """Transient failure (network, 5xx); safe to retry with backoff."""


class BackendAuthError(BackendError):
    """Quota or credential failure; retrying cannot help."""


class MalformedResponseError(BackendError):
    """The service answered with a payload we cannot interpret."""


CREDENTIAL_ENV_VAR = "SV_API_KEY"


class JsonlMetadataBackend:
    """File-backed mock backend reading a JSON-lines panorama fixture.

    Each line holds ``{pano_id, lat, lon, year, month, neighbours?}``. A
    lookup answers with the nearest fixture panorama within
    ``coverage_radius_m`` of the query point, mimicking a metadata service
    that reports the closest panorama or "no panorama".
    """

    def __init__(self, path: str | Path, coverage_radius_m: float = 50.0):
        self.coverage_radius_m = coverage_radius_m
        self.calls = 0
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(PanoramaRecord.from_dict(json.loads(line)))
        self._index = PanoramaIndex(records)

    def lookup(self, point: GeoPoint) -> PanoramaRecord | None:
        self.calls += 1
        hit = self._index.nearest(point)
        if hit is None or hit[1] > self.coverage_radius_m:
            return None
        return hit[0]

    def all_records(self) -> list[PanoramaRecord]:
        return self._index.records()


class HttpMetadataBackend:
    """Live HTTP client for a street-view metadata endpoint.

    Expects a JSON answer shaped like
    ``{"status": "OK", "pano_id": ..., "location": {"lat":..,"lng":..},
    "date": "YYYY-MM", "links": [ids]}``; ``status`` values of
    ``ZERO_RESULTS``/``NOT_FOUND`` mean no panorama near the point.
    """

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        timeout_s: float = 10.0,
        session=None,
    ):
        self.url = url
        self.api_key = api_key if api_key is not None else os.environ.get(CREDENTIAL_ENV_VAR)
        self.timeout_s = timeout_s
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self.calls = 0

    def lookup(self, point: GeoPoint) -> PanoramaRecord | None:
        if not self.api_key:
            raise BackendAuthError(
                f"no credential: set the {CREDENTIAL_ENV_VAR} environment variable"
            )
        import requests

        self.calls += 1
        try:
            resp = self._session.get(
                self.url,
                params={"location": f"{point.lat},{point.lon}", "key": self.api_key},
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise RetryableBackendError(f"metadata request failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise BackendAuthError(
                f"metadata endpoint rejected the credential from {CREDENTIAL_ENV_VAR} "
                f"(HTTP {resp.status_code})"
            )
        if resp.status_code >= 500:
            raise RetryableBackendError(f"metadata endpoint returned HTTP {resp.status_code}")
        return self._parse_payload(resp.text)

    @staticmethod
    def _parse_payload(text: str) -> PanoramaRecord | None:
        excerpt = text[:200]
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"non-JSON metadata payload: {excerpt!r}") from exc
        status = payload.get("status")
        if status in ("ZERO_RESULTS", "NOT_FOUND"):
            return None
        if status in ("OVER_QUERY_LIMIT", "REQUEST_DENIED"):
            raise BackendAuthError(
                f"metadata endpoint reported {status}; check {CREDENTIAL_ENV_VAR}"
            )
        try:
            pano_id = payload.get("pano_id") or payload["pano"]
            loc = payload["location"]
            if "date" in payload:
                year_s, month_s = str(payload["date"]).split("-")[:2]
                date = (int(year_s), int(month_s))
            else:
                date = (int(payload["year"]), int(payload["month"]))
            neighbours = tuple(payload.get("links", payload.get("neighbours", ())))
            return PanoramaRecord(
                pano_id=pano_id,
                location=GeoPoint(float(loc["lat"]), float(loc.get("lng", loc.get("lon")))),
                capture_date=date,
                neighbours=neighbours,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(f"unexpected metadata payload: {excerpt!r}") from exc


# ---------------------------------------------------------------------------
# On-disk cache: one JSONL file per 0.01 x 0.01 degree tile
# ---------------------------------------------------------------------------


class MetadataCache:
    """Append-only JSONL cache keyed by (lat, lon) rounded to 6 decimals.

    Negative lookups ("no panorama here") are cached too, so coverage gaps
    do not trigger repeated network calls; ``negative_ttl_s=None`` keeps
    them forever (the default for a single run).
    """

    def __init__(self, cache_dir: str | Path, negative_ttl_s: float | None = None):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.negative_ttl_s = negative_ttl_s
        self._tiles: dict[str, dict[tuple[float, float], tuple[dict | None, float]]] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(point: GeoPoint) -> tuple[float, float]:
        return (round(point.lat, 6), round(point.lon, 6))

    @staticmethod
    def _tile_name(point: GeoPoint) -> str:
        tlat = math.floor(point.lat * 100.0) / 100.0
        tlon = math.floor(point.lon * 100.0) / 100.0
        return f"tile_{tlat:.2f}_{tlon:.2f}.jsonl"

    def _tile(self, point: GeoPoint) -> dict[tuple[float, float], tuple[dict | None, float]]:
        name = self._tile_name(point)
        with self._lock:
            if name in self._tiles:
                return self._tiles[name]
            entries: dict[tuple[float, float], tuple[dict | None, float]] = {}
            path = self.cache_dir / name
            if path.exists():
                with open(path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        if not line.strip():
                            continue
                        row = json.loads(line)
                        entries[tuple(row["key"])] = (row["record"], row.get("ts", 0.0))
            self._tiles[name] = entries
            return entries

    def lookup(self, point: GeoPoint):
        """Return a cached PanoramaRecord, ``None`` for a cached negative,
        or the module-private miss sentinel when the point is unknown."""
        entries = self._tile(point)
        key = self._key(point)
        if key not in entries:
            return _MISS
        record, ts = entries[key]
        if record is None:
            if self.negative_ttl_s is not None and time.time() - ts > self.negative_ttl_s:
                return _MISS
            return None
        return PanoramaRecord.from_dict(record)

    def store(self, point: GeoPoint, record: PanoramaRecord | None) -> None:
        entries = self._tile(point)
        key = self._key(point)
        payload = None if record is None else record.to_dict()
        now = time.time()
        with self._lock:
            entries[key] = (payload, now)
            path = self.cache_dir / self._tile_name(point)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": list(key), "record": payload, "ts": now}) + "\n")

    def __contains__(self, point: GeoPoint) -> bool:
        return self.lookup(point) is not _MISS


class _Miss:
    __slots__ = ()

    def __repr__(self) -> str:  # pragma: no cover
        return "<cache miss>"


_MISS = _Miss()

CACHE_MISS = _MISS


# ---------------------------------------------------------------------------
# Fetching with retry/backoff, bounded concurrency, and rate limiting
# ---------------------------------------------------------------------------


class RateLimiter:
    """Minimum-interval limiter shared by concurrent fetch workers."""

    def __init__(self, rate_per_s: float):
        if rate_per_s <= 0:
            raise ValueError("rate_per_s must be positive")
        self._interval = 1.0 / rate_per_s
        self._lock = threading.Lock()
        self._next_at = 0.0

    def acquire(self) -> None:
        with self._lock:
            now = time.monotonic()
            wait = self._next_at - now
            self._next_at = max(now, self._next_at) + self._interval
        if wait > 0:
            time.sleep(wait)


def fetch_metadata(
    point: GeoPoint,
    backend,
    cache: MetadataCache | None = None,
    *,
    max_attempts: int = 5,
    base_delay_s: float = 0.2,
    sleep: Callable[[float], None] = time.sleep,
) -> PanoramaRecord | None:
    """Nearest-panorama lookup with cache-first reads and bounded retries.

    Transient backend failures back off exponentially for up to
    ``max_attempts`` tries; auth and malformed-payload failures are raised
    immediately. Every settled answer (including "no panorama") is written
    through to the cache.
    """
    if cache is not None:
        hit = cache.lookup(point)
        if hit is not _MISS:
            return hit

    attempt = 0
    while True:
        try:
            record = backend.lookup(point)
            break
        except RetryableBackendError:
            attempt += 1
            if attempt >= max_attempts:
                raise
            sleep(base_delay_s * (2.0 ** (attempt - 1)))

    if cache is not None:
        cache.store(point, record)
    return record


def fetch_many(
    points: Sequence[GeoPoint],
    backend,
    cache: MetadataCache | None = None,
    *,
    workers: int = 4,
    rate_per_s: float = 10.0,
    max_attempts: int = 5,
    base_delay_s: float = 0.2,
) -> list[PanoramaRecord | None]:
    """Fetch metadata for many points through a bounded worker pool."""
    limiter = RateLimiter(rate_per_s)

    def one(point: GeoPoint) -> PanoramaRecord | None:
        if cache is not None:
            hit = cache.lookup(point)
            if hit is not _MISS:
                return hit
        limiter.acquire()
        return fetch_metadata(
            point, backend, cache, max_attempts=max_attempts, base_delay_s=base_delay_s
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, points))


# ---------------------------------------------------------------------------
# Snapping and interpolation
# ---------------------------------------------------------------------------


def _mean_point_spacing(section: SurveySection) -> float:
    pts = [p.location for p in section.points]
    gaps = [haversine_distance(a, b) for a, b in zip(pts, pts[1:])]
    return sum(gaps) / len(gaps) if gaps else 0.0


def _chain_consistent(
    prev: PanoramaRecord,
    candidate: PanoramaRecord,
    index: PanoramaIndex,
    max_hops: int,
    max_gap_m: float,
) -> bool:
    if prev.pano_id == candidate.pano_id:
        return True
    if index.has_adjacency(prev.pano_id) or index.has_adjacency(candidate.pano_id):
        verdict = index.reachability(prev.pano_id, candidate.pano_id, max_hops)
        if verdict != "inconclusive":
            return verdict == "reachable"
        # sparse fetches leave the neighbour graph incomplete; fall through
    return haversine_distance(prev.location, candidate.location) <= max_gap_m


def snap_section(
    section: SurveySection,
    index: PanoramaIndex,
    *,
    threshold_m: float = DEFAULT_SNAP_THRESHOLD_M,
    max_hops: int = DEFAULT_MAX_CHAIN_HOPS,
) -> list[SnapResult]:
    """Snap every GT point of a section to a panorama, in point order.

    Candidates within ``threshold_m`` are walked nearest-first (ties broken
    by pano_id); after the first accepted snap a candidate must also be
    chain-consistent with the previously accepted panorama: reachable within
    ``max_hops`` neighbour hops when adjacency data exists, otherwise no
    further away than twice the section's mean GT point spacing. A point
    whose candidates all fail the chain rule is rejected with
    ROAD_DISCONTINUITY (carrying the nearest candidate for diagnosis); a
    point with no candidate inside the threshold is TOO_FAR, or
    NO_CANDIDATES on an empty index.
    """
    spacing = _mean_point_spacing(section)
    max_gap = 2.0 * spacing if spacing > 0 else 2.0 * threshold_m

    results: list[SnapResult] = []
    prev: PanoramaRecord | None = None
    for point in section.points:
        loc = point.location
        if len(index) == 0:
            results.append(SnapResult(loc, None, math.inf, False, RejectReason.NO_CANDIDATES))
            continue
        candidates = index.candidates_within(loc, threshold_m)
        if not candidates:
            rec, dist = index.nearest(loc)
            results.append(SnapResult(loc, rec, dist, False, RejectReason.TOO_FAR))
            continue
        chosen: tuple[PanoramaRecord, float] | None = None
        for rec, dist in candidates:
            if prev is None or _chain_consistent(prev, rec, index, max_hops, max_gap):
                chosen = (rec, dist)
                break
        if chosen is None:
            rec, dist = candidates[0]
            results.append(SnapResult(loc, rec, dist, False, RejectReason.ROAD_DISCONTINUITY))
            continue
        results.append(SnapResult(loc, chosen[0], chosen[1], True))
        prev = chosen[0]
    return results


def interpolate_panoramas(
    a: SnapResult,
    b: SnapResult,
    index: PanoramaIndex,
    *,
    step_m: float = DEFAULT_INTERPOLATION_STEP_M,
    threshold_m: float = DEFAULT_SNAP_THRESHOLD_M,
) -> list[PanoramaRecord]:
    """Panoramas lying between two accepted snaps, endpoints excluded.

    Follows the neighbour chain when one exists; otherwise samples the
    great-circle segment every ``step_m`` metres, snaps each sample, and
    deduplicates. Output is ordered by along-road position (distance from
    ``a``); an empty list means the snaps are adjacent or coincident.
    """
    if not (a.accepted and b.accepted):
        raise ValueError("interpolation requires two accepted snaps")
    assert a.pano is not None and b.pano is not None
    if a.pano.pano_id == b.pano.pano_id:
        return []

    chain = index.shortest_chain(a.pano.pano_id, b.pano.pano_id)
    if chain is not None and all(pid in index for pid in chain[1:-1]):
        return [index.get(pid) for pid in chain[1:-1]]
    # no chain, or the chain crosses neighbour ids that were never
    # materialised: fall back to sampling the segment geometrically

    total = haversine_distance(a.pano.location, b.pano.location)
    if total <= step_m:
        return []
    exclude = {a.pano.pano_id, b.pano.pano_id}
    seen: dict[str, float] = {}
    steps = int(total // step_m)
    for i in range(1, steps + 1):
        fraction = (i * step_m) / total
        if fraction >= 1.0:
            break
        sample = intermediate_point(a.pano.location, b.pano.location, fraction)
        hit = index.nearest(sample)
        if hit is None or hit[1] > threshold_m:
            continue
        rec = hit[0]
        if rec.pano_id in exclude or rec.pano_id in seen:
            continue
        seen[rec.pano_id] = haversine_distance(a.pano.location, rec.location)
    ordered = sorted(seen.items(), key=lambda kv: (kv[1], kv[0]))
    return [index.get(pid) for pid, _ in ordered]


def road_bearing_at(pano: PanoramaRecord, ordered_chain: Sequence[PanoramaRecord]) -> float:
    """Road bearing at ``pano`` from its neighbours in an ordered chain.

    Interior panoramas use the previous-to-next direction; the head and tail
    fall back to their single adjacent hop.
    """
    if len(ordered_chain) < 2:
        raise ValueError("road bearing needs a chain of at least 2 panoramas")
    ids = [rec.pano_id for rec in ordered_chain]
    try:
        i = ids.index(pano.pano_id)
    except ValueError:
        raise ValueError(f"panorama {pano.pano_id} is not part of the chain") from None
    if i == 0:
        return forward_bearing(ordered_chain[0].location, ordered_chain[1].location)
    if i == len(ordered_chain) - 1:
        return forward_bearing(ordered_chain[-2].location, ordered_chain[-1].location)
    return forward_bearing(ordered_chain[i - 1].location, ordered_chain[i + 1].location)
