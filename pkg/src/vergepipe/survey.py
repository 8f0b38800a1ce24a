"""KML survey ingestion and score quantisation.

The supported KML subset is deliberately small: a ``Placemark`` carries a
``LineString`` with whitespace-separated ``lon,lat[,alt]`` coordinate tuples
plus ``ExtendedData`` entries named ``score_N`` .. ``score_NW`` (integer
species counts per compass octant), with optional ``rnr`` (0/1) and
``locality`` fields. Anything outside that subset is reported as a
per-placemark diagnostic rather than silently dropped.
"""

from __future__ import annotations

import io
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from .geodesy import CompassOctant, GeoPoint


class Locality(Enum):
    WOLDS = "Wolds"
    NORTHERN_EDGE = "NorthernEdge"
    LIMESTONE_GRASSLAND = "LimestoneGrassland"


class Scheme(Enum):
    """Score quantisation scheme: number of ordinal classes."""

    FOUR_CLASS = 4
    FIVE_CLASS = 5

    @property
    def num_classes(self) -> int:
        return self.value


_SCHEME_ALIASES = {
    "four": Scheme.FOUR_CLASS,
    "fourclass": Scheme.FOUR_CLASS,
    "four_class": Scheme.FOUR_CLASS,
    "4": Scheme.FOUR_CLASS,
    "five": Scheme.FIVE_CLASS,
    "fiveclass": Scheme.FIVE_CLASS,
    "five_class": Scheme.FIVE_CLASS,
    "5": Scheme.FIVE_CLASS,
}


def parse_scheme(name: str) -> Scheme:
    try:
        return _SCHEME_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; expected 'four' or 'five'") from None


@dataclass(frozen=True)
class VergeScore:
    """Positive-indicator species count for one compass octant."""

    octant: CompassOctant
    species_count: int

    def __post_init__(self) -> None:
        if self.species_count < 0:
            raise ValueError(f"species_count must be >= 0, got {self.species_count}")


@dataclass(frozen=True)
class SurveyPoint:
    location: GeoPoint
    scores: tuple[VergeScore, ...]

    def __post_init__(self) -> None:
        octants = [s.octant for s in self.scores]
        if len(set(octants)) != len(octants):
            raise ValueError("duplicate octant scores on one survey point")

    def score_for(self, octant: CompassOctant) -> VergeScore | None:
        for s in self.scores:
            if s.octant is octant:
                return s
        return None


@dataclass(frozen=True)
class SurveySection:
    """One surveyed road stretch: ordered GPS points with per-octant scores."""

    section_id: str
    points: tuple[SurveyPoint, ...]
    locality: Locality = Locality.WOLDS
    rnr: bool = False

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError("a section needs at least 2 points to define a bearing")


def quantize_score(species_count: int, scheme: Scheme, rnr_flag: bool = False) -> int:
    """Map a raw species count to its ordinal class.

    Four-class: 0-3 -> 1, 4-7 -> 2, 8-11 -> 3, 12+ -> 4. The five-class
    scheme splits the top band: 12-19 -> 4 and 20+ (or an explicit reserve
    designation via ``rnr_flag``) -> 5.
    """
    if species_count < 0:
        raise ValueError(f"species_count must be >= 0, got {species_count}")
    if scheme is Scheme.FIVE_CLASS and (rnr_flag or species_count >= 20):
        return 5
    if species_count >= 12:
        return 4
    if species_count >= 8:
        return 3
    if species_count >= 4:
        return 2
    return 1


# ---------------------------------------------------------------------------
# KML parsing
# ---------------------------------------------------------------------------


class KmlParseError(Exception):
    """Raised when the input is not well-formed XML."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        super().__init__(message)
        self.line = line
        self.offset = offset


@dataclass(frozen=True)
class ParseDiagnostic:
    """Structured record for a placemark that could not be ingested."""

    source: str
    placemark_index: int
    reason: str

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "placemark_index": self.placemark_index,
            "reason": self.reason,
        }


@dataclass
class ParseResult:
    sections: list[SurveySection] = field(default_factory=list)
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)


_SCORE_KEYS = {f"score_{o.name}": o for o in CompassOctant}

_LOCALITY_ALIASES = {
    "wolds": Locality.WOLDS,
    "northernedge": Locality.NORTHERN_EDGE,
    "northern_edge": Locality.NORTHERN_EDGE,
    "limestonegrassland": Locality.LIMESTONE_GRASSLAND,
    "limestone_grassland": Locality.LIMESTONE_GRASSLAND,
}


def parse_locality(name: str) -> Locality:
    try:
        return _LOCALITY_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown locality {name!r}") from None


def _localname(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _iter_local(element: ET.Element, name: str) -> Iterator[ET.Element]:
    for child in element.iter():
        if _localname(child.tag) == name:
            yield child


def _first_local(element: ET.Element, name: str) -> ET.Element | None:
    for found in _iter_local(element, name):
        return found
    return None


def _extended_data(placemark: ET.Element) -> dict[str, str]:
    """Collect ExtendedData entries as a name -> text mapping.

    Accepts both ``<Data name=..><value>..</value></Data>`` and the schema
    variant ``<SimpleData name=..>..</SimpleData>``.
    """
    data: dict[str, str] = {}
    ext = _first_local(placemark, "ExtendedData")
    if ext is None:
        return data
    for entry in ext.iter():
        name = entry.get("name")
        if name is None:
            continue
        local = _localname(entry.tag)
        if local == "Data":
            value = _first_local(entry, "value")
            if value is not None and value.text is not None:
                data[name] = value.text.strip()
        elif local == "SimpleData" and entry.text is not None:
            data[name] = entry.text.strip()
    return data


def _parse_coordinates(text: str) -> list[GeoPoint]:
    points = []
    for token in text.split():
        parts = token.split(",")
        if len(parts) < 2:
            raise ValueError(f"malformed coordinate tuple {token!r}")
        lon = float(parts[0])
        lat = float(parts[1])
        points.append(GeoPoint(lat, lon))  # GeoPoint validates the ranges
    return points


def parse_kml(data: bytes, source: str = "<bytes>") -> ParseResult:
    """Parse KML bytes into survey sections plus per-placemark diagnostics.

    Malformed XML raises :class:`KmlParseError` carrying the line/offset of
    the syntax error; problems scoped to a single placemark become
    diagnostics and never abort the rest of the file.
    """
    try:
        root = ET.parse(io.BytesIO(data)).getroot()
    except ET.ParseError as exc:
        line, offset = exc.position if exc.position else (None, None)
        raise KmlParseError(f"not well-formed KML: {exc}", line=line, offset=offset) from exc

    result = ParseResult()
    for index, placemark in enumerate(_iter_local(root, "Placemark")):
        diag = _ingest_placemark(placemark, index, source, result)
        if diag is not None:
            result.diagnostics.append(diag)
    return result


def _ingest_placemark(
    placemark: ET.Element, index: int, source: str, result: ParseResult
) -> ParseDiagnostic | None:
    coords_el = _first_local(placemark, "coordinates")
    if coords_el is None or not (coords_el.text or "").strip():
        return ParseDiagnostic(source, index, "missing coordinates element")
    try:
        points = _parse_coordinates(coords_el.text or "")
    except ValueError as exc:
        return ParseDiagnostic(source, index, str(exc))
    if len(points) < 2:
        return ParseDiagnostic(source, index, "too few points (need at least 2)")

    data = _extended_data(placemark)
    scores = []
    for key, octant in _SCORE_KEYS.items():
        if key in data:
            try:
                scores.append(VergeScore(octant, int(data[key])))
            except ValueError:
                return ParseDiagnostic(source, index, f"invalid integer for {key}: {data[key]!r}")
    if not scores:
        return ParseDiagnostic(source, index, "no octant scores in ExtendedData")

    locality = Locality.WOLDS
    if "locality" in data:
        try:
            locality = parse_locality(data["locality"])
        except ValueError as exc:
            return ParseDiagnostic(source, index, str(exc))
    rnr = data.get("rnr", "0").strip() in ("1", "true", "True")

    name_el = _first_local(placemark, "name")
    section_id = (name_el.text or "").strip() if name_el is not None else ""
    if not section_id:
        section_id = f"{source}#placemark-{index}"

    section = SurveySection(
        section_id=section_id,
        points=tuple(SurveyPoint(p, tuple(scores)) for p in points),
        locality=locality,
        rnr=rnr,
    )
    result.sections.append(section)
    return None


# ---------------------------------------------------------------------------
# Section serialisation (JSON lines, one section per line)
# ---------------------------------------------------------------------------


def section_to_dict(section: SurveySection) -> dict:
    return {
        "section_id": section.section_id,
        "locality": section.locality.value,
        "rnr": section.rnr,
        "points": [
            {
                "lat": p.location.lat,
                "lon": p.location.lon,
                "scores": {s.octant.name: s.species_count for s in p.scores},
            }
            for p in section.points
        ],
    }


def section_from_dict(data: dict) -> SurveySection:
    points = tuple(
        SurveyPoint(
            GeoPoint(p["lat"], p["lon"]),
            tuple(
                VergeScore(CompassOctant[name], count)
                for name, count in sorted(p["scores"].items(), key=lambda kv: CompassOctant[kv[0]].value)
            ),
        )
        for p in data["points"]
    )
    return SurveySection(
        section_id=data["section_id"],
        points=points,
        locality=Locality(data["locality"]),
        rnr=bool(data.get("rnr", False)),
    )


def sections_to_jsonl(sections: Iterable[SurveySection]) -> str:
    return "".join(json.dumps(section_to_dict(s), sort_keys=True) + "\n" for s in sections)


def sections_from_jsonl(text: str) -> list[SurveySection]:
    return [section_from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
