"""vergepipe: roadside-verge survey curation and evaluation toolchain."""

from .geodesy import (
    CompassOctant,
    GeoPoint,
    VergeSide,
    forward_bearing,
    haversine_distance,
    normalize_bearing,
    octant_of,
    perpendicular_bearing,
)
from .survey import (
    Locality,
    Scheme,
    SurveyPoint,
    SurveySection,
    VergeScore,
    parse_kml,
    quantize_score,
)
from .panoindex import (
    MetadataCache,
    PanoramaIndex,
    PanoramaRecord,
    RejectReason,
    SnapResult,
    fetch_metadata,
    interpolate_panoramas,
    road_bearing_at,
    snap_section,
)
from .planner import (
    ExtractionPlan,
    ImageRequest,
    match_octant_scores,
    plan_images,
    simulate_grid_sampling,
    simulate_panorama_sampling,
)
from .curator import (
    DatasetManifest,
    FilterCriteria,
    ManifestSample,
    SampleStatus,
    SplitName,
    apply_filters,
    apply_purge,
    dedup,
    make_folds,
    oversample_plan,
    split,
)
from .metrics import ConfusionMatrix, EvaluationReport, confusion, pr_points, report

__version__ = "0.1.0"
