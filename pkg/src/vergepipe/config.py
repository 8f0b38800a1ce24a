"""Declarative run configuration for the pipeline CLI.

A single human-editable YAML mapping controls every pipeline variable.
String values may interpolate environment variables as ``${NAME}`` (used
for credentials so keys never land in config files). Unknown keys are
rejected and every validation problem is reported with its field name.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .planner import HEADING_POLICIES


class ConfigError(Exception):
    """Invalid run configuration; ``problems`` lists field-level messages."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    # inputs and artifact locations
    kml_inputs: list[str] = field(default_factory=list)
    output_dir: str = "out"
    cache_dir: str = "cache"
    purge_list: str | None = None
    predictions: str | None = None

    # metadata/image backends
    backend: str = "mock"  # mock | live
    pano_fixture: str | None = None
    mock_coverage_radius_m: float = 50.0
    metadata_url: str = "https://maps.googleapis.com/maps/api/streetview/metadata"
    image_url: str = "https://maps.googleapis.com/maps/api/streetview"
    credential: str | None = None  # usually "${SV_API_KEY}"

    # snapping and interpolation
    snap_threshold_m: float = 25.0
    snap_max_hops: int = 8
    interpolate: bool = False
    interpolation_step_m: float = 10.0

    # extraction geometry
    heading_policy: str = "octant_centers"
    fov: float = 45.0
    pitch: float = 20.0
    image_size: int = 640

    # labelling
    scheme: str = "four"

    # curation filters (null disables a dimension)
    filter_localities: list[str] | None = None
    filter_years: list[int] | None = None
    filter_months: list[int] | None = None

    # split / folds / balancing
    split_train: float = 0.7
    split_val: float = 0.1
    split_test: float = 0.2
    folds: int = 5
    oversample: bool = True
    seed: int = 0

    # networking behaviour
    workers: int = 4
    rate_limit_per_s: float = 10.0
    fetch_max_attempts: int = 5
    retry_base_delay_s: float = 0.2
    negative_cache_ttl_s: float | None = None

    # evaluation
    report_formats: list[str] = field(default_factory=lambda: ["text", "json", "csv"])
    kappa_weighting: str = "quadratic"
    class_names: list[str] | None = None

    def validate(self) -> None:
        problems = []
        if self.backend not in ("mock", "live"):
            problems.append(f"backend: expected 'mock' or 'live', got {self.backend!r}")
        if self.backend == "mock" and not self.pano_fixture:
            problems.append("pano_fixture: required when backend is 'mock'")
        if self.heading_policy not in HEADING_POLICIES:
            problems.append(
                f"heading_policy: expected one of {HEADING_POLICIES}, got {self.heading_policy!r}"
            )
        if self.scheme.strip().lower() not in ("four", "fourclass", "four_class", "4",
                                               "five", "fiveclass", "five_class", "5"):
            problems.append(f"scheme: expected 'four' or 'five', got {self.scheme!r}")
        if not (0.0 < self.fov <= 120.0):
            problems.append(f"fov: out of range (0, 120]: {self.fov}")
        if not (-90.0 <= self.pitch <= 90.0):
            problems.append(f"pitch: out of range [-90, 90]: {self.pitch}")
        if self.snap_threshold_m <= 0:
            problems.append(f"snap_threshold_m: must be positive, got {self.snap_threshold_m}")
        if self.snap_max_hops < 1:
            problems.append(f"snap_max_hops: must be >= 1, got {self.snap_max_hops}")
        if self.interpolation_step_m <= 0:
            problems.append(f"interpolation_step_m: must be positive")
        fr = (self.split_train, self.split_val, self.split_test)
        if any(f < 0 for f in fr) or sum(fr) <= 0:
            problems.append(f"split fractions: must be non-negative and sum > 0, got {fr}")
        if self.folds < 2:
            problems.append(f"folds: must be >= 2, got {self.folds}")
        if self.workers < 1:
            problems.append(f"workers: must be >= 1, got {self.workers}")
        if self.rate_limit_per_s <= 0:
            problems.append(f"rate_limit_per_s: must be positive, got {self.rate_limit_per_s}")
        if self.fetch_max_attempts < 1:
            problems.append(f"fetch_max_attempts: must be >= 1, got {self.fetch_max_attempts}")
        if self.filter_months is not None and any(not 1 <= m <= 12 for m in self.filter_months):
            problems.append(f"filter_months: values must be in 1..12, got {self.filter_months}")
        for fmt in self.report_formats:
            if fmt not in ("text", "json", "csv"):
                problems.append(f"report_formats: unknown format {fmt!r}")
        if self.kappa_weighting not in ("quadratic", "linear"):
            problems.append(f"kappa_weighting: expected quadratic or linear")
        if problems:
            raise ConfigError(problems)


_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate_env(value, path: str, problems: list[str]):
    if isinstance(value, str):
        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                problems.append(f"{path}: environment variable {name} is not set")
                return ""
            return os.environ[name]

        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate_env(v, path, problems) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate_env(v, f"{path}.{k}", problems) for k, v in value.items()}
    return value


def config_from_mapping(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(["config root must be a mapping"])
    problems: list[str] = []
    data = _interpolate_env(data, "<config>", problems)

    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    problems.extend(f"{key}: unknown configuration key" for key in unknown)

    kwargs = {}
    for name, value in data.items():
        if name not in known:
            continue
        kwargs[name] = value
    if problems:
        raise ConfigError(problems)
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config is not valid YAML: {exc}"]) from exc
    if data is None:
        data = {}
    return config_from_mapping(data)
