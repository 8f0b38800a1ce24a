"""Stage-by-stage pipeline orchestration.

Stages read their predecessors' artifacts from the output directory and
write their own; re-running a stage whose inputs and configuration have not
changed is a no-op (content fingerprints are kept in ``runstate.json``).
Deleting a downstream artifact never touches an upstream one.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import curator, metrics, panoindex, planner, survey
from .config import RunConfig
from .survey import Locality, parse_scheme

STAGES = ("ingest", "snap", "plan", "curate", "split", "fetch", "evaluate")

ARTIFACTS = {
    "sections": "sections.jsonl",
    "diagnostics": "ingest_diagnostics.jsonl",
    "snaps": "snaps.jsonl",
    "plan": "plan.jsonl",
    "plan_skips": "plan_skips.jsonl",
    "manifest": "manifest.jsonl",
    "oversample": "oversample.csv",
    "report_text": "report.txt",
    "report_json": "report.json",
    "report_csv": "report.csv",
}


class StageError(Exception):
    """A pipeline stage could not run or failed while running."""


def artifact_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.output_dir) / ARTIFACTS[name]


def _require(cfg: RunConfig, name: str, produced_by: str) -> Path:
    path = artifact_path(cfg, name)
    if not path.exists():
        raise StageError(
            f"missing artifact {path.name}: run the '{produced_by}' stage first"
        )
    return path


# ---------------------------------------------------------------------------
# Run-state fingerprinting (stage no-op on unchanged inputs)
# ---------------------------------------------------------------------------


def _runstate_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "runstate.json"


def _load_runstate(cfg: RunConfig) -> dict:
    path = _runstate_path(cfg)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


def _store_runstate(cfg: RunConfig, stage: str, fingerprint: str) -> None:
    state = _load_runstate(cfg)
    state[stage] = fingerprint
    path = _runstate_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state, indent=2, sort_keys=True), encoding="utf-8")


def _fingerprint(config_part: dict, input_paths: list[Path]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config_part, sort_keys=True).encode("utf-8"))
    for path in input_paths:
        h.update(b"\x00" + str(path.name).encode("utf-8") + b"\x00")
        h.update(path.read_bytes())
    return h.hexdigest()


def _stage_up_to_date(cfg: RunConfig, stage: str, fingerprint: str, outputs: list[Path]) -> bool:
    state = _load_runstate(cfg)
    return state.get(stage) == fingerprint and all(p.exists() for p in outputs)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def make_metadata_backend(cfg: RunConfig):
    if cfg.backend == "mock":
        return panoindex.JsonlMetadataBackend(
            cfg.pano_fixture, coverage_radius_m=cfg.mock_coverage_radius_m
        )
    return panoindex.HttpMetadataBackend(cfg.metadata_url, api_key=cfg.credential)


def make_image_backend(cfg: RunConfig):
    if cfg.backend == "mock":
        return curator.SyntheticImageBackend(size=cfg.image_size)
    return curator.HttpImageBackend(cfg.image_url, api_key=cfg.credential)


def _criteria(cfg: RunConfig) -> curator.FilterCriteria:
    localities = None
    if cfg.filter_localities is not None:
        localities = frozenset(survey.parse_locality(name) for name in cfg.filter_localities)
    years = frozenset(cfg.filter_years) if cfg.filter_years is not None else None
    months = frozenset(cfg.filter_months) if cfg.filter_months is not None else None
    return curator.FilterCriteria(localities=localities, years=years, months=months)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_ingest(cfg: RunConfig) -> dict:
    if not cfg.kml_inputs:
        raise StageError("no kml_inputs configured")
    inputs = [Path(p) for p in cfg.kml_inputs]
    for path in inputs:
        if not path.exists():
            raise StageError(f"KML input not found: {path}")
    out_sections = artifact_path(cfg, "sections")
    out_diag = artifact_path(cfg, "diagnostics")
    fp = _fingerprint({"stage": "ingest"}, inputs)
    if _stage_up_to_date(cfg, "ingest", fp, [out_sections, out_diag]):
        return {"skipped": True}

    sections = []
    diagnostics = []
    for path in inputs:
        result = survey.parse_kml(path.read_bytes(), source=path.name)
        sections.extend(result.sections)
        diagnostics.extend(result.diagnostics)
    out_sections.parent.mkdir(parents=True, exist_ok=True)
    out_sections.write_text(survey.sections_to_jsonl(sections), encoding="utf-8")
    out_diag.write_text(
        "".join(json.dumps(d.to_dict(), sort_keys=True) + "\n" for d in diagnostics),
        encoding="utf-8",
    )
    _store_runstate(cfg, "ingest", fp)
    return {"sections": len(sections), "diagnostics": len(diagnostics)}


def _snap_row(section: survey.SurveySection, point_index: int, snap, interpolated: bool, point) -> dict:
    return {
        "section_id": section.section_id,
        "point_index": point_index,
        "source": {"lat": snap.source.lat, "lon": snap.source.lon},
        "pano": snap.pano.to_dict() if snap.pano else None,
        "distance_m": snap.distance_m if snap.distance_m != float("inf") else None,
        "accepted": snap.accepted,
        "reject_reason": snap.reject_reason.value if snap.reject_reason else None,
        "interpolated": interpolated,
        "scores": {s.octant.name: s.species_count for s in point.scores},
        "rnr": section.rnr,
        "locality": section.locality.value,
    }


def stage_snap(cfg: RunConfig) -> dict:
    sections_path = _require(cfg, "sections", "ingest")
    out_path = artifact_path(cfg, "snaps")
    config_part = {
        "stage": "snap",
        "backend": cfg.backend,
        "threshold": cfg.snap_threshold_m,
        "hops": cfg.snap_max_hops,
        "interpolate": cfg.interpolate,
        "step": cfg.interpolation_step_m,
        "radius": cfg.mock_coverage_radius_m,
    }
    fixture_inputs = [Path(cfg.pano_fixture)] if cfg.backend == "mock" else []
    fp = _fingerprint(config_part, [sections_path] + fixture_inputs)
    if _stage_up_to_date(cfg, "snap", fp, [out_path]):
        return {"skipped": True}

    sections = survey.sections_from_jsonl(sections_path.read_text(encoding="utf-8"))
    backend = make_metadata_backend(cfg)
    cache = panoindex.MetadataCache(cfg.cache_dir, negative_ttl_s=cfg.negative_cache_ttl_s)

    points = [p.location for section in sections for p in section.points]
    if cfg.interpolate:
        # also query the metadata service along the gaps between GT points
        # so panoramas between road features get materialised
        from .geodesy import haversine_distance, intermediate_point

        for section in sections:
            locs = [p.location for p in section.points]
            for a, b in zip(locs, locs[1:]):
                gap = haversine_distance(a, b)
                steps = int(gap // cfg.interpolation_step_m)
                points.extend(
                    intermediate_point(a, b, (i * cfg.interpolation_step_m) / gap)
                    for i in range(1, steps + 1)
                    if (i * cfg.interpolation_step_m) / gap < 1.0
                )
    fetched = panoindex.fetch_many(
        points,
        backend,
        cache,
        workers=cfg.workers,
        rate_per_s=cfg.rate_limit_per_s,
        max_attempts=cfg.fetch_max_attempts,
        base_delay_s=cfg.retry_base_delay_s,
    )
    records = {rec.pano_id: rec for rec in fetched if rec is not None}
    index = panoindex.PanoramaIndex(records.values())

    rows = []
    accepted_count = 0
    for section in sections:
        snaps = panoindex.snap_section(
            section, index, threshold_m=cfg.snap_threshold_m, max_hops=cfg.snap_max_hops
        )
        for i, (snap, point) in enumerate(zip(snaps, section.points)):
            rows.append(_snap_row(section, i, snap, False, point))
            if snap.accepted:
                accepted_count += 1
            if not cfg.interpolate or not snap.accepted or i + 1 >= len(snaps):
                continue
            nxt = snaps[i + 1]
            if not nxt.accepted:
                continue
            # insert the panoramas discovered between the two snap points
            gap = panoindex.interpolate_panoramas(
                snap,
                nxt,
                index,
                step_m=cfg.interpolation_step_m,
                threshold_m=cfg.snap_threshold_m,
            )
            for rec in gap:
                mid = panoindex.SnapResult(rec.location, rec, 0.0, True)
                rows.append(_snap_row(section, i, mid, True, point))
                accepted_count += 1
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8"
    )
    _store_runstate(cfg, "snap", fp)
    return {"points": len(points), "accepted": accepted_count, "panoramas": len(index)}


def stage_plan(cfg: RunConfig) -> dict:
    snaps_path = _require(cfg, "snaps", "snap")
    out_plan = artifact_path(cfg, "plan")
    out_skips = artifact_path(cfg, "plan_skips")
    config_part = {
        "stage": "plan",
        "scheme": cfg.scheme,
        "policy": cfg.heading_policy,
        "fov": cfg.fov,
        "pitch": cfg.pitch,
        "size": cfg.image_size,
    }
    fp = _fingerprint(config_part, [snaps_path])
    if _stage_up_to_date(cfg, "plan", fp, [out_plan, out_skips]):
        return {"skipped": True}

    scheme = parse_scheme(cfg.scheme)
    rows = [json.loads(ln) for ln in snaps_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    by_section: dict[str, list[dict]] = {}
    for row in rows:
        by_section.setdefault(row["section_id"], []).append(row)

    plan_rows = []
    skip_rows = []
    for section_id, srows in by_section.items():
        accepted = [r for r in srows if r["accepted"] and r["pano"]]
        chain = []
        seen_ids = set()
        for r in accepted:
            pid = r["pano"]["pano_id"]
            if pid not in seen_ids:
                seen_ids.add(pid)
                chain.append(panoindex.PanoramaRecord.from_dict(r["pano"]))
        if len(chain) < 2:
            for r in accepted:
                skip_rows.append(
                    {
                        "section_id": section_id,
                        "pano_id": r["pano"]["pano_id"],
                        "octant": None,
                        "reason": "no road bearing (fewer than 2 snapped panoramas)",
                    }
                )
            continue
        planned_keys = set()
        for r in accepted:
            rec = panoindex.PanoramaRecord.from_dict(r["pano"])
            if rec.pano_id not in seen_ids:
                continue
            road = panoindex.road_bearing_at(rec, chain)
            scores = [
                survey.VergeScore(survey.CompassOctant[name], count)
                for name, count in sorted(r["scores"].items())
            ]
            outcome = planner.match_octant_scores(rec, road, scores)
            plan = planner.plan_images(
                rec,
                road,
                outcome.matches,
                scheme,
                section_id=section_id,
                rnr=r["rnr"],
                skipped=outcome.skipped,
                heading_policy=cfg.heading_policy,
                fov=cfg.fov,
                pitch=cfg.pitch,
                size=cfg.image_size,
            )
            for req in plan.requests:
                if (section_id, req.identity_key) in planned_keys:
                    continue  # the same pano can be snapped by several GT points
                planned_keys.add((section_id, req.identity_key))
                plan_rows.append(
                    {
                        "pano_id": req.pano_id,
                        "heading": req.heading,
                        "fov": req.fov,
                        "pitch": req.pitch,
                        "width": req.width,
                        "height": req.height,
                        "label": req.label,
                        "raw_score": req.raw_score,
                        "octant": req.octant.name,
                        "side": req.side.value,
                        "section_id": req.section_id,
                        "identity_key": req.identity_key,
                        "capture_date": [rec.capture_date[0], rec.capture_date[1]],
                        "locality": r["locality"],
                        "lat": rec.location.lat,
                        "lon": rec.location.lon,
                    }
                )
            for skip in plan.skipped:
                skip_rows.append(
                    {
                        "section_id": section_id,
                        "pano_id": skip.pano_id,
                        "octant": skip.octant.name,
                        "reason": skip.reason,
                    }
                )
    plan_rows.sort(key=lambda r: (r["section_id"], r["identity_key"]))
    out_plan.parent.mkdir(parents=True, exist_ok=True)
    out_plan.write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in plan_rows), encoding="utf-8"
    )
    out_skips.write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in skip_rows), encoding="utf-8"
    )
    _store_runstate(cfg, "plan", fp)
    return {"requests": len(plan_rows), "skips": len(skip_rows)}


def _sample_from_plan_row(row: dict) -> curator.ManifestSample:
    return curator.ManifestSample(
        sample_id=curator.make_sample_id(row["section_id"], row["identity_key"]),
        identity_key=row["identity_key"],
        label=int(row["label"]),
        raw_score=int(row["raw_score"]),
        section_id=row["section_id"],
        pano_id=row["pano_id"],
        capture_date=(int(row["capture_date"][0]), int(row["capture_date"][1])),
        octant=survey.CompassOctant[row["octant"]],
        side=planner.VergeSide(row["side"]),
        locality=Locality(row["locality"]),
        lat=float(row["lat"]),
        lon=float(row["lon"]),
        heading=float(row["heading"]),
        fov=float(row["fov"]),
        pitch=float(row["pitch"]),
        width=int(row["width"]),
        height=int(row["height"]),
    )


def stage_curate(cfg: RunConfig) -> dict:
    plan_path = _require(cfg, "plan", "plan")
    out_manifest = artifact_path(cfg, "manifest")
    purge_inputs = [Path(cfg.purge_list)] if cfg.purge_list else []
    config_part = {
        "stage": "curate",
        "localities": cfg.filter_localities,
        "years": cfg.filter_years,
        "months": cfg.filter_months,
        "scheme": cfg.scheme,
        "seed": cfg.seed,
    }
    fp = _fingerprint(config_part, [plan_path] + purge_inputs)
    if _stage_up_to_date(cfg, "curate", fp, [out_manifest]):
        return {"skipped": True}

    rows = [json.loads(ln) for ln in plan_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    samples = [_sample_from_plan_row(r) for r in rows]
    samples = curator.apply_filters(samples, _criteria(cfg))
    manifest = curator.build_manifest(samples, parse_scheme(cfg.scheme), seed=cfg.seed)
    curator.dedup(manifest)
    if cfg.purge_list:
        curator.apply_purge(manifest, curator.read_purge_list(cfg.purge_list))
    manifest.save(out_manifest)
    _store_runstate(cfg, "curate", fp)
    counts = manifest.status_counts()
    return {status.value: counts.get(status, 0) for status in curator.SampleStatus}


def stage_split(cfg: RunConfig) -> dict:
    manifest_path = _require(cfg, "manifest", "curate")
    out_oversample = artifact_path(cfg, "oversample")
    config_part = {
        "stage": "split",
        "fractions": [cfg.split_train, cfg.split_val, cfg.split_test],
        "folds": cfg.folds,
        "seed": cfg.seed,
        "oversample": cfg.oversample,
    }
    fp = _fingerprint(config_part, [manifest_path])
    if _stage_up_to_date(cfg, "split", fp, [manifest_path, out_oversample]):
        return {"skipped": True}

    manifest = curator.DatasetManifest.load(manifest_path)
    curator.split(manifest, (cfg.split_train, cfg.split_val, cfg.split_test), seed=cfg.seed)
    curator.make_folds(manifest, k=cfg.folds, seed=cfg.seed)
    lines = ["sample_id,replications"]
    if cfg.oversample:
        plan = curator.oversample_plan(manifest)
        lines.extend(f"{sid},{reps}" for sid, reps in plan)
    out_oversample.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.save(manifest_path)
    _store_runstate(cfg, "split", fp)
    from collections import Counter

    split_counts = Counter(s.split.value for s in manifest.active() if s.split)
    return dict(split_counts)


def stage_fetch(cfg: RunConfig) -> dict:
    manifest_path = _require(cfg, "manifest", "curate")
    config_part = {"stage": "fetch", "backend": cfg.backend, "size": cfg.image_size}
    fp = _fingerprint(config_part, [manifest_path])
    # no separate output artifact: fetch mutates the manifest in place
    manifest = curator.DatasetManifest.load(manifest_path)
    if _load_runstate(cfg).get("fetch") == fp and all(
        s.image_path for s in manifest.active()
    ):
        return {"skipped": True}

    backend = make_image_backend(cfg)
    curator.download_images(
        manifest,
        backend,
        cfg.output_dir,
        workers=cfg.workers,
        max_attempts=cfg.fetch_max_attempts,
        base_delay_s=cfg.retry_base_delay_s,
    )
    fetched = [s for s in manifest.active() if s.image_path]
    if fetched:
        curator.compute_norm_stats(manifest, cfg.output_dir)
    manifest.save(manifest_path)
    # fingerprint the post-fetch manifest so an unchanged re-run is a no-op
    _store_runstate(cfg, "fetch", _fingerprint(config_part, [manifest_path]))
    failed = [s.sample_id for s in manifest.active() if s.fetch_error]
    return {"fetched": len(fetched), "failed": len(failed)}


def stage_evaluate(cfg: RunConfig) -> dict:
    if not cfg.predictions:
        raise StageError("no predictions file configured")
    pred_path = Path(cfg.predictions)
    if not pred_path.exists():
        raise StageError(f"predictions file not found: {pred_path}")
    outputs = {
        "text": artifact_path(cfg, "report_text"),
        "json": artifact_path(cfg, "report_json"),
        "csv": artifact_path(cfg, "report_csv"),
    }
    config_part = {
        "stage": "evaluate",
        "scheme": cfg.scheme,
        "formats": cfg.report_formats,
        "kappa": cfg.kappa_weighting,
        "names": cfg.class_names,
    }
    fp = _fingerprint(config_part, [pred_path])
    wanted = [outputs[f] for f in cfg.report_formats]
    if _stage_up_to_date(cfg, "evaluate", fp, wanted):
        return {"skipped": True}

    preds = metrics.read_predictions(pred_path)
    k = parse_scheme(cfg.scheme).num_classes
    cm = metrics.confusion(preds.y_true, preds.y_pred, k)
    rep = metrics.report(cm, kappa_weighting=cfg.kappa_weighting)
    outputs["text"].parent.mkdir(parents=True, exist_ok=True)
    for fmt in cfg.report_formats:
        outputs[fmt].write_bytes(metrics.export_report(rep, fmt, class_names=cfg.class_names))
    _store_runstate(cfg, "evaluate", fp)
    return {
        "samples": rep.total_support,
        "accuracy_pct": round(rep.overall_accuracy_pct, 2),
        "macro_f1": round(rep.macro_f1, 4),
    }


_STAGE_FUNCS = {
    "ingest": stage_ingest,
    "snap": stage_snap,
    "plan": stage_plan,
    "curate": stage_curate,
    "split": stage_split,
    "fetch": stage_fetch,
    "evaluate": stage_evaluate,
}


def run(stage: str, cfg: RunConfig) -> dict:
    """Run one named stage, or every stage in order for ``all``.

    The ``evaluate`` stage only joins an ``all`` run when a predictions file
    is configured, since predictions come from an external model.
    """
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    if stage == "all":
        results = {}
        for name in STAGES:
            if name == "evaluate" and not cfg.predictions:
                continue
            results[name] = _STAGE_FUNCS[name](cfg)
        return results
    if stage not in _STAGE_FUNCS:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES + ('all',)}")
    return {stage: _STAGE_FUNCS[stage](cfg)}


# ---------------------------------------------------------------------------
# GeoJSON export
# ---------------------------------------------------------------------------


def manifest_to_geojson(manifest: curator.DatasetManifest) -> dict:
    features = []
    for s in manifest.samples:
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [s.lon, s.lat]},
                "properties": {
                    "sample_id": s.sample_id,
                    "label": s.label,
                    "score": s.raw_score,
                    "status": s.status.value,
                    "section_id": s.section_id,
                    "pano_id": s.pano_id,
                    "split": s.split.value if s.split else None,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def snaps_to_geojson(rows: list[dict]) -> dict:
    features = []
    for row in rows:
        src = row["source"]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [src["lon"], src["lat"]]},
                "properties": {
                    "section_id": row["section_id"],
                    "accepted": row["accepted"],
                    "reject_reason": row["reject_reason"],
                    "pano_id": row["pano"]["pano_id"] if row["pano"] else None,
                    "distance_m": row["distance_m"],
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def export_geojson(cfg: RunConfig, kind: str = "manifest") -> bytes:
    """GeoJSON (RFC 7946 lon,lat order) for the manifest or the snap results."""
    if kind == "manifest":
        path = _require(cfg, "manifest", "curate")
        collection = manifest_to_geojson(curator.DatasetManifest.load(path))
    elif kind == "snaps":
        path = _require(cfg, "snaps", "snap")
        rows = [json.loads(ln) for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        collection = snaps_to_geojson(rows)
    else:
        raise StageError(f"unknown geojson source {kind!r}; expected manifest or snaps")
    return json.dumps(collection, indent=2, sort_keys=True).encode("utf-8")
