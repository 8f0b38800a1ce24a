import json
from pathlib import Path

import pytest
import yaml

from vergepipe.cli import main
from vergepipe.config import ConfigError, RunConfig, config_from_mapping, load_config
from vergepipe.curator import DatasetManifest, SampleStatus
from vergepipe.pipeline import StageError, run

from synthroads import write_e2e_fixture


def write_config(tmp_path, fixture, **overrides) -> Path:
    data = {
        "kml_inputs": [fixture["kml"]],
        "output_dir": str(tmp_path / "out"),
        "cache_dir": str(tmp_path / "cache"),
        "backend": "mock",
        "pano_fixture": fixture["panos"],
        "image_size": 64,
        "seed": 0,
    }
    data.update(overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError) as excinfo:
        config_from_mapping({"sneaky": 1, "seed": 0})
    assert "sneaky" in str(excinfo.value)


def test_config_field_level_diagnostics():
    with pytest.raises(ConfigError) as excinfo:
        config_from_mapping(
            {"backend": "carrier-pigeon", "fov": 500, "folds": 1, "pano_fixture": None}
        )
    message = str(excinfo.value)
    assert "backend" in message and "fov" in message and "folds" in message


def test_config_env_interpolation(tmp_path, monkeypatch):
    monkeypatch.setenv("TEST_CRED", "sekrit")
    path = tmp_path / "c.yaml"
    path.write_text("backend: live\ncredential: ${TEST_CRED}\n")
    cfg = load_config(path)
    assert cfg.credential == "sekrit"


def test_config_env_missing_named(tmp_path, monkeypatch):
    monkeypatch.delenv("NOPE_VAR", raising=False)
    path = tmp_path / "c.yaml"
    path.write_text("credential: ${NOPE_VAR}\n")
    with pytest.raises(ConfigError, match="NOPE_VAR"):
        load_config(path)


def test_config_defaults_validate():
    cfg = RunConfig(pano_fixture="x.jsonl")
    cfg.validate()
    assert cfg.seed == 0
    assert cfg.snap_threshold_m == 25.0


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def test_run_ingest_writes_artifacts(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    cfg = load_config(write_config(tmp_path, fixture))
    result = run("ingest", cfg)
    assert result["ingest"]["sections"] == 4
    assert (Path(cfg.output_dir) / "sections.jsonl").exists()
    assert (Path(cfg.output_dir) / "ingest_diagnostics.jsonl").exists()


def test_missing_predecessor_names_stage(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    cfg = load_config(write_config(tmp_path, fixture))
    with pytest.raises(StageError, match="'snap'"):
        run("plan", cfg)
    with pytest.raises(StageError, match="'ingest'"):
        run("snap", cfg)


def test_rerun_is_noop(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    cfg = load_config(write_config(tmp_path, fixture))
    first = run("ingest", cfg)
    assert "sections" in first["ingest"]
    path = Path(cfg.output_dir) / "sections.jsonl"
    before = path.stat().st_mtime_ns
    second = run("ingest", cfg)
    assert second["ingest"] == {"skipped": True}
    assert path.stat().st_mtime_ns == before


def test_run_all_mock_expected_counts(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix", panos_per_section=4)
    cfg = load_config(write_config(tmp_path, fixture))
    results = run("all", cfg)
    assert results["ingest"]["sections"] == 4
    assert results["snap"]["accepted"] == fixture["panoramas"]
    assert results["plan"]["requests"] == fixture["requests"]
    manifest = DatasetManifest.load(Path(cfg.output_dir) / "manifest.jsonl")
    counts = manifest.status_counts()
    assert counts[SampleStatus.ACTIVE] == fixture["requests"]
    assert counts.get(SampleStatus.DUPLICATE, 0) == 0
    labels = {s.label for s in manifest.active()}
    assert labels == {1, 2, 3, 4}
    # every active sample has an image on disk and a relative path
    for sample in manifest.active():
        assert sample.image_path and not Path(sample.image_path).is_absolute()
        assert (Path(cfg.output_dir) / sample.image_path).exists()
    assert "norm_mean" in manifest.header and "norm_std" in manifest.header
    # splits and folds assigned
    assert all(s.split is not None for s in manifest.active())
    assert all(s.fold is not None for s in manifest.active())
    assert (Path(cfg.output_dir) / "oversample.csv").exists()


def test_interpolation_recovers_mid_gap_panoramas(tmp_path):
    # GT points every 45 m over panoramas every 15 m: two panoramas between
    # consecutive GT points are only planned when interpolation is on
    fix_dir = tmp_path / "fix"
    fixture = write_e2e_fixture(fix_dir, panos_per_section=7, point_spacing_m=45.0)
    cfg_off = load_config(
        write_config(tmp_path, fixture, output_dir=str(tmp_path / "out_off"))
    )
    cfg_on = load_config(
        write_config(tmp_path, fixture, output_dir=str(tmp_path / "out_on"), interpolate=True)
    )
    off = run("all", cfg_off)
    on = run("all", cfg_on)
    assert on["plan"]["requests"] > off["plan"]["requests"]
    assert on["plan"]["requests"] == fixture["panoramas"] * 3


def test_purge_through_pipeline(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    cfg = load_config(write_config(tmp_path, fixture))
    run("ingest", cfg)
    run("snap", cfg)
    run("plan", cfg)
    run("curate", cfg)
    manifest = DatasetManifest.load(Path(cfg.output_dir) / "manifest.jsonl")
    victims = [s.sample_id for s in manifest.active()[:2]]
    purge_file = tmp_path / "purge.csv"
    purge_file.write_text("sample_id,reason\n" + "\n".join(f"{v},Car" for v in victims) + "\n")

    cfg2 = load_config(write_config(tmp_path, fixture, purge_list=str(purge_file)))
    run("curate", cfg2)
    manifest2 = DatasetManifest.load(Path(cfg2.output_dir) / "manifest.jsonl")
    counts = manifest2.status_counts()
    assert counts[SampleStatus.PURGED] == 2
    assert counts[SampleStatus.ACTIVE] == fixture["requests"] - 2


def test_evaluate_stage(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    preds = tmp_path / "preds.csv"
    rows = ["sample_id,true_class,pred_class"]
    rows += [f"s{i},{(i % 4) + 1},{(i % 4) + 1}" for i in range(20)]
    rows += ["x1,1,2", "x2,2,1"]
    preds.write_text("\n".join(rows) + "\n")
    cfg = load_config(write_config(tmp_path, fixture, predictions=str(preds)))
    result = run("evaluate", cfg)
    assert result["evaluate"]["samples"] == 22
    text = (Path(cfg.output_dir) / "report.txt").read_text()
    assert "Macro Avg." in text and "Weighted Avg." in text
    data = json.loads((Path(cfg.output_dir) / "report.json").read_text())
    assert data["total_support"] == 22


# ---------------------------------------------------------------------------
# GeoJSON
# ---------------------------------------------------------------------------


def test_geojson_empty_manifest(tmp_path):
    from vergepipe.curator import build_manifest
    from vergepipe.pipeline import manifest_to_geojson
    from vergepipe.survey import Scheme

    collection = manifest_to_geojson(build_manifest([], Scheme.FOUR_CLASS))
    assert collection == {"type": "FeatureCollection", "features": []}


def test_geojson_three_samples_lonlat_order(tmp_path):
    from synthroads import make_sample
    from vergepipe.curator import build_manifest
    from vergepipe.pipeline import manifest_to_geojson
    from vergepipe.survey import Scheme

    samples = [make_sample(i, 1) for i in range(3)]
    collection = manifest_to_geojson(build_manifest(samples, Scheme.FOUR_CLASS))
    assert len(collection["features"]) == 3
    for feature, sample in zip(collection["features"], samples):
        assert feature["geometry"]["type"] == "Point"
        lon, lat = feature["geometry"]["coordinates"]
        assert (lat, lon) == (sample.lat, sample.lon)  # GeoJSON order is lon,lat
        assert feature["properties"]["label"] == 1
        assert feature["properties"]["status"] == "active"


def test_geojson_cli_export(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    config_path = write_config(tmp_path, fixture)
    assert main(["curate", "--config", str(config_path)]) == 2  # missing predecessors
    for stage in ("ingest", "snap", "plan", "curate"):
        assert main([stage, "--config", str(config_path)]) == 0
    out_file = tmp_path / "points.geojson"
    assert main(["geojson", "--config", str(config_path), "--out", str(out_file)]) == 0
    collection = json.loads(out_file.read_text())
    assert collection["type"] == "FeatureCollection"
    assert len(collection["features"]) > 0


# ---------------------------------------------------------------------------
# CLI exit codes
# ---------------------------------------------------------------------------


def test_cli_exit_codes(tmp_path):
    bad_config = tmp_path / "bad.yaml"
    bad_config.write_text("unknown_key: 1\n")
    assert main(["ingest", "--config", str(bad_config)]) == 1

    fixture = write_e2e_fixture(tmp_path / "fix")
    config_path = write_config(tmp_path, fixture)
    assert main(["plan", "--config", str(config_path)]) == 2  # missing predecessor
    assert main(["ingest", "--config", str(config_path)]) == 0


def test_stage_isolation_deleting_downstream_keeps_upstream(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    cfg = load_config(write_config(tmp_path, fixture))
    for stage in ("ingest", "snap", "plan", "curate"):
        run(stage, cfg)
    sections = (Path(cfg.output_dir) / "sections.jsonl").read_bytes()
    snaps = (Path(cfg.output_dir) / "snaps.jsonl").read_bytes()
    (Path(cfg.output_dir) / "manifest.jsonl").unlink()
    result = run("curate", cfg)  # rebuilds from the intact predecessors
    assert "active" in result["curate"]
    assert (Path(cfg.output_dir) / "sections.jsonl").read_bytes() == sections
    assert (Path(cfg.output_dir) / "snaps.jsonl").read_bytes() == snaps


def test_cli_overrides(tmp_path):
    fixture = write_e2e_fixture(tmp_path / "fix")
    config_path = write_config(tmp_path, fixture, seed=7)
    override_dir = tmp_path / "elsewhere"
    assert main(["ingest", "--config", str(config_path), "--seed", "0", "--output", str(override_dir)]) == 0
    assert (override_dir / "sections.jsonl").exists()
