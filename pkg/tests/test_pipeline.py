from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from railsight import pipeline as pl
from railsight.imaging import ImageBuffer, write_image
from railsight.roi_select import BETWEEN_TRACKS, FIXED_BASELINE, LEFT_THEN_RIGHT_BASELINE, RIGHT_OF_RIGHTMOST, Roi
from railsight.signal_detect import BBox, SignalDetection
from railsight.synth_gen import SceneSpec, SignalPlacement, generate_scene, signal_geometry


def det(x, y, color="Red", frame_id=0):
    return SignalDetection(BBox(x, y, 11, 11), color, 1.0, frame_id, "LeftOfMain")


def ok(frame_id, *dets, scene_id=None):
    return pl.FrameResult(frame_id, pl.OK, {}, (Roi(0, 10, 0, 10, "LeftOfMain"),), tuple(dets), scene_id)


def write_truth(path, truth):
    path.write_text("".join(json.dumps(r) + "\n" for r in truth))
    return path


# -- config -----------------------------------------------------------------


def test_presets_encode_versions():
    t1, t2, t3 = (pl.preset(v) for v in (1, "TSS2", "tss3"))
    assert (t1.band.interior_top_frac, t1.band.edge_top_frac) == (0.75, 0.75)
    assert (t2.band.interior_top_frac, t2.band.edge_top_frac) == (0.625, 0.625)
    assert (t3.band.interior_top_frac, t3.band.edge_top_frac) == (0.75, 0.625)
    assert t3.selective_edge_band and t3.normalize_brightness
    assert [c.tss_version for c in (t1, t2, t3)] == ["TSS1", "TSS2", "TSS3"]
    with pytest.raises(ValueError):
        pl.preset(4)


def test_non_selective_band_uses_interior_height():
    cfg = pl.preset(3, selective_edge_band=False)
    assert cfg.band.edge_top_frac == cfg.band.interior_top_frac


@pytest.mark.parametrize(
    "kw",
    [
        dict(edge_top_frac=0.8),
        dict(interior_top_frac=1.0),
        dict(classifier="cnn"),
        dict(detector="oracle"),
        dict(roi_strategy="diagonal"),
        dict(min_confirm_frames=0),
        dict(canny_low=200.0),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        pl.PipelineConfig(**kw)


def test_config_text_and_overrides():
    text = "# comment\nvote_frac = 0.4\nselective_edge_band=false  # trailing\n\nmin_votes = 9\n"
    keys = pl.parse_config_text(text)
    cfg = pl.apply_overrides(pl.preset(3), keys)
    assert (cfg.vote_frac, cfg.selective_edge_band, cfg.min_votes) == (0.4, False, 9)
    assert pl.apply_overrides(cfg, {"tss_version": "2"}).tss_version == "TSS2"
    with pytest.raises(ValueError):
        pl.apply_overrides(cfg, {"no_such_key": "1"})
    with pytest.raises(ValueError):
        pl.apply_overrides(cfg, {"normalize_brightness": "maybe"})
    with pytest.raises(ValueError):
        pl.parse_config_text("just words")


def test_config_json_holds_every_field():
    d = pl.preset(3).to_json()
    assert d["tss_version"] == "TSS3" and d["link_radius"] == 40.0 and d["gap_frames"] == 5


# -- per-frame processing ---------------------------------------------------


def test_black_frame_is_no_track():
    res = pl.process_frame(ImageBuffer(np.zeros((288, 320, 3), dtype=np.uint8)), pl.preset(3))
    assert res.status == pl.NO_TRACK and res.detections == () and res.rois == ()


def test_black_frame_with_fixed_fallback():
    cfg = pl.preset(3, fallback_fixed_on_notrack=True)
    res = pl.process_frame(ImageBuffer(np.zeros((288, 320, 3), dtype=np.uint8)), cfg)
    assert res.status == pl.OK and res.roi_rule == FIXED_BASELINE


def test_sandwiched_main_track_scene(three_track_scene):
    _, frames, truth = three_track_scene
    res = pl.process_frame(frames[0], pl.preset(3), 0)
    assert res.status == pl.OK and res.roi_rule == BETWEEN_TRACKS
    assert len(res.layout["tracks"]) == 3 and res.layout["main_index"] == 1
    assert [d.color for d in res.detections] == ["Red"]
    assert res.detections[0].bbox.as_list() == truth[0]["signals"][0]["bbox"]


def test_rightmost_main_baseline_picks_the_wrong_signal():
    spec = SceneSpec(
        seed=12,
        track_count=2,
        main_index=1,
        signals=(SignalPlacement(0, "Left", "Green"), SignalPlacement(1, "Right", "Red")),
    )
    frames, truth = generate_scene(spec)
    main_box = truth[0]["signals"][1]["bbox"]
    ts = pl.process_frame(frames[0], pl.preset(3))
    assert ts.roi_rule == RIGHT_OF_RIGHTMOST
    assert [d.bbox.as_list() for d in ts.detections] == [main_box]
    lr = pl.process_frame(frames[0], pl.preset(3, roi_strategy="left-then-right"))
    assert lr.roi_rule == LEFT_THEN_RIGHT_BASELINE
    assert [d.bbox.as_list() for d in lr.detections] == [truth[0]["signals"][0]["bbox"]]


def test_left_then_right_falls_through_to_right_half():
    spec = SceneSpec(seed=2, track_count=2, main_index=1, signals=(SignalPlacement(1, "Right", "Green"),))
    frames, _ = generate_scene(spec)
    res = pl.process_frame(frames[0], pl.preset(3, roi_strategy="left-then-right"))
    assert res.rois[0].x0 == 160 and len(res.detections) == 1


def test_fixed_strategy():
    frames, _ = generate_scene(SceneSpec(seed=2, signals=(SignalPlacement(0, "Right", "Green"),)))
    res = pl.process_frame(frames[0], pl.preset(3, roi_strategy="fixed", fixed_rect="0.5,0,1,0.75"))
    assert res.roi_rule == FIXED_BASELINE and res.rois[0].as_list() == [160, 0, 320, 216]
    assert len(res.detections) == 1


def test_classifier_failure_falls_back_to_edges(tmp_path, three_track_scene):
    _, frames, truth = three_track_scene
    path = write_truth(tmp_path / "truth.jsonl", truth)
    cfg = pl.preset(3, classifier="oracle", truth_path=str(path))
    good = pl.process_frame(frames[0], cfg, 0, ("s3", 0))
    assert good.status == pl.OK and good.track_source == "snippet"
    missing = pl.process_frame(frames[0], cfg, 0, ("elsewhere", 0))
    assert missing.status == pl.OK and missing.track_source == "edge_fallback"
    assert missing.roi_rule == BETWEEN_TRACKS
    blank = pl.process_frame(ImageBuffer(np.zeros((288, 320, 3), dtype=np.uint8)), cfg, 0, ("elsewhere", 0))
    assert blank.status == pl.UNCLASSIFIABLE


def test_detector_failure_is_recorded(tmp_path, three_track_scene):
    _, frames, truth = three_track_scene
    path = write_truth(tmp_path / "truth.jsonl", truth)
    cfg = pl.preset(3, detector="oracle", truth_path=str(path))
    assert pl.process_frame(frames[0], cfg, 0, ("s3", 0)).detections
    res = pl.process_frame(frames[0], cfg, 0, ("s3", 99))
    assert res.status == pl.DETECTOR_ERROR and res.detections == ()


def test_constant_classifier_means_no_track():
    frames, _ = generate_scene(SceneSpec(seed=1))
    assert pl.process_frame(frames[0], pl.preset(3, classifier="constant")).status == pl.NO_TRACK


def test_frame_result_invariant_and_round_trip():
    with pytest.raises(ValueError):
        pl.FrameResult(0, pl.NO_TRACK, {}, (), (det(0, 0),))
    r = ok(4, det(3, 5, "Green", 4), scene_id="s0002")
    back = pl.FrameResult.from_json(json.loads(json.dumps(r.to_json())))
    assert back.to_json() == r.to_json()


# -- aggregation ------------------------------------------------------------


def test_twelve_frame_sequence_is_one_asset():
    spec = SceneSpec(seed=6, frame_count=12, signals=(SignalPlacement(0, "Left", "Green"),))
    frames, _ = generate_scene(spec)
    results = [pl.process_frame(f, pl.preset(3), k) for k, f in enumerate(frames)]
    assert sum(len(r.detections) for r in results) == 12
    (asset,) = pl.aggregate_assets(results)
    assert (asset.first_frame, asset.last_frame, asset.frame_count, asset.color) == (0, 11, 12, "Green")


def test_single_sighting_is_not_confirmed():
    assert pl.aggregate_assets([ok(0, det(5, 5))], min_confirm_frames=3) == []


def test_two_distant_signals_make_two_assets():
    spec = SceneSpec(
        seed=0,
        width=800,
        height=360,
        track_count=2,
        main_index=0,
        frame_count=6,
        signals=(SignalPlacement(0, "Left", "Red"), SignalPlacement(1, "Right", "Red")),
    )
    results = []
    for k in range(spec.frame_count):
        boxes = [signal_geometry(spec, s, k)["bbox"] for s in spec.signals]
        assert abs(boxes[1][0] - boxes[0][0]) >= 300
        results.append(ok(k, *(det(b[0], b[1], "Red", k) for b in boxes)))
    assets = pl.aggregate_assets(results)
    assert len(assets) == 2 and all(a.frame_count == 6 for a in assets)


def test_colour_change_splits_chain():
    results = [ok(k, det(50, 50, "Red" if k < 3 else "Green", k)) for k in range(6)]
    assert [a.color for a in pl.aggregate_assets(results)] == ["Red", "Green"]


def test_gap_handling():
    frames = [0, 1, 2, 9, 10, 11]
    results = [ok(k, det(50, 50, frame_id=k)) for k in frames]
    assert len(pl.aggregate_assets(results, gap_frames=5)) == 2
    assert len(pl.aggregate_assets(results, gap_frames=6)) == 1


def test_non_ok_frames_are_skipped():
    results = [ok(0, det(5, 5)), pl.FrameResult(1, pl.NO_TRACK, {}), ok(2, det(6, 5)), ok(3, det(7, 5))]
    (a,) = pl.aggregate_assets(results)
    assert a.frame_count == 3


@given(
    st.lists(
        st.lists(st.tuples(st.integers(0, 300), st.integers(0, 200), st.sampled_from(["Red", "Green"])), max_size=4),
        max_size=15,
    ),
    st.integers(1, 4),
)
def test_aggregation_invariants(frames, min_confirm):
    results = [ok(k, *(det(x, y, c, k) for x, y, c in dets)) for k, dets in enumerate(frames)]
    assets = pl.aggregate_assets(results, min_confirm)
    total = sum(len(r.detections) for r in results)
    assert len(assets) <= total
    assert sum(a.frame_count for a in assets) <= total
    for a in assets:
        assert a.frame_count >= min_confirm and a.first_frame <= a.last_frame
        for f, cx, cy in a.centers:
            assert any(d.bbox.center == (cx, cy) and d.color == a.color for d in results[f].detections)


# -- runs -------------------------------------------------------------------


def test_empty_directory(tmp_path):
    results, assets, summary = pl.run(tmp_path, pl.preset(3))
    assert results == [] and assets == []
    assert sum(summary["status_counts"].values()) == 0


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        pl.run(tmp_path / "nope", pl.preset(3))


def test_unreadable_frame_names_the_file(tmp_path):
    (tmp_path / "frame_000000.ppm").write_bytes(b"garbage")
    with pytest.raises(pl.FrameReadError, match="frame_000000.ppm"):
        pl.run(tmp_path, pl.preset(3))


def test_scene_directory_run_in_frame_order(tmp_path, three_track_scene):
    _, frames, _ = three_track_scene
    for k in (3, 0, 2, 1):
        write_image(tmp_path / f"frame_{k:06d}.ppm", frames[k])
    (tmp_path / "notes.txt").write_text("ignored")
    results, assets, summary = pl.run(tmp_path, pl.preset(3))
    assert [r.frame_id for r in results] == [0, 1, 2, 3]
    assert summary["status_counts"][pl.OK] == 4 and summary["frames"] == 4
    assert len(assets) == 1 and assets[0].scene_id is None


def test_corpus_run_conservation_and_workers(small_corpus, tmp_path):
    cfg = pl.preset(3)
    serial = pl.run(small_corpus, cfg, workers=1)
    parallel = pl.run(small_corpus, cfg, workers=3)
    assert sum(serial[2]["status_counts"].values()) == len(serial[0]) == 24
    pl.write_outputs(tmp_path / "a", *serial)
    pl.write_outputs(tmp_path / "b", *parallel)
    for name in ("results.jsonl", "assets.json", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert {a.scene_id for a in serial[1]} <= {f"s{i:04d}" for i in range(1, 7)}
    loaded = pl.load_assets(tmp_path / "a" / "assets.json")
    assert [a.to_json() for a in loaded] == [a.to_json() for a in serial[1]]
    assert len(pl.load_results(tmp_path / "a" / "results.jsonl")) == 24


def test_config_is_picklable_for_workers():
    import pickle

    cfg = replace(pl.preset(2), vote_frac=0.35)
    assert pickle.loads(pickle.dumps(cfg)) == cfg
