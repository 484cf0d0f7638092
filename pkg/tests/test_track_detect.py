from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_hough_peaks
from railsight.imaging import EdgeMap, FilterParams, ImageBuffer, detect_edges, flip_edges, flip_horizontal
from railsight.synth_gen import LAYOUTS, SceneSpec, SignalPlacement, generate_scene
from railsight.track_detect import (
    EDGE_COLUMN,
    INTERIOR,
    BandSpec,
    ClassifierError,
    ConstantClassifier,
    HeuristicClassifier,
    HoughLine,
    OracleClassifier,
    SnippetRect,
    SnippetVerdict,
    TrackLayout,
    TrackParams,
    classify_snippet,
    consolidate_tracks,
    crop_snippet,
    hough_lines,
    layout_from_snippets,
    mirror_line,
    polyline_hits_rect,
    snippet_proposals,
    theta_table,
)

DEG = math.radians(1.0)


def rail(bottom_x: float, lean_deg: float, height: int) -> HoughLine:
    """Hough line through (bottom_x, height-1) leaning ``lean_deg`` (positive: rightwards going up)."""
    t = math.radians(lean_deg)
    return HoughLine(bottom_x * math.cos(t) + (height - 1) * math.sin(t), t, 100)


def planted_edges(rng, size=64, n_lines=2, noise=0.01):
    bits = rng.random((size, size)) < noise
    for _ in range(n_lines):
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        c, s = math.cos(theta), math.sin(theta)
        rho = rng.uniform(-10, 10) + (size / 2) * (c + s)
        for u in np.linspace(-size, size, 6 * size):
            x, y = int(round(rho * c - u * s)), int(round(rho * s + u * c))
            if 0 <= x < size and 0 <= y < size:
                bits[y, x] = True
    return bits


def peak_set(lines):
    return {(ln.theta_index, ln.rho_bin, ln.votes) for ln in lines}


# -- Hough ------------------------------------------------------------------


def test_theta_table_is_symmetric():
    thetas, c, s = theta_table(DEG)
    k = len(thetas)
    assert k == 180 and thetas[0] == -math.pi / 2
    for i in range(1, k):
        assert thetas[k - i] == -thetas[i]
        assert c[k - i] == c[i] and s[k - i] == -s[i]
    assert c[0] == 0.0 and c[k // 2] == 1.0


def test_empty_edges_give_no_lines():
    assert hough_lines(EdgeMap(np.zeros((20, 20), dtype=bool))) == []


def test_vertical_line_parameters():
    bits = np.zeros((40, 31), dtype=bool)
    bits[:, 10] = True
    top = hough_lines(EdgeMap(bits))[0]
    assert top.theta == 0.0
    assert top.rho == pytest.approx(10.0, abs=1e-9)
    assert top.votes == 40


def test_even_width_rho_within_half_bin():
    # rho bins are centred on the image centre, a half pixel off the integer grid here
    bits = np.zeros((40, 30), dtype=bool)
    bits[:, 10] = True
    top = hough_lines(EdgeMap(bits))[0]
    assert top.theta == 0.0 and top.votes == 40
    assert abs(top.rho - 10.0) <= 0.5


def test_horizontal_line_parameters():
    bits = np.zeros((31, 40), dtype=bool)
    bits[7, :] = True
    top = hough_lines(EdgeMap(bits))[0]
    assert top.theta == -math.pi / 2
    assert -top.rho == pytest.approx(7.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_hough_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    bits = planted_edges(rng, n_lines=1 + seed % 3)
    _, c, s = theta_table(DEG)
    assert peak_set(hough_lines(EdgeMap(bits), 1.0, DEG, 0.3)) == brute_hough_peaks(bits, c, s, 1.0, 0.3)


@pytest.mark.parametrize("rho_res,theta_deg", [(2.0, 1.0), (1.0, 2.0), (1.5, 3.0)])
def test_hough_oracle_other_resolutions(rho_res, theta_deg):
    bits = planted_edges(np.random.default_rng(99), size=40, n_lines=2)
    _, c, s = theta_table(math.radians(theta_deg))
    got = peak_set(hough_lines(EdgeMap(bits), rho_res, math.radians(theta_deg), 0.4))
    assert got == brute_hough_peaks(bits, c, s, rho_res, 0.4)


def test_hough_sorted_and_thresholded():
    lines = hough_lines(EdgeMap(planted_edges(np.random.default_rng(3), n_lines=3)), vote_frac=0.5)
    keys = [(-ln.votes, ln.theta, ln.rho) for ln in lines]
    assert keys == sorted(keys)
    assert all(ln.votes >= 0.5 * lines[0].votes for ln in lines)


@pytest.mark.parametrize("bad", [dict(rho_res=0), dict(theta_res=0), dict(vote_frac=0), dict(vote_frac=1.5)])
def test_hough_rejects_bad_parameters(bad):
    with pytest.raises(ValueError):
        hough_lines(EdgeMap(np.ones((4, 4), dtype=bool)), **bad)


@given(st.integers(0, 10_000), st.integers(1, 3), st.sampled_from([31, 32, 48]))
def test_hough_flip_covariance(seed, n_lines, size):
    bits = planted_edges(np.random.default_rng(seed), size=size, n_lines=n_lines)
    k = len(theta_table(DEG)[0])
    orig = hough_lines(EdgeMap(bits))
    flipped = hough_lines(flip_edges(EdgeMap(bits)))
    assert peak_set(flipped) == peak_set(mirror_line(ln, size, k) for ln in orig)
    by_cell = {(ln.theta_index, ln.rho_bin): ln for ln in flipped}
    for ln in orig:
        m = mirror_line(ln, size, k)
        f = by_cell[(m.theta_index, m.rho_bin)]
        assert f.theta == m.theta
        assert f.rho == pytest.approx(m.rho, abs=1e-9)


# -- consolidation ----------------------------------------------------------


def test_consolidate_symmetric_single_track():
    h = 480
    lines = [rail(200, 20, h), rail(440, -20, h)]
    layout = consolidate_tracks(lines, (640, h), (100, 400))
    assert len(layout) == 1 and layout.main_index == 0
    assert layout.main.bottom_span == pytest.approx((200, 440))


def test_consolidate_empty_and_invalid():
    assert consolidate_tracks([], (640, 480)).tracks == ()
    with pytest.raises(ValueError):
        consolidate_tracks([], (640, 480), (300, 100))
    with pytest.raises(ValueError):
        consolidate_tracks([], (0, 480))


def test_consolidate_rejects_diverging_and_flat_lines():
    h = 480
    assert not consolidate_tracks([rail(200, -20, h), rail(440, 20, h)], (640, h), (100, 400)).tracks
    assert not consolidate_tracks([rail(200, 75, h), rail(440, -75, h)], (640, h), (100, 400)).tracks


def test_consolidate_merges_rail_flanks():
    h = 480
    lines = [rail(200, 20, h), rail(203, 20.5, h), rail(440, -20, h), rail(438, -19, h)]
    layout = consolidate_tracks(lines, (640, h), (100, 400))
    assert len(layout) == 1


@given(
    st.lists(st.tuples(st.floats(-50, 700), st.floats(-70, 70)), max_size=10),
)
def test_consolidate_invariants(raw):
    h, w = 480, 640
    params = TrackParams()
    layout = consolidate_tracks([rail(x, a, h) for x, a in raw], (w, h), params=params)
    mids = [t.bottom_mid for t in layout.tracks]
    assert mids == sorted(mids) and len(set(mids)) == len(mids)
    lo, hi = params.gauge_bounds(w)
    used = []
    for t in layout.tracks:
        assert lo <= t.gauge <= hi
        assert t.left_rail.bottom_x < t.right_rail.bottom_x
        used += [id(t.left_rail), id(t.right_rail)]
    assert len(used) == len(set(used))
    if layout.tracks:
        d = [abs(m - w / 2) for m in mids]
        assert layout.main_index == d.index(min(d))


@pytest.mark.parametrize("n,m", [(1, 0), (2, 0), (2, 1), (3, 1)])
def test_edge_layout_recovers_generated_tracks(n, m):
    spec = SceneSpec(seed=10 + n, track_count=n, main_index=m)
    frames, truth = generate_scene(spec)
    params = TrackParams()
    edges = detect_edges(frames[0], FilterParams())
    layout = consolidate_tracks(hough_lines(edges, min_votes=params.min_votes), frames[0].dims, params=params)
    assert len(layout) == n and layout.main_index == m
    for t, gt in zip(layout.tracks, truth[0]["tracks"]):
        assert t.bottom_span == pytest.approx(gt["bottom_span"], abs=3.0)


# -- snippets ---------------------------------------------------------------


def test_snippet_band_rows():
    rects = snippet_proposals((640, 480), BandSpec(0.75, 0.625), 160, 160)
    assert len(rects) == 4
    assert [r.column_role for r in rects] == [EDGE_COLUMN, INTERIOR, INTERIOR, EDGE_COLUMN]
    assert all(r.y0 == 360 for r in rects[1:3]) and all(r.y0 == 300 for r in (rects[0], rects[-1]))
    assert all(r.y1 == 480 for r in rects)


def test_snippet_last_window_right_aligned_and_wide_snippet():
    rects = snippet_proposals((100, 50), BandSpec(), 30, 30)
    assert [r.x0 for r in rects] == [0, 30, 60, 70]
    only = snippet_proposals((100, 50), BandSpec(), 200, 10)
    assert len(only) == 1 and (only[0].x0, only[0].x1) == (0, 100)


@given(st.integers(20, 400), st.integers(10, 300), st.integers(1, 200), st.data())
def test_snippet_coverage(width, height, sw, data):
    stride = data.draw(st.integers(1, sw))
    interior = data.draw(st.floats(0, 0.95))
    edge = data.draw(st.floats(0, interior))
    band = BandSpec(interior, edge)
    rects = snippet_proposals((width, height), band, sw, stride)
    covered = np.zeros(width, dtype=bool)
    for r in rects:
        assert 0 <= r.x0 < r.x1 <= width and 0 <= r.y0 < r.y1 == height
        covered[r.x0 : r.x1] = True
        assert r.y0 <= math.floor(interior * height)
    assert covered.all()
    assert rects[-1].x1 == width


def test_snippet_stride_must_not_exceed_width():
    with pytest.raises(ValueError):
        snippet_proposals((100, 50), BandSpec(), 20, 21)


def test_band_validation():
    with pytest.raises(ValueError):
        BandSpec(0.5, 0.6)
    with pytest.raises(ValueError):
        BandSpec(1.0, 0.5)


def _scene_snippets(spec):
    frames, truth = generate_scene(spec, "sx")
    frame = frames[0]
    rects = snippet_proposals(frame.dims, BandSpec(), 80, 40)
    edges = detect_edges(frame, FilterParams())
    return frame, truth, rects, edges


def test_heuristic_classifier_on_rails_and_blank():
    frame, truth, rects, edges = _scene_snippets(SceneSpec(seed=1))
    clf = HeuristicClassifier()
    flags = truth[0]["snippet_flags"]
    centre = [i for i, r in enumerate(rects) if r.x0 <= 140 and r.x1 >= 182][0]
    assert classify_snippet(crop_snippet(frame, rects[centre], edges), clf).is_track
    assert flags[centre]
    blank = ImageBuffer(np.full((72, 80, 3), 100, dtype=np.uint8))
    snip = crop_snippet(blank, SnippetRect(0, 0, 80, 72, INTERIOR))
    assert not classify_snippet(snip, clf).is_track


def test_constant_and_threshold():
    snip = crop_snippet(ImageBuffer(np.zeros((4, 4), dtype=np.uint8)), SnippetRect(0, 0, 4, 4, INTERIOR))
    assert classify_snippet(snip, ConstantClassifier()) == SnippetVerdict(False, 0.0)
    assert classify_snippet(snip, ConstantClassifier(0.6), 0.5).is_track
    assert not classify_snippet(snip, ConstantClassifier(0.6), 0.7).is_track
    assert classify_snippet(snip, ConstantClassifier(3.0)).score == 1.0


def test_oracle_classifier_matches_truth_flags(tmp_path):
    spec = SceneSpec(seed=4, track_count=3, main_index=1, signals=(SignalPlacement(1),))
    frames, truth = generate_scene(spec, "s9")
    path = tmp_path / "truth.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in truth))
    clf = OracleClassifier.from_file(path)
    rects = snippet_proposals(frames[0].dims, BandSpec(), 80, 40)
    for k, rec in enumerate(truth):
        for rect, flag in zip(rects, rec["snippet_flags"]):
            v = classify_snippet(crop_snippet(frames[k], rect, frame_key=("s9", k)), clf)
            assert v.is_track == flag
    with pytest.raises(ClassifierError):
        clf.score(crop_snippet(frames[0], rects[0], frame_key=("other", 0)))


def test_polyline_hits_rect():
    rect = SnippetRect(10, 10, 20, 20, INTERIOR)
    assert polyline_hits_rect([[0, 0], [30, 30]], rect)
    assert not polyline_hits_rect([[0, 0], [30, 0], [30, 9.5]], rect)
    assert not polyline_hits_rect([[20, 0], [20, 40]], rect)  # right edge is exclusive
    assert polyline_hits_rect([[15, 15], [15, 16]], rect)


def _two_track_layout(h=480):
    return consolidate_tracks(
        [rail(100, 20, h), rail(180, 15, h), rail(420, -15, h), rail(500, -20, h)], (640, h), (60, 120)
    )


@pytest.mark.parametrize(
    "positive,expected",
    [({1, 2, 5, 6}, 2), ({1, 2}, 1), ({5}, 1), (set(), 0), (set(range(8)), 2)],
)
def test_layout_from_snippet_runs(positive, expected):
    hint = _two_track_layout()
    assert len(hint) == 2
    rects = snippet_proposals((640, 480), BandSpec(0.75, 0.75), 80, 80)
    verdicts = [(r, SnippetVerdict(i in positive, float(i in positive))) for i, r in enumerate(rects)]
    layout = layout_from_snippets(verdicts, hint, (640, 480))
    assert len(layout) == expected
    if expected == 1:
        assert layout.main_index == 0


@given(st.integers(0, 500), st.sampled_from(LAYOUTS))
def test_oracle_snippet_layout_reproduces_track_count(seed, layout_shape):
    n, m = layout_shape
    spec = SceneSpec(seed=seed, track_count=n, main_index=m)
    frames, truth = generate_scene(spec, "sp")
    clf = OracleClassifier({("sp", k): [p for t in rec["tracks"] for p in (t["left"], t["right"])] for k, rec in enumerate(truth)})
    frame = frames[0]
    params = TrackParams()
    edges = detect_edges(frame, FilterParams())
    hint = consolidate_tracks(hough_lines(edges, min_votes=params.min_votes), frame.dims, params=params)
    rects = snippet_proposals(frame.dims, BandSpec(), 80, 40)
    verdicts = [(r, classify_snippet(crop_snippet(frame, r, frame_key=("sp", 0)), clf)) for r in rects]
    assert len(layout_from_snippets(verdicts, hint, frame.dims)) == len(truth[0]["tracks"])


def test_track_layout_summary():
    layout = _two_track_layout()
    s = layout.summary()
    assert s["main_index"] == layout.main_index and len(s["tracks"]) == 2
    assert TrackLayout().summary() == {"tracks": [], "main_index": None}


def test_flipped_frame_mirrors_layout():
    frames, _ = generate_scene(SceneSpec(seed=8, track_count=2, main_index=0))
    params = TrackParams()
    f = frames[0]
    a = consolidate_tracks(hough_lines(detect_edges(f, FilterParams()), min_votes=12), f.dims, params=params)
    b = consolidate_tracks(
        hough_lines(detect_edges(flip_horizontal(f), FilterParams()), min_votes=12), f.dims, params=params
    )
    spans = sorted((f.width - 1 - r, f.width - 1 - l) for l, r in (t.bottom_span for t in a.tracks))
    got = [x for t in b.tracks for x in t.bottom_span]
    assert got == pytest.approx([x for span in spans for x in span], abs=1e-6)
