import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsekp.codec import KeypointSet
from sparsekp.errors import AggregationError, InputError
from sparsekp.evalkit import (aggregate_localization, connected_components, evaluate_predictions,
                              multilabel_station_metrics, point_localization_metrics)

from oracles import box, oracle_localization, oracle_multilabel, random_instance, random_station_map


# --- connected components ----------------------------------------------------

def test_components_disjoint_blocks():
    m = box((8, 8), 0, 2, 0, 2) | box((8, 8), 5, 7, 5, 7)
    comps = connected_components(m)
    assert len(comps) == 2
    assert comps[0][0, 0] and comps[1][5, 5]


def test_components_diagonal_touch_is_one():
    m = box((6, 6), 0, 2, 0, 2) | box((6, 6), 2, 4, 2, 4)
    assert len(connected_components(m)) == 1


def test_components_empty():
    assert connected_components(np.zeros((5, 5), dtype=bool)) == []


def flood_components(m):
    h, w = m.shape
    seen = np.zeros_like(m)
    comps = []
    for i in range(h):
        for j in range(w):
            if m[i, j] and not seen[i, j]:
                comp = np.zeros_like(m)
                stack = [(i, j)]
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    comp[a, b] = True
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            x, y = a + da, b + db
                            if 0 <= x < h and 0 <= y < w and m[x, y] and not seen[x, y]:
                                seen[x, y] = True
                                stack.append((x, y))
                comps.append(comp)
    return comps


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 0.7))
@settings(max_examples=60, deadline=None)
def test_components_match_flood_fill(seed, density):
    m = np.random.default_rng(seed).random((12, 12)) < density
    got = connected_components(m)
    want = flood_components(m)
    assert len(got) == len(want)
    for a, b in zip(got, want):
        assert np.array_equal(a, b)


# --- localization ---------------------------------------------------------------

def test_localization_worked_example():
    shape = (20, 20)
    masks = [box(shape, 0, 3, 0, 3), box(shape, 5, 8, 5, 8), box(shape, 10, 13, 10, 13),
             box(shape, 15, 18, 15, 18)]
    pts = KeypointSet.from_coords([(1, 1), (2, 2), (19, 0)])
    m = point_localization_metrics(pts, masks)
    assert (m["tp"], m["fp"], m["fn"]) == (2, 1, 3)
    assert m["precision"] == pytest.approx(2 / 3)
    assert m["recall"] == pytest.approx(2 / 5)
    assert m["f1"] == pytest.approx(0.5)


def test_localization_empty_empty():
    m = point_localization_metrics([], [])
    assert (m["precision"], m["recall"], m["f1"]) == (1.0, 1.0, 1.0)


def test_localization_many_points_one_mask():
    mask = box((10, 10), 2, 6, 2, 6)
    pts = [(2, 2), (3, 3), (4, 4), (5, 5), (2, 5)]
    m = point_localization_metrics(pts, [mask])
    assert (m["tp"], m["fp"], m["fn"]) == (5, 0, 0)
    assert (m["precision"], m["recall"], m["f1"]) == (1.0, 1.0, 1.0)


def test_localization_boundary_counts_inside():
    mask = box((10, 10), 2, 5, 2, 5)
    assert point_localization_metrics([(4, 4)], [mask])["tp"] == 1


def test_localization_no_predictions_with_masks():
    m = point_localization_metrics([], [box((6, 6), 0, 2, 0, 2)])
    assert (m["precision"], m["recall"], m["f1"]) == (0.0, 0.0, 0.0)


def test_localization_predictions_without_masks():
    m = point_localization_metrics([(1, 1)], [])
    assert (m["precision"], m["recall"]) == (0.0, 0.0)


def test_localization_out_of_bounds():
    with pytest.raises(InputError):
        point_localization_metrics([(10, 0)], [box((10, 10), 0, 2, 0, 2)])


# --- aggregation ---------------------------------------------------------------

def test_aggregate_cases():
    assert aggregate_localization([(1, 1, 1), (0, 0, 0)]) == (0.5, 0.5, 0.5)
    assert aggregate_localization([(0.2, 0.3, 0.4)]) == pytest.approx((0.2, 0.3, 0.4))
    got = aggregate_localization([(2 / 3, 2 / 5, 0.5), (1, 1, 1)])
    assert got == pytest.approx((5 / 6, 7 / 10, 0.75))


def test_aggregate_empty():
    with pytest.raises(AggregationError):
        aggregate_localization([])


# --- multilabel ------------------------------------------------------------------

def quadrant_map():
    smap = np.ones((12, 12), dtype=int)
    smap[:, 2:4] = 2
    smap[:, 4:6] = 3
    smap[:, 6:8] = 4
    smap[:, 8:10] = 5
    smap[:, 10:] = 6
    return smap


def test_multilabel_single_station_hit():
    res = multilabel_station_metrics([[(0, 5)]], [quadrant_map()], [[0, 0, 1, 0, 0, 0]])
    st3 = res["per_station"][2]
    assert (st3["precision"], st3["recall"], st3["f1"]) == (1.0, 1.0, 1.0)
    for s in res["per_station"]:
        assert (s["precision"], s["recall"], s["f1"]) == (1.0, 1.0, 1.0)


def test_multilabel_false_positive_station():
    res = multilabel_station_metrics([[(0, 2)]], [quadrant_map()], [[0] * 6])
    assert res["per_station"][1]["precision"] == 0.0


def test_multilabel_false_negative_station():
    res = multilabel_station_metrics([[]], [quadrant_map()], [[1, 0, 0, 0, 0, 0]])
    assert res["per_station"][0]["recall"] == 0.0


def test_multilabel_missing_station_label():
    smap = quadrant_map()
    smap[smap == 6] = 5
    with pytest.raises(InputError):
        multilabel_station_metrics([[]], [smap], [[0] * 6])


# --- oracle equivalence and properties -----------------------------------------

def test_oracle_equivalence_localization():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        _, masks, pts = random_instance(rng)
        m = point_localization_metrics(pts, masks)
        assert (m["precision"], m["recall"], m["f1"], m["tp"], m["fp"], m["fn"]) == \
            oracle_localization(pts, masks)


def test_oracle_equivalence_multilabel():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n_img = rng.integers(1, 4)
        pts_all, smaps, gts = [], [], []
        for _ in range(n_img):
            (h, w), _, pts = random_instance(rng)
            h, w = max(h, 3), max(w, 3)
            pts = [(r % h, c % w) for r, c in pts]
            pts = list(dict.fromkeys(pts))
            smaps.append(random_station_map(rng, h, w))
            pts_all.append(pts)
            gts.append(list(rng.integers(0, 2, 6)))
        res = multilabel_station_metrics(pts_all, smaps, gts)
        assert (res["precision"], res["recall"], res["f1"]) == oracle_multilabel(pts_all, smaps, gts)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_adding_points_monotone(seed):
    rng = np.random.default_rng(seed)
    (h, w), masks, pts = random_instance(rng)
    base = point_localization_metrics(pts, masks)
    union = np.any(masks, axis=0) if masks else np.zeros((h, w), dtype=bool)
    covered = [any(m[r, c] for r, c in pts) for m in masks]
    for m, cov in zip(masks, covered):
        if not cov:
            r, c = map(int, np.argwhere(m)[0])
            if (r, c) not in pts:
                assert point_localization_metrics(pts + [(r, c)], masks)["recall"] >= base["recall"]
            break
    outside = [tuple(map(int, rc)) for rc in np.argwhere(~union) if tuple(map(int, rc)) not in pts]
    if outside:
        assert point_localization_metrics(pts + [outside[0]], masks)["precision"] <= base["precision"]


@given(st.integers(0, 2**31 - 1), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_permutation_invariance(seed, rnd):
    rng = np.random.default_rng(seed)
    _, masks, pts = random_instance(rng)
    shuffled = list(pts)
    rnd.shuffle(shuffled)
    assert point_localization_metrics(pts, masks) == point_localization_metrics(shuffled, masks)


def test_evaluate_predictions_report(tmp_path):
    from sparsekp.synth import SceneSpec, generate_scene, sparsify_labels
    spec = SceneSpec()
    samples = [sparsify_labels(generate_scene(spec, i, i), spec, i) for i in range(3)]
    preds = [s.sparse_labels for s in samples]
    rep = evaluate_predictions(preds, samples)
    assert rep.localization["precision"] == 1.0
    assert 0 < rep.localization["recall"] < 1
    csv_path, json_path = rep.write(tmp_path)
    first = (csv_path.read_bytes(), json_path.read_bytes())
    rep.write(tmp_path)
    assert (csv_path.read_bytes(), json_path.read_bytes()) == first
