import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtext.decoder import CharInstance, Line, PageResult, SearchTrace
from gridtext.geometry import Box, GridShape, grid_of
from gridtext.matching import PageAnnotation
from gridtext.pseudolabels import (
    PseudoLabel,
    PseudoLabelStore,
    build_targets,
    gen_paths,
    update,
    update_weight,
)
from gridtext.predictions import DIR_DELTAS

SHAPE = GridShape(8, 8, 128, 128)


def _cell_box(i, j, shape=SHAPE):
    return Box((i - 0.5) * shape.cell_w, (j - 0.5) * shape.cell_h, 0.08, 0.08)


def _result_with(chars):
    line = Line(
        chars=[
            CharInstance(grid=g, box=b, score=s, cls_id=c, cls_prob=1.0)
            for g, b, s, c in chars
        ],
        traces=[],
        sol_conf=1.0,
        eol_conf=1.0,
    )
    return PageResult(lines=[line])


def test_update_weight_symmetry_exact():
    assert update_weight(0.8, 0.8) == 0.5
    assert update_weight(0.123, 0.123, epsilon=3.7) == 0.5


def test_update_weight_hand_value():
    want = 1.0 / (1.0 + math.exp(-1.0))
    assert math.isclose(update_weight(0.9, 0.8, 10.0), want, abs_tol=1e-12)


def test_update_first_observation_copies():
    store = PseudoLabelStore()
    box = _cell_box(3, 3)
    result = _result_with([((3, 3), box, 0.87, 5)])
    update(store, "pg", {(1, 1, 1, 1)}, result)
    label = store.get("pg", 1, 1)
    assert label.box == box
    assert label.gamma == 0.87
    assert label.count == 1


def test_update_blends_convexly():
    store = PseudoLabelStore()
    old_box = Box(40, 40, 0.1, 0.1)
    store.set("pg", 1, 1, PseudoLabel(box=old_box, gamma=0.9))
    new_box = Box(44, 38, 0.12, 0.1)
    result = _result_with([((3, 3), new_box, 0.8, 5)])
    update(store, "pg", {(1, 1, 1, 1)}, result, epsilon=10.0)
    label = store.get("pg", 1, 1)
    lam = 1.0 / (1.0 + math.exp(-1.0))
    assert math.isclose(label.box.x, lam * 40 + (1 - lam) * 44, abs_tol=1e-12)
    assert math.isclose(label.gamma, lam * 0.9 + (1 - lam) * 0.8, abs_tol=1e-12)
    assert label.count == 2
    assert min(40, 44) <= label.box.x <= max(40, 44)
    assert min(0.8, 0.9) <= label.gamma <= max(0.8, 0.9)


@settings(deadline=None, max_examples=100)
@given(
    gamma=st.floats(0.01, 1.0),
    score=st.floats(0.01, 1.0),
    eps=st.floats(0.0, 10.0),
)
def test_gamma_stays_in_convex_hull(gamma, score, eps):
    lam = update_weight(gamma, score, eps)
    blended = lam * gamma + (1 - lam) * score
    assert 0.0 < lam < 1.0
    assert min(gamma, score) <= blended <= max(gamma, score)


def _labels(*grid_pairs):
    out = {}
    for (q, n), grid in grid_pairs:
        out[(q, n)] = PseudoLabel(box=_cell_box(*grid), gamma=0.9)
    return out


def test_gen_paths_same_grid_contributes_nothing():
    labels = _labels(((1, 1), (2, 2)))
    labels[(1, 2)] = PseudoLabel(box=Box(_cell_box(2, 2).x + 1, _cell_box(2, 2).y, 0.08, 0.08), gamma=0.9)
    annot = PageAnnotation(lines=[[1, 2]])
    rng = np.random.default_rng(0)
    assert grid_of(labels[(1, 2)].box, SHAPE) == (2, 2)
    assert gen_paths(labels, annot, SHAPE, rng) == set()


def test_gen_paths_horizontal_pair_deterministic():
    labels = _labels(((1, 1), (2, 2)), ((1, 2), (4, 2)))
    annot = PageAnnotation(lines=[[1, 2]])
    rng = np.random.default_rng(0)
    want = {(2, 2, 1), (3, 2, 1)}  # two RIGHT moves
    assert gen_paths(labels, annot, SHAPE, rng) == want


def test_gen_paths_two_staircases_both_occur():
    labels = _labels(((1, 1), (2, 2)), ((1, 2), (3, 3)))
    annot = PageAnnotation(lines=[[1, 2]])
    variants = set()
    for seed in range(64):
        s_rd = gen_paths(labels, annot, SHAPE, np.random.default_rng(seed))
        variants.add(frozenset(s_rd))
    right_then_down = frozenset({(2, 2, 1), (3, 2, 2)})
    down_then_right = frozenset({(2, 2, 2), (2, 3, 1)})
    assert variants == {right_then_down, down_then_right}


@settings(deadline=None, max_examples=60)
@given(
    si=st.integers(1, 8), sj=st.integers(1, 8),
    ti=st.integers(1, 8), tj=st.integers(1, 8),
    seed=st.integers(0, 1000),
)
def test_gen_paths_adjacency_and_endpoint(si, sj, ti, tj, seed):
    labels = _labels(((1, 1), (si, sj)), ((1, 2), (ti, tj)))
    annot = PageAnnotation(lines=[[1, 2]])
    rng = np.random.default_rng(seed)
    s_rd = gen_paths(labels, annot, SHAPE, rng)
    dist = abs(ti - si) + abs(tj - sj)
    assert len(s_rd) == dist
    # replay the emitted steps: they must chain 4-adjacent from source to target
    pos = (si, sj)
    remaining = dict(((i, j), d) for i, j, d in s_rd)
    for _ in range(dist):
        d = remaining.pop(pos)
        di, dj = DIR_DELTAS[d]
        pos = (pos[0] + di, pos[1] + dj)
    assert pos == (ti, tj)
    assert not remaining


def test_build_targets_single_char_line():
    labels = _labels(((1, 1), (4, 4)))
    annot = PageAnnotation(lines=[[7]])
    result = PageResult(lines=[])
    targets = build_targets(labels, annot, result, set(), SHAPE, np.random.default_rng(0))
    assert targets.s_c == {(4, 4, 1, 1)}
    assert targets.s_s_pos == {(4, 4)} and targets.s_e_pos == {(4, 4)}
    assert targets.s_s_neg == set() and targets.s_e_neg == set()
    assert targets.s_rd == set()


def test_build_targets_empty_store():
    annot = PageAnnotation(lines=[[1, 2, 3]])
    targets = build_targets({}, annot, PageResult(lines=[]), set(), SHAPE,
                            np.random.default_rng(0))
    assert targets.s_c == set()
    assert targets.s_d_neg == set()
    assert targets.s_s_pos == targets.s_s_neg == set()
    assert targets.s_rd == set()


def test_build_targets_three_char_line_sol_eol_sets():
    labels = _labels(((1, 1), (2, 2)), ((1, 2), (4, 2)), ((1, 3), (6, 2)))
    annot = PageAnnotation(lines=[[1, 2, 3]])
    targets = build_targets(labels, annot, PageResult(lines=[]), set(), SHAPE,
                            np.random.default_rng(0))
    assert targets.s_s_pos == {(2, 2)}
    assert targets.s_s_neg == {(4, 2), (6, 2)}
    assert targets.s_e_pos == {(6, 2)}
    assert targets.s_e_neg == {(2, 2), (4, 2)}
    assert targets.s_s_pos.isdisjoint(targets.s_s_neg)
    assert targets.s_e_pos.isdisjoint(targets.s_e_neg)


def test_build_targets_collision_keeps_higher_gamma():
    labels = {
        (1, 1): PseudoLabel(box=_cell_box(3, 3), gamma=0.4),
        (2, 1): PseudoLabel(box=Box(_cell_box(3, 3).x + 2, _cell_box(3, 3).y, 0.08, 0.08), gamma=0.9),
    }
    annot = PageAnnotation(lines=[[1], [2]])
    targets = build_targets(labels, annot, PageResult(lines=[]), set(), SHAPE,
                            np.random.default_rng(0))
    assert targets.s_c == {(3, 3, 2, 1)}


def test_build_targets_d_neg_from_traces():
    char = CharInstance(grid=(2, 2), box=_cell_box(2, 2), score=1.0, cls_id=1,
                        cls_prob=1.0)
    trace = SearchTrace(origin=(2, 2), visited=[(2, 2), (3, 2), (4, 2)],
                        outcome="reached", target=(5, 2))
    result = PageResult(lines=[Line(chars=[char], traces=[trace], sol_conf=1,
                                    eol_conf=1)])
    annot = PageAnnotation(lines=[[1]])
    targets = build_targets({}, annot, result, {(1, 1)}, SHAPE,
                            np.random.default_rng(0))
    assert targets.s_d_neg == {(3, 2), (4, 2)}


def test_store_save_load_round_trip(tmp_path):
    store = PseudoLabelStore()
    store.set("a", 1, 1, PseudoLabel(box=Box(10, 10, 0.1, 0.1), gamma=0.5, count=3))
    store.set("b", 2, 4, PseudoLabel(box=Box(20, 20, 0.2, 0.2), gamma=0.9))
    path = tmp_path / "store.jsonl"
    store.save(path)
    loaded = PseudoLabelStore.load(path)
    assert loaded.page("a") == store.page("a")
    assert loaded.page("b") == store.page("b")


def test_update_requires_valid_indices():
    store = PseudoLabelStore()
    result = _result_with([((3, 3), _cell_box(3, 3), 0.9, 1)])
    with pytest.raises(IndexError):
        update(store, "pg", {(2, 1, 1, 1)}, result)
