import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_fb, random_graph
from seqfb.fb import (
    CheckpointSchedule,
    DegenerateUtterance,
    ShapeError,
    counters_csv_header,
    counters_csv_row,
    forward,
    posteriors,
    posteriors_checkpointed,
    posteriors_naive,
    posteriors_recursive,
    read_scores,
    read_scores_tsv,
    viterbi,
    write_scores,
    write_scores_tsv,
)
from seqfb.fst import EPS, Automaton, linear_acceptor

SCHEDULES = [CheckpointSchedule("none"), CheckpointSchedule("equidistant"), CheckpointSchedule("logarithmic"),
             CheckpointSchedule("equidistant", 3)]


def feasible_instance(rng, S, C, T, words=0):
    while True:
        g = random_graph(rng, S, C, num_words=words)
        scores = rng.normal(size=(T, C)) * 2
        try:
            posteriors(g, scores)
            return g, scores
        except DegenerateUtterance:
            continue


# ---------------------------------------------------------------------------
# forward


def test_linear_chain_log_z():
    g = Automaton(4, [(0, 1, 0, EPS, -0.1), (1, 2, 1, EPS, -0.2), (2, 3, 2, EPS, -0.3)], 0, {3: 0.0})
    _, log_z = forward(g, np.zeros((3, 3)))
    assert log_z == pytest.approx(-0.6, abs=1e-15)


def test_geometric_self_loop():
    g = Automaton(1, [(0, 0, 0, EPS, math.log(0.5))], 0, {0: -0.25})
    for T in (1, 7, 50):
        assert forward(g, np.zeros((T, 1)))[1] == pytest.approx(T * math.log(0.5) - 0.25, abs=1e-12)


def test_forward_matches_enumeration():
    rng = np.random.default_rng(0)
    g, scores = feasible_instance(rng, 10, 4, 5)
    want, _, _, _ = brute_force_fb(g, scores)
    assert forward(g, scores)[1] == pytest.approx(want, abs=1e-10)


def test_degenerate_utterance_names_min_length():
    g = linear_acceptor([0, 1, 2])
    with pytest.raises(DegenerateUtterance, match="shortest accepted length is 3") as exc:
        posteriors(g, np.zeros((2, 3)))
    assert exc.value.min_length == 3


def test_score_validation():
    g = linear_acceptor([0, 1])
    with pytest.raises(ShapeError):
        posteriors(g, np.zeros((2, 1)))
    bad = np.zeros((2, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ShapeError):
        posteriors(g, bad)
    with pytest.raises(ValueError):
        posteriors(g, np.zeros((2, 2)), am_scale=0.0)


# ---------------------------------------------------------------------------
# posteriors


def test_single_path_one_hot():
    g = linear_acceptor([2, 0, 1])
    res = posteriors(g, np.random.default_rng(0).normal(size=(3, 3)))
    assert np.abs(res.gamma - np.eye(3)[[2, 0, 1]]).max() <= 1e-15


def test_two_symmetric_paths_split_evenly():
    g = Automaton(3, [(0, 1, 0, EPS, 0.0), (0, 2, 1, EPS, 0.0), (1, 1, 2, EPS, 0.0), (2, 2, 2, EPS, 0.0)], 0, {1: 0.0, 2: 0.0})
    res = posteriors(g, np.zeros((3, 3)))
    assert res.gamma[0] == pytest.approx([0.5, 0.5, 0.0], abs=1e-15)
    assert res.gamma[1:, 2] == pytest.approx([1.0, 1.0])


@pytest.mark.parametrize("seed", range(20))
def test_posteriors_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    S, T = int(rng.integers(2, 9)), int(rng.integers(1, 7))
    g, scores = feasible_instance(rng, S, 4, T)
    am = float(rng.uniform(0.3, 1.5))
    want_z, want_gamma, _, _ = brute_force_fb(g, scores, am)
    for sched in SCHEDULES:
        res = posteriors(g, scores, am, sched)
        assert res.log_z == pytest.approx(want_z, abs=1e-10)
        assert np.abs(res.gamma - want_gamma).max() < 1e-10


def test_state_occupancy_sums_to_one():
    rng = np.random.default_rng(3)
    g, scores = feasible_instance(rng, 8, 3, 12)
    res = posteriors(g, scores, state_occupancy=True)
    assert np.allclose(res.state_gamma.sum(axis=1), 1.0, atol=1e-9)


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    S = draw(st.integers(1, 30))
    T = draw(st.integers(1, 60))
    return feasible_instance(rng, S, draw(st.integers(1, 6)), T)


@settings(max_examples=150, deadline=None)
@given(instances(), st.integers(1, 20))
def test_schedule_equivalence(inst, block):
    g, scores = inst
    ref = posteriors_naive(g, scores)
    for res in (posteriors_checkpointed(g, scores), posteriors_checkpointed(g, scores, block_len=block), posteriors_recursive(g, scores)):
        assert abs(res.log_z - ref.log_z) <= 1e-10
        assert np.abs(res.gamma - ref.gamma).max() <= 1e-12


@settings(max_examples=100, deadline=None)
@given(instances())
def test_gamma_normalized_and_bounded(inst):
    g, scores = inst
    for sched in SCHEDULES:
        gamma = posteriors(g, scores, 1.0, sched).gamma
        assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-9)
        assert gamma.min() >= 0.0 and gamma.max() <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# counters


def _self_loop_graph():
    return Automaton(2, [(0, 0, 0, EPS, math.log(0.5)), (0, 1, 1, EPS, math.log(0.5)), (1, 1, 1, EPS, 0.0)], 0, {1: 0.0})


def test_naive_counters():
    g = _self_loop_graph()
    c = posteriors_naive(g, np.zeros((40, 2))).counters
    assert (c.stored_alpha_vectors_peak, c.alpha_recompute_frames, c.arc_visits) == (41, 0, 3 * 40)


def test_equidistant_counters():
    c = posteriors_checkpointed(_self_loop_graph(), np.zeros((100, 2)), block_len=10).counters
    assert c.stored_alpha_vectors_peak <= 21
    assert c.alpha_recompute_frames == 100
    assert c.arc_visits == 3 * 100


def test_equidistant_block_equal_T_is_naive():
    g, x = _self_loop_graph(), np.zeros((30, 2))
    assert posteriors_checkpointed(g, x, block_len=30).counters == posteriors_naive(g, x).counters


@pytest.mark.parametrize("T", [1, 2, 3, 5, 17, 64, 100, 1024])
def test_logarithmic_counters(T):
    c = posteriors_recursive(_self_loop_graph(), np.zeros((T, 2))).counters
    L = math.ceil(math.log2(T)) if T > 1 else 0
    assert c.stored_alpha_vectors_peak <= L + 2
    assert c.alpha_recompute_frames <= T * max(L, 1)
    if T == 1:
        assert c.stored_alpha_vectors_peak == 2
    if T == 1024:
        assert c.stored_alpha_vectors_peak <= 12 and c.alpha_recompute_frames <= 10240


def test_logarithmic_peak_grows_like_log_t():
    Ts = [16, 64, 256, 1024, 4096]
    peaks = [posteriors_recursive(_self_loop_graph(), np.zeros((T, 2))).counters.stored_alpha_vectors_peak for T in Ts]
    slope = np.polyfit(np.log2(Ts), peaks, 1)[0]
    assert 1 / 1.5 <= slope <= 1.5


def test_schedule_validation():
    with pytest.raises(ValueError):
        CheckpointSchedule("bogus")
    with pytest.raises(ValueError):
        CheckpointSchedule("equidistant", 0)


def test_counters_csv():
    g = _self_loop_graph()
    res = posteriors_naive(g, np.zeros((4, 2)))
    assert counters_csv_header() == "algo,T,S,E,peak_vectors,recompute_frames,arc_visits\n"
    assert counters_csv_row("none", g, 4, res.counters) == "none,4,2,3,5,0,12\n"


# ---------------------------------------------------------------------------
# viterbi


def test_viterbi_single_path():
    g = linear_acceptor([1, 0])
    assert viterbi(g, np.zeros((2, 2))).arcs == [0, 1]


def test_viterbi_margin():
    g = Automaton(3, [(0, 1, 0, EPS, 0.0), (0, 2, 1, EPS, 0.0)], 0, {1: 0.0, 2: 0.0})
    scores = np.array([[-2.0, -0.75]])
    path = viterbi(g, scores)
    assert path.arcs == [1]
    assert path.score - (-2.0) == pytest.approx(1.25, abs=1e-15)


def test_viterbi_tie_lowest_arc():
    g = Automaton(3, [(0, 1, 0, EPS, 0.0), (0, 2, 0, EPS, 0.0)], 0, {1: 0.0, 2: 0.0})
    assert viterbi(g, np.zeros((1, 1))).arcs == [0]


@pytest.mark.parametrize("seed", range(100))
def test_viterbi_bounded_by_log_z_and_matches_enumeration(seed):
    rng = np.random.default_rng(1000 + seed)
    g, scores = feasible_instance(rng, int(rng.integers(2, 8)), 3, int(rng.integers(1, 6)))
    log_z, _, best, _ = brute_force_fb(g, scores)
    path = viterbi(g, scores)
    assert path.score <= posteriors(g, scores).log_z + 1e-12
    assert path.score == pytest.approx(best, abs=1e-10)
    assert log_z >= best


# ---------------------------------------------------------------------------
# score files


def test_score_file_round_trip():
    x = np.random.default_rng(0).normal(size=(7, 5))
    buf = io.BytesIO()
    write_scores(x, buf)
    raw = buf.getvalue()
    assert raw[:8] == b"SEQFBSCM" and len(raw) == 24 + 8 * 35
    assert np.array_equal(read_scores(io.BytesIO(raw)), x)
    tbuf = io.StringIO()
    write_scores_tsv(x, tbuf)
    assert np.array_equal(read_scores_tsv(io.StringIO(tbuf.getvalue())), x)


def test_score_file_errors():
    with pytest.raises(ShapeError, match="magic"):
        read_scores(io.BytesIO(b"X" * 24))
    buf = io.BytesIO()
    write_scores(np.zeros((2, 2)), buf)
    with pytest.raises(ShapeError, match="expected"):
        read_scores(io.BytesIO(buf.getvalue()[:-8]))
    with pytest.raises(ShapeError):
        read_scores_tsv(io.StringIO("1 2\n3\n"))
