import io
import math

import numpy as np
import pytest

from conftest import toy_setup
from oracles import enumerate_paths, finite_difference, random_graph, rel_err
from seqfb.builder import BOS, NGramLM
from seqfb.criteria import Scales, SkipUtterance, mmi
from seqfb.fb import ShapeError, posteriors, viterbi
from seqfb.fst import Automaton
from seqfb.lattice import (
    UNPRUNED,
    Lattice,
    LatticeArc,
    LatticeError,
    PruneConfig,
    generate_lattice,
    lattice_log_z,
    lattice_mmi,
    lattice_smbr,
    read_lattice,
    trim_lattice,
    viterbi_segments,
    write_lattice,
)


def toy_scores(toy, T, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=(T, toy.num_classes)) * scale


def lattice_keys(lat: Lattice) -> set[tuple]:
    """Word sequences with boundary times for every lattice path."""
    return {tuple((int(lat.times[lat.arcs[i].src]), lat.arcs[i].word) for i in p) for p in lat.paths()}


def graph_keys(g: Automaton, T: int) -> set[tuple]:
    out = set()
    for arcs, _ in enumerate_paths(g, T):
        segs = [(t, int(g.word[a])) for t, a in enumerate(arcs) if g.word[a] >= 0 or t == 0]
        out.add(tuple(segs))
    return out


def contains_segments(lat: Lattice, segs) -> bool:
    node = lat.start
    for t1, t2, w, classes in segs:
        nxt = [a for a in lat.arcs if a.src == node and lat.times[a.dst] == t2 and a.word == w and np.array_equal(a.states, classes)]
        if not nxt:
            return False
        node = nxt[0].dst
    return node == lat.final


def bigram_lm(base: NGramLM) -> NGramLM:
    return NGramLM(2, base.vocab, dict(base.unigram), {(0, 1): math.log(0.5), (BOS, 2): math.log(0.3)}, {0: math.log(0.5), BOS: math.log(0.7)})


# ---------------------------------------------------------------------------
# generation


def test_prune_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(0.0)
    with pytest.raises(ValueError):
        PruneConfig(1.0, 0)


@pytest.mark.parametrize("T", [7, 9])
def test_unpruned_matches_graph_segmentations(toy, toy_den, T):
    lat = generate_lattice(toy_den, toy_scores(toy, T), cfg=UNPRUNED)
    assert lattice_keys(lat) == graph_keys(toy_den, T)


@pytest.mark.parametrize("seed", range(10))
def test_viterbi_path_contained(toy, toy_den, seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(8, 30))
    scores = toy_scores(toy, T, seed, scale=2.0)
    segs = viterbi_segments(toy_den, scores, 0.5)
    for beam in (1e-6, 0.5, 3.0, 10.0):
        lat = generate_lattice(toy_den, scores, Scales(0.5), PruneConfig(beam, 3))
        lat.check()
        assert contains_segments(lat, segs)


@pytest.mark.parametrize("seed", range(5))
def test_viterbi_containment_random_graphs(seed):
    rng = np.random.default_rng(seed)
    while True:
        g = random_graph(rng, 8, 3, num_words=3)
        scores = rng.normal(size=(10, 3))
        try:
            segs = viterbi_segments(g, scores)
            break
        except ValueError:
            continue
    lat = generate_lattice(g, scores, cfg=PruneConfig(1.0, 2))
    assert contains_segments(lat, segs)


def test_tiny_beam_is_viterbi(toy, toy_den):
    scores = toy_scores(toy, 20, 1, scale=2.0)
    lat = generate_lattice(toy_den, scores, cfg=PruneConfig(1e-9, None))
    paths = list(lat.paths())
    assert len(paths) == 1
    want = [(t1, t2, w) for t1, t2, w, _ in viterbi_segments(toy_den, scores)]
    got = [(int(lat.times[lat.arcs[i].src]), int(lat.times[lat.arcs[i].dst]), lat.arcs[i].word) for i in paths[0]]
    assert got == want


def test_beam_monotone(toy, toy_den):
    beams = [0.5, 1.0, 2.0, 4.0, 8.0]
    for seed in range(3):
        scores = toy_scores(toy, 16, seed)
        full = posteriors(toy_den, scores).log_z
        keys, gaps = [], []
        for b in beams:
            lat = generate_lattice(toy_den, scores, cfg=PruneConfig(b, None))
            keys.append(lattice_keys(lat))
            gaps.append(full - lattice_log_z(lat))
        assert all(a <= b for a, b in zip(keys, keys[1:]))
        assert all(g >= -1e-10 for g in gaps)
        assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_arc_cap_bounds_arcs_per_frame(toy, toy_den):
    lat = generate_lattice(toy_den, toy_scores(toy, 30), cfg=PruneConfig(math.inf, 2))
    starts = np.bincount([int(lat.times[a.src]) for a in lat.arcs])
    # the Viterbi segments may exceed the cap by one arc per frame
    assert starts.max() <= 3


def test_trim_drops_dead_nodes():
    lat = Lattice(np.array([0, 1, 1, 2]), np.array([0, 1, 2, -1]),
                  [LatticeArc(0, 1, 0, -1.0, 0.0, np.array([0])), LatticeArc(0, 2, 1, -2.0, 0.0, np.array([1])),
                   LatticeArc(1, 3, -1, -1.0, 0.0, np.array([0]))])
    t = trim_lattice(lat)
    assert t.num_nodes == 3 and len(t.arcs) == 2
    assert lattice_log_z(t) == lattice_log_z(lat) == -2.0


def test_check_rejects_bad_lattices():
    with pytest.raises(LatticeError, match="states"):
        Lattice(np.array([0, 2]), np.array([0, -1]), [LatticeArc(0, 1, 0, 0.0, 0.0, np.array([0]))]).check()
    with pytest.raises(LatticeError, match="advance"):
        Lattice(np.array([0, 0, 1]), np.array([0, 1, -1]), [LatticeArc(0, 1, 0, 0.0, 0.0, np.array([], dtype=int))]).check()
    with pytest.raises(LatticeError, match="complete path"):
        Lattice(np.array([0, 1, 2]), np.array([0, 1, -1]), [LatticeArc(0, 1, 0, 0.0, 0.0, np.array([0]))]).check()


# ---------------------------------------------------------------------------
# bounding


def test_unpruned_sum_equals_full_graph(toy, toy_den):
    for T, am in ((12, 1.0), (20, 0.3)):
        scores = toy_scores(toy, T, T)
        lat = generate_lattice(toy_den, scores, Scales(am), UNPRUNED)
        num = toy.numerator([0])
        out = lattice_mmi(lat, num, scores, Scales(am), within_arc="sum", den_graph=toy_den)
        free = mmi(num, toy_den, scores, Scales(am))
        assert out.aux["log_z_den"] == pytest.approx(posteriors(toy_den, scores, am).log_z, abs=1e-10)
        assert out.loss == pytest.approx(free.loss, abs=1e-10)
        assert np.abs(out.grad - free.grad).max() < 1e-10
        vit = lattice_mmi(lat, num, scores, Scales(am))
        assert free.loss - vit.loss >= 0.0
        assert lattice_log_z(lat, am) <= free.aux["log_z_den"] + 1e-12


def test_rescoring_matches_rebuilt_graph(toy, toy_den):
    bi = bigram_lm(toy.lm)
    toy2 = toy_setup()
    toy2.lm = bi
    scores = toy_scores(toy, 14)
    lat = generate_lattice(toy_den, scores, cfg=UNPRUNED)
    out = lattice_mmi(lat, toy.numerator([0, 1]), scores, rescore_lm=bi, base_lm=toy.lm, ref_words=[0, 1],
                      within_arc="sum", den_graph=toy_den)
    want = mmi(toy2.numerator([0, 1]), toy2.denominator(), scores)
    assert out.loss == pytest.approx(want.loss, abs=1e-10)
    assert np.abs(out.grad - want.grad).max() < 1e-10
    with pytest.raises(ValueError, match="base_lm"):
        lattice_mmi(lat, toy.numerator([0, 1]), scores, rescore_lm=bi)


# ---------------------------------------------------------------------------
# lattice criteria


def _single_path():
    g = Automaton(4, [(0, 1, 0, 0, -0.5), (1, 2, 1, -1, -0.1), (2, 3, 2, 1, -0.2)], 0, {3: 0.0})
    scores = np.random.default_rng(2).normal(size=(3, 3))
    return g, scores, generate_lattice(g, scores, cfg=UNPRUNED)


def test_single_path_lattice_mmi():
    g, scores, lat = _single_path()
    for numerator in ("graph", "lattice"):
        out = lattice_mmi(lat, g, scores, numerator=numerator)
        assert abs(out.loss) <= 1e-12
        assert np.abs(out.grad).max() <= 1e-12


def test_single_path_lattice_smbr():
    g, scores, lat = _single_path()
    out = lattice_smbr(lat, g, scores)
    assert out.aux["expected_accuracy"] == pytest.approx(3.0, abs=1e-12)
    assert np.abs(out.grad).max() <= 1e-12


def test_lattice_numerator_bounded_and_skips(toy, toy_den):
    scores = toy_scores(toy, 18, 4)
    lat = generate_lattice(toy_den, scores, cfg=PruneConfig(6.0, None))
    words = [int(w) for _, _, w, _ in viterbi_segments(toy_den, scores) if w >= 0]
    out = lattice_mmi(lat, toy.numerator(words), scores, numerator="lattice")
    assert out.loss >= 0.0
    narrow = generate_lattice(toy_den, scores, cfg=PruneConfig(1e-9, None))
    other = [w for w in range(3) if [w] != words][0]
    with pytest.raises(SkipUtterance):
        lattice_mmi(narrow, toy.numerator([other]), scores, numerator="lattice")


def test_length_mismatch(toy, toy_den):
    scores = toy_scores(toy, 12)
    lat = generate_lattice(toy_den, scores)
    num = toy.numerator([0])
    with pytest.raises(ShapeError):
        lattice_mmi(lat, num, scores[:-1])
    with pytest.raises(ShapeError):
        lattice_smbr(lat, num, np.vstack([scores, scores[:1]]))
    with pytest.raises(ValueError):
        lattice_mmi(lat, num, scores, within_arc="bogus")
    with pytest.raises(ValueError):
        lattice_mmi(lat, num, scores, numerator="bogus")


def _fd_check(fn, scores):
    out = fn(scores)
    fd = finite_difference(lambda x: fn(x).loss, scores)
    return rel_err(out.grad, fd)


@pytest.fixture(scope="module")
def fd_instance():
    toy = toy_setup()
    den = toy.denominator()
    scores = toy_scores(toy, 9, 5)
    lat = generate_lattice(den, scores, Scales(0.7), UNPRUNED)
    return toy, den, scores, lat


def test_lattice_mmi_finite_differences(fd_instance):
    toy, den, scores, lat = fd_instance
    num = toy.numerator([0])
    s = Scales(0.7)
    bi = bigram_lm(toy.lm)
    variants = [
        dict(),
        dict(within_arc="sum", den_graph=den),
        dict(numerator="lattice"),
        dict(rescore_lm=bi, base_lm=toy.lm, ref_words=[0]),
        dict(rescore_lm=bi, base_lm=toy.lm, numerator="lattice"),
    ]
    for kw in variants:
        assert _fd_check(lambda x: lattice_mmi(lat, num, x, s, **kw), scores) < 1e-6, kw


def test_lattice_smbr_finite_differences(fd_instance):
    toy, den, scores, lat = fd_instance
    num = toy.numerator([2])
    sil = toy.silence_classes
    for w in (1.0, 0.1):
        assert _fd_check(lambda x: lattice_smbr(lat, num, x, Scales(0.7), w, sil), scores) < 1e-6


def test_smbr_silence_weight_sweep(toy, toy_den):
    scores = toy_scores(toy, 24, 8)
    lat = generate_lattice(toy_den, scores)
    num = toy.numerator([0, 1])
    losses = []
    for w in (1.0, 1e-1, 1e-2, 1e-3):
        out = lattice_smbr(lat, num, scores, silence_weight=w, silence_classes=toy.silence_classes)
        assert 0.0 <= out.aux["expected_accuracy"] <= 24.0
        losses.append(out.loss)
    # lower silence weight can only remove accuracy mass
    assert all(a <= b + 1e-12 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# text format


def test_round_trip(toy, toy_den):
    scores = toy_scores(toy, 15, 2)
    lat = generate_lattice(toy_den, scores, cfg=PruneConfig(5.0, None))
    buf = io.StringIO()
    write_lattice(lat, buf)
    back = read_lattice(io.StringIO(buf.getvalue()))
    assert np.array_equal(back.times, lat.times) and np.array_equal(back.graph_states, lat.graph_states)
    for a, b in zip(lat.arcs, back.arcs):
        assert (a.src, a.dst, a.word, a.am_score, a.lm_score) == (b.src, b.dst, b.word, b.am_score, b.lm_score)
        assert np.array_equal(a.states, b.states)
    assert lattice_log_z(back) == lattice_log_z(lat)
    buf2 = io.StringIO()
    write_lattice(back, buf2)
    assert buf2.getvalue() == buf.getvalue()


def test_read_errors():
    with pytest.raises(LatticeError, match="line 2"):
        read_lattice(io.StringIO("N 0 0 0\nX 1 2\n"))
    with pytest.raises(LatticeError, match="node ids"):
        read_lattice(io.StringIO("N 0 0 0\nN 2 1\nA 0 2 0 -1.0 0.0 0\n"))


def test_viterbi_segments_cover_utterance(toy, toy_den):
    scores = toy_scores(toy, 20)
    segs = viterbi_segments(toy_den, scores)
    assert segs[0][0] == 0 and segs[-1][1] == 20
    assert all(a[1] == b[0] for a, b in zip(segs, segs[1:]))
    assert np.array_equal(np.concatenate([s[3] for s in segs]), viterbi(toy_den, scores).classes(toy_den))
