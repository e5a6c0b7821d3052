import io
import itertools
import math
from collections import defaultdict

import numpy as np
import pytest

from conftest import TOY_DIR, toy_setup
from oracles import emission_string_weights, enumerate_paths, logsumexp, string_weights
from seqfb.builder import (
    BOS,
    EOS,
    ConfigError,
    ContextConfig,
    GraphSetup,
    HmmTopology,
    Lexicon,
    NGramLM,
    Pronunciation,
    _chain,
    build_lexicon_fst,
    build_lm_acceptor,
    build_numerator_graph,
    build_topology_fst,
    expand_context,
    graph_stats_csv,
    read_arpa,
    read_lexicon,
    unigram_lm,
    write_arpa,
    write_lexicon,
)
from seqfb.fb import posteriors
from seqfb.fst import EPS, Automaton, SymbolTable, compose, linear_acceptor, shortest_length, validate

LN = math.log


def lexicon(entries, silence="sil"):
    """``entries``: list of (word, phones, prob)."""
    text = "".join(f"{w} {' '.join(ph)} {p}\n" for w, ph, p in entries)
    return read_lexicon(io.StringIO(text), silence)


def toy_bigram(vocab: SymbolTable) -> NGramLM:
    a, b = vocab.id("ab"), vocab.id("ba")
    uni = {0: LN(0.3), 1: LN(0.3), 2: LN(0.2), EOS: LN(0.2)}
    bi = {(BOS, a): LN(0.5), (a, b): LN(0.4), (a, EOS): LN(0.1), (b, EOS): LN(0.5)}
    bo = {BOS: LN(0.5), a: LN(0.5), b: LN(0.5)}
    return NGramLM(2, vocab, uni, bi, bo)


# ---------------------------------------------------------------------------
# LM


def test_uniform_unigram_acceptor():
    vocab = SymbolTable(["a", "b", "c", "d"])
    g = build_lm_acceptor(unigram_lm(vocab, [0.25] * 4), vocab)
    assert g.num_states == 1 and g.num_arcs == 4
    assert np.allclose(g.weight, LN(0.25))


def test_unigram_string_weight_is_product():
    vocab = SymbolTable(["a", "b"])
    lm = unigram_lm(vocab, [0.7, 0.3], end_prob=0.2)
    g = build_lm_acceptor(lm, vocab)
    w = string_weights(g, 4)
    assert w[((0, 1), (0, 1))] == pytest.approx(LN(0.7 * 0.8) + LN(0.3 * 0.8) + LN(0.2), abs=1e-12)


def test_bigram_string_weights_by_enumeration():
    vocab = SymbolTable(["ab", "ba", "aba"])
    lm = toy_bigram(vocab)
    g = build_lm_acceptor(lm, vocab)
    got = string_weights(g, 6)

    def cond(w, h):
        # a history without explicit bigrams falls through to the unigram entirely
        explicit = any(hh == h for hh, _ in lm.bigram)
        bo = math.exp(lm.backoff[h]) if h in lm.backoff else (0.0 if explicit else 1.0)
        p = math.exp(lm.bigram.get((h, w), -math.inf)) + bo * math.exp(lm.unigram[w])
        return LN(p)

    for n in (1, 2):
        for seq in itertools.product(range(3), repeat=n):
            h, want = BOS, 0.0
            for w in seq:
                want += cond(w, h)
                h = w
            want += cond(EOS, h)
            assert got[(seq, seq)] == pytest.approx(want, abs=1e-12), seq
            assert lm.sentence_logprob(seq) == pytest.approx(want, abs=1e-12)


def test_bigram_mass_invariant():
    vocab = SymbolTable(["a"])
    with pytest.raises(ConfigError, match="mass"):
        NGramLM(2, vocab, {0: LN(0.5), EOS: LN(0.5)}, {(0, 0): LN(0.5)}, {0: LN(0.6)})


def test_lm_missing_word():
    vocab = SymbolTable(["a", "b"])
    lm = unigram_lm(SymbolTable(["a"]), [1.0])
    with pytest.raises(ConfigError, match="'b'"):
        build_lm_acceptor(lm, vocab)


def test_arpa_round_trip():
    vocab = SymbolTable(["ab", "ba", "aba"])
    lm = toy_bigram(vocab)
    buf = io.StringIO()
    write_arpa(lm, buf)
    back = read_arpa(io.StringIO(buf.getvalue()), vocab)
    for seq in [(0,), (0, 1), (2, 2, 0), ()]:
        assert back.sentence_logprob(seq) == pytest.approx(lm.sentence_logprob(seq), abs=1e-12)


def test_arpa_rejects_trigrams():
    with pytest.raises(ConfigError, match="order 3"):
        read_arpa(io.StringIO("\\data\\\n\\3-grams:\n"))


# ---------------------------------------------------------------------------
# Lexicon


def test_lexicon_file_round_trip_and_errors():
    lex = lexicon([("x", "ab", 0.7), ("x", "ba", 0.3), ("y", "a", 1.0)])
    buf = io.StringIO()
    write_lexicon(lex, buf)
    back = read_lexicon(io.StringIO(buf.getvalue()))
    assert [(p.word, p.phones) for p in back.prons] == [(p.word, p.phones) for p in lex.prons]
    with pytest.raises(ConfigError, match="empty"):
        read_lexicon(io.StringIO(""))
    with pytest.raises(ConfigError, match="line 1"):
        read_lexicon(io.StringIO("x\n"))
    with pytest.raises(ConfigError, match="sum to"):
        lexicon([("x", "a", 0.7), ("x", "b", 0.6)])


def test_single_word_lexicon_path():
    lex = lexicon([("ab", "ab", 1.0)])
    g = build_lexicon_fst(lex, allow_optional_silence=False)
    a, b = lex.phones.id("a"), lex.phones.id("b")
    arcs = sorted((arc.emit, arc.word) for arc in g.arcs())
    assert arcs == [(a, 0), (b, EPS)]
    assert string_weights(g, 3)[((a, b), (0,))] == pytest.approx(0.0)


def test_parallel_pronunciations():
    lex = lexicon([("x", "ab", 0.7), ("x", "ba", 0.3)])
    g = build_lexicon_fst(lex, allow_optional_silence=False)
    a, b = lex.phones.id("a"), lex.phones.id("b")
    w = string_weights(g, 3)
    assert w[((a, b), (0,))] == pytest.approx(LN(0.7))
    assert w[((b, a), (0,))] == pytest.approx(LN(0.3))


def test_optional_silence_weight():
    lex = lexicon([("x", "a", 1.0), ("y", "b", 1.0)])
    g = build_lexicon_fst(lex, True, LN(0.5))
    sil, a, b = lex.silence, lex.phones.id("a"), lex.phones.id("b")
    w = emission_string_weights(g, 4)
    # silence before, none between, silence after
    assert w[((sil, a, b, sil), (0, 1))] == pytest.approx(3 * LN(0.5), abs=1e-12)
    assert w[((a, sil, b), (0, 1))] == pytest.approx(3 * LN(0.5), abs=1e-12)


def test_empty_pronunciation_rejected():
    words, phones = SymbolTable(["x"]), SymbolTable(["sil"])
    with pytest.raises(ConfigError, match="empty pronunciation"):
        Lexicon(words, phones, [Pronunciation(0, ())], 0)


# ---------------------------------------------------------------------------
# Context expansion


def _by_word_string(w: dict) -> dict:
    out = defaultdict(list)
    for (_, words), v in w.items():
        out[words].append(v)
    return {k: logsumexp(v) for k, v in out.items()}


def test_monophone_expansion_is_relabeling():
    setup = toy_setup("monophone")
    lex_fst = build_lexicon_fst(setup.lexicon)
    cl = expand_context(lex_fst, setup.context)
    assert cl.num_arcs == lex_fst.num_arcs
    mapping = {}
    for a, b in zip(lex_fst.arcs(), cl.arcs()):
        assert mapping.setdefault(a.emit, b.emit) == b.emit
    assert len(set(mapping.values())) == len(mapping)


def test_triphone_center_context():
    setup = toy_setup("triphone")
    lex, ctx = setup.lexicon, setup.context
    a, b = lex.phones.id("a"), lex.phones.id("b")
    cl = expand_context(build_lexicon_fst(lex), ctx)
    aba = lex.words.id("aba")
    first = next(arc for arc in cl.arcs() if arc.word == aba)
    second = next(cl.arcs_from(first.dst))
    assert second.emit == ctx.unit_map[(a, b, a)]
    assert first.emit == ctx.unit_map[(-1, a, b)]


@pytest.mark.parametrize("mode", ["monophone", "triphone"])
def test_context_expansion_preserves_word_weights(mode):
    setup = toy_setup(mode)
    lex_fst = build_lexicon_fst(setup.lexicon)
    cl = expand_context(lex_fst, setup.context)
    before = _by_word_string(emission_string_weights(lex_fst, 7))
    after = _by_word_string(emission_string_weights(cl, 7))
    assert before.keys() == after.keys()
    for k in before:
        assert after[k] == pytest.approx(before[k], abs=1e-12)


def test_unmapped_context_unit():
    setup = toy_setup("triphone")
    ctx = ContextConfig("triphone", {(setup.lexicon.silence,): 0}, ["sil"], setup.lexicon.silence)
    with pytest.raises(ConfigError, match="no unit"):
        expand_context(build_lexicon_fst(setup.lexicon), ctx)


# ---------------------------------------------------------------------------
# Topology


def test_topology_single_unit_weights():
    h = build_topology_fst(HmmTopology.uniform(0.5), 1)
    w = emission_string_weights(h, 4)
    assert min(len(e) for e, words in w if words == (0,)) == 3
    assert w[((0, 1, 2), (0,))] == pytest.approx(3 * LN(0.5), abs=1e-12)


def test_topology_skip_minimal_dwell():
    h = build_topology_fst(HmmTopology.uniform(0.4, skip=0.2), 1)
    w = emission_string_weights(h, 3)
    assert min(len(e) for e, words in w if words == (0,)) == 2


@pytest.mark.parametrize("skip", [0.0, 0.2])
def test_topology_length4_mass_matches_matrix_power(skip):
    topo = HmmTopology.uniform(0.3, skip=skip)
    A = np.zeros((3, 3))
    for k in range(3):
        A[k, k] = topo.loop[k]
        if k + 1 < 3:
            A[k, k + 1] = topo.forward[k]
        if k + 2 < 3:
            A[k, k + 2] = topo.skip[k]
    exit_p = np.array([0.0, topo.skip[1], topo.forward[2]])
    want = np.linalg.matrix_power(A, 3)[0] @ exit_p
    w = emission_string_weights(build_topology_fst(topo, 1), 4)
    got = logsumexp(v for (e, words), v in w.items() if len(e) == 4 and words == (0,))
    assert got == pytest.approx(LN(want), abs=1e-12)


def test_topology_validation():
    with pytest.raises(ConfigError, match="sum"):
        HmmTopology((0.5, 0.5, 0.5), (0.6, 0.5, 0.5))
    with pytest.raises(ConfigError, match="skip"):
        HmmTopology((0.5, 0.5, 0.5), (0.3, 0.5, 0.3), (0.2, 0.0, 0.2))


# ---------------------------------------------------------------------------
# Training graphs


def test_golden_toy_graph_sizes():
    # snapshot of the first verified build of the bundled toy setup
    for mode in ("monophone", "triphone"):
        setup = toy_setup(mode)
        den = setup.denominator()
        num = setup.numerator([0, 2])
        assert (den.num_states, den.num_arcs) == (39, 90)
        assert (num.num_states, num.num_arcs) == (43, 88)
    assert toy_setup("triphone").num_classes > toy_setup("monophone").num_classes


def test_denominator_is_emission_ready(toy_den):
    assert toy_den.emission_ready
    assert validate(toy_den).ok


def test_denominator_accepts_every_word_sequence(toy, toy_den):
    for n in (1, 2, 3):
        for seq in itertools.product(range(3), repeat=n):
            assert not compose(toy_den, linear_acceptor(seq, symbols=toy.lexicon.words)).is_empty


def test_denominator_log_z_brute_force():
    setup = toy_setup("monophone")
    den = setup.denominator()
    scores = np.zeros((6, setup.num_classes))
    want = logsumexp(w for _, w in enumerate_paths(den, 6))
    assert posteriors(den, scores).log_z == pytest.approx(want, abs=1e-10)


def test_single_word_vocabulary_num_equals_den():
    # without optional silence, and with T leaving room for exactly one word,
    # the denominator's language is the numerator's
    lex = lexicon([("x", "ab", 1.0)])
    lm = unigram_lm(lex.words, [1.0], end_prob=0.5)
    setup = GraphSetup(lex, lm, ContextConfig.for_lexicon(lex), HmmTopology(), silence_logprob=None)
    den, num = setup.denominator(), setup.numerator([0])
    rng = np.random.default_rng(0)
    for T in (6, 8, 11):
        scores = rng.normal(size=(T, setup.num_classes))
        assert posteriors(num, scores).log_z == pytest.approx(posteriors(den, scores).log_z, abs=1e-12)


def test_empty_composition_names_product(toy):
    h, cl = toy._parts()
    empty = Automaton.empty(toy.lexicon.words, toy.lexicon.words)
    with pytest.raises(Exception, match=r"CL o G"):
        _chain(h, cl, empty)


def test_numerator_empty_sequence_is_silence(toy):
    num = toy.numerator([])
    assert set(num.emit.tolist()) <= set(toy.silence_classes)


def test_numerator_one_phone_word_min_length():
    lex = lexicon([("x", "a", 1.0), ("y", "ab", 1.0)])
    num = build_numerator_graph([0], lex, ContextConfig.for_lexicon(lex), HmmTopology(), silence_logprob=None)
    assert shortest_length(num) == 3


def test_numerator_oov():
    setup = toy_setup()
    with pytest.raises(ConfigError, match=r"\[7\]"):
        setup.numerator([0, 7])


def test_numerator_bounded_by_denominator(toy, toy_den):
    rng = np.random.default_rng(1)
    nums = [toy.numerator(list(seq)) for seq in [(0,), (1, 2), (2,)]]
    for i in range(100):
        T = int(rng.integers(8, 20))
        scores = rng.normal(size=(T, toy.num_classes)) * 2
        den = posteriors(toy_den, scores).log_z
        for num in nums:
            try:
                assert posteriors(num, scores).log_z <= den + 1e-12
            except ValueError:
                pass  # reference too long for T


def test_language_inclusion_by_enumeration(toy, toy_den):
    # every numerator path is a denominator path with the same weight
    def by_labels(g, T):
        out = defaultdict(list)
        for arcs, w in enumerate_paths(g, T):
            key = (tuple(int(g.emit[a]) for a in arcs), tuple(int(g.word[a]) for a in arcs if g.word[a] != EPS))
            out[key].append(w)
        return {k: logsumexp(v) for k, v in out.items()}

    for words, T in [([0], 8), ([2], 10), ([0, 1], 13)]:
        num = by_labels(toy.numerator(words), T)
        den = by_labels(toy_den, T)
        assert num
        for key, w in num.items():
            assert key[1] == tuple(words)
            assert den[key] == pytest.approx(w, abs=1e-10)


def test_lm_scale_folded_into_graph():
    base = toy_setup()
    plain, scaled = base.denominator(), toy_setup(lm_scale=0.5).denominator()

    def by_labels(g, T):
        out = defaultdict(list)
        for arcs, w in enumerate_paths(g, T):
            key = (tuple(int(g.emit[a]) for a in arcs), tuple(int(g.word[a]) for a in arcs if g.word[a] != EPS))
            out[key].append(w)
        return {k: logsumexp(v) for k, v in out.items()}

    w1, w2 = by_labels(plain, 9), by_labels(scaled, 9)
    assert w1.keys() == w2.keys()
    for key, w in w1.items():
        lm_part = base.lm.sentence_logprob(key[1])
        assert w2[key] - w == pytest.approx(-0.5 * lm_part, abs=1e-10)


def test_steady_state_log_z_increments(toy, toy_den):
    rng = np.random.default_rng(5)
    block = rng.normal(size=(20, toy.num_classes))
    z = [posteriors(toy_den, np.tile(block, (k, 1))).log_z for k in range(1, 10)]
    inc = np.diff(z)
    # increments per block converge geometrically to a constant
    assert abs(inc[-1] - inc[-2]) < 1e-6
    assert abs(inc[-1] - inc[-2]) < abs(inc[1] - inc[0])


def test_graph_stats_csv(toy, toy_den):
    buf = io.StringIO()
    graph_stats_csv([("den", toy_den)], buf)
    assert buf.getvalue() == "graph,states,edges\nden,39,90\n"


def test_bundled_files_parse():
    with open(TOY_DIR / "lexicon.txt") as fp:
        lex = read_lexicon(fp)
    assert [lex.words.name(i) for i in range(len(lex.words))] == ["ab", "ba", "aba"]
