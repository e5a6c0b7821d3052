"""Numerator and denominator training graphs.

The denominator graph is the static composition ``H ∘ C ∘ L ∘ G``:

* ``G``  word n-gram acceptor (order 1 or 2),
* ``L``  lexicon transducer, phones -> words, with optional inter-word silence,
* ``C``  within-word context expansion, applied as a relabelling of ``L``'s
  phone arcs with context-dependent units,
* ``H``  3-state HMM topology, emission classes -> units.

Emission class ids are ``3 * unit + hmm_state``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .fst import (
    EPS,
    NEG_INF,
    Automaton,
    AutomatonBuilder,
    GraphError,
    SymbolTable,
    compose,
    linear_acceptor,
    remove_emission_epsilons,
    trim,
    validate,
)

BOS = -2
EOS = -3
BOUNDARY = -1
STATES_PER_UNIT = 3
LN_HALF = math.log(0.5)


class ConfigError(GraphError):
    """Invalid lexicon, LM, topology or context configuration."""


# ---------------------------------------------------------------------------
# Lexicon


@dataclass(frozen=True)
class Pronunciation:
    word: int
    phones: tuple[int, ...]
    logprob: float = 0.0


@dataclass
class Lexicon:
    words: SymbolTable
    phones: SymbolTable
    prons: list[Pronunciation]
    silence: int

    def __post_init__(self):
        if not 0 <= self.silence < len(self.phones):
            raise ConfigError(f"silence phone id {self.silence} is not in the phone table")
        totals = np.zeros(len(self.words))
        counts = np.zeros(len(self.words), dtype=int)
        for p in self.prons:
            if not p.phones:
                raise ConfigError(f"empty pronunciation for word {self.words.name(p.word)!r}")
            if self.silence in p.phones:
                raise ConfigError(f"word {self.words.name(p.word)!r} uses the silence phone")
            totals[p.word] += math.exp(p.logprob)
            counts[p.word] += 1
        for w in range(len(self.words)):
            if counts[w] == 0:
                raise ConfigError(f"word {self.words.name(w)!r} has no pronunciation")
            if totals[w] > 1.0 + 1e-9:
                raise ConfigError(f"pronunciation probabilities of {self.words.name(w)!r} sum to {totals[w]:.6g} > 1")

    def word_ids(self, names: Iterable[str]) -> list[int]:
        return [self.words.id(n) for n in names]


def read_lexicon(fp: IO[str], silence_phone: str = "sil") -> Lexicon:
    """Parse ``word phone1 phone2 ... [prob]`` lines.

    Words without an explicit probability share the remaining mass of that
    word uniformly.
    """
    words, phones = SymbolTable(), SymbolTable([silence_phone])
    raw: list[tuple[int, tuple[int, ...], float | None]] = []
    for lineno, line in enumerate(fp, 1):
        parts = line.split()
        if not parts:
            continue
        prob = None
        if len(parts) >= 3:
            try:
                prob = float(parts[-1])
                parts = parts[:-1]
            except ValueError:
                pass
        if len(parts) < 2:
            raise ConfigError(f"lexicon line {lineno}: empty pronunciation for {parts[0]!r}")
        if prob is not None and not 0.0 < prob <= 1.0:
            raise ConfigError(f"lexicon line {lineno}: probability {prob} not in (0, 1]")
        w = words.add(parts[0])
        raw.append((w, tuple(phones.add(p) for p in parts[1:]), prob))
    if not raw:
        raise ConfigError("lexicon is empty")
    prons = []
    for w in range(len(words)):
        entries = [r for r in raw if r[0] == w]
        explicit = sum(p for _, _, p in entries if p is not None)
        n_implicit = sum(p is None for _, _, p in entries)
        share = (1.0 - explicit) / n_implicit if n_implicit else 0.0
        for _, ph, p in entries:
            prob = p if p is not None else share
            if prob <= 0:
                raise ConfigError(f"word {words.name(w)!r}: no probability mass left for a pronunciation")
            prons.append(Pronunciation(w, ph, math.log(prob)))
    return Lexicon(words, phones, prons, phones.id(silence_phone))


def write_lexicon(lex: Lexicon, fp: IO[str]) -> None:
    for p in lex.prons:
        fp.write(" ".join([lex.words.name(p.word)] + [lex.phones.name(x) for x in p.phones]))
        fp.write(f" {format(math.exp(p.logprob), '.17g')}\n")


# ---------------------------------------------------------------------------
# Word n-gram LM


@dataclass
class NGramLM:
    """Unigram or interpolated-backoff bigram over a word table.

    For order 2 every history ``h`` satisfies
    ``sum_w p(w|h) + p(</s>|h) + backoff(h) = 1`` where ``backoff(h)`` is the
    probability of falling through to the unigram distribution; the effective
    conditional is ``p(w|h) + backoff(h) * p_uni(w)``.
    """

    order: int
    vocab: SymbolTable
    unigram: dict[int, float]
    bigram: dict[tuple[int, int], float] = field(default_factory=dict)
    backoff: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ConfigError(f"LM order {self.order} not supported (1 or 2)")
        total = sum(math.exp(v) for v in self.unigram.values())
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"unigram probabilities sum to {total:.9g}")
        if self.order == 1 and (self.bigram or self.backoff):
            raise ConfigError("unigram LM cannot carry bigram entries")
        for h in self.histories():
            mass = sum(math.exp(v) for (hh, _), v in self.bigram.items() if hh == h)
            mass += math.exp(self.backoff.get(h, 0.0 if not self._has_explicit(h) else NEG_INF))
            if abs(mass - 1.0) > 1e-6:
                raise ConfigError(f"history {self._name(h)!r}: probability mass {mass:.9g} != 1")

    def _has_explicit(self, h: int) -> bool:
        return any(hh == h for hh, _ in self.bigram)

    def _name(self, w: int) -> str:
        return {BOS: "<s>", EOS: "</s>"}.get(w, self.vocab.name(w) if w >= 0 else str(w))

    def histories(self) -> list[int]:
        if self.order == 1:
            return []
        return [BOS] + list(range(len(self.vocab)))

    def backoff_logprob(self, h: int) -> float:
        if h in self.backoff:
            return self.backoff[h]
        return NEG_INF if self._has_explicit(h) else 0.0

    def logprob(self, w: int, h: int = BOS) -> float:
        """Effective ``ln p(w | h)``; ``w`` may be ``EOS``."""
        uni = self.unigram.get(w, NEG_INF)
        if self.order == 1:
            return uni
        explicit = self.bigram.get((h, w), NEG_INF)
        via = self.backoff_logprob(h) + uni
        hi, lo = max(explicit, via), min(explicit, via)
        if hi == NEG_INF:
            return NEG_INF
        return hi + math.log1p(math.exp(lo - hi))

    def sentence_logprob(self, words: Sequence[int]) -> float:
        h, total = BOS, 0.0
        for w in words:
            total += self.logprob(w, h)
            h = w
        return total + self.final_logprob(h)

    def final_logprob(self, h: int = BOS) -> float:
        if EOS not in self.unigram and not any(w == EOS for _, w in self.bigram):
            return 0.0
        return self.logprob(EOS, h)


def unigram_lm(vocab: SymbolTable, probs: Sequence[float], end_prob: float | None = None) -> NGramLM:
    scale = 1.0 - (end_prob or 0.0)
    uni = {w: math.log(p * scale) for w, p in enumerate(probs)}
    if end_prob:
        uni[EOS] = math.log(end_prob)
    return NGramLM(1, vocab, uni)


def read_arpa(fp: IO[str], vocab: SymbolTable | None = None) -> NGramLM:
    """Read an ARPA-style file restricted to orders 1-2.

    Probabilities and backoff weights are log10.  A backoff weight is read as
    the probability of the fall-through arc (see :class:`NGramLM`).
    """
    ln10 = math.log(10.0)
    vocab = vocab if vocab is not None else SymbolTable()
    fixed_vocab = len(vocab) > 0
    section = None
    order = 0
    uni, bi, bo = {}, {}, {}
    raw_bi = []

    def wid(tok: str, allow_bos: bool = False) -> int:
        if tok == "</s>":
            return EOS
        if tok == "<s>":
            if not allow_bos:
                raise ConfigError("<s> may only appear as a history")
            return BOS
        if fixed_vocab and tok not in vocab:
            raise ConfigError(f"LM word {tok!r} is not in the vocabulary")
        return vocab.add(tok)

    for lineno, line in enumerate(fp, 1):
        s = line.strip()
        if not s:
            continue
        if s == "\\data\\":
            section = "data"
            continue
        if s == "\\end\\":
            break
        if s.startswith("\\") and s.endswith("-grams:"):
            section = int(s[1:].split("-")[0])
            if section > 2:
                raise ConfigError(f"LM order {section} not supported (1 or 2)")
            order = max(order, section)
            continue
        parts = s.split()
        try:
            if section == "data":
                continue
            if section == 1:
                lp = float(parts[0]) * ln10
                tok = parts[1]
                if tok == "<s>":
                    if len(parts) > 2:
                        bo[BOS] = float(parts[2]) * ln10
                    continue
                w = wid(tok)
                uni[w] = lp
                if len(parts) > 2:
                    bo[w] = float(parts[2]) * ln10
            elif section == 2:
                raw_bi.append((float(parts[0]) * ln10, parts[1], parts[2]))
            else:
                raise ConfigError("content outside an n-gram section")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"LM line {lineno}: {exc}") from None
    for lp, h, w in raw_bi:
        bi[(wid(h, allow_bos=True), wid(w))] = lp
    if order == 0:
        raise ConfigError("LM file has no n-gram sections")
    if order == 1:
        bo = {}
    return NGramLM(order, vocab, uni, bi, bo)


def write_arpa(lm: NGramLM, fp: IO[str]) -> None:
    ln10 = math.log(10.0)

    def fmt(x: float) -> str:
        return format(x / ln10, ".17g") if x > NEG_INF else "-99"

    fp.write("\\data\\\n")
    fp.write(f"ngram 1={len(lm.unigram) + (1 if lm.order == 2 else 0)}\n")
    if lm.order == 2:
        fp.write(f"ngram 2={len(lm.bigram)}\n")
    fp.write("\n\\1-grams:\n")
    if lm.order == 2:
        fp.write(f"-99\t<s>\t{fmt(lm.backoff_logprob(BOS))}\n")
    for w, lp in lm.unigram.items():
        line = f"{fmt(lp)}\t{lm._name(w)}"
        if lm.order == 2 and w != EOS:
            line += f"\t{fmt(lm.backoff_logprob(w))}"
        fp.write(line + "\n")
    if lm.order == 2:
        fp.write("\n\\2-grams:\n")
        for (h, w), lp in lm.bigram.items():
            fp.write(f"{fmt(lp)}\t{lm._name(h)}\t{lm._name(w)}\n")
    fp.write("\n\\end\\\n")


# ---------------------------------------------------------------------------
# HMM topology and context


@dataclass(frozen=True)
class HmmTopology:
    """Per-state transition probabilities of the 3-state left-to-right HMM.

    From state k: ``loop[k]`` stays, ``forward[k]`` advances one state (out of
    the unit for k=2) and ``skip[k]`` advances two states (state 1 skipping
    to the exit).  A skip from state 2 is not defined.
    """

    loop: tuple[float, float, float] = (0.5, 0.5, 0.5)
    forward: tuple[float, float, float] = (0.5, 0.5, 0.5)
    skip: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("loop", "forward", "skip"):
            v = getattr(self, name)
            if len(v) != STATES_PER_UNIT or any(x < 0 for x in v):
                raise ConfigError(f"topology {name} must be 3 non-negative probabilities")
        if self.skip[2] != 0.0:
            raise ConfigError("skip from the last HMM state is not defined")
        for k in range(STATES_PER_UNIT):
            total = self.loop[k] + self.forward[k] + self.skip[k]
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"HMM state {k}: outgoing probabilities sum to {total:.12g}")
            if self.forward[k] + self.skip[k] == 0.0:
                raise ConfigError(f"HMM state {k} cannot be left")

    @classmethod
    def uniform(cls, loop: float = 0.5, skip: float = 0.0) -> "HmmTopology":
        return cls((loop,) * 3, (1 - loop - skip, 1 - loop - skip, 1 - loop), (skip, skip, 0.0))


@dataclass
class ContextConfig:
    """Maps phones in context to context-dependent units.

    Keys of ``unit_map`` are ``(center,)`` in monophone mode and
    ``(left, center, right)`` in triphone mode, with ``BOUNDARY`` marking a
    word edge.  The silence phone is always context independent.  Several
    keys may share a unit id (explicit tying).
    """

    mode: str
    unit_map: dict[tuple[int, ...], int]
    unit_names: list[str]
    silence: int

    def __post_init__(self):
        if self.mode not in ("monophone", "triphone"):
            raise ConfigError(f"unknown context mode {self.mode!r}")
        if (self.silence,) not in self.unit_map:
            raise ConfigError("silence phone has no unit")
        if self.unit_map and max(self.unit_map.values()) >= len(self.unit_names):
            raise ConfigError("unit id without a name")

    @property
    def num_units(self) -> int:
        return len(self.unit_names)

    def key(self, left: int, center: int, right: int) -> tuple[int, ...]:
        if self.mode == "monophone" or center == self.silence:
            return (center,)
        return (left, center, right)

    def unit(self, left: int, center: int, right: int) -> int:
        k = self.key(left, center, right)
        try:
            return self.unit_map[k]
        except KeyError:
            raise ConfigError(f"no unit for context {k}") from None

    @property
    def silence_units(self) -> list[int]:
        return [self.unit_map[(self.silence,)]]

    @classmethod
    def for_lexicon(cls, lex: Lexicon, mode: str = "monophone") -> "ContextConfig":
        def pname(p: int) -> str:
            return "#" if p == BOUNDARY else lex.phones.name(p)

        keys: list[tuple[int, ...]] = [(lex.silence,)]
        if mode == "monophone":
            keys += [(p,) for p in range(len(lex.phones)) if p != lex.silence]
        elif mode == "triphone":
            seen = set()
            for pr in lex.prons:
                ph = pr.phones
                for i, c in enumerate(ph):
                    left = ph[i - 1] if i > 0 else BOUNDARY
                    right = ph[i + 1] if i + 1 < len(ph) else BOUNDARY
                    k = (left, c, right)
                    if k not in seen:
                        seen.add(k)
                        keys.append(k)
        else:
            raise ConfigError(f"unknown context mode {mode!r}")
        names = [pname(k[0]) if len(k) == 1 else f"{pname(k[0])}-{pname(k[1])}+{pname(k[2])}" for k in keys]
        return cls(mode, {k: i for i, k in enumerate(keys)}, names, lex.silence)

    def class_names(self) -> list[str]:
        return [f"{u}_{k}" for u in self.unit_names for k in range(STATES_PER_UNIT)]


def silence_classes(ctx: ContextConfig) -> list[int]:
    return [STATES_PER_UNIT * u + k for u in ctx.silence_units for k in range(STATES_PER_UNIT)]


# ---------------------------------------------------------------------------
# Component automata


def build_lm_acceptor(lm: NGramLM, vocab: SymbolTable | None = None, lm_scale: float = 1.0) -> Automaton:
    """Word acceptor for ``lm`` with all weights multiplied by ``lm_scale``."""
    vocab = vocab if vocab is not None else lm.vocab
    for name in vocab:
        if name not in lm.vocab or lm.unigram.get(lm.vocab.id(name), NEG_INF) == NEG_INF:
            raise ConfigError(f"word {name!r} missing from the LM")
    to_vocab = {lm.vocab.id(n): vocab.id(n) for n in vocab}
    b = AutomatonBuilder(vocab, vocab)

    if lm.order == 1:
        s = b.add_state()
        for w, lp in lm.unigram.items():
            if w in to_vocab:
                v = to_vocab[w]
                b.add_arc(s, s, v, v, lm_scale * lp)
        b.set_final(s, lm_scale * lm.final_logprob())
        return b.build()

    hist = {h: b.add_state() for h in [BOS] + sorted(to_vocab)}
    uni = b.add_state()
    b.start = hist[BOS]
    for (h, w), lp in lm.bigram.items():
        if w == EOS or h not in hist:
            continue
        b.add_arc(hist[h], hist[w], to_vocab[w], to_vocab[w], lm_scale * lp)
    for h, s in hist.items():
        bo = lm.backoff_logprob(h)
        if bo > NEG_INF:
            b.add_arc(s, uni, EPS, EPS, lm_scale * bo)
        end = lm.bigram.get((h, EOS), NEG_INF)
        if end > NEG_INF:
            b.set_final(s, lm_scale * end)
    if EOS not in lm.unigram and not any(w == EOS for _, w in lm.bigram):
        for s in list(hist.values()) + [uni]:
            b.set_final(s)
    for w, lp in lm.unigram.items():
        if w == EOS:
            b.set_final(uni, lm_scale * lp)
        elif w in to_vocab:
            b.add_arc(uni, hist[w], to_vocab[w], to_vocab[w], lm_scale * lp)
    return b.build()


def build_lexicon_fst(lex: Lexicon, allow_optional_silence: bool = True, silence_logprob: float = LN_HALF) -> Automaton:
    """Phone-to-word transducer.

    The word label sits on the first phone arc.  With optional silence, a
    boundary state precedes every word gap (including the utterance start
    and end) and is left either through one silence phone (``silence_logprob``)
    or through an epsilon arc (the complement).
    """
    b = AutomatonBuilder(lex.phones, lex.words)
    if allow_optional_silence:
        if not silence_logprob < 0.0:
            raise ConfigError("silence insertion probability must be in (0, 1)")
        boundary, loop = b.add_state(), b.add_state()
        b.add_arc(boundary, loop, EPS, EPS, math.log1p(-math.exp(silence_logprob)))
        b.add_arc(boundary, loop, lex.silence, EPS, silence_logprob)
        b.set_final(loop)
        end = boundary
    else:
        loop = end = b.add_state()
        b.set_final(loop)
    b.start = boundary if allow_optional_silence else loop
    for p in lex.prons:
        if not p.phones:
            raise ConfigError(f"empty pronunciation for word {lex.words.name(p.word)!r}")
        prev = loop
        for i, ph in enumerate(p.phones):
            nxt = end if i == len(p.phones) - 1 else b.add_state()
            b.add_arc(prev, nxt, ph, p.word if i == 0 else EPS, p.logprob if i == 0 else 0.0)
            prev = nxt
    return b.build()


def expand_context(phone_graph: Automaton, cfg: ContextConfig) -> Automaton:
    """Relabel phone arcs with context-dependent units.

    A phone's left neighbour is ``BOUNDARY`` when the arc starts a word (it
    carries a word label) or leaves a start/final state or a state entered by
    an epsilon or silence arc; otherwise it is the unique phone on the arcs
    entering the source state.  The right neighbour is found symmetrically.
    Ambiguous neighbours are a configuration error.
    """
    a = phone_graph
    n = a.num_states
    is_final = a.final > NEG_INF
    in_labels: list[set[int]] = [set() for _ in range(n)]
    out_labels: list[set[int]] = [set() for _ in range(n)]
    for arc in a.arcs():
        in_labels[arc.dst].add(arc.emit)
        if arc.word != EPS and arc.emit != EPS:
            out_labels[arc.src].add(BOUNDARY)
        out_labels[arc.src].add(arc.emit)

    def edge(labels: set[int], state: int) -> int:
        if state == a.start or is_final[state] or EPS in labels or cfg.silence in labels or BOUNDARY in labels:
            return BOUNDARY
        if len(labels) != 1:
            raise ConfigError(f"phone context at state {state} is ambiguous: {sorted(labels)}")
        return next(iter(labels))

    units = []
    for arc in a.arcs():
        if arc.emit == EPS:
            units.append(EPS)
            continue
        if cfg.mode == "monophone" or arc.emit == cfg.silence:
            units.append(cfg.unit(BOUNDARY, arc.emit, BOUNDARY))
            continue
        left = BOUNDARY if arc.word != EPS else edge(in_labels[arc.src], arc.src)
        right = edge(out_labels[arc.dst], arc.dst)
        units.append(cfg.unit(left, arc.emit, right))
    unit_table = SymbolTable(cfg.unit_names)
    return Automaton(
        n,
        zip(a.src, a.dst, units, a.word, a.weight),
        a.start,
        a.final_weights,
        unit_table,
        a.osymbols,
    )


def build_topology_fst(
    topo: HmmTopology,
    num_units: int,
    overrides: dict[int, HmmTopology] | None = None,
    unit_names: Sequence[str] | None = None,
) -> Automaton:
    """Emission-class-to-unit transducer: a closure over per-unit 3-state HMMs.

    Entering unit ``u`` emits class ``3u`` and outputs ``u``; every later
    frame emits the class of the state it lands in.  Leaving the unit is an
    emission-epsilon arc back to the hub, so the cost of an occupancy of
    exactly one frame per state is ``forward[0] * forward[1] * forward[2]``.
    """
    names = unit_names if unit_names is not None else [str(u) for u in range(num_units)]
    b = AutomatonBuilder(None, SymbolTable(names))
    hub = b.add_state()
    b.set_final(hub)

    def ln(p: float) -> float:
        return math.log(p) if p > 0 else NEG_INF

    for u in range(num_units):
        t = (overrides or {}).get(u, topo)
        s = [b.add_state() for _ in range(STATES_PER_UNIT)]
        c = [STATES_PER_UNIT * u + k for k in range(STATES_PER_UNIT)]
        b.add_arc(hub, s[0], c[0], u, 0.0)
        for k in range(STATES_PER_UNIT):
            b.add_arc(s[k], s[k], c[k], EPS, ln(t.loop[k]))
        b.add_arc(s[0], s[1], c[1], EPS, ln(t.forward[0]))
        b.add_arc(s[1], s[2], c[2], EPS, ln(t.forward[1]))
        b.add_arc(s[2], hub, EPS, EPS, ln(t.forward[2]))
        b.add_arc(s[0], s[2], c[2], EPS, ln(t.skip[0]))
        b.add_arc(s[1], hub, EPS, EPS, ln(t.skip[1]))
    return b.build()


# ---------------------------------------------------------------------------
# Training graphs


@dataclass
class GraphSetup:
    """Everything needed to build numerator and denominator graphs."""

    lexicon: Lexicon
    lm: NGramLM
    context: ContextConfig
    topology: HmmTopology
    silence_logprob: float | None = LN_HALF
    lm_scale: float = 1.0
    silence_topology: HmmTopology | None = None

    @property
    def num_classes(self) -> int:
        return STATES_PER_UNIT * self.context.num_units

    @property
    def silence_classes(self) -> list[int]:
        return silence_classes(self.context)

    def _parts(self):
        lex_fst = build_lexicon_fst(
            self.lexicon, self.silence_logprob is not None, self.silence_logprob if self.silence_logprob is not None else LN_HALF
        )
        overrides = None
        if self.silence_topology is not None:
            overrides = {u: self.silence_topology for u in self.context.silence_units}
        h = build_topology_fst(self.topology, self.context.num_units, overrides, self.context.unit_names)
        return h, expand_context(lex_fst, self.context)

    def denominator(self) -> Automaton:
        h, cl = self._parts()
        g = build_lm_acceptor(self.lm, self.lexicon.words, self.lm_scale)
        return _chain(h, cl, g)

    def numerator(self, words: Sequence[int], with_lm: bool = True) -> Automaton:
        h, cl = self._parts()
        return build_numerator_graph(
            words, self.lexicon, self.context, self.topology, lm=self.lm if with_lm else None,
            lm_scale=self.lm_scale, _parts=(h, cl),
        )


def _chain(h: Automaton, cl: Automaton, g: Automaton) -> Automaton:
    lg = compose(cl, g)
    if lg.is_empty:
        raise GraphError("composition of context-expanded lexicon and LM (CL o G) is empty")
    hlg = compose(h, lg)
    if hlg.is_empty:
        raise GraphError("composition of topology with CL o G (H o CLG) is empty")
    out = trim(remove_emission_epsilons(hlg))
    if out.is_empty:
        raise GraphError("graph is empty after emission-epsilon removal")
    diag = validate(out)
    if not diag.ok or not out.emission_ready:
        raise GraphError(f"built graph failed validation: {diag.findings[:3]}")
    return Automaton(out.num_states, out.arcs(), out.start, out.final_weights, None, g.osymbols)


def build_denominator_graph(
    lm: NGramLM,
    lex: Lexicon,
    ctx: ContextConfig,
    topo: HmmTopology,
    lm_scale: float = 1.0,
    silence_logprob: float | None = LN_HALF,
) -> Automaton:
    return GraphSetup(lex, lm, ctx, topo, silence_logprob, lm_scale).denominator()


def build_numerator_graph(
    words: Sequence[int],
    lex: Lexicon,
    ctx: ContextConfig,
    topo: HmmTopology,
    lm: NGramLM | None = None,
    lm_scale: float = 1.0,
    silence_logprob: float | None = LN_HALF,
    _parts: tuple[Automaton, Automaton] | None = None,
) -> Automaton:
    """Graph of all alignments of ``words`` at any length.

    With ``lm`` the reference's LM probability (scaled) is included, so that
    numerator and denominator paths carry identical weights.
    """
    oov = [w for w in words if not 0 <= w < len(lex.words)]
    if oov:
        raise ConfigError(f"words not in the lexicon: {oov}")
    if _parts is None:
        setup = GraphSetup(lex, lm or _dummy_lm(lex), ctx, topo, silence_logprob, lm_scale)
        h, cl = setup._parts()
    else:
        h, cl = _parts
    ref = linear_acceptor(words, symbols=lex.words)
    if lm is not None:
        ref = compose(ref, build_lm_acceptor(lm, lex.words, lm_scale))
        if ref.is_empty:
            raise GraphError("reference has zero probability under the LM")
    return _chain(h, cl, ref)


def _dummy_lm(lex: Lexicon) -> NGramLM:
    n = len(lex.words)
    return unigram_lm(lex.words, [1.0 / n] * n)


def graph_stats_csv(rows: Iterable[tuple[str, Automaton]], fp: IO[str]) -> None:
    fp.write("graph,states,edges\n")
    for name, g in rows:
        fp.write(f"{name},{g.num_states},{g.num_arcs}\n")
