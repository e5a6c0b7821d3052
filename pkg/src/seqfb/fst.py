"""Log-semiring weighted transducers and the generic algorithms the graph
builder needs: composition, trimming and emission-epsilon removal.

Weights are natural-log probabilities.  ``⊕`` is log-add, ``⊗`` is ordinary
addition, the zero weight is ``-inf`` and the one weight is ``0.0``.

Arcs carry two labels.  ``emit`` is the input tape (the emission class in a
training graph) and ``word`` is the output tape.  For the intermediate
transducers of the H ∘ L ∘ G chain the same two fields simply hold whatever
the input and output alphabets are (classes, context units, phones, words).
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Iterator, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

EPS = -1
NEG_INF = float("-inf")
EPS_SYMBOL = "<eps>"


class GraphError(ValueError):
    """Malformed or incompatible automata."""


class DivergenceError(GraphError):
    """An emission-epsilon cycle whose closure sum does not converge."""


def log_add(a: float, b: float) -> float:
    """Numerically stable ``log(exp(a) + exp(b))``.

    Exactly symmetric in its arguments; returns the other argument unchanged
    when one side is ``-inf``.
    """
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def log_sum(values: Iterable[float]) -> float:
    vals = np.fromiter(values, dtype=np.float64)
    if vals.size == 0:
        return NEG_INF
    m = vals.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.exp(vals - m).sum()))


class Arc(NamedTuple):
    src: int
    dst: int
    emit: int
    word: int
    weight: float


class SymbolTable:
    """Bidirectional name <-> id map.  Ids are dense from zero; epsilon is
    not stored (it is the reserved id ``EPS``)."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        if name == EPS_SYMBOL:
            raise GraphError(f"{EPS_SYMBOL!r} is reserved")
        if name in self._ids:
            return self._ids[name]
        self._ids[name] = len(self._names)
        self._names.append(name)
        return self._ids[name]

    def id(self, name: str) -> int:
        if name == EPS_SYMBOL:
            return EPS
        try:
            return self._ids[name]
        except KeyError:
            raise GraphError(f"unknown symbol {name!r}") from None

    def name(self, i: int) -> str:
        return EPS_SYMBOL if i == EPS else self._names[i]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SymbolTable) and self._names == other._names

    def __repr__(self) -> str:
        return f"SymbolTable({self._names!r})"

    def write(self, fp: IO[str]) -> None:
        fp.write(f"{EPS_SYMBOL}\t{EPS}\n")
        for i, n in enumerate(self._names):
            fp.write(f"{n}\t{i}\n")

    @classmethod
    def read(cls, fp: IO[str]) -> "SymbolTable":
        pairs = []
        for lineno, line in enumerate(fp, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphError(f"symbol table line {lineno}: expected 'name id'")
            name, idx = parts[0], int(parts[1])
            if name == EPS_SYMBOL:
                continue
            pairs.append((idx, name))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise GraphError("symbol ids must be dense from 0")
        return cls(n for _, n in pairs)


class Automaton:
    """Immutable weighted transducer in a compact by-source layout.

    Arcs are stored in parallel numpy arrays sorted (stably) by source state;
    ``offsets[s]:offsets[s+1]`` slices the arcs leaving ``s``.  Arcs with
    weight ``-inf`` are dropped on construction.  Endpoint indices are *not*
    checked here so that :func:`validate` can report them.
    """

    def __init__(
        self,
        num_states: int,
        arcs: Iterable[tuple[int, int, int, int, float]],
        start: int = 0,
        finals: dict[int, float] | None = None,
        isymbols: SymbolTable | None = None,
        osymbols: SymbolTable | None = None,
    ):
        rows = [tuple(a) for a in arcs]
        if rows:
            src, dst, emit, word, weight = (np.asarray(c) for c in zip(*rows))
        else:
            src = dst = emit = word = np.zeros(0, dtype=np.int64)
            weight = np.zeros(0)
        weight = np.asarray(weight, dtype=np.float64)
        keep = weight != NEG_INF
        order = np.argsort(np.asarray(src)[keep], kind="stable")
        self.src = np.asarray(src, dtype=np.int64)[keep][order]
        self.dst = np.asarray(dst, dtype=np.int64)[keep][order]
        self.emit = np.asarray(emit, dtype=np.int64)[keep][order]
        self.word = np.asarray(word, dtype=np.int64)[keep][order]
        self.weight = weight[keep][order]
        self.num_states = int(num_states)
        self.start = int(start)
        self.offsets = np.searchsorted(self.src, np.arange(self.num_states + 1))
        self.final = np.full(self.num_states, NEG_INF)
        for s, w in (finals or {}).items():
            if 0 <= s < self.num_states:
                self.final[s] = w
        self._stray_finals = {s: w for s, w in (finals or {}).items() if not 0 <= s < self.num_states}
        self.isymbols = isymbols
        self.osymbols = osymbols
        for arr in (self.src, self.dst, self.emit, self.word, self.weight, self.offsets, self.final):
            arr.flags.writeable = False

    @classmethod
    def empty(cls, isymbols=None, osymbols=None) -> "Automaton":
        return cls(1, [], 0, {}, isymbols, osymbols)

    @property
    def num_arcs(self) -> int:
        return int(self.src.size)

    @property
    def final_weights(self) -> dict[int, float]:
        return {int(s): float(self.final[s]) for s in np.flatnonzero(self.final > NEG_INF)}

    @property
    def is_empty(self) -> bool:
        return not bool(np.any(self.final > NEG_INF))

    @property
    def emission_ready(self) -> bool:
        return not bool(np.any(self.emit == EPS))

    def arc(self, i: int) -> Arc:
        return Arc(int(self.src[i]), int(self.dst[i]), int(self.emit[i]), int(self.word[i]), float(self.weight[i]))

    def arcs(self) -> Iterator[Arc]:
        for i in range(self.num_arcs):
            yield self.arc(i)

    def arcs_from(self, s: int) -> Iterator[Arc]:
        for i in range(self.offsets[s], self.offsets[s + 1]):
            yield self.arc(i)

    def arc_indices_from(self, s: int) -> range:
        return range(int(self.offsets[s]), int(self.offsets[s + 1]))

    def num_emit_classes(self) -> int:
        return int(self.emit.max()) + 1 if self.num_arcs else 0

    def map_weights(self, arc_fn=None, final_fn=None) -> "Automaton":
        """Return a copy with arc and/or final weights transformed elementwise."""
        w = self.weight if arc_fn is None else arc_fn(self.weight)
        f = self.final if final_fn is None else np.where(self.final > NEG_INF, final_fn(self.final), NEG_INF)
        return Automaton(
            self.num_states,
            zip(self.src, self.dst, self.emit, self.word, w),
            self.start,
            {int(s): float(f[s]) for s in np.flatnonzero(f > NEG_INF)},
            self.isymbols,
            self.osymbols,
        )

    def relabel(self, emit_map=None, word_map=None) -> "Automaton":
        emit = self.emit if emit_map is None else np.array([emit_map(int(e)) for e in self.emit], dtype=np.int64)
        word = self.word if word_map is None else np.array([word_map(int(w)) for w in self.word], dtype=np.int64)
        return Automaton(
            self.num_states, zip(self.src, self.dst, emit, word, self.weight), self.start, self.final_weights
        )

    # Precomputed views for the time-synchronous kernels.

    @cached_property
    def by_dst(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(arc permutation sorted by dst, segment starts, dst of each segment)."""
        perm = np.argsort(self.dst, kind="stable")
        return (perm,) + _segments(self.dst[perm])

    @cached_property
    def by_src(self) -> tuple[np.ndarray, np.ndarray]:
        return _segments(self.src)

    def __repr__(self) -> str:
        return f"Automaton(states={self.num_states}, arcs={self.num_arcs}, start={self.start})"


def _segments(sorted_keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if sorted_keys.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    return starts, sorted_keys[starts]


class AutomatonBuilder:
    """Mutable accumulator; call :meth:`build` for the immutable automaton."""

    def __init__(self, isymbols: SymbolTable | None = None, osymbols: SymbolTable | None = None):
        self.num_states = 0
        self.arcs: list[tuple[int, int, int, int, float]] = []
        self.finals: dict[int, float] = {}
        self.start = 0
        self.isymbols = isymbols
        self.osymbols = osymbols

    def add_state(self) -> int:
        self.num_states += 1
        return self.num_states - 1

    def add_arc(self, src: int, dst: int, emit: int, word: int, weight: float = 0.0) -> None:
        self.arcs.append((src, dst, emit, word, float(weight)))

    def set_final(self, s: int, weight: float = 0.0) -> None:
        self.finals[s] = float(weight)

    def build(self) -> Automaton:
        return Automaton(self.num_states, self.arcs, self.start, self.finals, self.isymbols, self.osymbols)


# ---------------------------------------------------------------------------
# Trim


def _reachable(n: int, adjacency: dict[int, list[int]] | list[list[int]], seeds: Iterable[int]) -> np.ndarray:
    seen = np.zeros(n, dtype=bool)
    queue = deque()
    for s in seeds:
        if not seen[s]:
            seen[s] = True
            queue.append(s)
    while queue:
        s = queue.popleft()
        for t in adjacency[s]:
            if not seen[t]:
                seen[t] = True
                queue.append(t)
    return seen


def accessible(a: Automaton) -> np.ndarray:
    fwd = [[] for _ in range(a.num_states)]
    for s, d in zip(a.src.tolist(), a.dst.tolist()):
        fwd[s].append(d)
    return _reachable(a.num_states, fwd, [a.start])


def coaccessible(a: Automaton) -> np.ndarray:
    back = [[] for _ in range(a.num_states)]
    for s, d in zip(a.src.tolist(), a.dst.tolist()):
        back[d].append(s)
    return _reachable(a.num_states, back, np.flatnonzero(a.final > NEG_INF).tolist())


def trim(a: Automaton) -> Automaton:
    """Drop states that are not on some start-to-final path."""
    keep = accessible(a) & coaccessible(a)
    if not keep[a.start]:
        return Automaton.empty(a.isymbols, a.osymbols)
    new_id = np.cumsum(keep) - 1
    mask = keep[a.src] & keep[a.dst]
    arcs = zip(new_id[a.src[mask]], new_id[a.dst[mask]], a.emit[mask], a.word[mask], a.weight[mask])
    finals = {int(new_id[s]): float(a.final[s]) for s in np.flatnonzero((a.final > NEG_INF) & keep)}
    return Automaton(int(keep.sum()), arcs, int(new_id[a.start]), finals, a.isymbols, a.osymbols)


# ---------------------------------------------------------------------------
# Composition


def compose(a: Automaton, b: Automaton) -> Automaton:
    """Weighted composition ``a ∘ b`` (a's word tape against b's emit tape).

    Uses the three-state epsilon filter so that a path pairing an output
    epsilon of ``a`` with an input epsilon of ``b`` is counted exactly once.
    The result is trimmed; an empty language yields :meth:`Automaton.empty`.
    """
    if a.osymbols is not None and b.isymbols is not None and a.osymbols != b.isymbols:
        raise GraphError("compose: output alphabet of the left operand differs from input alphabet of the right")

    b_match: dict[tuple[int, int], list[int]] = defaultdict(list)
    b_eps: dict[int, list[int]] = defaultdict(list)
    for i in range(b.num_arcs):
        s, lab = int(b.src[i]), int(b.emit[i])
        (b_eps[s] if lab == EPS else b_match[(s, lab)]).append(i)

    ids: dict[tuple[int, int, int], int] = {}
    queue: deque[tuple[int, int, int]] = deque()

    def state(key):
        sid = ids.get(key)
        if sid is None:
            sid = ids[key] = len(ids)
            queue.append(key)
        return sid

    arcs: list[tuple[int, int, int, int, float]] = []
    finals: dict[int, float] = {}
    state((a.start, b.start, 0))
    while queue:
        key = queue.popleft()
        q1, q2, f = key
        sid = ids[key]
        fw = a.final[q1] + b.final[q2]
        if fw > NEG_INF:
            finals[sid] = float(fw)
        for i in a.arc_indices_from(q1):
            olab, a_dst, a_w, ilab = int(a.word[i]), int(a.dst[i]), float(a.weight[i]), int(a.emit[i])
            if olab != EPS:
                for j in b_match.get((q2, olab), ()):
                    d = state((a_dst, int(b.dst[j]), 0))
                    arcs.append((sid, d, ilab, int(b.word[j]), a_w + float(b.weight[j])))
                continue
            if f == 0:
                for j in b_eps.get(q2, ()):
                    d = state((a_dst, int(b.dst[j]), 0))
                    arcs.append((sid, d, ilab, int(b.word[j]), a_w + float(b.weight[j])))
            if f != 1:
                d = state((a_dst, q2, 2))
                arcs.append((sid, d, ilab, EPS, a_w))
        if f != 2:
            for j in b_eps.get(q2, ()):
                d = state((q1, int(b.dst[j]), 1))
                arcs.append((sid, d, EPS, int(b.word[j]), float(b.weight[j])))

    out = Automaton(len(ids), arcs, 0, finals, a.isymbols, b.osymbols)
    return trim(out)


def linear_acceptor(labels: Iterable[int], weights: Iterable[float] | None = None, symbols=None) -> Automaton:
    labels = list(labels)
    weights = [0.0] * len(labels) if weights is None else list(weights)
    arcs = [(i, i + 1, lab, lab, w) for i, (lab, w) in enumerate(zip(labels, weights))]
    return Automaton(len(labels) + 1, arcs, 0, {len(labels): 0.0}, symbols, symbols)


# ---------------------------------------------------------------------------
# Emission-epsilon removal

MAX_PENDING_WORDS = 8


def _epsilon_closure_tables(a: Automaton):
    """Per-state closure over emission-epsilon arcs.

    Returns ``closure(q)`` mapping ``(r, words)`` to the log weight of all
    epsilon paths ``q ~> r`` that emit the word tuple ``words``.
    """
    n = a.num_states
    eps_idx = np.flatnonzero(a.emit == EPS)
    if eps_idx.size == 0:
        return lambda q: {(q, ()): 0.0}

    e_src, e_dst, e_word, e_w = a.src[eps_idx], a.dst[eps_idx], a.word[eps_idx], a.weight[eps_idx]
    graph = csr_matrix((np.ones(eps_idx.size), (e_src, e_dst)), shape=(n, n))
    _, comp = connected_components(graph, directed=True, connection="strong")

    internal = comp[e_src] == comp[e_dst]
    if np.any(internal & (e_word != EPS)):
        raise GraphError("word-labelled arc on an emission-epsilon cycle")

    # Closure matrices for the non-trivial strongly connected components.
    members: dict[int, np.ndarray] = {}
    kstar: dict[int, np.ndarray] = {}
    for c in np.unique(comp[e_src[internal]]):
        states = np.flatnonzero(comp == c)
        local = {int(s): k for k, s in enumerate(states)}
        m = np.zeros((states.size, states.size))
        for s, d, w in zip(e_src[internal], e_dst[internal], e_w[internal]):
            if comp[s] == c:
                m[local[int(s)], local[int(d)]] += math.exp(w)
        if np.max(np.abs(np.linalg.eigvals(m))) >= 1.0:
            raise DivergenceError(f"emission-epsilon cycle through state {int(states[0])} does not converge")
        members[int(c)] = states
        with np.errstate(divide="ignore"):
            kstar[int(c)] = np.log(np.linalg.inv(np.eye(states.size) - m))

    leaving: dict[int, list[tuple[int, int, float]]] = defaultdict(list)
    for s, d, wd, w in zip(e_src[~internal], e_dst[~internal], e_word[~internal], e_w[~internal]):
        leaving[int(s)].append((int(d), int(wd), float(w)))

    memo: dict[int, dict[tuple[int, tuple[int, ...]], float]] = {}

    def closure(q: int) -> dict[tuple[int, tuple[int, ...]], float]:
        if q in memo:
            return memo[q]
        c = int(comp[q])
        if c in members:
            states = members[c]
            row = kstar[c][int(np.searchsorted(states, q))]
            inner = [(int(r), float(row[k])) for k, r in enumerate(states) if row[k] > NEG_INF]
        else:
            inner = [(q, 0.0)]
        out: dict[tuple[int, tuple[int, ...]], float] = {}

        def add(key, w):
            out[key] = log_add(out.get(key, NEG_INF), w)

        for r, wr in inner:
            add((r, ()), wr)
            for d, wd, w in leaving.get(r, ()):
                prefix = () if wd == EPS else (wd,)
                for (r2, words), w2 in closure(d).items():
                    add((r2, prefix + words), wr + w + w2)
        memo[q] = out
        return out

    return closure


def remove_emission_epsilons(a: Automaton) -> Automaton:
    """Equivalent automaton in which every arc carries an emission class.

    Epsilon paths are folded into the following emitting arc.  Word labels
    found on epsilon paths are pushed forward onto emitting arcs; when more
    than one word would land on a single arc the extra words are carried by
    auxiliary states ``(state, pending words)`` and emitted on later arcs.
    """
    if a.emission_ready:
        return a
    closure = _epsilon_closure_tables(a)

    # Expanded transitions of each original state: every epsilon path
    # followed by one emitting arc, plus the epsilon paths into final states.
    exp_arcs: dict[int, list[tuple[int, int, tuple[int, ...], float]]] = {}
    exp_final: dict[int, list[tuple[tuple[int, ...], float]]] = {}

    def expand(q: int):
        if q in exp_arcs:
            return
        merged: dict[tuple[int, int, tuple[int, ...]], float] = {}
        finals: dict[tuple[int, ...], float] = {}
        for (r, words), wc in closure(q).items():
            if a.final[r] > NEG_INF:
                finals[words] = log_add(finals.get(words, NEG_INF), wc + float(a.final[r]))
            for i in a.arc_indices_from(r):
                if a.emit[i] == EPS:
                    continue
                wd = int(a.word[i])
                seq = words if wd == EPS else words + (wd,)
                key = (int(a.dst[i]), int(a.emit[i]), seq)
                merged[key] = log_add(merged.get(key, NEG_INF), wc + float(a.weight[i]))
        exp_arcs[q] = [(d, e, seq, w) for (d, e, seq), w in merged.items()]
        exp_final[q] = list(finals.items())

    ids: dict[tuple[int, tuple[int, ...]], int] = {}
    queue: deque = deque()

    def state(key):
        sid = ids.get(key)
        if sid is None:
            if len(key[1]) > MAX_PENDING_WORDS:
                raise GraphError("word labels accumulate without bound on emission-epsilon paths")
            sid = ids[key] = len(ids)
            queue.append(key)
        return sid

    arcs: list[tuple[int, int, int, int, float]] = []
    finals: dict[int, float] = {}
    state((a.start, ()))
    while queue:
        key = queue.popleft()
        q, pending = key
        sid = ids[key]
        expand(q)
        for words, w in exp_final[q]:
            if pending or words:
                raise GraphError(f"word labels on a trailing epsilon path at state {q} cannot be placed")
            finals[sid] = log_add(finals.get(sid, NEG_INF), w)
        for d, e, seq, w in exp_arcs[q]:
            seq = pending + seq
            label = seq[0] if seq else EPS
            arcs.append((sid, state((d, seq[1:])), e, label, w))

    return trim(Automaton(len(ids), arcs, 0, finals, a.isymbols, a.osymbols))


# ---------------------------------------------------------------------------
# Validation


@dataclass
class Diagnostics:
    ok: bool
    counts: dict[str, int] = field(default_factory=dict)
    findings: list[str] = field(default_factory=list)


def validate(a: Automaton) -> Diagnostics:
    counts = {
        "nan_weights": 0,
        "dangling_endpoints": 0,
        "unreachable_states": 0,
        "no_final_state": 0,
        "bad_start": 0,
    }
    findings: list[str] = []
    n = a.num_states

    if not 0 <= a.start < n:
        counts["bad_start"] = 1
        findings.append(f"start state {a.start} out of range")

    nan_arcs = np.flatnonzero(np.isnan(a.weight))
    nan_final = np.flatnonzero(np.isnan(a.final))
    counts["nan_weights"] = int(nan_arcs.size + nan_final.size)
    for i in nan_arcs:
        findings.append(f"arc {int(i)} has NaN weight")
    for s in nan_final:
        findings.append(f"state {int(s)} has NaN final weight")

    bad = (a.src < 0) | (a.src >= n) | (a.dst < 0) | (a.dst >= n)
    counts["dangling_endpoints"] = int(bad.sum())
    for i in np.flatnonzero(bad):
        findings.append(f"arc {int(i)} ({int(a.src[i])} -> {int(a.dst[i])}) has an endpoint outside 0..{n - 1}")
    for s in a._stray_finals:
        counts["dangling_endpoints"] += 1
        findings.append(f"final weight on nonexistent state {s}")

    if not np.any(a.final > NEG_INF):
        counts["no_final_state"] = 1
        findings.append("automaton has no final state")

    if counts["bad_start"] == 0:
        ok_arcs = ~bad
        fwd = [[] for _ in range(n)]
        for s, d in zip(a.src[ok_arcs].tolist(), a.dst[ok_arcs].tolist()):
            fwd[s].append(d)
        seen = _reachable(n, fwd, [a.start])
        counts["unreachable_states"] = int((~seen).sum())
        for s in np.flatnonzero(~seen)[:20]:
            findings.append(f"state {int(s)} is unreachable from the start state")

    return Diagnostics(ok=not findings, counts=counts, findings=findings)


# ---------------------------------------------------------------------------
# Text format


def _fmt_weight(w: float) -> str:
    return format(float(w), ".17g")


def write_text(a: Automaton, fp: IO[str], isymbols: SymbolTable | None = None, osymbols: SymbolTable | None = None) -> None:
    """``src dst emit word weight`` lines (start state's arcs first), then
    ``state weight`` lines for final states."""

    def lab(i: int, table: SymbolTable | None) -> str:
        if i == EPS:
            return EPS_SYMBOL
        return table.name(i) if table is not None else str(i)

    order = list(a.arc_indices_from(a.start)) + [i for i in range(a.num_arcs) if a.src[i] != a.start]
    for i in order:
        fp.write(
            f"{a.src[i]}\t{a.dst[i]}\t{lab(int(a.emit[i]), isymbols)}\t{lab(int(a.word[i]), osymbols)}\t"
            f"{_fmt_weight(a.weight[i])}\n"
        )
    final_states = sorted(a.final_weights, key=lambda s: (s != a.start, s))
    for s in final_states:
        fp.write(f"{s}\t{_fmt_weight(a.final[s])}\n")
    if a.num_arcs == 0 and not final_states:
        fp.write(f"{a.start}\t-inf\n")


def read_text(fp: IO[str], isymbols: SymbolTable | None = None, osymbols: SymbolTable | None = None) -> Automaton:
    def lab(tok: str, table: SymbolTable | None) -> int:
        if tok == EPS_SYMBOL:
            return EPS
        return table.id(tok) if table is not None else int(tok)

    arcs, finals = [], {}
    start = None
    max_state = -1
    for lineno, line in enumerate(fp, 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if len(parts) == 5:
                s, d = int(parts[0]), int(parts[1])
                arcs.append((s, d, lab(parts[2], isymbols), lab(parts[3], osymbols), float(parts[4])))
                max_state = max(max_state, s, d)
            elif len(parts) in (1, 2):
                s = int(parts[0])
                w = float(parts[1]) if len(parts) == 2 else 0.0
                if w > NEG_INF:
                    finals[s] = w
                max_state = max(max_state, s)
            else:
                raise GraphError(f"expected 5 fields (arc) or 1-2 fields (final), got {len(parts)}")
        except (ValueError, GraphError) as exc:
            raise GraphError(f"line {lineno}: {exc}") from None
        if start is None:
            start = s
    if start is None:
        raise GraphError("empty automaton file")
    return Automaton(max_state + 1, arcs, start, finals, isymbols, osymbols)


def shortest_length(a: Automaton) -> int | None:
    """Minimum number of arcs on a start-to-final path (None if empty)."""
    dist = np.full(a.num_states, -1)
    dist[a.start] = 0
    queue = deque([a.start])
    while queue:
        s = queue.popleft()
        if a.final[s] > NEG_INF:
            return int(dist[s])
        for d in a.dst[a.offsets[s]:a.offsets[s + 1]]:
            if dist[d] < 0:
                dist[d] = dist[s] + 1
                queue.append(int(d))
    return None
