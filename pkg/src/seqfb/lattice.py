"""Word lattices cut from the full graph, and lattice-restricted MMI / sMBR.

A lattice node is a (frame, graph state) pair; a single super-final node sits
at frame ``T``.  A lattice arc covers one word segment of a graph path: it
starts at a word-labelled graph arc and runs until the next word-labelled arc
(or the end of the utterance).  A leading segment without a word is allowed
from the start node and carries word ``EPS``.  Silence frames between words
therefore belong to the preceding segment.  Every graph path splits into
segments in exactly one way, which is what makes the unpruned lattice with
within-arc summation reproduce the full-graph partition function.

Each arc keeps its best internal state path (the Viterbi-within-arc
approximation); arcs sharing (src node, dst node, word) are merged.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

from .builder import BOS, NGramLM
from .criteria import CriterionOutput, Scales, SkipUtterance, frame_accuracy, reference_labels
from .fb import NAIVE, CheckpointSchedule, DegenerateUtterance, LogKernel, ShapeError, posteriors, viterbi
from .fst import EPS, NEG_INF, Automaton

FINAL_STATE = -1
WITHIN_ARC = ("viterbi", "sum")


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    """``posterior_beam`` is the allowed log-score gap between the best path
    through an arc and the overall best path.  ``max_arcs_per_frame`` caps
    arcs by start frame (``None`` for no cap)."""

    posterior_beam: float = 10.0
    max_arcs_per_frame: int | None = 50

    def __post_init__(self):
        if not self.posterior_beam > 0:
            raise ValueError("posterior_beam must be > 0")
        if self.max_arcs_per_frame is not None and self.max_arcs_per_frame < 1:
            raise ValueError("max_arcs_per_frame must be >= 1")


UNPRUNED = PruneConfig(math.inf, None)


@dataclass
class LatticeArc:
    src: int
    dst: int
    word: int
    am_score: float
    lm_score: float
    states: np.ndarray


@dataclass(frozen=True)
class _FlatArcs:
    src: np.ndarray
    dst: np.ndarray
    lm: np.ndarray
    lens: np.ndarray
    offsets: np.ndarray
    frames: np.ndarray
    classes: np.ndarray


@dataclass(eq=False)
class Lattice:
    """Nodes sorted by time; node 0 is the start, the last node the
    super-final node.  Arcs are not to be mutated after construction."""

    times: np.ndarray
    graph_states: np.ndarray
    arcs: list[LatticeArc]

    @cached_property
    def flat(self) -> _FlatArcs:
        src = np.array([a.src for a in self.arcs], dtype=np.int64)
        dst = np.array([a.dst for a in self.arcs], dtype=np.int64)
        lens = self.times[dst] - self.times[src] if self.arcs else np.zeros(0, np.int64)
        offsets = np.r_[0, np.cumsum(lens)].astype(np.int64)
        start = np.repeat(self.times[src] - offsets[:-1], lens) if self.arcs else np.zeros(0, np.int64)
        frames = (start + np.arange(offsets[-1])).astype(np.int64)
        classes = np.concatenate([a.states for a in self.arcs]).astype(np.int64) if self.arcs else np.zeros(0, np.int64)
        lm = np.array([a.lm_score for a in self.arcs], dtype=np.float64)
        return _FlatArcs(src, dst, lm, lens.astype(np.int64), offsets, frames, classes)

    @property
    def num_nodes(self) -> int:
        return int(self.times.size)

    @property
    def num_frames(self) -> int:
        return int(self.times[-1])

    @property
    def start(self) -> int:
        return 0

    @property
    def final(self) -> int:
        return self.num_nodes - 1

    def check(self) -> None:
        if self.num_nodes < 2 or self.times[0] != 0 or np.any(np.diff(self.times) < 0):
            raise LatticeError("nodes must be sorted by time, starting at frame 0")
        for a in self.arcs:
            span = self.times[a.dst] - self.times[a.src]
            if span <= 0:
                raise LatticeError(f"arc {a.src}->{a.dst} does not advance in time")
            if len(a.states) != span:
                raise LatticeError(f"arc {a.src}->{a.dst} has {len(a.states)} states for {span} frames")
        if not self.arcs or not _dag_reach(self)[1][self.start]:
            raise LatticeError("lattice has no complete path")

    def arc_scores(self, am_scale: float = 1.0) -> np.ndarray:
        return am_scale * np.array([a.am_score for a in self.arcs]) + self.flat.lm

    def paths(self) -> Iterable[list[int]]:
        """All complete paths as arc-index lists (exponential; tests only)."""
        out: dict[int, list[int]] = {}
        for i, a in enumerate(self.arcs):
            out.setdefault(a.src, []).append(i)

        def walk(n, prefix):
            if n == self.final:
                yield list(prefix)
                return
            for i in out.get(n, []):
                prefix.append(i)
                yield from walk(self.arcs[i].dst, prefix)
                prefix.pop()

        yield from walk(self.start, [])


def _dag_reach(lat: Lattice) -> tuple[np.ndarray, np.ndarray]:
    f = lat.flat
    fwd = np.zeros(lat.num_nodes, bool)
    bwd = np.zeros(lat.num_nodes, bool)
    fwd[lat.start] = True
    bwd[lat.final] = True
    groups = _time_groups(lat.times[f.src])
    for grp in groups:
        np.logical_or.at(fwd, f.dst[grp], fwd[f.src[grp]])
    for grp in reversed(groups):
        np.logical_or.at(bwd, f.src[grp], bwd[f.dst[grp]])
    return fwd, bwd


def _time_groups(src_times: np.ndarray) -> list[np.ndarray]:
    """Arc indices grouped by source time, in increasing time."""
    order = np.argsort(src_times, kind="stable")
    return np.split(order, np.flatnonzero(np.diff(src_times[order])) + 1) if order.size else []


# ---------------------------------------------------------------------------
# Generation


def _max_tables(graph: Automaton, k: LogKernel):
    """Viterbi forward and backward max-scores, both (T+1) x S."""
    T, S = k.T, k.S
    perm, starts, keys = graph.by_dst
    sstarts, skeys = graph.by_src
    fwd = np.full((T + 1, S), NEG_INF)
    bwd = np.full((T + 1, S), NEG_INF)
    fwd[0, graph.start] = 0.0
    bwd[T] = graph.final
    for t in range(T):
        vals = fwd[t, graph.src] + k.arc_scores(t)
        if vals.size:
            fwd[t + 1, keys] = np.maximum.reduceat(vals[perm], starts)
    for t in range(T - 1, -1, -1):
        vals = k.arc_scores(t) + bwd[t + 1, graph.dst]
        if vals.size:
            bwd[t, skeys] = np.maximum.reduceat(vals, sstarts)
    return fwd, bwd


class _InnerArcs:
    """Non-word arcs sorted by destination for batched max-plus steps."""

    def __init__(self, graph: Automaton):
        idx = np.flatnonzero(graph.word < 0)
        self.idx = idx[np.argsort(graph.dst[idx], kind="stable")]
        d = graph.dst[self.idx]
        if d.size:
            self.starts = np.flatnonzero(np.r_[True, d[1:] != d[:-1]])
            self.keys = d[self.starts]
        else:
            self.starts = self.keys = np.zeros(0, np.int64)
        self.src = graph.src[self.idx]
        self.sizes = np.diff(np.r_[self.starts, self.idx.size])

    def step(self, V: np.ndarray, arc_sc: np.ndarray):
        K, S = V.shape
        new = np.full((K, S), NEG_INF)
        bp = np.full((K, S), -1, dtype=np.int64)
        if not self.idx.size:
            return new, bp
        vals = V[:, self.src] + arc_sc[self.idx]
        m = np.maximum.reduceat(vals, self.starts, axis=1)
        rep = np.repeat(m, self.sizes, axis=1)
        n = int(self.idx.max()) + 1
        cand = np.where((vals == rep) & (vals > NEG_INF), self.idx[None, :], n)
        first = np.minimum.reduceat(cand, self.starts, axis=1)
        new[:, self.keys] = m
        bp[:, self.keys] = np.where(first < n, first, -1)
        return new, bp


def _segments_of(graph: Automaton, arcs: Sequence[int]) -> list[tuple[int, int, list[int]]]:
    """Split a graph path into (start frame, word, arcs) segments."""
    segs: list[tuple[int, int, list[int]]] = []
    for t, a in enumerate(arcs):
        w = int(graph.word[a])
        if w >= 0 or not segs:
            segs.append((t, w, [a]))
        else:
            segs[-1][2].append(a)
    return segs


def generate_lattice(
    den_graph: Automaton,
    scores: np.ndarray,
    scales: Scales = Scales(),
    cfg: PruneConfig = PruneConfig(),
) -> Lattice:
    """Word lattice of all segments whose best path is within the beam of
    the overall best path.  The Viterbi path is always contained."""
    g = den_graph
    am = scales.am_scale
    k = LogKernel(g, scores, am)
    T, S = k.T, k.S
    vpath = viterbi(g, scores, am)
    fwd, bwd = _max_tables(g, k)
    best = float(np.max(fwd[T] + g.final))
    thr = best - cfg.posterior_beam
    inner = _InnerArcs(g)
    sc = np.stack([k.arc_scores(t) for t in range(T)]) if g.num_arcs else np.zeros((T, 0))
    wsrc = np.zeros(S, bool)
    wsrc[g.src[g.word >= 0]] = True
    inner_from_start = bool(np.any((g.src == g.start) & (g.word < 0)))

    vit_keys: dict[tuple[int, int, int, int, int], list[int]] = {}
    segs = _segments_of(g, vpath.arcs)
    for i, (t1, w, arcs) in enumerate(segs):
        s2 = FINAL_STATE if i == len(segs) - 1 else int(g.src[segs[i + 1][2][0]])
        vit_keys[(t1, int(g.src[arcs[0]]), w, t1 + len(arcs), s2)] = list(arcs)

    # One row per segment start (t1, s1, w); all rows advance together.
    rows: list[tuple[int, int, int]] = []
    for t1 in range(T):
        for s1 in np.flatnonzero(wsrc & (fwd[t1] + bwd[t1] >= thr) & (fwd[t1] > NEG_INF)):
            for w in np.unique(g.word[g.arc_indices_from(int(s1))]):
                if w >= 0:
                    rows.append((t1, int(s1), int(w)))
    if inner_from_start:
        rows.append((0, g.start, EPS))
    rows.sort()
    R = len(rows)
    row_t1 = np.array([r[0] for r in rows], dtype=np.int64)
    base = np.array([fwd[t1, s1] for t1, s1, _ in rows])
    first_arcs = {}
    for _, s1, w in rows:
        if (s1, w) not in first_arcs:
            idx = np.array(list(g.arc_indices_from(s1)), dtype=np.int64)
            first_arcs[(s1, w)] = idx[(g.word[idx] == w) if w >= 0 else (g.word[idx] < 0)]

    V = np.full((R, S), NEG_INF)
    bps = np.full((T, R, S), -1, dtype=np.int32)
    hits = []
    for t in range(T):
        act = np.flatnonzero(np.any(V > NEG_INF, axis=1))
        newV = np.full((R, S), NEG_INF)
        if act.size:
            newV[act], bps[t, act] = inner.step(V[act], sc[t])
        for r in np.flatnonzero(row_t1 == t):
            for a in first_arcs[rows[r][1:]]:
                d = g.dst[a]
                if sc[t, a] > newV[r, d]:
                    newV[r, d] = sc[t, a]
                    bps[t, r, d] = a
        V = newV
        if t + 1 < T:
            through = base[:, None] + V + bwd[t + 1][None, :]
            ri, s2 = np.nonzero((through >= thr) & wsrc[None, :] & (V > NEG_INF))
            hits.append((ri, np.full(ri.size, t + 1), s2, s2, through[ri, s2]))
            V = np.where(through >= thr, V, NEG_INF)
        else:
            tot = V + g.final[None, :]
            end = np.argmax(tot, axis=1) if R else np.zeros(0, np.int64)
            best_end = tot[np.arange(R), end]
            th = base + best_end
            ri = np.flatnonzero((best_end > NEG_INF) & (th >= thr))
            hits.append((ri, np.full(ri.size, T), np.full(ri.size, FINAL_STATE), end[ri], th[ri]))

    cands: dict[tuple[int, int, int, int, int], list[int]] = {}
    if hits:
        ri, t2, s2, last, through = (np.concatenate(x) for x in zip(*hits))
        hit_t1 = row_t1[ri]
        if cfg.max_arcs_per_frame is not None and ri.size:
            order = np.lexsort((s2, t2, ri, -through, hit_t1))
            grp = hit_t1[order]
            first = np.r_[0, np.flatnonzero(np.diff(grp)) + 1]
            rank = np.arange(order.size) - np.repeat(first, np.diff(np.r_[first, order.size]))
            sel = np.sort(order[rank < cfg.max_arcs_per_frame])
        else:
            sel = np.arange(ri.size)
        if sel.size:
            paths = _backtrace(g, bps, ri[sel], last[sel], hit_t1[sel], t2[sel])
            for j, p in zip(sel, paths):
                cands[rows[ri[j]] + (int(t2[j]), int(s2[j]))] = p
    for key, arcs in vit_keys.items():
        cands.setdefault(key, arcs)
    return _assemble(g, k, sorted(cands), cands, T)


def _backtrace(g: Automaton, bps: np.ndarray, rows: np.ndarray, s: np.ndarray, t1: np.ndarray, t2: np.ndarray):
    """Vectorized backtrace of segments; ``bps[t, row, state]`` is the arc
    consumed at frame ``t`` on the best way into ``state``."""
    n = rows.size
    out = np.full((n, bps.shape[0]), -1, dtype=np.int64)
    s = s.astype(np.int64).copy()
    for t in range(int(t2.max()) - 1, -1, -1):
        act = (t1 <= t) & (t < t2)
        if not act.any():
            continue
        a = bps[t, rows[act], s[act]].astype(np.int64)
        out[act, t] = a
        s[act] = g.src[a]
    return [out[i, t1[i]: t2[i]].tolist() for i in range(n)]


def _assemble(g, k: LogKernel, keys, cands, T: int) -> Lattice:
    node_keys = {(0, g.start)}
    for t1, s1, _, t2, s2 in keys:
        node_keys.add((t1, s1))
        if s2 != FINAL_STATE:
            node_keys.add((t2, s2))
    ordered = sorted(node_keys) + [(T, FINAL_STATE)]
    nid = {nk: i for i, nk in enumerate(ordered)}
    paths = [cands[key] for key in keys]
    lens = np.array([len(p) for p in paths], dtype=np.int64)
    flat = np.concatenate(paths).astype(np.int64) if paths else np.zeros(0, np.int64)
    bounds = np.r_[0, np.cumsum(lens)]
    t1s = np.array([key[0] for key in keys], dtype=np.int64)
    frames = np.repeat(t1s - bounds[:-1], lens) + np.arange(bounds[-1])
    cls = g.emit[flat].astype(np.int64)
    am = np.add.reduceat(k.scores[frames, cls], bounds[:-1]) if keys else np.zeros(0)
    lm = np.add.reduceat(g.weight[flat], bounds[:-1]) if keys else np.zeros(0)
    arcs = []
    for i, (t1, s1, w, t2, s2) in enumerate(keys):
        lm_i = float(lm[i])
        if s2 == FINAL_STATE:
            lm_i += float(g.final[g.dst[paths[i][-1]]])
        arcs.append(LatticeArc(nid[(t1, s1)], nid[(t2, s2)], w, float(am[i]), lm_i, cls[bounds[i]: bounds[i + 1]]))
    lat = Lattice(np.array([t for t, _ in ordered]), np.array([s for _, s in ordered]), arcs)
    return trim_lattice(lat)


def trim_lattice(lat: Lattice) -> Lattice:
    fwd, bwd = _dag_reach(lat)
    live = fwd & bwd
    if not live[lat.start]:
        raise LatticeError("lattice lost every complete path (Viterbi path guarantee violated)")
    remap = np.cumsum(live) - 1
    arcs = [
        LatticeArc(int(remap[a.src]), int(remap[a.dst]), a.word, a.am_score, a.lm_score, a.states)
        for a in lat.arcs
        if live[a.src] and live[a.dst]
    ]
    return Lattice(lat.times[live], lat.graph_states[live], arcs)


# ---------------------------------------------------------------------------
# DAG forward-backward


@dataclass
class _Dag:
    """Arc list over (possibly history-expanded) lattice nodes."""

    times: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    arc: np.ndarray  # index of the underlying lattice arc
    extra: np.ndarray  # score added on top of the lattice arc score
    start: int
    final: int


def _plain_dag(lat: Lattice) -> _Dag:
    n = len(lat.arcs)
    return _Dag(
        lat.times,
        lat.flat.src,
        lat.flat.dst,
        np.arange(n),
        np.zeros(n),
        lat.start,
        lat.final,
    )


def _expanded_dag(
    lat: Lattice,
    rescore: tuple[NGramLM, NGramLM, float] | None = None,
    ref: Sequence[int] | None = None,
) -> _Dag:
    """Expand nodes by previous word (``rescore=(new, base, lm_scale)``
    replaces ``base``'s LM contribution by ``new``) and/or by the number of
    reference words consumed (``ref`` keeps only paths spelling ``ref``)."""
    out: dict[int, list[int]] = {}
    for i, a in enumerate(lat.arcs):
        out.setdefault(a.src, []).append(i)
    ids: dict[tuple[int, int, int], int] = {}
    times = []
    n_ref = None if ref is None else len(ref)

    def node(n, h, pos):
        key = (n, BOS, 0) if n == lat.final else (n, h, pos)
        if key not in ids:
            ids[key] = len(ids)
            times.append(lat.times[n])
        return ids[key]

    start = node(lat.start, BOS, 0)
    src, dst, arc, extra = [], [], [], []
    live = {(lat.start, BOS, 0)}
    for n in np.argsort(lat.times, kind="stable"):
        n = int(n)
        for _, h, pos in sorted(k for k in live if k[0] == n):
            for i in out.get(n, []):
                a = lat.arcs[i]
                pos2 = pos
                if ref is not None and a.word >= 0:
                    if pos >= n_ref or ref[pos] != a.word:
                        continue
                    pos2 = pos + 1
                if ref is not None and a.dst == lat.final and pos2 != n_ref:
                    continue
                h2 = a.word if (rescore is not None and a.word >= 0) else h
                d = 0.0
                if rescore is not None:
                    new, base, lm_scale = rescore
                    if a.word >= 0:
                        d += lm_scale * (new.logprob(a.word, h) - base.logprob(a.word, h))
                    if a.dst == lat.final:
                        d += lm_scale * (new.final_logprob(h2) - base.final_logprob(h2))
                src.append(node(n, h, pos))
                dst.append(node(a.dst, h2, pos2))
                arc.append(i)
                extra.append(d)
                if a.dst != lat.final:
                    live.add((a.dst, h2, pos2))
    final = node(lat.final, BOS, 0)
    return _Dag(np.array(times), np.array(src, np.int64), np.array(dst, np.int64), np.array(arc, np.int64),
                np.array(extra, dtype=np.float64), start, final)


def _scatter_logadd(target: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    if not idx.size:
        return
    order = np.argsort(idx, kind="stable")
    idx, vals = idx[order], vals[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    m = np.maximum.reduceat(vals, starts)
    shift = np.where(m > NEG_INF, m, 0.0)
    with np.errstate(divide="ignore"):
        s = shift + np.log(np.add.reduceat(np.exp(vals - np.repeat(shift, np.diff(np.r_[starts, idx.size]))), starts))
    u = idx[starts]
    target[u] = np.logaddexp(target[u], s)


def _dag_fb(dag: _Dag, arc_score: np.ndarray, arc_value: np.ndarray | None = None):
    """Returns (log_z, arc occupancies over dag arcs, expected value,
    d expected value / d arc score) for additive arc values."""
    x = arc_score[dag.arc] + dag.extra
    N = dag.times.size
    groups = _time_groups(dag.times[dag.src])
    alpha = np.full(N, NEG_INF)
    alpha[dag.start] = 0.0
    for grp in groups:
        _scatter_logadd(alpha, dag.dst[grp], alpha[dag.src[grp]] + x[grp])
    log_z = float(alpha[dag.final])
    if log_z == NEG_INF:
        raise LatticeError("lattice has no complete path")
    beta = np.full(N, NEG_INF)
    beta[dag.final] = 0.0
    for grp in reversed(groups):
        _scatter_logadd(beta, dag.src[grp], x[grp] + beta[dag.dst[grp]])
    occ = np.exp(alpha[dag.src] + x + beta[dag.dst] - log_z)
    if arc_value is None:
        return log_z, occ, None, None
    v = arc_value[dag.arc]
    with np.errstate(invalid="ignore"):
        fa = np.nan_to_num(np.exp(alpha[dag.src] + x - alpha[dag.dst]), nan=0.0)
        bb = np.nan_to_num(np.exp(x + beta[dag.dst] - beta[dag.src]), nan=0.0)
    abar = np.zeros(N)
    for grp in groups:
        np.add.at(abar, dag.dst[grp], fa[grp] * (abar[dag.src[grp]] + v[grp]))
    bbar = np.zeros(N)
    for grp in reversed(groups):
        np.add.at(bbar, dag.src[grp], bb[grp] * (v[grp] + bbar[dag.dst[grp]]))
    expected = float(abar[dag.final])
    through = abar[dag.src] + v + bbar[dag.dst]
    return log_z, occ, expected, occ * (through - expected)


def _collapse(dag: _Dag, per_dag_arc: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(dag.arc, weights=per_dag_arc, minlength=n)


def lattice_log_z(lat: Lattice, am_scale: float = 1.0, scores: np.ndarray | None = None) -> float:
    """Lattice path sum; acoustics from ``scores`` if given, else stored."""
    x = lat.arc_scores(am_scale) if scores is None else _current_arc_scores(lat, _check_length(lat, scores), am_scale)
    return _dag_fb(_plain_dag(lat), x)[0]


# ---------------------------------------------------------------------------
# Within-arc full sums


def _segment_sum(g: Automaton, k: LogKernel, s1: int, w: int, t1: int, t2: int, s2: int):
    """log of the summed weight of all graph paths forming this segment, and
    the class occupancies inside it (normalized to the segment)."""
    if w >= 0:
        first = (g.src == s1) & (g.word == w)
    else:
        first = (g.src == s1) & (g.word < 0)
    inner = g.word < 0
    S, C = k.S, k.C
    alphas = []
    a = np.full(S, NEG_INF)
    a[s1] = 0.0
    alphas.append(a)
    for t in range(t1, t2):
        mask = first if t == t1 else inner
        vals = np.where(mask, alphas[-1][g.src] + k.arc_scores(t), NEG_INF)
        nxt = np.full(S, NEG_INF)
        _scatter_logadd(nxt, g.dst, vals)
        alphas.append(nxt)
    end = g.final.copy() if s2 == FINAL_STATE else np.where(np.arange(S) == s2, 0.0, NEG_INF)
    log_sum = float(np.logaddexp.reduce(alphas[-1] + end))
    occ = np.zeros((t2 - t1, C))
    beta = end
    for t in range(t2 - 1, t1 - 1, -1):
        mask = first if t == t1 else inner
        tail = np.where(mask, k.arc_scores(t) + beta[g.dst], NEG_INF)
        o = np.exp(alphas[t - t1][g.src] + tail - log_sum)
        occ[t - t1] = np.bincount(g.emit, weights=o, minlength=C)
        beta = np.full(S, NEG_INF)
        _scatter_logadd(beta, g.src, tail)
    return log_sum, occ


# ---------------------------------------------------------------------------
# Criteria


def _check_length(lat: Lattice, scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != lat.num_frames:
        raise ShapeError(f"lattice spans {lat.num_frames} frames but the score matrix has shape {scores.shape}")
    return scores


def _dag_for(lat, scales, rescore_lm, base_lm, ref=None):
    if rescore_lm is None and ref is None:
        return _plain_dag(lat)
    if rescore_lm is not None and base_lm is None:
        raise ValueError("rescoring needs the LM the lattice scores were built with (base_lm)")
    rescore = None if rescore_lm is None else (rescore_lm, base_lm, scales.lm_scale)
    return _expanded_dag(lat, rescore, ref)


def _current_arc_scores(lat: Lattice, scores: np.ndarray, am_scale: float) -> np.ndarray:
    """Arc scores with acoustics re-read along each stored state path, so
    the lattice follows the model being trained."""
    f = lat.flat
    if not f.lens.size:
        return np.zeros(0)
    am = np.add.reduceat(scores[f.frames, f.classes], f.offsets[:-1])
    return am_scale * am + f.lm


def _scatter_gamma(lat: Lattice, weights: np.ndarray, C: int) -> np.ndarray:
    f = lat.flat
    T = lat.num_frames
    flat = np.bincount(f.frames * C + f.classes, weights=np.repeat(weights, f.lens), minlength=T * C)
    return flat.reshape(T, C)


NUMERATORS = ("graph", "lattice")


def lattice_mmi(
    lattice: Lattice,
    num_graph: Automaton,
    scores: np.ndarray,
    scales: Scales = Scales(),
    rescore_lm: NGramLM | None = None,
    base_lm: NGramLM | None = None,
    ref_words: Sequence[int] | None = None,
    within_arc: str = "viterbi",
    den_graph: Automaton | None = None,
    schedule: CheckpointSchedule = NAIVE,
    numerator: str = "graph",
) -> CriterionOutput:
    """MMI with the denominator sum restricted to lattice paths.

    ``within_arc="viterbi"`` scores each arc by its stored state path;
    ``"sum"`` re-sums all graph paths of each segment on ``den_graph``.

    ``numerator="graph"`` takes the full sum over ``num_graph``.
    ``numerator="lattice"`` sums the lattice paths spelling the reference
    (``ref_words``, or the word labels of ``num_graph``), scored exactly like
    the denominator; the loss is then bounded below by zero.

    With ``rescore_lm`` the LM contribution of ``base_lm`` is replaced on
    lattice arcs; a graph numerator is corrected using ``ref_words``.
    """
    if within_arc not in WITHIN_ARC:
        raise ValueError(f"within_arc must be one of {WITHIN_ARC}")
    if numerator not in NUMERATORS:
        raise ValueError(f"numerator must be one of {NUMERATORS}")
    scores = _check_length(lattice, scores)
    am = scales.am_scale
    T, C = scores.shape

    n = len(lattice.arcs)
    if within_arc == "viterbi":
        arc_score = _current_arc_scores(lattice, scores, am)
        inner = None
    else:
        if den_graph is None:
            raise ValueError("within_arc='sum' needs den_graph")
        k = LogKernel(den_graph, scores, am)
        arc_score = np.empty(n)
        inner = []
        gs = lattice.graph_states
        for i, a in enumerate(lattice.arcs):
            s1 = int(gs[a.src])
            s2 = FINAL_STATE if a.dst == lattice.final else int(gs[a.dst])
            arc_score[i], occ = _segment_sum(den_graph, k, s1, a.word, int(lattice.times[a.src]), int(lattice.times[a.dst]), s2)
            inner.append(occ)

    def gamma_of(dag):
        log_z, occ, _, _ = _dag_fb(dag, arc_score)
        post = _collapse(dag, occ, n)
        if inner is None:
            return log_z, _scatter_gamma(lattice, post, C)
        gamma = np.zeros((T, C))
        for i, a in enumerate(lattice.arcs):
            gamma[lattice.times[a.src]: lattice.times[a.dst]] += post[i] * inner[i]
        return log_z, gamma

    log_z_den, gamma_den = gamma_of(_dag_for(lattice, scales, rescore_lm, base_lm))
    if numerator == "graph":
        try:
            num = posteriors(num_graph, scores, am, schedule)
        except DegenerateUtterance as exc:
            raise SkipUtterance(f"numerator: {exc}") from exc
        log_z_num, gamma_num = num.log_z, num.gamma
        if rescore_lm is not None and ref_words is not None:
            log_z_num += scales.lm_scale * (rescore_lm.sentence_logprob(ref_words) - base_lm.sentence_logprob(ref_words))
    else:
        if ref_words is None:
            ref_words = reference_words(num_graph)
        try:
            log_z_num, gamma_num = gamma_of(_dag_for(lattice, scales, rescore_lm, base_lm, list(ref_words)))
        except LatticeError as exc:
            raise SkipUtterance("reference word sequence is not in the lattice") from exc
    return CriterionOutput(
        loss=-(log_z_num - log_z_den),
        grad=am * (gamma_den - gamma_num),
        aux={"log_z_num": log_z_num, "log_z_den": log_z_den},
    )


def reference_words(num_graph: Automaton) -> list[int]:
    """Word labels along a start-to-final path of a numerator graph (all its
    paths spell the same words)."""
    g = num_graph
    parent = {g.start: -1}
    queue = deque([g.start])
    while queue:
        s = queue.popleft()
        if g.final[s] > NEG_INF:
            break
        for i in g.arc_indices_from(s):
            d = int(g.dst[i])
            if d not in parent:
                parent[d] = i
                queue.append(d)
    else:
        raise LatticeError("numerator graph has no final state")
    words = []
    while parent[s] >= 0:
        i = parent[s]
        if g.word[i] >= 0:
            words.append(int(g.word[i]))
        s = int(g.src[i])
    return words[::-1]


def lattice_smbr(
    lattice: Lattice,
    num_graph: Automaton,
    scores: np.ndarray,
    scales: Scales = Scales(),
    silence_weight: float = 1.0,
    silence_classes: Iterable[int] = (),
    rescore_lm: NGramLM | None = None,
    base_lm: NGramLM | None = None,
) -> CriterionOutput:
    """Negated expected frame accuracy over lattice paths, each arc scored by
    its stored state path.  Reference labels are the numerator's best path."""
    if not 0.0 < silence_weight <= 1.0:
        raise ValueError("silence_weight must be in (0, 1]")
    scores = _check_length(lattice, scores)
    am = scales.am_scale
    sil = list(silence_classes)
    ref = reference_labels(num_graph, scores, am)
    acc = frame_accuracy(ref, scores.shape[1], silence_weight, sil)
    f = lattice.flat
    arc_acc = np.add.reduceat(acc[f.frames, f.classes], f.offsets[:-1])
    arc_score = _current_arc_scores(lattice, scores, am)
    dag = _dag_for(lattice, scales, rescore_lm, base_lm)
    log_z, _, expected, d_arc = _dag_fb(dag, arc_score, arc_acc)
    d = _collapse(dag, d_arc, len(lattice.arcs))
    return CriterionOutput(
        loss=-expected,
        grad=-am * _scatter_gamma(lattice, d, scores.shape[1]),
        aux={
            "log_z_den": log_z,
            "expected_accuracy": expected,
            "silence_frame_fraction": float(np.isin(ref, sil).mean()),
        },
    )


# ---------------------------------------------------------------------------
# Text format


def _word_str(w: int) -> str:
    return "<eps>" if w < 0 else str(w)


def write_lattice(lat: Lattice, fp: IO[str]) -> None:
    for i, (t, s) in enumerate(zip(lat.times, lat.graph_states)):
        fp.write(f"N {i} {int(t)} {int(s)}\n")
    for a in lat.arcs:
        states = ",".join(str(int(c)) for c in a.states)
        fp.write(f"A {a.src} {a.dst} {_word_str(a.word)} {a.am_score!r} {a.lm_score!r} {states}\n")


def read_lattice(fp: IO[str]) -> Lattice:
    times, gstates, arcs = {}, {}, []
    for lineno, line in enumerate(fp, 1):
        f = line.split()
        if not f:
            continue
        try:
            if f[0] == "N" and len(f) in (3, 4):
                times[int(f[1])] = int(f[2])
                gstates[int(f[1])] = int(f[3]) if len(f) == 4 else FINAL_STATE
            elif f[0] == "A" and len(f) == 7:
                w = EPS if f[3] == "<eps>" else int(f[3])
                states = np.array([int(x) for x in f[6].split(",")], dtype=np.int64)
                arcs.append(LatticeArc(int(f[1]), int(f[2]), w, float(f[4]), float(f[5]), states))
            else:
                raise ValueError("unrecognized record")
        except ValueError as exc:
            raise LatticeError(f"line {lineno}: {exc}: {line.strip()!r}") from None
    n = len(times)
    if sorted(times) != list(range(n)):
        raise LatticeError("node ids must be 0..N-1")
    lat = Lattice(np.array([times[i] for i in range(n)]), np.array([gstates[i] for i in range(n)]), arcs)
    lat.check()
    return lat


def viterbi_segments(graph: Automaton, scores: np.ndarray, am_scale: float = 1.0):
    """(start frame, end frame, word, classes) of the Viterbi path's segments."""
    path = viterbi(graph, scores, am_scale)
    out = []
    for t1, w, arcs in _segments_of(graph, path.arcs):
        out.append((t1, t1 + len(arcs), w, graph.emit[arcs].astype(np.int64)))
    return out


__all__ = [
    "PruneConfig",
    "UNPRUNED",
    "Lattice",
    "LatticeArc",
    "LatticeError",
    "generate_lattice",
    "trim_lattice",
    "lattice_log_z",
    "lattice_mmi",
    "lattice_smbr",
    "write_lattice",
    "read_lattice",
    "viterbi_segments",
]
