"""Time-synchronous forward-backward over emission-ready automata.

Every arc consumes exactly one frame.  With ``S`` states, ``E`` arcs and
``T`` frames the three checkpointing schedules trade alpha storage for
recomputation:

============  ==========  =============
schedule      arc steps   alpha vectors
============  ==========  =============
none          E*T         T + 1
equidistant   2*E*T       T/B + B
logarithmic   ~E*T*log T  log2(T) + 1
============  ==========  =============

All schedules evaluate the same floating-point operations in the same order
for every alpha vector, so their results agree bit for bit.  Memory is
accounted in alpha vectors held at once (see :class:`FBCounters`); beta is a
single streamed vector in all schedules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterator

import numpy as np

from .fst import NEG_INF, Automaton, shortest_length

MAX_RECURSION_DEPTH = 64
SCORE_MAGIC = int.from_bytes(b"SEQFBSCM", "little")


class DegenerateUtterance(ValueError):
    """No path of exactly ``T`` frames reaches a final state."""

    def __init__(self, num_frames: int, min_length: int | None):
        self.num_frames = num_frames
        self.min_length = min_length
        if min_length is None:
            msg = "graph accepts no path at all"
        else:
            msg = f"no accepted path of {num_frames} frames (shortest accepted length is {min_length})"
        super().__init__(msg)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CheckpointSchedule:
    """``kind`` is ``none``, ``equidistant`` or ``logarithmic``.

    ``block_len`` applies to equidistant only and defaults to ceil(sqrt(T)).
    """

    kind: str = "none"
    block_len: int | None = None

    KINDS = ("none", "equidistant", "logarithmic")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {', '.join(self.KINDS)}")
        if self.block_len is not None and self.block_len < 1:
            raise ValueError("block_len must be >= 1")

    def block_for(self, num_frames: int) -> int:
        return self.block_len if self.block_len is not None else max(1, math.isqrt(num_frames - 1) + 1)


NAIVE = CheckpointSchedule("none")


@dataclass
class FBCounters:
    stored_alpha_vectors_peak: int = 0
    alpha_recompute_frames: int = 0
    arc_visits: int = 0


@dataclass
class FBResult:
    log_z: float
    gamma: np.ndarray
    counters: FBCounters = field(default_factory=FBCounters)
    state_gamma: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Segment reductions over arcs grouped by state


def _seg_logsumexp(vals: np.ndarray, perm, starts, keys, n: int) -> np.ndarray:
    out = np.full(n, NEG_INF)
    if starts.size == 0:
        return out
    v = vals if perm is None else vals[perm]
    m = np.maximum.reduceat(v, starts)
    finite = m > NEG_INF
    shift = np.where(finite, m, 0.0)
    sizes = np.diff(np.r_[starts, v.size])
    with np.errstate(divide="ignore"):
        s = np.add.reduceat(np.exp(v - np.repeat(shift, sizes)), starts)
        out[keys] = np.where(finite, shift + np.log(s), NEG_INF)
    return out


def check_scores(graph: Automaton, scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ShapeError(f"score matrix must be T x C with T >= 1, got shape {scores.shape}")
    if graph.num_arcs and graph.emit.max() >= scores.shape[1]:
        raise ShapeError(f"graph uses emission class {int(graph.emit.max())} but scores have {scores.shape[1]} columns")
    if graph.num_arcs and graph.emit.min() < 0:
        raise ShapeError("graph is not emission-ready (epsilon emission labels)")
    if not np.all(np.isfinite(scores)):
        raise ShapeError("score matrix contains non-finite values")
    return scores


class LogKernel:
    """One alpha step, one beta step and occupancy accumulation in the log
    semiring.  Holds no per-utterance state besides read-only inputs."""

    def __init__(self, graph: Automaton, scores: np.ndarray, am_scale: float = 1.0):
        if not am_scale > 0:
            raise ValueError("am_scale must be > 0")
        self.graph = graph
        self.scores = check_scores(graph, scores)
        self.am_scale = float(am_scale)
        self.T, self.C = self.scores.shape
        self.S = graph.num_states
        self._dst_perm, self._dst_starts, self._dst_keys = graph.by_dst
        self._src_starts, self._src_keys = graph.by_src

    def arc_scores(self, t: int) -> np.ndarray:
        return self.graph.weight + self.am_scale * self.scores[t, self.graph.emit]

    def initial(self):
        alpha = np.full(self.S, NEG_INF)
        alpha[self.graph.start] = 0.0
        return alpha

    def step(self, alpha, t: int):
        g = self.graph
        vals = alpha[g.src] + self.arc_scores(t)
        return _seg_logsumexp(vals, self._dst_perm, self._dst_starts, self._dst_keys, self.S)

    def log_z(self, alpha_T) -> float:
        v = alpha_T + self.graph.final
        m = v.max()
        if m == NEG_INF:
            return NEG_INF
        return float(m + np.log(np.exp(v - m).sum()))

    def terminal(self):
        return self.graph.final.copy()

    def arc_occupancy(self, alpha, beta_next, t: int, log_z: float):
        tail = self.arc_scores(t) + beta_next[self.graph.dst]
        occ = np.exp(alpha[self.graph.src] + tail - log_z)
        return tail, occ

    def back(self, alpha, beta_next, t: int, log_z: float, gamma_row: np.ndarray, state_row=None):
        g = self.graph
        tail, occ = self.arc_occupancy(alpha, beta_next, t, log_z)
        gamma_row += np.bincount(g.emit, weights=occ, minlength=self.C)
        if state_row is not None:
            state_row += np.bincount(g.src, weights=occ, minlength=self.S)
        return _seg_logsumexp(tail, None, self._src_starts, self._src_keys, self.S)


class AccuracyKernel(LogKernel):
    """Log semiring paired with the expectation of an additive per-frame
    accuracy ``accuracy[t, c]``.

    Forward states are ``(alpha, abar)`` where ``abar[s]`` is the expected
    accumulated accuracy of prefixes ending in ``s``; backward states carry
    the suffix analogue.  Besides occupancies, ``back`` fills
    ``self.acc_grad[t, c]``: the sum over arcs of class ``c`` at frame ``t``
    of ``occupancy * (expected accuracy through the arc - expected accuracy)``,
    which is the derivative of the expected accuracy w.r.t. the scaled score.
    """

    def __init__(self, graph: Automaton, scores: np.ndarray, am_scale: float, accuracy: np.ndarray):
        super().__init__(graph, scores, am_scale)
        self.accuracy = np.asarray(accuracy, dtype=np.float64)
        if self.accuracy.shape != self.scores.shape:
            raise ShapeError("accuracy matrix must match the score matrix shape")
        self.expected_accuracy = float("nan")
        self.acc_grad = np.zeros_like(self.scores)

    def initial(self):
        return super().initial(), np.zeros(self.S)

    def step(self, state, t: int):
        alpha, abar = state
        g = self.graph
        vals = alpha[g.src] + self.arc_scores(t)
        new = _seg_logsumexp(vals, self._dst_perm, self._dst_starts, self._dst_keys, self.S)
        live = vals > NEG_INF
        w = np.zeros_like(vals)
        w[live] = np.exp(vals[live] - new[g.dst[live]])
        contrib = w * (abar[g.src] + self.accuracy[t, g.emit])
        return new, np.bincount(g.dst, weights=contrib, minlength=self.S)

    def log_z(self, state) -> float:
        alpha, abar = state
        lz = super().log_z(alpha)
        if lz > NEG_INF:
            self.expected_accuracy = float(np.sum(np.exp(alpha + self.graph.final - lz) * abar))
        return lz

    def terminal(self):
        return self.graph.final.copy(), np.zeros(self.S)

    def back(self, state, bstate, t, log_z, gamma_row, state_row=None):
        alpha, abar = state
        beta_n, bbar_n = bstate
        g = self.graph
        tail, occ = self.arc_occupancy(alpha, beta_n, t, log_z)
        acc = self.accuracy[t, g.emit]
        through = abar[g.src] + acc + bbar_n[g.dst]
        gamma_row += np.bincount(g.emit, weights=occ, minlength=self.C)
        self.acc_grad[t] += np.bincount(g.emit, weights=occ * (through - self.expected_accuracy), minlength=self.C)
        if state_row is not None:
            state_row += np.bincount(g.src, weights=occ, minlength=self.S)
        beta = _seg_logsumexp(tail, None, self._src_starts, self._src_keys, self.S)
        live = tail > NEG_INF
        w = np.zeros_like(tail)
        w[live] = np.exp(tail[live] - beta[g.src[live]])
        bbar = np.bincount(g.src, weights=w * (acc + bbar_n[g.dst]), minlength=self.S)
        return beta, bbar


# ---------------------------------------------------------------------------
# Alpha storage policies


class _Store:
    def __init__(self, counters: FBCounters):
        self.live = 0
        self.counters = counters

    def hold(self, n: int = 1):
        self.live += n
        self.counters.stored_alpha_vectors_peak = max(self.counters.stored_alpha_vectors_peak, self.live)

    def drop(self, n: int = 1):
        self.live -= n


class _Naive:
    def __init__(self, kernel, counters):
        self.k, self.c, self.mem = kernel, counters, _Store(counters)

    def forward(self):
        k = self.k
        self.alphas = [k.initial()]
        self.mem.hold()
        for t in range(k.T):
            self.alphas.append(k.step(self.alphas[-1], t))
            self.mem.hold()
        self.c.arc_visits += k.graph.num_arcs * k.T
        return self.alphas[-1]

    def reverse(self) -> Iterator[tuple[int, object]]:
        self.alphas.pop()
        self.mem.drop()
        for t in range(self.k.T - 1, -1, -1):
            yield t, self.alphas.pop()
            self.mem.drop()


class _Equidistant:
    """Checkpoints every ``block`` frames; each block's alphas are rebuilt
    from its checkpoint during the backward sweep (second forward pass)."""

    def __init__(self, kernel, counters, block: int):
        self.k, self.c, self.mem, self.block = kernel, counters, _Store(counters), block

    def forward(self):
        k, B = self.k, self.block
        cur = k.initial()
        self.ckpt = {0: cur}
        self.mem.hold()
        cur_is_ckpt = True
        for t in range(k.T):
            nxt = k.step(cur, t)
            if not cur_is_ckpt:
                self.mem.drop()
            self.mem.hold()
            cur = nxt
            cur_is_ckpt = (t + 1) % B == 0 and t + 1 < k.T
            if cur_is_ckpt:
                self.ckpt[t + 1] = cur
        self.c.arc_visits += k.graph.num_arcs * k.T
        self._alpha_T = cur
        return cur

    def reverse(self):
        k, B = self.k, self.block
        self._alpha_T = None
        self.mem.drop()
        for a in sorted(self.ckpt, reverse=True):
            e = min(a + B, k.T)
            block = [self.ckpt[a]]
            for t in range(a, e):
                block.append(k.step(block[-1], t))
                self.mem.hold()
                self.c.alpha_recompute_frames += 1
            nxt = self.ckpt.get(e)
            if nxt is not None and not np.array_equal(block[-1], nxt):
                raise RuntimeError(f"recomputed alpha at frame {e} differs from its checkpoint")
            block.pop()
            self.mem.drop()
            for t in range(e - 1, a, -1):
                yield t, block.pop()
                self.mem.drop()
            yield a, block.pop()
            del self.ckpt[a]
            self.mem.drop()


class _Logarithmic:
    """Recursive bisection: hold alpha at a segment start, rebuild the
    midpoint, finish the right half, then the left half."""

    def __init__(self, kernel, counters):
        self.k, self.c, self.mem = kernel, counters, _Store(counters)

    def forward(self):
        k = self.k
        self.alpha0 = cur = k.initial()
        self.mem.hold()
        first = True
        for t in range(k.T):
            nxt = k.step(cur, t)
            if not first:
                self.mem.drop()
            self.mem.hold()
            cur, first = nxt, False
        self.c.arc_visits += k.graph.num_arcs * k.T
        return cur

    def reverse(self):
        self.mem.drop()
        yield from self._segment(0, self.k.T, self.alpha0, 0)
        self.mem.drop()

    def _segment(self, a: int, b: int, alpha_a, depth: int):
        if depth > MAX_RECURSION_DEPTH:
            raise RuntimeError("checkpoint recursion too deep")
        if b - a == 1:
            yield a, alpha_a
            return
        m = a + (b - a) // 2
        cur = alpha_a
        for t in range(a, m):
            nxt = self.k.step(cur, t)
            if cur is not alpha_a:
                self.mem.drop()
            self.mem.hold()
            cur = nxt
            self.c.alpha_recompute_frames += 1
        yield from self._segment(m, b, cur, depth + 1)
        self.mem.drop()
        yield from self._segment(a, m, alpha_a, depth + 1)


def _policy(kernel, schedule: CheckpointSchedule, counters: FBCounters):
    if schedule.kind == "none":
        return _Naive(kernel, counters)
    if schedule.kind == "equidistant":
        block = schedule.block_for(kernel.T)
        if block >= kernel.T:
            return _Naive(kernel, counters)
        return _Equidistant(kernel, counters, block)
    return _Logarithmic(kernel, counters)


def run_forward_backward(kernel, schedule: CheckpointSchedule = NAIVE, state_occupancy: bool = False):
    """Drive ``kernel`` under ``schedule``; returns (log_z, gamma, counters,
    state_gamma)."""
    counters = FBCounters()
    policy = _policy(kernel, schedule, counters)
    alpha_T = policy.forward()
    log_z = kernel.log_z(alpha_T)
    del alpha_T
    if log_z == NEG_INF:
        raise DegenerateUtterance(kernel.T, shortest_length(kernel.graph))
    gamma = np.zeros((kernel.T, kernel.C))
    state_gamma = np.zeros((kernel.T, kernel.S)) if state_occupancy else None
    beta = kernel.terminal()
    for t, alpha in policy.reverse():
        beta = kernel.back(alpha, beta, t, log_z, gamma[t], None if state_gamma is None else state_gamma[t])
    return log_z, gamma, counters, state_gamma


# ---------------------------------------------------------------------------
# Public operations


def forward(graph: Automaton, scores: np.ndarray, am_scale: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Plain forward pass; returns all alpha vectors and log_z."""
    k = LogKernel(graph, scores, am_scale)
    alphas = [k.initial()]
    for t in range(k.T):
        alphas.append(k.step(alphas[-1], t))
    log_z = k.log_z(alphas[-1])
    if log_z == NEG_INF:
        raise DegenerateUtterance(k.T, shortest_length(graph))
    return alphas, log_z


def posteriors(
    graph: Automaton,
    scores: np.ndarray,
    am_scale: float = 1.0,
    schedule: CheckpointSchedule = NAIVE,
    state_occupancy: bool = False,
) -> FBResult:
    log_z, gamma, counters, sg = run_forward_backward(LogKernel(graph, scores, am_scale), schedule, state_occupancy)
    return FBResult(log_z, gamma, counters, sg)


def posteriors_naive(graph, scores, am_scale=1.0, **kw) -> FBResult:
    return posteriors(graph, scores, am_scale, CheckpointSchedule("none"), **kw)


def posteriors_checkpointed(graph, scores, am_scale=1.0, block_len: int | None = None, **kw) -> FBResult:
    return posteriors(graph, scores, am_scale, CheckpointSchedule("equidistant", block_len), **kw)


def posteriors_recursive(graph, scores, am_scale=1.0, **kw) -> FBResult:
    return posteriors(graph, scores, am_scale, CheckpointSchedule("logarithmic"), **kw)


@dataclass
class ViterbiPath:
    arcs: list[int]
    score: float

    def classes(self, graph: Automaton) -> np.ndarray:
        return graph.emit[self.arcs]

    def words(self, graph: Automaton) -> list[int]:
        return [int(w) for w in graph.word[self.arcs] if w >= 0]


def viterbi(graph: Automaton, scores: np.ndarray, am_scale: float = 1.0) -> ViterbiPath:
    """Best path by max-plus dynamic programming; ties go to the lowest arc
    index (and the lowest final state)."""
    k = LogKernel(graph, scores, am_scale)
    perm, starts, keys = graph.by_dst
    n_arcs = graph.num_arcs
    sizes = np.diff(np.r_[starts, n_arcs])
    seg_of = np.repeat(np.arange(starts.size), sizes)
    delta = k.initial()
    back = np.full((k.T, k.S), -1, dtype=np.int64)
    for t in range(k.T):
        vals = (delta[graph.src] + k.arc_scores(t))[perm]
        best = np.full(k.S, NEG_INF)
        if n_arcs:
            m = np.maximum.reduceat(vals, starts)
            cand = np.where((vals == m[seg_of]) & (vals > NEG_INF), perm, n_arcs)
            first = np.minimum.reduceat(cand, starts)
            best[keys] = m
            ok = first < n_arcs
            back[t, keys[ok]] = first[ok]
        delta = best
    tot = delta + graph.final
    s = int(np.argmax(tot))
    if tot[s] == NEG_INF:
        raise DegenerateUtterance(k.T, shortest_length(graph))
    path = []
    for t in range(k.T - 1, -1, -1):
        a = int(back[t, s])
        path.append(a)
        s = int(graph.src[a])
    path.reverse()
    return ViterbiPath(path, float(tot.max()))


# ---------------------------------------------------------------------------
# Score matrix files


def write_scores(scores: np.ndarray, fp: IO[bytes]) -> None:
    scores = np.ascontiguousarray(scores, dtype="<f8")
    fp.write(np.array([SCORE_MAGIC, scores.shape[0], scores.shape[1]], dtype="<u8").tobytes())
    fp.write(scores.tobytes())


def read_scores(fp: IO[bytes]) -> np.ndarray:
    header = fp.read(24)
    if len(header) != 24:
        raise ShapeError("score file too short for its header")
    magic, T, C = np.frombuffer(header, dtype="<u8")
    if int(magic) != SCORE_MAGIC:
        raise ShapeError("not a score matrix file (bad magic)")
    body = fp.read()
    if len(body) != 8 * int(T) * int(C):
        raise ShapeError(f"score file body has {len(body)} bytes, expected {8 * int(T) * int(C)} for {T}x{C}")
    return np.frombuffer(body, dtype="<f8").reshape(int(T), int(C)).copy()


def write_scores_tsv(scores: np.ndarray, fp: IO[str]) -> None:
    for row in np.asarray(scores):
        fp.write("\t".join(format(float(x), ".17g") for x in row) + "\n")


def read_scores_tsv(fp: IO[str]) -> np.ndarray:
    rows = [[float(x) for x in line.split()] for line in fp if line.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ShapeError("TSV score matrix must have rows of equal, non-zero length")
    return np.array(rows)


def counters_csv_header() -> str:
    return "algo,T,S,E,peak_vectors,recompute_frames,arc_visits\n"


def counters_csv_row(algo: str, graph: Automaton, T: int, c: FBCounters) -> str:
    return (
        f"{algo},{T},{graph.num_states},{graph.num_arcs},{c.stored_alpha_vectors_peak},"
        f"{c.alpha_recompute_frames},{c.arc_visits}\n"
    )
