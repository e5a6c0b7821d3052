"""Synthetic corpus, toy acoustic model and the sequence-training loop."""

from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .builder import (
    EOS,
    ConfigError,
    ContextConfig,
    GraphSetup,
    HmmTopology,
    Lexicon,
    NGramLM,
    Pronunciation,
    unigram_lm,
)
from .criteria import CRITERIA, CriterionOutput, Scales, SkipUtterance, mmi, smbr
from .fb import CheckpointSchedule, DegenerateUtterance, viterbi
from .fst import Automaton, SymbolTable
from .lattice import NUMERATORS, Lattice, PruneConfig, generate_lattice, lattice_mmi, lattice_smbr

log = logging.getLogger(__name__)

MODEL_MAGIC = b"SEQFBAM\x00"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class CorpusConfig:
    num_words: int = 4
    num_phones: int = 3
    phones_per_word: tuple[int, int] = (2, 3)
    word_prob_concentration: float = 5.0
    end_prob: float = 0.4
    min_words: int = 1
    max_words: int = 4
    context: str = "monophone"
    loop_prob: float = 0.3
    silence_prob: float = 0.5
    silence_loop_prob: float = 0.5
    feature_dim: int = 8
    mean_scale: float = 1.0
    noise: float = 1.0
    num_train: int = 40
    num_heldout: int = 10

    def __post_init__(self):
        lo, hi = self.phones_per_word
        if self.num_words < 1:
            raise ConfigError("corpus needs at least one word")
        if self.num_phones < 1 or not 1 <= lo <= hi:
            raise ConfigError("invalid phone inventory or word length range")
        if self.num_phones**hi < self.num_words:
            raise ConfigError("too few phones to give every word a distinct pronunciation")
        if not 0 <= self.end_prob < 1 or not 0 < self.silence_prob < 1:
            raise ConfigError("end_prob must be in [0, 1) and silence_prob in (0, 1)")
        if not 0 <= self.loop_prob < 1 or not 0 <= self.silence_loop_prob < 1:
            raise ConfigError("loop probabilities must be in [0, 1)")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("need 1 <= min_words <= max_words")
        if self.feature_dim < 0 or self.noise < 0 or self.num_train < 1 or self.num_heldout < 0:
            raise ConfigError("invalid corpus sizes or noise")


@dataclass
class Utterance:
    features: np.ndarray
    words: list[int]
    labels: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.labels.size)


@dataclass
class SyntheticCorpus:
    config: CorpusConfig
    seed: int
    lexicon: Lexicon
    lm: NGramLM
    means: np.ndarray
    train: list[Utterance]
    heldout: list[Utterance]

    @property
    def topology(self) -> HmmTopology:
        return HmmTopology.uniform(self.config.loop_prob)

    @property
    def silence_topology(self) -> HmmTopology:
        return HmmTopology.uniform(self.config.silence_loop_prob)

    def context(self) -> ContextConfig:
        return ContextConfig.for_lexicon(self.lexicon, self.config.context)

    def graph_setup(self, lm_scale: float = 1.0, silence_loop_prob: float | None = None) -> GraphSetup:
        """Training graphs; ``silence_loop_prob`` overrides the generator's
        silence self-loop probability in the graph topology."""
        loop = self.config.silence_loop_prob if silence_loop_prob is None else silence_loop_prob
        return GraphSetup(
            self.lexicon,
            self.lm,
            self.context(),
            self.topology,
            silence_logprob=math.log(self.config.silence_prob),
            lm_scale=lm_scale,
            silence_topology=HmmTopology.uniform(loop),
        )

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def save(self, fp: IO[bytes]) -> None:
        arrays = {"means": self.means}
        for name, utts in (("train", self.train), ("heldout", self.heldout)):
            for i, u in enumerate(utts):
                arrays[f"{name}_{i}_x"] = u.features
                arrays[f"{name}_{i}_w"] = np.asarray(u.words, dtype=np.int64)
                arrays[f"{name}_{i}_y"] = u.labels
        np.savez(fp, **arrays)


def _sample_dwell(rng: np.random.Generator, topo: HmmTopology) -> list[int]:
    """HMM state indices visited by one unit, one entry per frame."""
    out, k = [0], 0
    while True:
        u = rng.random()
        if u < topo.loop[k]:
            out.append(k)
            continue
        if u < topo.loop[k] + topo.skip[k]:
            k += 2
        else:
            k += 1
        if k >= 3:
            return out
        out.append(k)


def _make_lexicon(cfg: CorpusConfig, rng: np.random.Generator) -> Lexicon:
    phones = SymbolTable(["sil"] + [f"p{i}" for i in range(cfg.num_phones)])
    words = SymbolTable([f"w{i}" for i in range(cfg.num_words)])
    seen: set[tuple[int, ...]] = set()
    prons = []
    lo, hi = cfg.phones_per_word
    for w in range(cfg.num_words):
        for _ in range(10_000):
            n = int(rng.integers(lo, hi + 1))
            ph = tuple(int(p) + 1 for p in rng.integers(0, cfg.num_phones, size=n))
            if ph not in seen:
                break
        else:
            raise ConfigError("could not draw distinct pronunciations")
        seen.add(ph)
        prons.append(Pronunciation(w, ph, 0.0))
    return Lexicon(words, phones, prons, 0)


def _sample_words(cfg: CorpusConfig, lm: NGramLM, rng: np.random.Generator) -> list[int]:
    vocab = sorted(w for w in lm.unigram if w >= 0)
    p = np.array([math.exp(lm.unigram[w]) for w in vocab] + [math.exp(lm.unigram.get(EOS, -math.inf))])
    p /= p.sum()
    while True:
        words: list[int] = []
        while len(words) < cfg.max_words:
            i = int(rng.choice(p.size, p=p))
            if i == len(vocab):
                break
            words.append(vocab[i])
        if len(words) >= cfg.min_words:
            return words


def _sample_utterance(cfg, lex, ctx, means, words, rng) -> Utterance:
    topo = HmmTopology.uniform(cfg.loop_prob)
    sil_topo = HmmTopology.uniform(cfg.silence_loop_prob)
    sil_unit = ctx.silence_units[0]
    units: list[tuple[int, HmmTopology]] = []

    def maybe_silence():
        if rng.random() < cfg.silence_prob:
            units.append((sil_unit, sil_topo))

    maybe_silence()
    for w in words:
        ph = lex.prons[w].phones
        for i, c in enumerate(ph):
            left = ph[i - 1] if i > 0 else -1
            right = ph[i + 1] if i + 1 < len(ph) else -1
            units.append((ctx.unit(left, c, right), topo))
        maybe_silence()
    labels = np.array([3 * u + k for u, t in units for k in _sample_dwell(rng, t)], dtype=np.int64)
    noise = rng.standard_normal((labels.size, means.shape[1]))
    return Utterance(means[labels] + cfg.noise * noise, list(words), labels)


def generate_corpus(config: CorpusConfig, seed: int) -> SyntheticCorpus:
    """Sample a lexicon, a unigram LM and utterances; deterministic per seed."""
    rng = np.random.default_rng(seed)
    lex = _make_lexicon(config, rng)
    probs = rng.dirichlet(np.full(config.num_words, config.word_prob_concentration))
    lm = unigram_lm(lex.words, list(probs), config.end_prob or None)
    ctx = ContextConfig.for_lexicon(lex, config.context)
    C = 3 * ctx.num_units
    means = config.mean_scale * rng.standard_normal((C, config.feature_dim))
    utts = [
        _sample_utterance(config, lex, ctx, means, _sample_words(config, lm, rng), rng)
        for _ in range(config.num_train + config.num_heldout)
    ]
    return SyntheticCorpus(config, seed, lex, lm, means, utts[: config.num_train], utts[config.num_train:])


# ---------------------------------------------------------------------------
# Acoustic model


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


@dataclass
class ToyAcousticModel:
    """``score[t, c] = log_softmax(W x_t + b)[c] - prior_scale * log_prior[c]``."""

    weights: np.ndarray
    bias: np.ndarray
    log_prior: np.ndarray
    prior_scale: float = 1.0
    fit_bias: bool = True

    @classmethod
    def init(cls, num_classes: int, dim: int, seed: int = 0, scale: float = 0.01, **kw) -> "ToyAcousticModel":
        rng = np.random.default_rng(seed)
        return cls(
            scale * rng.standard_normal((num_classes, dim)),
            np.zeros(num_classes),
            np.full(num_classes, -math.log(num_classes)),
            **kw,
        )

    @property
    def num_classes(self) -> int:
        return self.bias.size

    def log_posteriors(self, x: np.ndarray) -> np.ndarray:
        return _log_softmax(x @ self.weights.T + self.bias)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.log_posteriors(x) - self.prior_scale * self.log_prior

    def backward(self, x: np.ndarray, grad_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Parameter gradients (dW, db) given d loss / d scores."""
        p = np.exp(self.log_posteriors(x))
        dz = grad_scores - p * grad_scores.sum(axis=1, keepdims=True)
        db = dz.sum(axis=0) if self.fit_bias else np.zeros_like(self.bias)
        return dz.T @ x, db

    def get_params(self) -> np.ndarray:
        parts = [self.weights.ravel()]
        if self.fit_bias:
            parts.append(self.bias)
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> None:
        n = self.weights.size
        self.weights = theta[:n].reshape(self.weights.shape).copy()
        if self.fit_bias:
            self.bias = theta[n:].copy()

    def flat_grad(self, dW: np.ndarray, db: np.ndarray) -> np.ndarray:
        return np.concatenate([dW.ravel(), db]) if self.fit_bias else dW.ravel()

    def copy(self) -> "ToyAcousticModel":
        return ToyAcousticModel(
            self.weights.copy(), self.bias.copy(), self.log_prior.copy(), self.prior_scale, self.fit_bias
        )

    def save(self, fp: IO[bytes]) -> None:
        C, D = self.weights.shape
        fp.write(MODEL_MAGIC)
        fp.write(np.array([MODEL_VERSION, C, D, int(self.fit_bias)], dtype="<u8").tobytes())
        fp.write(np.array([self.prior_scale], dtype="<f8").tobytes())
        for arr in (self.weights, self.bias, self.log_prior):
            fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, fp: IO[bytes]) -> "ToyAcousticModel":
        if fp.read(8) != MODEL_MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        version, C, D, fit_bias = (int(v) for v in np.frombuffer(fp.read(32), dtype="<u8"))
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        prior_scale = float(np.frombuffer(fp.read(8), dtype="<f8")[0])
        body = np.frombuffer(fp.read(), dtype="<f8")
        if body.size != C * D + 2 * C:
            raise ValueError("checkpoint body has the wrong size")
        return cls(
            body[: C * D].reshape(C, D).copy(), body[C * D: C * D + C].copy(), body[C * D + C:].copy(),
            prior_scale, bool(fit_bias),
        )


def estimate_log_prior(utts: Sequence[Utterance], num_classes: int, floor: float = 1.0) -> np.ndarray:
    counts = np.full(num_classes, floor)
    for u in utts:
        counts += np.bincount(u.labels, minlength=num_classes)
    return np.log(counts / counts.sum())


def warm_start(model: ToyAcousticModel, utts: Sequence[Utterance], epochs: float = 0.2, lr: float = 0.1) -> None:
    """Frame-level cross-entropy SGD on ground-truth labels, in place."""
    steps = int(round(epochs * len(utts)))
    for i in range(steps):
        u = utts[i % len(utts)]
        g = np.zeros((u.num_frames, model.num_classes))
        g[np.arange(u.num_frames), u.labels] = -1.0
        dW, db = model.backward(u.features, g / u.num_frames)
        model.weights -= lr * dW
        if model.fit_bias:
            model.bias -= lr * db


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    criterion: str = "mmi"
    am_scale: float = 1.0
    lm_scale: float = 1.0
    schedule: str = "none"
    block_len: int | None = None
    learning_rate: float = 0.05
    epochs: int = 1
    eval_every: float = 0.25
    silence_weight: float = 1.0
    posterior_beam: float = 10.0
    max_arcs_per_frame: int | None = 50
    lattice_numerator: str = "lattice"
    eval_am_scale: float = 1.0
    batch_size: int = 1
    workers: int = 1
    init_seed: int = 0
    warm_start_epochs: float = 0.2
    warm_start_lr: float = 0.1
    prior_scale: float = 1.0
    graph_silence_loop_prob: float | None = None

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}; valid: {', '.join(CRITERIA)}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.eval_every <= self.epochs:
            raise ConfigError("eval_every must be in (0, epochs]")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        Scales(self.am_scale, self.lm_scale)
        Scales(self.eval_am_scale, self.lm_scale)
        CheckpointSchedule(self.schedule, self.block_len)
        if self.lattice_numerator not in NUMERATORS:
            raise ConfigError(f"lattice_numerator must be one of {', '.join(NUMERATORS)}")
        PruneConfig(self.posterior_beam, self.max_arcs_per_frame)

    @property
    def scales(self) -> Scales:
        return Scales(self.am_scale, self.lm_scale)

    @property
    def checkpoint_schedule(self) -> CheckpointSchedule:
        return CheckpointSchedule(self.schedule, self.block_len)

    @property
    def prune(self) -> PruneConfig:
        return PruneConfig(self.posterior_beam, self.max_arcs_per_frame)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalPoint:
    eval_epoch: float
    loss: float
    wer_proxy: float
    silence_ratio: float
    skipped_utts: int


@dataclass
class TrainRun:
    metrics: list[EvalPoint]
    model: ToyAcousticModel
    eval_lattices: list[Lattice | None] = field(default_factory=list)


def levenshtein(ref: Sequence[int], hyp: Sequence[int]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


class _Task:
    """Per-utterance graphs and the criterion closure for one corpus split."""

    def __init__(self, setup: GraphSetup, den: Automaton, utts: Sequence[Utterance], cfg: TrainConfig):
        self.setup, self.den, self.utts, self.cfg = setup, den, list(utts), cfg
        self.nums = [setup.numerator(u.words) for u in utts]
        self.lattices: list[Lattice | None] = [None] * len(utts)
        self.sil = setup.silence_classes

    def make_lattices(self, model: ToyAcousticModel) -> None:
        for i, u in enumerate(self.utts):
            try:
                self.lattices[i] = generate_lattice(self.den, model.scores(u.features), self.cfg.scales, self.cfg.prune)
            except DegenerateUtterance:
                self.lattices[i] = None

    def criterion(self, i: int, scores: np.ndarray) -> CriterionOutput:
        c, sc = self.cfg, self.cfg.scales
        if c.criterion == "mmi":
            return mmi(self.nums[i], self.den, scores, sc, c.checkpoint_schedule)
        if c.criterion == "smbr":
            return smbr(self.nums[i], self.den, scores, sc, c.silence_weight, self.sil, c.checkpoint_schedule)
        lat = self.lattices[i]
        if lat is None:
            raise SkipUtterance("no lattice for this utterance")
        if c.criterion == "lattice_mmi":
            return lattice_mmi(
                lat, self.nums[i], scores, sc, ref_words=self.utts[i].words,
                schedule=c.checkpoint_schedule, numerator=c.lattice_numerator,
            )
        return lattice_smbr(lat, self.nums[i], scores, sc, c.silence_weight, self.sil)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def evaluate(model: ToyAcousticModel, task: _Task, workers: int = 1) -> tuple[float, float, float, int]:
    """Mean criterion loss, WER-proxy (%), silence ratio and skip count."""
    eval_scales = Scales(task.cfg.eval_am_scale, task.cfg.lm_scale)
    sil = np.array(task.sil)

    def one(i):
        u = task.utts[i]
        scores = model.scores(u.features)
        try:
            loss = task.criterion(i, scores).loss
        except (SkipUtterance, DegenerateUtterance):
            loss = None
        path = viterbi(task.den, scores, eval_scales.am_scale)
        errs = levenshtein(u.words, path.words(task.den))
        n_sil = int(np.isin(path.classes(task.den), sil).sum())
        return loss, errs, len(u.words), n_sil, u.num_frames

    rows = _map(one, range(len(task.utts)), workers)
    losses = [r[0] for r in rows if r[0] is not None]
    skipped = sum(r[0] is None for r in rows)
    n_ref = sum(r[2] for r in rows)
    wer = 100.0 * sum(r[1] for r in rows) / max(n_ref, 1)
    ratio = sum(r[3] for r in rows) / max(sum(r[4] for r in rows), 1)
    return (float(np.mean(losses)) if losses else math.nan), wer, ratio, skipped


def prepare_model(corpus: SyntheticCorpus, cfg: TrainConfig) -> ToyAcousticModel:
    """Random init, class priors from the training labels, then warm start."""
    model = ToyAcousticModel.init(corpus.num_classes, corpus.config.feature_dim, cfg.init_seed, prior_scale=cfg.prior_scale)
    model.log_prior = estimate_log_prior(corpus.train, corpus.num_classes)
    warm_start(model, corpus.train, cfg.warm_start_epochs, cfg.warm_start_lr)
    return model


def train(
    corpus: SyntheticCorpus,
    model: ToyAcousticModel,
    config: TrainConfig,
    progress: Callable[[EvalPoint], None] | None = None,
) -> TrainRun:
    """Plain SGD over training utterances in a fixed order.

    Gradients of a batch are computed against the same parameters (possibly
    concurrently) and applied in utterance order.  Lattice criteria use
    lattices generated once from the incoming model.
    """
    model = model.copy()
    setup = corpus.graph_setup(config.lm_scale, config.graph_silence_loop_prob)
    den = setup.denominator()
    train_task = _Task(setup, den, corpus.train, config)
    eval_task = _Task(setup, den, corpus.heldout, config)
    if config.criterion.startswith("lattice"):
        train_task.make_lattices(model)
        eval_task.make_lattices(model)

    n = len(corpus.train)
    total = config.epochs * n
    every = max(1, int(round(config.eval_every * n)))
    skipped = 0
    metrics: list[EvalPoint] = []

    def record(step):
        loss, wer, ratio, _ = evaluate(model, eval_task, config.workers)
        p = EvalPoint(step / n, loss, wer, ratio, skipped)
        metrics.append(p)
        log.info("eval %.3f loss=%.6g wer=%.2f sil=%.4f skipped=%d", p.eval_epoch, loss, wer, ratio, skipped)
        if progress:
            progress(p)

    def grad_of(i):
        u = corpus.train[i]
        try:
            out = train_task.criterion(i, model.scores(u.features))
        except (SkipUtterance, DegenerateUtterance) as exc:
            log.debug("skip utterance %d: %s", i, exc)
            return None
        return model.backward(u.features, out.grad)

    record(0)
    step = 0
    while step < total:
        batch = list(range(step, min(step + config.batch_size, total)))
        grads = _map(lambda s: grad_of(s % n), batch, config.workers)
        for g in grads:
            if g is None:
                skipped += 1
                continue
            model.weights -= config.learning_rate * g[0]
            if model.fit_bias:
                model.bias -= config.learning_rate * g[1]
        prev, step = step, batch[-1] + 1
        if step // every != prev // every or step == total:
            record(step)
    return TrainRun(metrics, model, eval_task.lattices)


def metrics_csv(metrics: Sequence[EvalPoint]) -> str:
    buf = io.StringIO()
    buf.write("eval_epoch,loss,wer_proxy,silence_ratio,skipped_utts\n")
    for p in metrics:
        buf.write(f"{p.eval_epoch!r},{p.loss!r},{p.wer_proxy!r},{p.silence_ratio!r},{p.skipped_utts}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Gradient check


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are zero or empty."""
    if analytic.size == 0:
        return 0.0
    denom = max(np.abs(analytic).max(), np.abs(numeric).max())
    if denom == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / denom)


def grad_check(
    model: ToyAcousticModel,
    utterance: Utterance,
    criterion: str,
    config: TrainConfig,
    setup: GraphSetup,
    step: float = 1e-5,
    corrupt: float = 0.0,
) -> float:
    """Analytic parameter gradient vs central differences of the loss."""
    cfg = TrainConfig(**{**config.to_dict(), "criterion": criterion})
    den = setup.denominator()
    task = _Task(setup, den, [utterance], cfg)
    if criterion.startswith("lattice"):
        task.make_lattices(model)
    x = utterance.features
    m = model.copy()
    out = task.criterion(0, m.scores(x))
    analytic = m.flat_grad(*m.backward(x, out.grad)) * (1.0 + corrupt)
    theta = m.get_params()
    numeric = np.zeros_like(theta)
    for j in range(theta.size):
        for sign in (1, -1):
            t = theta.copy()
            t[j] += sign * step
            m.set_params(t)
            numeric[j] += sign * task.criterion(0, m.scores(x)).loss
        numeric[j] /= 2 * step
    return relative_error(analytic, numeric)
