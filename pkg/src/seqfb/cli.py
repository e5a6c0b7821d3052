"""Command-line entry point: ``seqfb <command> [-c config.json] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import io
import json
import logging
import math
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .builder import (
    ConfigError,
    ContextConfig,
    GraphSetup,
    HmmTopology,
    Lexicon,
    NGramLM,
    graph_stats_csv,
    read_arpa,
    read_lexicon,
    write_arpa,
    write_lexicon,
)
from .criteria import CRITERIA, Scales, SkipUtterance
from .fb import (
    CheckpointSchedule,
    DegenerateUtterance,
    ShapeError,
    counters_csv_header,
    counters_csv_row,
    posteriors,
    read_scores,
    read_scores_tsv,
    write_scores_tsv,
)
from .fst import Automaton, DivergenceError, GraphError, read_text, write_text
from .lattice import NUMERATORS, LatticeError, PruneConfig, generate_lattice, write_lattice
from .trainer import (
    CorpusConfig,
    SyntheticCorpus,
    TrainConfig,
    Utterance,
    generate_corpus,
    grad_check,
    metrics_csv,
    prepare_model,
    train,
)

log = logging.getLogger("seqfb")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
BENCH_LENGTHS = (16, 64, 256, 1024, 4096)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def toy_config_path() -> Path:
    """The bundled three-word toy configuration."""
    return Path(str(resources.files("seqfb") / "data" / "toy3" / "config.json"))


# ---------------------------------------------------------------------------
# Run configuration


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologySection(_Section):
    loop_prob: float = 0.5
    skip_prob: float = 0.0
    silence_loop_prob: float | None = None


class ScalesSection(_Section):
    am: float = 1.0
    lm: float = 1.0


class ScheduleSection(_Section):
    kind: Literal["none", "equidistant", "logarithmic"] = "none"
    block_len: int | None = Field(default=None, ge=1)


class PruneSection(_Section):
    posterior_beam: float = 10.0
    max_arcs_per_frame: int | None = 50


class CorpusSection(_Section):
    num_words: int = 4
    num_phones: int = 3
    phones_per_word: tuple[int, int] = (2, 3)
    word_prob_concentration: float = 5.0
    end_prob: float = 0.4
    min_words: int = 1
    max_words: int = 4
    context: Literal["monophone", "triphone"] = "monophone"
    loop_prob: float = 0.3
    silence_prob: float = 0.5
    silence_loop_prob: float = 0.5
    feature_dim: int = 8
    mean_scale: float = 1.0
    noise: float = 1.0
    num_train: int = 40
    num_heldout: int = 10


class TrainSection(_Section):
    learning_rate: float = 0.05
    epochs: int = 1
    eval_every: float = 0.25
    silence_weight: float = 1.0
    lattice_numerator: Literal[NUMERATORS] = "lattice"  # type: ignore[valid-type]
    eval_am_scale: float = 1.0
    batch_size: int = 1
    init_seed: int = 0
    warm_start_epochs: float = 0.2
    warm_start_lr: float = 0.1
    prior_scale: float = 1.0
    graph_silence_loop_prob: float | None = None


class GradcheckSection(_Section):
    criteria: list[str] = Field(default_factory=lambda: list(CRITERIA))
    max_frames: int = Field(default=10, ge=1)
    step: float = Field(default=1e-5, gt=0)
    tolerance: float = Field(default=1e-4, gt=0)
    corpus: CorpusSection = Field(
        default_factory=lambda: CorpusSection(
            num_words=2, num_phones=2, phones_per_word=(1, 1), max_words=1, feature_dim=3,
            silence_prob=0.1, num_train=20, num_heldout=0,
        )
    )

    @field_validator("criteria")
    @classmethod
    def _known(cls, v: list[str]) -> list[str]:
        bad = [c for c in v if c not in CRITERIA]
        if bad:
            raise ValueError(f"unknown criteria {bad}; valid criteria: {', '.join(CRITERIA)}")
        return v


class RunConfig(_Section):
    lexicon: Path | None = None
    lm: Path | None = None
    topology: TopologySection = Field(default_factory=TopologySection)
    context: Literal["monophone", "triphone"] = "monophone"
    silence_prob: float | None = 0.5
    scales: ScalesSection = Field(default_factory=ScalesSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    criterion: str = "mmi"
    prune: PruneSection = Field(default_factory=PruneSection)
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    train: TrainSection = Field(default_factory=TrainSection)
    gradcheck: GradcheckSection = Field(default_factory=GradcheckSection)
    output_dir: Path = Path("out")
    seed: int = 0
    workers: int = Field(default=1, ge=1)

    @field_validator("criterion")
    @classmethod
    def _known_criterion(cls, v: str) -> str:
        if v not in CRITERIA:
            raise ValueError(f"unknown criterion {v!r}; valid criteria: {', '.join(CRITERIA)}")
        return v

    @field_validator("silence_prob")
    @classmethod
    def _prob(cls, v: float | None) -> float | None:
        if v is not None and not 0.0 < v < 1.0:
            raise ValueError("silence_prob must be in (0, 1) or null")
        return v

    def resolve(self, base: Path) -> "RunConfig":
        """Absolute paths.  Input files are relative to the config's directory,
        the output directory to the working directory."""

        def fix(p: Path | None) -> Path | None:
            return None if p is None else (p if p.is_absolute() else (base / p)).resolve()

        return self.model_copy(update={"lexicon": fix(self.lexicon), "lm": fix(self.lm), "output_dir": self.output_dir.resolve()})

    def corpus_config(self, section: CorpusSection | None = None) -> CorpusConfig:
        return CorpusConfig(**(section or self.corpus).model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            criterion=self.criterion,
            am_scale=self.scales.am,
            lm_scale=self.scales.lm,
            schedule=self.schedule.kind,
            block_len=self.schedule.block_len,
            posterior_beam=self.prune.posterior_beam,
            max_arcs_per_frame=self.prune.max_arcs_per_frame,
            workers=self.workers,
            **self.train.model_dump(),
        )

    def prune_config(self) -> PruneConfig:
        return PruneConfig(self.prune.posterior_beam, self.prune.max_arcs_per_frame)


def apply_override(raw: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as JSON when
    possible and taken as a string otherwise."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise CliError(f"override {item!r} is not of the form key=value", EXIT_CONFIG)
    try:
        parsed: Any = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise CliError(f"override {key!r}: {p!r} is not a section", EXIT_CONFIG)
        node = nxt
    node[parts[-1]] = parsed


def load_config(path: Path | None, overrides: list[str]) -> RunConfig:
    path = path or toy_config_path()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON: {exc}", EXIT_CONFIG) from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path}: top level must be an object", EXIT_CONFIG)
    for item in overrides:
        apply_override(raw, item)
    try:
        cfg = RunConfig.model_validate(raw).resolve(Path(path).resolve().parent)
    except ValidationError as exc:
        raise CliError(f"config {path}: {exc}", EXIT_CONFIG) from None
    for name in ("lexicon", "lm"):
        p = getattr(cfg, name)
        if p is not None and not p.is_file():
            raise CliError(f"config {path}: {name} file not found: {p}", EXIT_CONFIG)
    return cfg


# ---------------------------------------------------------------------------
# Output


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def echo_config(cfg: RunConfig) -> None:
    atomic_write(cfg.output_dir / "config.json", cfg.model_dump_json(indent=2) + "\n")


def _text(writer, *args) -> str:
    buf = io.StringIO()
    writer(*args, buf)
    return buf.getvalue()


def _bytes(writer, obj) -> bytes:
    buf = io.BytesIO()
    writer(obj, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Inputs


def load_lexicon(path: Path | None) -> Lexicon:
    if path is None:
        raise CliError("config has no lexicon path", EXIT_CONFIG)
    try:
        with open(path) as fp:
            return read_lexicon(fp)
    except GraphError as exc:
        raise CliError(f"lexicon {path}: {exc}", EXIT_DATA) from None


def load_lm(path: Path | None, lex: Lexicon) -> NGramLM:
    if path is None:
        raise CliError("config has no lm path", EXIT_CONFIG)
    try:
        with open(path) as fp:
            return read_arpa(fp, lex.words)
    except GraphError as exc:
        raise CliError(f"lm {path}: {exc}", EXIT_DATA) from None


def graph_setup(cfg: RunConfig) -> GraphSetup:
    lex = load_lexicon(cfg.lexicon)
    lm = load_lm(cfg.lm, lex)
    t = cfg.topology
    try:
        topo = HmmTopology.uniform(t.loop_prob, t.skip_prob)
        sil = None if t.silence_loop_prob is None else HmmTopology.uniform(t.silence_loop_prob)
    except ConfigError as exc:
        raise CliError(f"topology: {exc}", EXIT_CONFIG) from None
    return GraphSetup(
        lex, lm, ContextConfig.for_lexicon(lex, cfg.context), topo,
        silence_logprob=None if cfg.silence_prob is None else math.log(cfg.silence_prob),
        lm_scale=cfg.scales.lm, silence_topology=sil,
    )


def load_graph(path: Path) -> Automaton:
    try:
        with open(path) as fp:
            return read_text(fp)
    except GraphError as exc:
        raise CliError(f"graph {path}: {exc}", EXIT_DATA) from None


def load_scores(path: Path) -> np.ndarray:
    with open(path, "rb") as fp:
        head = fp.read(8)
    try:
        if head == b"SEQFBSCM":
            with open(path, "rb") as fp:
                return read_scores(fp)
        with open(path) as fp:
            return read_scores_tsv(fp)
    except (ShapeError, ValueError) as exc:
        raise CliError(f"scores {path}: {exc}", EXIT_DATA) from None


def _schedules(spec: str | None, cfg: RunConfig) -> list[CheckpointSchedule]:
    if spec is None:
        return [CheckpointSchedule(cfg.schedule.kind, cfg.schedule.block_len)]
    try:
        return [CheckpointSchedule(k.strip(), cfg.schedule.block_len) for k in spec.split(",")]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


# ---------------------------------------------------------------------------
# Commands


def cmd_build_graph(cfg: RunConfig, args) -> int:
    setup = graph_setup(cfg)
    den = setup.denominator()
    out = cfg.output_dir
    rows = [("denominator", den)]
    atomic_write(out / "den.fst", _text(write_text, den))
    if args.words:
        try:
            words = setup.lexicon.word_ids(args.words.split())
        except (KeyError, GraphError) as exc:
            raise CliError(f"--words: {exc}", EXIT_DATA) from None
        num = setup.numerator(words)
        rows.append(("numerator", num))
        atomic_write(out / "num.fst", _text(write_text, num))
    atomic_write(out / "words.txt", "".join(f"{n} {i}\n" for i, n in enumerate(setup.lexicon.words)))
    atomic_write(out / "classes.txt", "".join(f"{n} {i}\n" for i, n in enumerate(setup.context.class_names())))
    atomic_write(out / "graph_stats.csv", _text(graph_stats_csv, rows))
    print("states,edges")
    print(f"{den.num_states},{den.num_arcs}")
    return 0


def _bench_memory(cfg: RunConfig, args, graph: Automaton) -> int:
    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else list(BENCH_LENGTHS)
    rng = np.random.default_rng(cfg.seed)
    C = int(graph.emit.max()) + 1
    rows = [counters_csv_header()]
    for T in lengths:
        scores = rng.normal(size=(T, C))
        for kind in CheckpointSchedule.KINDS:
            sched = CheckpointSchedule(kind, cfg.schedule.block_len if kind == "equidistant" else None)
            res = posteriors(graph, scores, cfg.scales.am, sched)
            rows.append(counters_csv_row(kind, graph, T, res.counters))
            log.info("T=%d %s peak=%d", T, kind, res.counters.stored_alpha_vectors_peak)
    text = "".join(rows)
    atomic_write(cfg.output_dir / "bench_memory.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_fb(cfg: RunConfig, args) -> int:
    graph = load_graph(Path(args.graph)) if args.graph else graph_setup(cfg).denominator()
    if args.bench_memory:
        return _bench_memory(cfg, args, graph)
    if not args.scores:
        raise CliError("fb needs --scores (or --bench-memory)", EXIT_CONFIG)
    scores = load_scores(Path(args.scores))
    if args.frames is not None and scores.shape[0] != args.frames:
        raise ShapeError(f"scores have {scores.shape[0]} frames, expected {args.frames}")
    results, counters = ["schedule,T,log_z\n"], [counters_csv_header()]
    gamma = None
    for sched in _schedules(args.schedule, cfg):
        res = posteriors(graph, scores, cfg.scales.am, sched)
        results.append(f"{sched.kind},{scores.shape[0]},{res.log_z!r}\n")
        counters.append(counters_csv_row(sched.kind, graph, scores.shape[0], res.counters))
        gamma = res.gamma if gamma is None else gamma
    atomic_write(cfg.output_dir / "fb.csv", "".join(results))
    atomic_write(cfg.output_dir / "counters.csv", "".join(counters))
    if args.gamma:
        atomic_write(Path(args.gamma), _text(write_scores_tsv, gamma))
    sys.stdout.write("".join(results))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    try:
        tcfg = cfg.train_config()
        corpus = generate_corpus(cfg.corpus_config(), cfg.seed)
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    model = prepare_model(corpus, tcfg)

    def progress(p):
        log.info("eval %.3f loss=%.6g wer=%.2f sil=%.4f skipped=%d", p.eval_epoch, p.loss, p.wer_proxy, p.silence_ratio, p.skipped_utts)

    run = train(corpus, model, tcfg, progress)
    out = cfg.output_dir
    text = metrics_csv(run.metrics)
    atomic_write(out / "metrics.csv", text)
    atomic_write(out / "model.bin", _bytes(lambda m, fp: m.save(fp), run.model))
    if tcfg.criterion == "lattice_mmi":
        for i, lat in enumerate(run.eval_lattices):
            if lat is not None:
                atomic_write(out / "lattices" / f"heldout_{i:04d}.lat", _text(write_lattice, lat))
    sys.stdout.write(text)
    return 0


def _micro_utterance(corpus: SyntheticCorpus, max_frames: int, frames: int | None, seed: int) -> Utterance:
    if frames is not None:
        rng = np.random.default_rng(seed)
        x = corpus.means[rng.integers(0, corpus.num_classes, frames)]
        return Utterance(x + rng.standard_normal(x.shape), [0], np.zeros(frames, dtype=np.int64))
    fits = [u for u in corpus.train if u.num_frames <= max_frames]
    if fits:
        return max(fits, key=lambda u: u.num_frames)
    raise CliError(f"no generated utterance has at most {max_frames} frames", EXIT_DATA)


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    gc = cfg.gradcheck
    try:
        corpus = generate_corpus(cfg.corpus_config(gc.corpus), cfg.seed)
        tcfg = cfg.train_config()
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    utt = _micro_utterance(corpus, gc.max_frames, args.frames, cfg.seed)
    model = prepare_model(corpus, tcfg)
    setup = corpus.graph_setup(tcfg.lm_scale, tcfg.graph_silence_loop_prob)
    lines, worst = ["criterion,T,rel_err,status\n"], 0.0
    for crit in gc.criteria:
        try:
            err = grad_check(model, utt, crit, tcfg, setup, gc.step, corrupt=args.corrupt_gradient)
            status = "pass" if err < gc.tolerance else "FAIL"
        except (DegenerateUtterance, SkipUtterance) as exc:
            log.warning("%s: utterance skipped (%s); gradient is identically zero", crit, exc)
            err, status = 0.0, "degenerate"
        worst = max(worst, err)
        lines.append(f"{crit},{utt.num_frames},{err!r},{status}\n")
    text = "".join(lines)
    atomic_write(cfg.output_dir / "gradcheck.csv", text)
    sys.stdout.write(text)
    if worst >= gc.tolerance:
        raise CliError(f"gradient check failed: max relative error {worst:.3g} >= {gc.tolerance:g}", EXIT_NUMERICAL)
    return 0


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    try:
        corpus = generate_corpus(cfg.corpus_config(), cfg.seed)
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    out = cfg.output_dir
    atomic_write(out / "corpus.npz", _bytes(lambda c, fp: c.save(fp), corpus))
    atomic_write(out / "lexicon.txt", _text(write_lexicon, corpus.lexicon))
    atomic_write(out / "lm.arpa", _text(write_arpa, corpus.lm))
    print(f"train={len(corpus.train)} heldout={len(corpus.heldout)} classes={corpus.num_classes}")
    return 0


def cmd_make_lattice(cfg: RunConfig, args) -> int:
    graph = load_graph(Path(args.graph)) if args.graph else graph_setup(cfg).denominator()
    scores = load_scores(Path(args.scores))
    try:
        scales, prune = Scales(cfg.scales.am, cfg.scales.lm), cfg.prune_config()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    lat = generate_lattice(graph, scores, scales, prune)
    out = Path(args.output) if args.output else cfg.output_dir / "lattice.lat"
    atomic_write(out, _text(write_lattice, lat))
    print(f"nodes={lat.num_nodes} arcs={len(lat.arcs)} frames={lat.num_frames}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _log_level() -> int:
    value = os.environ.get("SEQFB_LOG", "WARNING").strip()
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    return level if isinstance(level, int) else logging.WARNING


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="JSON run config (default: bundled toy config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key by dotted path")
    common.add_argument("-o", "--output-dir", type=Path, help="shorthand for --set output_dir=...")

    p = argparse.ArgumentParser(prog="seqfb", description="Sequence-discriminative training toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("build-graph", parents=[common], help="build the denominator graph")
    sp.add_argument("--words", help="also build the numerator graph of this space-separated word sequence")
    sp.set_defaults(func=cmd_build_graph)

    sp = sub.add_parser("fb", parents=[common], help="run forward-backward on a score matrix")
    sp.add_argument("--graph", help="graph in text format (default: build from config)")
    sp.add_argument("--scores", help="score matrix, binary or TSV")
    sp.add_argument("--frames", type=int, help="expected number of frames")
    sp.add_argument("--schedule", help="comma-separated schedules (default: config)")
    sp.add_argument("--gamma", help="write the occupancies of the first schedule as TSV")
    sp.add_argument("--bench-memory", action="store_true", help="sweep T and write checkpoint counters")
    sp.add_argument("--lengths", help="comma-separated T values for --bench-memory")
    sp.set_defaults(func=cmd_fb)

    sp = sub.add_parser("train", parents=[common], help="train the toy model on a generated corpus")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every criterion")
    sp.add_argument("--frames", type=int, help="use a random utterance of this many frames")
    sp.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus")
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("make-lattice", parents=[common], help="generate a pruned lattice")
    sp.add_argument("--graph", help="graph in text format (default: build from config)")
    sp.add_argument("--scores", required=True, help="score matrix, binary or TSV")
    sp.add_argument("--output", help="lattice file (default: <output_dir>/lattice.lat)")
    sp.set_defaults(func=cmd_make_lattice)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=_log_level(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.output_dir is not None:
            overrides.append(f"output_dir={json.dumps(str(args.output_dir))}")
        cfg = load_config(args.config, overrides)
        echo_config(cfg)
        return args.func(cfg, args)
    except CliError as exc:
        msg, code = str(exc), exc.code
    except DivergenceError as exc:
        msg, code = f"numerical error: {exc}", EXIT_NUMERICAL
    except (ShapeError, DegenerateUtterance, GraphError, LatticeError, OSError) as exc:
        msg, code = f"data error: {exc}", EXIT_DATA
    except (ArithmeticError, AssertionError) as exc:
        msg, code = f"numerical error: {exc}", EXIT_NUMERICAL
    print(f"seqfb: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
