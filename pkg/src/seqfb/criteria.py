"""Sequence-discriminative criteria over full (lattice-free) graphs.

All losses are minimisation objectives.  Gradients are taken with respect
to the *unscaled* frame scores; the acoustic scale enters once through the
chain rule.  The LM scale is not applied here: it is folded into the graph
weights when the graphs are built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .fb import (
    NAIVE,
    AccuracyKernel,
    CheckpointSchedule,
    DegenerateUtterance,
    posteriors,
    run_forward_backward,
    viterbi,
)
from .fst import Automaton

CRITERIA = ("mmi", "smbr", "lattice_mmi", "lattice_smbr")


class SkipUtterance(Exception):
    """The numerator cannot explain the utterance (e.g. too few frames)."""


@dataclass(frozen=True)
class Scales:
    am_scale: float = 1.0
    lm_scale: float = 1.0

    def __post_init__(self):
        if not (self.am_scale > 0 and self.lm_scale > 0):
            raise ValueError("scales must be positive")


@dataclass
class CriterionOutput:
    loss: float
    grad: np.ndarray
    aux: dict[str, float] = field(default_factory=dict)


def _numerator(num_graph, scores, am_scale, schedule):
    try:
        return posteriors(num_graph, scores, am_scale, schedule)
    except DegenerateUtterance as exc:
        raise SkipUtterance(f"numerator: {exc}") from exc


def mmi(
    num_graph: Automaton,
    den_graph: Automaton,
    scores: np.ndarray,
    scales: Scales = Scales(),
    schedule: CheckpointSchedule = NAIVE,
) -> CriterionOutput:
    """Negative log posterior of the reference: ``log Z_den - log Z_num``."""
    am = scales.am_scale
    num = _numerator(num_graph, scores, am, schedule)
    den = posteriors(den_graph, scores, am, schedule)
    grad = am * (den.gamma - num.gamma)
    return CriterionOutput(
        loss=-(num.log_z - den.log_z),
        grad=grad,
        aux={"log_z_num": num.log_z, "log_z_den": den.log_z},
    )


def reference_labels(num_graph: Automaton, scores: np.ndarray, am_scale: float) -> np.ndarray:
    """Per-frame emission classes of the best numerator path."""
    try:
        path = viterbi(num_graph, scores, am_scale)
    except DegenerateUtterance as exc:
        raise SkipUtterance(f"numerator: {exc}") from exc
    return path.classes(num_graph)


def frame_accuracy(
    ref: np.ndarray, num_classes: int, silence_weight: float = 1.0, silence_classes: Iterable[int] = ()
) -> np.ndarray:
    """``acc[t, c] = weight_t * [c == ref_t]`` with silence frames down-weighted."""
    ref = np.asarray(ref)
    sil = np.isin(ref, list(silence_classes))
    acc = np.zeros((ref.size, num_classes))
    acc[np.arange(ref.size), ref] = np.where(sil, silence_weight, 1.0)
    return acc


def smbr(
    num_graph: Automaton,
    den_graph: Automaton,
    scores: np.ndarray,
    scales: Scales = Scales(),
    silence_weight: float = 1.0,
    silence_classes: Iterable[int] = (),
    schedule: CheckpointSchedule = NAIVE,
) -> CriterionOutput:
    """Negated expected (silence-weighted) frame-state accuracy.

    Reference labels are the best numerator path.  The gradient is the exact
    derivative of the expectation: ``-am * gamma(t,c) * (A(t,c) - A)`` with
    ``A(t,c)`` the expected accuracy of paths through class ``c`` at ``t``.
    """
    if not 0.0 < silence_weight <= 1.0:
        raise ValueError("silence_weight must be in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    am = scales.am_scale
    ref = reference_labels(num_graph, scores, am)
    acc = frame_accuracy(ref, scores.shape[1], silence_weight, silence_classes)
    kernel = AccuracyKernel(den_graph, scores, am, acc)
    log_z_den, gamma, _, _ = run_forward_backward(kernel, schedule)
    expected = kernel.expected_accuracy
    return CriterionOutput(
        loss=-expected,
        grad=-am * kernel.acc_grad,
        aux={
            "log_z_den": log_z_den,
            "expected_accuracy": expected,
            "silence_frame_fraction": float(np.isin(ref, list(silence_classes)).mean()),
        },
    )


def silence_ratio(
    graph: Automaton,
    scores: np.ndarray,
    scales: Scales = Scales(),
    silence_classes: Iterable[int] = (),
    method: str = "viterbi",
) -> float:
    """Fraction of frames whose decoded emission class is a silence class."""
    sil = list(silence_classes)
    if method == "viterbi":
        classes = viterbi(graph, scores, scales.am_scale).classes(graph)
    elif method == "posterior":
        classes = posteriors(graph, scores, scales.am_scale).gamma.argmax(axis=1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(np.isin(classes, sil).mean())


def entropy_per_frame(gamma: np.ndarray) -> float:
    p = np.clip(gamma, 1e-300, None)
    return float(-(gamma * np.log(p)).sum(axis=1).mean())


def aux_csv_header() -> str:
    return "utt,loss,log_z_num,log_z_den,silence_ratio,expected_accuracy\n"


def aux_csv_row(utt: str, out: CriterionOutput) -> str:
    def f(key):
        v = out.aux.get(key)
        return "" if v is None else format(float(v), ".17g")

    return f"{utt},{format(out.loss, '.17g')},{f('log_z_num')},{f('log_z_den')},{f('silence_ratio')},{f('expected_accuracy')}\n"
