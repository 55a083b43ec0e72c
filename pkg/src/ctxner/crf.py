"""Linear-chain CRF: sequence scores, forward-algorithm partition, Viterbi."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import parse_label
from .tensor import DimensionError, Tensor, add, logsumexp, sub, total, transpose

PROHIBITED = -1e4


@dataclass
class CrfParams:
    """``transitions[i, j]`` scores tag j immediately following tag i."""

    transitions: Tensor
    start_scores: Tensor
    end_scores: Tensor

    @classmethod
    def zeros(cls, n_labels: int) -> "CrfParams":
        return cls(
            Tensor.zeros((n_labels, n_labels), requires_grad=True, name="crf.transitions"),
            Tensor.zeros(n_labels, requires_grad=True, name="crf.start"),
            Tensor.zeros(n_labels, requires_grad=True, name="crf.end"),
        )

    @property
    def n_labels(self) -> int:
        return self.start_scores.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"crf.transitions": self.transitions, "crf.start": self.start_scores, "crf.end": self.end_scores}


def _check(emissions: Tensor, params: CrfParams) -> tuple[int, int]:
    if emissions.data.ndim != 2 or emissions.shape[0] < 1:
        raise DimensionError(f"emissions must be a non-empty T x K matrix, got {emissions.shape}")
    T, K = emissions.shape
    if params.transitions.shape != (K, K) or params.start_scores.shape != (K,) or params.end_scores.shape != (K,):
        raise DimensionError(f"CRF parameters do not match {K} labels")
    return T, K


def score_sequence(emissions: Tensor, tags: Sequence[int], params: CrfParams) -> Tensor:
    T, K = _check(emissions, params)
    if len(tags) != T:
        raise DimensionError(f"{len(tags)} tags for {T} emission rows")
    tags = np.asarray(tags, dtype=np.int64)
    if tags.min() < 0 or tags.max() >= K:
        raise ValueError(f"tag ids must lie in [0, {K})")
    score = add(params.start_scores[int(tags[0])], total(emissions[np.arange(T), tags]))
    if T > 1:
        score = add(score, total(params.transitions[tags[:-1], tags[1:]]))
    return add(score, params.end_scores[int(tags[-1])])


def log_partition(emissions: Tensor, params: CrfParams) -> Tensor:
    """log of the summed exp-scores of all K^T sequences (forward algorithm)."""
    T, _ = _check(emissions, params)
    alpha = add(params.start_scores, emissions[0])
    trans_t = transpose(params.transitions) if T > 1 else None
    for t in range(1, T):
        # row j of trans_t + alpha = scores of every predecessor i for tag j
        alpha = add(logsumexp(add(trans_t, alpha), axis=-1), emissions[t])
    return logsumexp(add(alpha, params.end_scores), axis=-1)


def crf_nll(emissions: Tensor, gold: Sequence[int], params: CrfParams) -> Tensor:
    return sub(log_partition(emissions, params), score_sequence(emissions, gold, params))


def viterbi_decode(
    emissions: Tensor | np.ndarray,
    params: CrfParams,
    constraints: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[list[int], float]:
    """Best tag sequence and its score; ties go to the lower label id.

    ``constraints`` is an optional (transition_mask, start_mask) pair added
    to the learned scores, e.g. from :func:`iob_constraint_mask`.
    """
    e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=np.float64)
    T, K = _check(Tensor(e) if not isinstance(emissions, Tensor) else emissions, params)
    trans = params.transitions.data
    start = params.start_scores.data
    if constraints is not None:
        trans = trans + constraints[0]
        start = start + constraints[1]
    delta = start + e[0]
    back = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + trans
        back[t] = cand.argmax(axis=0)
        delta = cand[back[t], np.arange(K)] + e[t]
    final = delta + params.end_scores.data
    best = int(final.argmax())
    path = [best]
    for t in range(T - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    path.reverse()
    return path, float(final.max())


def iob_constraint_mask(labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """(K x K transition mask, K start mask) prohibiting ill-formed IOB2 moves.

    Entry (i, j) is -1e4 when j is I-x and i is neither B-x nor I-x; the
    start mask prohibits starting with any I-x.
    """
    parsed = [parse_label(lab) for lab in labels]
    K = len(labels)
    trans = np.zeros((K, K))
    start = np.zeros(K)
    for j, (pj, ej) in enumerate(parsed):
        if pj != "I":
            continue
        start[j] = PROHIBITED
        for i, (pi, ei) in enumerate(parsed):
            if ei != ej or pi == "O":
                trans[i, j] = PROHIBITED
    return trans, start
