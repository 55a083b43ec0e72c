"""Span-level and token-level macro-F1 for IOB tag sequences."""

from __future__ import annotations

from collections import Counter
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .corpus import extract_spans, parse_label


@dataclass
class TypeScore:
    precision: float
    recall: float
    f1: float
    gold_count: int
    pred_count: int
    true_positives: int


@dataclass
class EvalReport:
    per_type: dict[str, TypeScore]
    macro_f1: float
    token_accuracy: float
    token_macro_f1: float = 0.0
    #: types with neither gold nor predicted spans
    empty_types: list[str] = field(default_factory=list)
    exclude_empty: bool = False

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "token_macro_f1": self.token_macro_f1,
            "token_accuracy": self.token_accuracy,
            "empty_types": list(self.empty_types),
            "exclude_empty": self.exclude_empty,
            "per_type": {k: asdict(v) for k, v in self.per_type.items()},
        }


def _exact_f1(tp: int, n_gold: int, n_pred: int) -> Fraction:
    # 2PR/(P+R) reduces to 2TP/(gold+pred) whenever TP > 0
    return Fraction(2 * tp, n_gold + n_pred) if tp else Fraction(0)


def prf(tp: int, n_gold: int, n_pred: int) -> tuple[float, float, float]:
    """Precision, recall, F1; each is 0 when its denominator is 0."""
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, float(_exact_f1(tp, n_gold, n_pred))


def _macro(scores: dict[str, TypeScore], exclude_empty: bool) -> tuple[float, list[str]]:
    # averaged in exact rationals so results like 5/6 round once, not twice
    empty = [t for t, s in scores.items() if s.gold_count == 0 and s.pred_count == 0]
    keep = [_exact_f1(s.true_positives, s.gold_count, s.pred_count)
            for t, s in scores.items() if not (exclude_empty and t in empty)]
    return (float(sum(keep) / len(keep)) if keep else 0.0), empty


def score_spans(
    gold: Sequence[Sequence[str]],
    pred: Sequence[Sequence[str]],
    entity_types: Sequence[str],
    exclude_empty: bool = False,
) -> EvalReport:
    """Exact-match span scores per type: (type, start, end) must all agree."""
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sequences but {len(pred)} predictions")
    tp: Counter = Counter()
    n_gold: Counter = Counter()
    n_pred: Counter = Counter()
    tok_hit = tok_total = 0
    tok_tp: Counter = Counter()
    tok_gold: Counter = Counter()
    tok_pred: Counter = Counter()
    for g, p in zip(gold, pred):
        if len(g) != len(p):
            raise ValueError(f"prediction length {len(p)} != gold length {len(g)}")
        gs, ps = set(extract_spans(g)), set(extract_spans(p))
        for ent, _, _ in gs:
            n_gold[ent] += 1
        for ent, _, _ in ps:
            n_pred[ent] += 1
        for ent, _, _ in gs & ps:
            tp[ent] += 1
        for gt, pt in zip(g, p):
            tok_total += 1
            tok_hit += gt == pt
            if gt != "O":
                tok_gold[gt] += 1
            if pt != "O":
                tok_pred[pt] += 1
            if gt == pt and gt != "O":
                tok_tp[gt] += 1

    per_type = {}
    for ent in entity_types:
        p, r, f = prf(tp[ent], n_gold[ent], n_pred[ent])
        per_type[ent] = TypeScore(p, r, f, n_gold[ent], n_pred[ent], tp[ent])
    macro, empty = _macro(per_type, exclude_empty)

    # token-level macro over non-O IOB labels of the given types
    tok_scores = {}
    for ent in entity_types:
        for lab in (f"B-{ent}", f"I-{ent}"):
            p, r, f = prf(tok_tp[lab], tok_gold[lab], tok_pred[lab])
            tok_scores[lab] = TypeScore(p, r, f, tok_gold[lab], tok_pred[lab], tok_tp[lab])
    tok_macro, _ = _macro(tok_scores, exclude_empty)

    return EvalReport(
        per_type=per_type,
        macro_f1=macro,
        token_accuracy=tok_hit / tok_total if tok_total else 0.0,
        token_macro_f1=tok_macro,
        empty_types=empty,
        exclude_empty=exclude_empty,
    )


def entity_types_of(labels: Sequence[str]) -> list[str]:
    return sorted({e for _, e in map(parse_label, labels) if e is not None})
