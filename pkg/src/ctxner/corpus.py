"""Conversational IOB corpora: data model, JSON Lines I/O, spans, splits.

A corpus file holds one JSON object per line with the fields of
:class:`DialogueTurn`. Tokens are already split; nothing here tokenizes
raw text.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

FIELDS = ("dialogue_id", "turn_index", "system_tokens", "user_tokens", "tags", "lang")

#: entity inventory of the combined DSTC2 + Frames data
DIALOGUE_ENTITIES = ("or_city", "dst_city", "budget", "date", "area", "food", "price_range")


class CorpusError(ValueError):
    """Validation failure while loading a corpus; ``errors`` holds (line, message) pairs."""

    def __init__(self, errors: list[tuple[int, str]], path: str | None = None):
        self.errors = errors
        self.path = path
        where = f"{path}:" if path else "line "
        lines = [f"{where}{lineno}: {msg}" for lineno, msg in errors[:20]]
        if len(errors) > 20:
            lines.append(f"... and {len(errors) - 20} more")
        super().__init__("\n".join(lines))


@dataclass(frozen=True)
class DialogueTurn:
    dialogue_id: str
    turn_index: int
    system_tokens: tuple[str, ...]
    user_tokens: tuple[str, ...]
    tags: tuple[str, ...]
    lang: str = "en"

    def __post_init__(self):
        object.__setattr__(self, "system_tokens", tuple(self.system_tokens))
        object.__setattr__(self, "user_tokens", tuple(self.user_tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        if not self.user_tokens:
            raise ValueError("user utterance is empty")
        if len(self.tags) != len(self.user_tokens):
            raise ValueError(f"{len(self.tags)} tags for {len(self.user_tokens)} user tokens")

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("system_tokens", "user_tokens", "tags"):
            d[key] = list(d[key])
        return d


def parse_label(label: str) -> tuple[str, str | None]:
    """Split ``B-food`` into ("B", "food"); ``O`` gives ("O", None)."""
    if label == "O":
        return "O", None
    if len(label) > 2 and label[1] == "-" and label[0] in "BI":
        return label[0], label[2:]
    raise ValueError(f"label {label!r} is not O, B-x or I-x")


class LabelSet:
    """O first, then B-x/I-x pairs in lexicographic entity order."""

    def __init__(self, entity_types: Iterable[str]):
        self.entity_types: tuple[str, ...] = tuple(sorted(set(entity_types)))
        self.labels: tuple[str, ...] = ("O",) + tuple(
            lab for ent in self.entity_types for lab in (f"B-{ent}", f"I-{ent}")
        )
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    @classmethod
    def from_tags(cls, tags: Iterable[str]) -> "LabelSet":
        return cls(ent for _, ent in map(parse_label, tags) if ent is not None)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelSet) and self.labels == other.labels

    def __repr__(self) -> str:
        return f"LabelSet({list(self.entity_types)})"

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"label {label!r} not in label set") from None

    def encode(self, tags: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tags]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    def covers(self, other: "LabelSet") -> bool:
        return set(other.labels) <= set(self.labels)


@dataclass
class Corpus:
    turns: list[DialogueTurn]
    label_set: LabelSet = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.label_set is None:
            self.label_set = LabelSet.from_tags(t for turn in self.turns for t in turn.tags)

    def __len__(self) -> int:
        return len(self.turns)

    def __iter__(self):
        return iter(self.turns)

    def subset(self, turns: Sequence[DialogueTurn]) -> "Corpus":
        return Corpus(list(turns), self.label_set)

    def user_sentences(self) -> list[tuple[str, ...]]:
        return [t.user_tokens for t in self.turns]

    def all_sentences(self) -> list[tuple[str, ...]]:
        out = []
        for t in self.turns:
            if t.system_tokens:
                out.append(t.system_tokens)
            out.append(t.user_tokens)
        return out


# ------------------------------------------------------------------------ I/O


def _turn_from_obj(obj) -> DialogueTurn:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [f for f in FIELDS if f not in obj]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    extra = sorted(set(obj) - set(FIELDS))
    if extra:
        raise ValueError(f"unexpected field(s): {', '.join(extra)}")
    if not isinstance(obj["dialogue_id"], str) or not isinstance(obj["lang"], str):
        raise ValueError("dialogue_id and lang must be strings")
    if not isinstance(obj["turn_index"], int) or isinstance(obj["turn_index"], bool) or obj["turn_index"] < 0:
        raise ValueError("turn_index must be a non-negative integer")
    for key in ("system_tokens", "user_tokens", "tags"):
        val = obj[key]
        if not isinstance(val, list) or not all(isinstance(x, str) for x in val):
            raise ValueError(f"{key} must be an array of strings")
    if not obj["user_tokens"]:
        raise ValueError("empty user utterance")
    if len(obj["tags"]) != len(obj["user_tokens"]):
        raise ValueError(f"tag/token length mismatch: {len(obj['tags'])} tags for {len(obj['user_tokens'])} tokens")
    for tag in obj["tags"]:
        parse_label(tag)
    return DialogueTurn(**obj)


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSON Lines corpus; any bad line aborts with every error listed."""
    turns: list[DialogueTurn] = []
    errors: list[tuple[int, str]] = []
    ill_formed = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                turn = _turn_from_obj(json.loads(line))
            except json.JSONDecodeError as exc:
                errors.append((lineno, f"malformed JSON ({exc.msg})"))
                continue
            except ValueError as exc:
                errors.append((lineno, str(exc)))
                continue
            if validate_iob(turn.tags):
                ill_formed += 1
            turns.append(turn)
    if errors:
        raise CorpusError(errors, str(path))
    if not turns:
        raise CorpusError([(0, "corpus is empty")], str(path))
    if ill_formed:
        log.warning("%s: %d turn(s) carry ill-formed IOB2 tag sequences", path, ill_formed)
    return Corpus(turns)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for turn in corpus.turns:
            fh.write(json.dumps(turn.to_json(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------- spans


def validate_iob(tags: Sequence[str]) -> list[tuple[int, str]]:
    """Positions where I-x follows neither B-x nor I-x, with a reason."""
    violations = []
    prev_ent: str | None = None
    for pos, tag in enumerate(tags):
        prefix, ent = parse_label(tag)
        if prefix == "I" and prev_ent != ent:
            before = tags[pos - 1] if pos else "sequence start"
            violations.append((pos, f"{tag} follows {before}"))
        prev_ent = ent
    return violations


def extract_spans(tags: Sequence[str]) -> list[tuple[str, int, int]]:
    """Maximal B-x I-x* runs as (type, start, end_inclusive).

    An I-x that does not continue a span of type x opens a new span, as
    if it were B-x.
    """
    spans = []
    cur_type, cur_start = None, 0
    for pos, tag in enumerate(tags):
        prefix, ent = parse_label(tag)
        if prefix == "I" and ent == cur_type:
            continue
        if cur_type is not None:
            spans.append((cur_type, cur_start, pos - 1))
        cur_type, cur_start = (ent, pos) if prefix != "O" else (None, pos)
    if cur_type is not None:
        spans.append((cur_type, cur_start, len(tags) - 1))
    return spans


def tags_from_spans(spans: Iterable[tuple[str, int, int]], length: int) -> list[str]:
    tags = ["O"] * length
    for ent, start, end in spans:
        if not 0 <= start <= end < length:
            raise ValueError(f"span ({ent}, {start}, {end}) outside a length-{length} sequence")
        if any(t != "O" for t in tags[start:end + 1]):
            raise ValueError(f"span ({ent}, {start}, {end}) overlaps another span")
        tags[start] = f"B-{ent}"
        for pos in range(start + 1, end + 1):
            tags[pos] = f"I-{ent}"
    return tags


# ------------------------------------------------------------------ splitting


def split_corpus(corpus: Corpus, train_count: int, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Seeded shuffle, first ``train_count`` turns to train, rest to test."""
    n = len(corpus)
    if not 0 < train_count < n:
        raise ValueError(f"train_count must lie in (0, {n}), got {train_count}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    train = [corpus.turns[i] for i in order[:train_count]]
    test = [corpus.turns[i] for i in order[train_count:]]
    return corpus.subset(train), corpus.subset(test)


def corpus_statistics(corpus: Corpus) -> dict:
    """Counts reported by ``ctxner inspect``."""
    span_counts: Counter = Counter()
    values: dict[str, set[str]] = {}
    tagged_values: set[tuple[str, str]] = set()
    for turn in corpus.turns:
        for ent, start, end in extract_spans(turn.tags):
            span_counts[ent] += 1
            surface = " ".join(turn.user_tokens[start:end + 1]).lower()
            values.setdefault(ent, set()).add(surface)
        for tok, tag in zip(turn.user_tokens, turn.tags):
            if tag != "O":
                tagged_values.add((tag, tok.lower()))
    return {
        "turns": len(corpus),
        "dialogues": len({t.dialogue_id for t in corpus.turns}),
        "labels": list(corpus.label_set.labels),
        "entity_types": list(corpus.label_set.entity_types),
        "spans_per_type": {e: span_counts.get(e, 0) for e in corpus.label_set.entity_types},
        "unique_values_per_type": {e: len(values.get(e, ())) for e in corpus.label_set.entity_types},
        "unique_span_values": sum(len(v) for v in values.values()),
        "unique_tagged_tokens": len(tagged_values),
        "turns_per_language": dict(sorted(Counter(t.lang for t in corpus.turns).items())),
        "ill_formed_turns": sum(1 for t in corpus.turns if validate_iob(t.tags)),
    }


# ------------------------------------------------------------ synthetic data

ORIGIN_PROMPT = ("which", "city", "do", "you", "fly", "from", "?")
DESTINATION_PROMPT = ("what", "city", "are", "you", "flying", "to", "?")
NEUTRAL_PROMPT = ("how", "can", "i", "help", "you", "?")

CITY_LEXICON = (
    ("paris",), ("london",), ("berlin",), ("madrid",), ("rome",), ("tokyo",),
    ("boston",), ("denver",), ("lima",), ("cairo",), ("dublin",), ("oslo",),
    ("new", "york"), ("san", "diego"), ("buenos", "aires"), ("hong", "kong"),
)

_FROM_PHRASES = (("i", "am", "leaving", "from"), ("from",), ("departing", "from"))
_TO_PHRASES = (("i", "want", "to", "go", "to"), ("to",), ("flying", "to"))


def _city_turn(dialogue_id: str, system: tuple[str, ...], prefix: tuple[str, ...],
               city: tuple[str, ...], entity: str) -> DialogueTurn:
    tags = ["O"] * len(prefix) + [f"B-{entity}"] + [f"I-{entity}"] * (len(city) - 1)
    return DialogueTurn(dialogue_id, 0, system, prefix + city, tags, "en")


def generate_context_corpus(n_turns: int, seed: int = 0, unambiguous_fraction: float = 0.0) -> Corpus:
    """Turns whose tag is decided only by the preceding system prompt.

    The user utterance is a bare city name; after the origin prompt it is
    an ``or_city``, after the destination prompt a ``dst_city``. Every
    city appears equally often under both prompts. With
    ``unambiguous_fraction > 0`` that share of turns is replaced by
    context-free turns ("from paris", "to rome") after a neutral prompt.
    """
    if n_turns < 2:
        raise ValueError("n_turns must be >= 2")
    if not 0.0 <= unambiguous_fraction <= 1.0:
        raise ValueError("unambiguous_fraction must lie in [0, 1]")
    rng = random.Random(seed)
    n_plain = round(n_turns * unambiguous_fraction)
    n_ambig = n_turns - n_plain
    turns = []
    # balanced (city, role) grid, cycled then shuffled
    grid = [(c, r) for c in CITY_LEXICON for r in ("or_city", "dst_city")]
    for i in range(n_ambig):
        if i % len(grid) == 0:
            block = grid[:]
            rng.shuffle(block)
        city, role = block[i % len(grid)]
        prompt = ORIGIN_PROMPT if role == "or_city" else DESTINATION_PROMPT
        turns.append(_city_turn(f"ctx-{seed}-{i}", prompt, (), city, role))
    for i in range(n_plain):
        city = rng.choice(CITY_LEXICON)
        role = ("or_city", "dst_city")[i % 2]
        prefix = rng.choice(_FROM_PHRASES if role == "or_city" else _TO_PHRASES)
        turns.append(_city_turn(f"plain-{seed}-{i}", NEUTRAL_PROMPT, prefix, city, role))
    rng.shuffle(turns)
    return Corpus(turns, LabelSet(["dst_city", "or_city"]))


def generate_pattern_corpus(n_turns: int, seed: int = 0) -> Corpus:
    """One fixed sentence pattern with a varying food value (overfitting sanity data)."""
    foods = ("italian", "chinese", "indian", "thai", "french", "greek", "korean", "mexican")
    rng = random.Random(seed)
    turns = []
    for i in range(n_turns):
        food = rng.choice(foods)
        turns.append(DialogueTurn(
            f"pattern-{seed}-{i}", 0, ("what", "food", "would", "you", "like", "?"),
            ("i", "want", food, "food"), ("O", "O", "B-food", "O"), "en",
        ))
    return Corpus(turns, LabelSet(["food"]))
