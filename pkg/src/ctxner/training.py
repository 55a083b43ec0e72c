"""Training loop (Adam, early stopping on dev macro-F1), evaluation and the variant grid."""

from __future__ import annotations

import logging
import random
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus
from .embeddings import EmbeddingTable, Vocabulary, build_vocab, load_pretrained, train_sgns, random_table
from .metrics import EvalReport, score_spans
from .optim import AdamState, adam_step
from .tagger import VARIANT_NAMES, TaggerModel, VariantConfig, decode_emissions, forward, loss
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

#: macro-F1 (x100) as printed in the reference tables, for side-by-side display only
REFERENCE_SCORES = {
    "DSTC-FRAMES-EN": {
        "BI-LSTM": {"SG300": 86.928, "G50W": 88.138, "G300W": 89.388, "G300C": 90.057},
        "BI-LSTM-CE": {"SG300": 89.130, "G50W": 90.163, "G300W": 90.910, "G300C": 91.224},
        "BI-LSTM-CHAR": {"SG300": 87.465, "G50W": 89.089, "G300W": 89.442, "G300C": 90.551},
        "BI-LSTM-CHAR-CE": {"SG300": 89.412, "G50W": 91.087, "G300W": 91.342, "G300C": 91.880},
        "BI-LSTM-CRF": {"SG300": 87.782, "G50W": 89.529, "G300W": 89.871, "G300C": 90.627},
        "BI-LSTM-CRF-CE": {"SG300": 89.696, "G50W": 91.122, "G300W": 91.455, "G300C": 92.133},
        "BI-LSTM-CHAR-CRF": {"SG300": 88.276, "G50W": 89.628, "G300W": 90.971, "G300C": 91.079},
        "BI-LSTM-CHAR-CRF-CE": {"SG300": 90.036, "G50W": 91.705, "G300W": 92.042, "G300C": 92.864},
    },
    "DSTC-FRAMES-ENHI": {
        "BI-LSTM": {"SG300": 84.867},
        "BI-LSTM-CE": {"SG300": 86.242},
        "BI-LSTM-CHAR": {"SG300": 85.119},
        "BI-LSTM-CHAR-CE": {"SG300": 86.433},
        "BI-LSTM-CRF": {"SG300": 85.342},
        "BI-LSTM-CRF-CE": {"SG300": 86.790},
        "BI-LSTM-CHAR-CRF": {"SG300": 85.643},
        "BI-LSTM-CHAR-CRF-CE": {"SG300": 87.934},
    },
}


class LabelSetMismatch(ValueError):
    """The corpus uses labels the model cannot emit."""


@dataclass
class TrainConfig:
    max_epochs: int = 30
    learning_rate: float = 1e-3
    patience: int = 3
    dev_fraction: float = 0.1
    seed: int = 0
    shuffle_each_epoch: bool = True
    exclude_empty_types: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_macro_f1: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_macro_f1: float = -1.0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_dev_macro_f1": self.best_dev_macro_f1,
            "stopped_early": self.stopped_early,
            # wall-clock seconds left out so the file is reproducible
            "epochs": [{k: v for k, v in asdict(e).items() if k != "seconds"} for e in self.epochs],
        }


class EarlyStopping:
    """Track the best score; signal a stop after ``patience`` non-improving epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def carve_dev(corpus: Corpus, dev_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    n = len(corpus)
    n_dev = max(1, int(round(n * dev_fraction)))
    if n - n_dev < 1:
        raise ValueError(f"corpus of {n} turns is too small to carve a dev split")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    dev = [corpus.turns[i] for i in sorted(order[:n_dev])]
    train = [corpus.turns[i] for i in sorted(order[n_dev:])]
    return corpus.subset(train), corpus.subset(dev)


def predict_corpus(model: TaggerModel, corpus: Corpus) -> list[list[str]]:
    out = []
    with no_grad():
        for turn in corpus.turns:
            em = forward(model, turn).data
            out.append(model.label_set.decode(decode_emissions(model, em)))
    return out


def evaluate(model: TaggerModel, corpus: Corpus, exclude_empty: bool = False) -> EvalReport:
    """Span-level exact-match scores, macro-averaged over the model's entity types."""
    if not len(corpus):
        raise ValueError("cannot evaluate on an empty corpus")
    if not model.label_set.covers(corpus.label_set):
        extra = sorted(set(corpus.label_set.labels) - set(model.label_set.labels))
        raise LabelSetMismatch(f"corpus labels unknown to the model: {extra}")
    gold = [list(t.tags) for t in corpus.turns]
    pred = predict_corpus(model, corpus)
    return score_spans(gold, pred, model.label_set.entity_types, exclude_empty)


def train(
    model: TaggerModel,
    corpus: Corpus,
    config: TrainConfig,
    dev_corpus: Corpus | None = None,
    dev_score: Callable[[TaggerModel, Corpus], float] | None = None,
) -> tuple[TaggerModel, TrainHistory]:
    """Per-turn Adam updates; returns the model restored to its best dev epoch.

    Without ``dev_corpus`` a dev split of ``config.dev_fraction`` is
    carved from ``corpus``. ``dev_score`` overrides the dev metric.
    """
    if not len(corpus):
        raise ValueError("training corpus is empty")
    if dev_corpus is None:
        train_set, dev_set = carve_dev(corpus, config.dev_fraction, config.seed)
    else:
        train_set, dev_set = corpus, dev_corpus
    if not len(train_set) or not len(dev_set):
        raise ValueError("empty train or dev split")
    if dev_score is None:
        def dev_score(m, c):
            return evaluate(m, c, config.exclude_empty_types).macro_f1

    params = list(model.parameters().values())
    state = AdamState(learning_rate=config.learning_rate)
    rng = random.Random(config.seed)
    order = list(range(len(train_set)))
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best_state = model.state_arrays()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        if config.shuffle_each_epoch:
            rng.shuffle(order)
        total_loss = 0.0
        for i in order:
            for p in params:
                p.grad = None
            value = loss(model, train_set.turns[i])
            backward(value)
            total_loss += value.item()
            adam_step(params, [p.grad for p in params], state)
        score = dev_score(model, dev_set)
        history.epochs.append(EpochRecord(epoch, total_loss / len(train_set), score, time.perf_counter() - t0))
        log.info("epoch %d: train loss %.5f, dev macro-F1 %.4f", epoch, total_loss / len(train_set), score)
        improved, stop = stopper.update(epoch, score)
        if improved:
            best_state = model.state_arrays()
        if stop:
            history.stopped_early = epoch < config.max_epochs
            break
    for p in params:
        p.grad = None
    model.load_state_arrays(best_state)
    history.best_epoch = stopper.best_epoch
    history.best_dev_macro_f1 = float(stopper.best)
    return model, history


# -------------------------------------------------------------------- grid


def build_word_table(
    regime: str,
    vocab: Vocabulary,
    train_corpus: Corpus,
    vectors_path: str | None = None,
    word_dim: int = 50,
    seed: int = 0,
    sgns_options: dict | None = None,
) -> EmbeddingTable:
    """Frozen word table for an embedding regime.

    SG300 trains SGNS on the training split only; G* regimes read
    ``vectors_path``; ``custom`` draws random rows unless a path is given.
    """
    if regime == "SG300":
        opts = {"d": 300, **(sgns_options or {})}
        return train_sgns(train_corpus.all_sentences(), vocab, seed=seed, **opts)
    if regime in ("G50W", "G300W", "G300C") or vectors_path:
        if not vectors_path:
            raise FileNotFoundError(f"regime {regime} needs a pre-trained vector file")
        return load_pretrained(vectors_path, vocab, source_tag=regime, seed=seed)
    return random_table(vocab, word_dim, seed=seed)


@dataclass
class GridCell:
    variant: str
    regime: str
    macro_f1: float | None
    token_macro_f1: float | None = None
    best_epoch: int | None = None
    error: str | None = None
    reference: float | None = None


def run_grid(
    train_corpus: Corpus,
    test_corpus: Corpus,
    regimes: dict[str, str | None],
    variants: Sequence[str] = VARIANT_NAMES,
    train_config: TrainConfig | None = None,
    variant_overrides: dict | None = None,
    reference_table: str = "DSTC-FRAMES-EN",
    sgns_options: dict | None = None,
) -> list[GridCell]:
    """Train and test every (variant, regime) cell with one shared base seed.

    ``regimes`` maps a regime name to its vector file (``None`` for SG300
    or custom). A cell that fails to build records its error and the
    grid moves on.
    """
    cfg = train_config or TrainConfig()
    overrides = dict(variant_overrides or {})
    vocab = build_vocab(tok for s in train_corpus.all_sentences() for tok in s)
    refs = REFERENCE_SCORES.get(reference_table, {})
    cells = []
    tables: dict[str, EmbeddingTable | Exception] = {}
    for regime, path in regimes.items():
        try:
            tables[regime] = build_word_table(regime, vocab, train_corpus, path,
                                              overrides.get("word_dim", 50), cfg.seed, sgns_options)
        except (OSError, ValueError) as exc:
            tables[regime] = exc
    for name in variants:
        for regime in regimes:
            ref = refs.get(name, {}).get(regime)
            table = tables[regime]
            if isinstance(table, Exception):
                cells.append(GridCell(name, regime, None, error=f"{type(table).__name__}: {table}", reference=ref))
                continue
            variant = VariantConfig.from_name(name, embedding_regime=regime, **overrides)
            fresh = EmbeddingTable(table.vectors.detach(), frozen=True, source_tag=regime)
            model = TaggerModel.build(variant, train_corpus.label_set, vocab, fresh, seed=cfg.seed)
            model, hist = train(model, train_corpus, cfg)
            report = evaluate(model, test_corpus, cfg.exclude_empty_types)
            cells.append(GridCell(name, regime, report.macro_f1, report.token_macro_f1, hist.best_epoch, reference=ref))
            log.info("%s / %s: macro-F1 %.4f", name, regime, report.macro_f1)
    return cells


def grid_to_tsv(cells: Sequence[GridCell], with_reference: bool = True) -> str:
    """Rows = variants, columns = regimes, values = macro-F1 x 100."""
    variants = list(dict.fromkeys(c.variant for c in cells))
    regimes = list(dict.fromkeys(c.regime for c in cells))
    lookup = {(c.variant, c.regime): c for c in cells}
    header = ["Model"] + regimes
    if with_reference:
        header += [f"{r} (reference)" for r in regimes]
    lines = ["\t".join(header)]
    for v in variants:
        row = [v]
        for r in regimes:
            c = lookup.get((v, r))
            row.append("ERROR" if c is None or c.macro_f1 is None else f"{100 * c.macro_f1:.3f}")
        if with_reference:
            for r in regimes:
                c = lookup.get((v, r))
                row.append("-" if c is None or c.reference is None else f"{c.reference:.3f}")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"
