"""One tagger variant: embeddings [+ char-CNN] [+ context encoder] -> BiLSTM -> softmax | CRF."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DialogueTurn, LabelSet
from .crf import CrfParams, crf_nll, iob_constraint_mask, viterbi_decode
from .embeddings import (
    REGIMES,
    CharCnnParams,
    CharVocabulary,
    EmbeddingTable,
    Vocabulary,
    embed_sequence,
    random_table,
)
from .recurrent import (
    CELL_BLOCKS,
    CellParams,
    RecurrentState,
    StackedBiConfig,
    StackedBiParams,
    encode_context,
    run_bidirectional,
)
from .tensor import DimensionError, Tensor, add, getitem, log_softmax, matmul, neg, no_grad, total

VARIANT_NAMES = (
    "BI-LSTM",
    "BI-LSTM-CE",
    "BI-LSTM-CHAR",
    "BI-LSTM-CHAR-CE",
    "BI-LSTM-CRF",
    "BI-LSTM-CRF-CE",
    "BI-LSTM-CHAR-CRF",
    "BI-LSTM-CHAR-CRF-CE",
)


@dataclass
class VariantConfig:
    use_char: bool = False
    use_crf: bool = False
    use_context: bool = False
    embedding_regime: str = "custom"
    hidden_dim: int = 64
    layers: int = 2
    cell: str = "lstm"
    word_dim: int = 50
    char_dim: int = 30
    char_filters: int = 100
    context_all_layers: bool = False
    shared_context_embeddings: bool = True
    iob_constraints: bool = False

    def __post_init__(self):
        if self.embedding_regime not in REGIMES:
            raise ValueError(f"unknown embedding regime {self.embedding_regime!r}; expected one of {REGIMES}")
        if self.cell not in CELL_BLOCKS:
            raise ValueError(f"unknown cell kind {self.cell!r}")
        for name in ("hidden_dim", "layers", "word_dim", "char_dim", "char_filters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def name(self) -> str:
        parts = ["BI-LSTM"]
        if self.use_char:
            parts.append("CHAR")
        if self.use_crf:
            parts.append("CRF")
        if self.use_context:
            parts.append("CE")
        return "-".join(parts)

    @classmethod
    def from_name(cls, name: str, **overrides) -> "VariantConfig":
        if name not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
        parts = set(name.split("-")[2:])
        return cls(use_char="CHAR" in parts, use_crf="CRF" in parts, use_context="CE" in parts, **overrides)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


class TaggerModel:
    """Parameter bundle for one variant, plus the vocabularies it was built on."""

    def __init__(
        self,
        variant: VariantConfig,
        label_set: LabelSet,
        vocab: Vocabulary,
        word_table: EmbeddingTable,
        bilstm: StackedBiParams,
        proj_weight: Tensor,
        proj_bias: Tensor,
        char_params: CharCnnParams | None = None,
        context_params: CellParams | None = None,
        context_table: EmbeddingTable | None = None,
        crf_params: CrfParams | None = None,
    ):
        self.variant = variant
        self.label_set = label_set
        self.vocab = vocab
        self.word_table = word_table
        self.bilstm = bilstm
        self.proj_weight = proj_weight
        self.proj_bias = proj_bias
        self.char_params = char_params
        self.context_params = context_params
        self.context_table = context_table
        self.crf_params = crf_params
        self._mask = None
        self._check_inventory()

    @classmethod
    def build(
        cls,
        variant: VariantConfig,
        label_set: LabelSet,
        vocab: Vocabulary,
        word_table: EmbeddingTable | None = None,
        char_vocab: CharVocabulary | None = None,
        seed: int = 0,
    ) -> "TaggerModel":
        """Fresh randomly initialised model; one seeded generator drives every draw."""
        rng = np.random.default_rng(seed)
        if word_table is None:
            word_table = random_table(vocab, variant.word_dim, seed=seed)
        if len(word_table) != len(vocab):
            raise DimensionError(f"word table has {len(word_table)} rows for {len(vocab)} vocabulary entries")
        in_dim = word_table.dim
        char_params = None
        if variant.use_char:
            if char_vocab is None:
                char_vocab = CharVocabulary.from_tokens(vocab.tokens())
            char_params = CharCnnParams.init(char_vocab, variant.char_dim, variant.char_filters, rng)
            in_dim += variant.char_filters
        context_params = context_table = None
        if variant.use_context:
            if not variant.shared_context_embeddings:
                context_table = random_table(vocab, word_table.dim, seed=seed + 1, frozen=False)
                context_table.vectors.name = "context.embedding"
            context_params = CellParams.init("lstm", word_table.dim, variant.hidden_dim, rng, "context")
        bi_cfg = StackedBiConfig(variant.layers, variant.hidden_dim, variant.cell)
        bilstm = StackedBiParams.init(bi_cfg, in_dim, rng)
        K = len(label_set)
        bound = np.sqrt(6.0 / (bilstm.output_dim + K))
        proj_w = Tensor(rng.uniform(-bound, bound, size=(bilstm.output_dim, K)), requires_grad=True, name="proj.weight")
        proj_b = Tensor(np.zeros(K), requires_grad=True, name="proj.bias")
        crf_params = CrfParams.zeros(K) if variant.use_crf else None
        return cls(variant, label_set, vocab, word_table, bilstm, proj_w, proj_b,
                   char_params, context_params, context_table, crf_params)

    def _check_inventory(self) -> None:
        v = self.variant
        if (self.char_params is not None) != v.use_char:
            raise InventoryError("char-CNN parameters present iff use_char")
        if (self.context_params is not None) != v.use_context:
            raise InventoryError("context-encoder parameters present iff use_context")
        if (self.crf_params is not None) != v.use_crf:
            raise InventoryError("CRF parameters present iff use_crf")
        if self.context_table is not None and (not v.use_context or v.shared_context_embeddings):
            raise InventoryError("separate context embedding table without use_context/unshared embeddings")
        K = len(self.label_set)
        if self.proj_weight.shape != (self.bilstm.output_dim, K) or self.proj_bias.shape != (K,):
            raise InventoryError(f"emission projection does not map {self.bilstm.output_dim} -> {K}")
        if self.crf_params is not None and self.crf_params.n_labels != K:
            raise InventoryError(f"CRF has {self.crf_params.n_labels} labels, label set has {K}")
        if self.context_params is not None and self.context_params.hidden_dim != v.hidden_dim:
            raise InventoryError("context encoder hidden size must equal the tagger hidden size")

    # -------------------------------------------------------------- inventory

    def tensors(self) -> dict[str, Tensor]:
        """Every tensor in the model (trainable and frozen), in checkpoint order."""
        out: dict[str, Tensor] = {"word.vectors": self.word_table.vectors}
        if self.char_params is not None:
            out.update(self.char_params.tensors())
        if self.context_params is not None:
            out.update(self.context_params.tensors("context"))
        if self.context_table is not None:
            out["context.embedding"] = self.context_table.vectors
        out.update(self.bilstm.tensors())
        out["proj.weight"] = self.proj_weight
        out["proj.bias"] = self.proj_bias
        if self.crf_params is not None:
            out.update(self.crf_params.tensors())
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors only; frozen embedding tables are excluded."""
        frozen = {id(self.word_table.vectors)} if self.word_table.frozen else set()
        return {k: t for k, t in self.tensors().items() if id(t) not in frozen}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors().items():
            t.data[...] = arrays[k]

    @property
    def iob_masks(self):
        if self._mask is None:
            self._mask = iob_constraint_mask(self.label_set.labels)
        return self._mask


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """The container is truncated or its header is unreadable."""


class CheckpointVersionError(CheckpointError):
    """The container declares an unsupported format version."""


class InventoryError(CheckpointError):
    """Tensors present do not match the variant flags or expected shapes."""


# ----------------------------------------------------------------- forward


def _context_state(model: TaggerModel, turn: DialogueTurn) -> RecurrentState | None:
    if not model.variant.use_context:
        return None
    if not turn.system_tokens:
        return encode_context(model.context_params, None)
    table = model.context_table if model.context_table is not None else model.word_table
    embedded = embed_sequence(turn.system_tokens, model.vocab, table)
    return encode_context(model.context_params, embedded)


def forward(model: TaggerModel, turn: DialogueTurn) -> Tensor:
    """T x K emission scores for the user utterance of ``turn``."""
    if not turn.user_tokens:
        raise ValueError("user utterance is empty")
    x = embed_sequence(turn.user_tokens, model.vocab, model.word_table, model.char_params)
    init = _context_state(model, turn)
    states = run_bidirectional(model.bilstm, x, init, model.variant.context_all_layers)
    return add(matmul(states, model.proj_weight), model.proj_bias)


def softmax_nll(emissions: Tensor, gold: Sequence[int]) -> Tensor:
    T = emissions.shape[0]
    if len(gold) != T:
        raise DimensionError(f"{len(gold)} tags for {T} emission rows")
    picked = getitem(log_softmax(emissions), (np.arange(T), np.asarray(gold, dtype=np.int64)))
    return neg(total(picked))


def emission_loss(model: TaggerModel, emissions: Tensor, gold: Sequence[int]) -> Tensor:
    if model.variant.use_crf:
        return crf_nll(emissions, gold, model.crf_params)
    return softmax_nll(emissions, gold)


def loss(model: TaggerModel, turn: DialogueTurn) -> Tensor:
    """Scalar training loss: CRF negative log-likelihood or summed token cross-entropy."""
    if len(turn.tags) != len(turn.user_tokens):
        raise DimensionError(f"{len(turn.tags)} tags for {len(turn.user_tokens)} tokens")
    gold = model.label_set.encode(turn.tags)
    return emission_loss(model, forward(model, turn), gold)


def decode_emissions(model: TaggerModel, emissions: np.ndarray) -> list[int]:
    if model.variant.use_crf:
        masks = model.iob_masks if model.variant.iob_constraints else None
        path, _ = viterbi_decode(emissions, model.crf_params, masks)
        return path
    # argmax returns the first maximum, i.e. the lower label id on ties
    return [int(i) for i in np.asarray(emissions).argmax(axis=1)]


def predict(model: TaggerModel, turn: DialogueTurn) -> list[str]:
    with no_grad():
        emissions = forward(model, turn).data
    return model.label_set.decode(decode_emissions(model, emissions))


# -------------------------------------------------------------- checkpoint

MAGIC = b"CTXNER-CHECKPOINT\n"
FORMAT_VERSION = 1


def _digest(items: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(items).encode("utf-8")).hexdigest()


def _expected_shapes(model: TaggerModel) -> dict[str, tuple[int, ...]]:
    return {k: t.shape for k, t in model.tensors().items()}


def save(model: TaggerModel, path: str | Path) -> None:
    """Write the checkpoint atomically (temp file + rename)."""
    tensors = model.tensors()
    directory = []
    offset = 0
    for name, t in tensors.items():
        nbytes = t.data.size * 8
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "variant": asdict(model.variant),
        "labels": list(model.label_set.labels),
        "entity_types": list(model.label_set.entity_types),
        "vocab": {"lowercase": model.vocab.lowercase, "tokens": model.vocab.tokens(), "sha256": _digest(model.vocab.tokens())},
        "char_vocab": None,
        "word_table": {"frozen": model.word_table.frozen, "source_tag": model.word_table.source_tag},
        "tensors": directory,
        "payload_bytes": offset,
    }
    if model.char_params is not None:
        chars = model.char_params.vocab.tokens()
        header["char_vocab"] = {"chars": chars, "sha256": _digest(chars)}
    header_bytes = json.dumps(header, indent=1, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(f"{len(header_bytes)}\n".encode("ascii"))
            fh.write(header_bytes)
            fh.write(b"\n")
            for t in tensors.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(raw: bytes) -> tuple[dict, int]:
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError("not a ctxner checkpoint (bad magic)")
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    if nl < 0:
        raise CorruptCheckpointError("truncated checkpoint: missing header length")
    try:
        hlen = int(raw[pos:nl])
    except ValueError:
        raise CorruptCheckpointError("corrupt checkpoint: bad header length") from None
    start = nl + 1
    end = start + hlen
    if len(raw) < end + 1:
        raise CorruptCheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(raw[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint header: {exc}") from None
    if not isinstance(header, dict):
        raise CorruptCheckpointError("corrupt checkpoint header: not an object")
    return header, end + 1


def load(path: str | Path) -> TaggerModel:
    """Read a checkpoint; raises a :class:`CheckpointError` subclass on any defect."""
    raw = Path(path).read_bytes()
    header, payload_start = _read_header(raw)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version!r}")
    try:
        variant = VariantConfig(**header["variant"])
        label_set = LabelSet(header["entity_types"])
        vocab = Vocabulary(header["vocab"]["tokens"], lowercase=header["vocab"]["lowercase"])
        directory = header["tensors"]
        payload_bytes = int(header["payload_bytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint header: {exc}") from None
    if list(label_set.labels) != header.get("labels"):
        raise CorruptCheckpointError("label list does not match entity types")
    if _digest(vocab.tokens()) != header["vocab"].get("sha256"):
        raise CorruptCheckpointError("vocabulary digest mismatch")
    payload = raw[payload_start:]
    if len(payload) != payload_bytes:
        raise CorruptCheckpointError(
            f"truncated checkpoint: payload has {len(payload)} bytes, header declares {payload_bytes}"
        )

    arrays: dict[str, np.ndarray] = {}
    for entry in directory:
        name, shape = entry["name"], tuple(entry["shape"])
        off, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * 8 or off + nbytes > payload_bytes:
            raise CorruptCheckpointError(f"tensor directory entry for {name!r} is inconsistent")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64).reshape(shape)

    char_vocab = None
    if header.get("char_vocab") is not None:
        char_vocab = CharVocabulary(header["char_vocab"]["chars"])
        if _digest(char_vocab.tokens()) != header["char_vocab"].get("sha256"):
            raise CorruptCheckpointError("character vocabulary digest mismatch")
    wt = header.get("word_table", {})
    if "word.vectors" not in arrays:
        raise InventoryError("checkpoint is missing tensor 'word.vectors'")
    word_table = EmbeddingTable(Tensor(arrays["word.vectors"]), frozen=wt.get("frozen", True),
                                source_tag=wt.get("source_tag", variant.embedding_regime))
    if variant.use_char and char_vocab is None:
        raise InventoryError("variant uses char features but the checkpoint has no character vocabulary")
    model = TaggerModel.build(variant, label_set, vocab, word_table, char_vocab, seed=0)
    expected = _expected_shapes(model)
    for name, shape in expected.items():
        if name not in arrays:
            raise InventoryError(f"checkpoint is missing tensor {name!r} required by variant {variant.name}")
        if arrays[name].shape != shape:
            raise InventoryError(f"tensor {name!r} has shape {arrays[name].shape}, expected {shape}")
    unexpected = sorted(set(arrays) - set(expected))
    if unexpected:
        raise InventoryError(f"checkpoint has tensors not used by variant {variant.name}: {unexpected}")
    model.load_state_arrays(arrays)
    return model
