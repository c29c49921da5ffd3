"""Transcripts, context/response extraction, vocabulary, image features, batching."""

from __future__ import annotations

import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class TranscriptError(ValueError):
    """A transcript record does not follow the interchange schema."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# transcripts


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str = ""
    image_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class DialogueTranscript:
    session_id: str
    turns: tuple[Turn, ...]
    split: str | None = None

    @classmethod
    def from_dict(cls, record: dict) -> "DialogueTranscript":
        sid = record.get("session_id")
        if not isinstance(sid, str) or not sid:
            raise TranscriptError("record has no string session_id")
        raw_turns = record.get("turns")
        if not isinstance(raw_turns, list) or not raw_turns:
            raise TranscriptError(f"session {sid}: turns must be a nonempty list")
        turns = []
        for i, t in enumerate(raw_turns):
            where = f"session {sid}, turn {i}"
            if not isinstance(t, dict):
                raise TranscriptError(f"{where}: turn is not an object")
            speaker = t.get("speaker")
            if speaker not in ("user", "agent"):
                raise TranscriptError(f"{where}: speaker must be 'user' or 'agent', got {speaker!r}")
            text = t.get("text", "")
            if not isinstance(text, str):
                raise TranscriptError(f"{where}: text must be a string")
            ids = t.get("image_ids", [])
            if not isinstance(ids, list) or not all(isinstance(x, str) and x for x in ids):
                raise TranscriptError(f"{where}: image_ids must be a list of nonempty strings")
            turns.append(Turn(speaker, text, tuple(ids)))
        split = record.get("split")
        return cls(sid, tuple(turns), split)

    def to_dict(self) -> dict:
        out = {
            "session_id": self.session_id,
            "turns": [{"speaker": t.speaker, "text": t.text, "image_ids": list(t.image_ids)} for t in self.turns],
        }
        if self.split is not None:
            out["split"] = self.split
        return out


def read_transcripts(path: str | Path) -> list[DialogueTranscript]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TranscriptError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                out.append(DialogueTranscript.from_dict(record))
            except TranscriptError as exc:
                raise TranscriptError(f"line {lineno}: {exc}") from None
    return out


def write_transcripts(path: str | Path, transcripts: Iterable[DialogueTranscript]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in transcripts:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def convert_mmd_session(raw: list[dict], session_id: str, split: str | None = None) -> DialogueTranscript:
    """Adapt one raw MMD dialogue (list of ``{speaker, utterance: {nlg, images}}``).

    The MMD logs name the agent ``system``; ``nlg`` may be null for image-only
    turns.
    """
    turns = []
    for i, entry in enumerate(raw):
        speaker = entry.get("speaker")
        if speaker not in ("user", "system"):
            raise TranscriptError(f"session {session_id}, turn {i}: unknown speaker {speaker!r}")
        utt = entry.get("utterance") or {}
        text = utt.get("nlg") or ""
        images = tuple(x for x in (utt.get("images") or []) if x)
        turns.append(Turn("user" if speaker == "user" else "agent", text, images))
    if not turns:
        raise TranscriptError(f"session {session_id}: no turns")
    return DialogueTranscript(session_id, tuple(turns), split)


# ---------------------------------------------------------------------------
# extraction


@dataclass(frozen=True)
class ContextTurn:
    tokens: tuple[str, ...] = ()
    image_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class TrainingExample:
    session_id: str
    turn_index: int
    context: tuple[ContextTurn, ...]
    target: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "context": [{"tokens": list(c.tokens), "image_ids": list(c.image_ids)} for c in self.context],
            "target": list(self.target),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingExample":
        ctx = tuple(ContextTurn(tuple(c["tokens"]), tuple(c["image_ids"])) for c in d["context"])
        return cls(d["session_id"], d["turn_index"], ctx, tuple(d["target"]))


def _left_pad(elements: list[ContextTurn], context_size: int) -> tuple[ContextTurn, ...]:
    elements = elements[-context_size:]
    return tuple([ContextTurn()] * (context_size - len(elements)) + elements)


def extract_examples(t: DialogueTranscript, context_size: int, mode: str = "aggregated") -> list[TrainingExample]:
    """One example per agent turn with nonempty text, context from earlier turns only.

    ``aggregated`` keeps each turn whole with all of its images. ``unrolled``
    turns every earlier image into its own text-free element and keeps the most
    recent ``context_size`` of them.
    """
    if context_size < 1:
        raise ValueError("context_size must be >= 1")
    if mode not in ("aggregated", "unrolled"):
        raise ValueError(f"unknown extraction mode {mode!r}")
    history: list[ContextTurn] = []
    unrolled: list[ContextTurn] = []
    examples = []
    for i, turn in enumerate(t.turns):
        tokens = tuple(tokenize(turn.text))
        if turn.speaker == "agent" and tokens:
            ctx = history if mode == "aggregated" else unrolled
            examples.append(TrainingExample(t.session_id, i, _left_pad(ctx, context_size), tokens))
        history.append(ContextTurn(tokens, turn.image_ids))
        unrolled.extend(ContextTurn((), (img,)) for img in turn.image_ids)
    return examples


def render_context(e: TrainingExample, max_images: int, mode: str = "aggregated") -> str:
    """Human-readable three-line rendering used for golden files.

    Aggregated turns show all ``max_images`` slots, ``0`` marking a zero
    vector; unrolled elements show their single image (or ``0``).
    """
    texts = " | ".join(" ".join(c.tokens) for c in e.context)
    groups = []
    for c in e.context:
        if mode == "unrolled":
            groups.append(c.image_ids[0] if c.image_ids else "0")
            continue
        slots = list(c.image_ids[:max_images]) + ["0"] * (max_images - len(c.image_ids[:max_images]))
        groups.append("[" + ", ".join(slots) + "]")
    return (
        f"Text Context: {texts}\n"
        f"Image Context: {' | '.join(groups)}\n"
        f"Target Response: {' '.join(e.target)}\n"
    )


def write_examples(path: str | Path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_dict()) + "\n")


def read_examples(path: str | Path) -> list[TrainingExample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingExample.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str], counts: Sequence[int] | None = None, min_count: int = 1):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")
        self.counts = list(counts) if counts is not None else [0] * len(self.itos)
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, c) in enumerate(zip(self.itos, self.counts)):
                fh.write(f"{tok}\t{i}\t{c}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                tok, idx, c = line.rstrip("\n").split("\t")
                if int(idx) != lineno:
                    raise ValueError(f"{path}: id {idx} out of order at line {lineno + 1}")
                tokens.append(tok)
                counts.append(int(c))
        return cls(tokens, counts)


def build_vocab(corpus: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Count tokens and assign ids by (count desc, token asc) after the reserved ones.

    Items of ``corpus`` are raw strings (tokenized here) or token sequences.
    """
    counts: Counter[str] = Counter()
    n = 0
    for item in corpus:
        counts.update(tokenize(item) if isinstance(item, str) else item)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: (-counts[t], t))
    tokens = list(RESERVED) + kept
    return Vocabulary(tokens, [0] * len(RESERVED) + [counts[t] for t in kept], min_count)


def vocab_from_examples(examples: Iterable[TrainingExample], min_count: int = 1) -> Vocabulary:
    def seqs():
        for e in examples:
            for c in e.context:
                yield c.tokens
            yield e.target

    return build_vocab(seqs(), min_count)


# ---------------------------------------------------------------------------
# image features

_FS_MAGIC = b"MHFS"
_FS_VERSION = 1
_FS_HEADER = struct.Struct("<4sIIII")  # magic, version, count, img_dim, id_width


class FeatureStore:
    """Image id -> feature vector. Unknown ids resolve to zeros with a warning.

    File layout (little endian): header ``magic "MHFS", u32 version, u32 count,
    u32 img_dim, u32 id_width``, then ``count`` records of ``id_width`` bytes of
    NUL-padded UTF-8 id followed by ``img_dim`` float32 values.
    """

    def __init__(self, img_dim: int = 4096, vectors: dict[str, np.ndarray] | None = None):
        self.img_dim = img_dim
        self._index: dict[str, int] = {}
        self._matrix = np.zeros((0, img_dim), dtype=np.float32)
        self._warned: set[str] = set()
        if vectors:
            ids = list(vectors)
            mat = np.stack([np.asarray(vectors[i], dtype=np.float32) for i in ids]) if ids else self._matrix
            self._set(ids, mat)

    def _set(self, ids: list[str], matrix: np.ndarray) -> None:
        if matrix.ndim != 2 or matrix.shape[1] != self.img_dim:
            raise ValueError(f"feature matrix {matrix.shape} does not have img_dim {self.img_dim}")
        self._index = {x: i for i, x in enumerate(ids)}
        self._matrix = matrix

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def ids(self) -> list[str]:
        return list(self._index)

    def get(self, image_id: str) -> np.ndarray:
        i = self._index.get(image_id)
        if i is None:
            if image_id not in self._warned:
                logger.warning("image id %r not in feature store; using zero vector", image_id)
                self._warned.add(image_id)
            return np.zeros(self.img_dim)
        return self._matrix[i].astype(np.float64)

    def save(self, path: str | Path) -> None:
        ids = list(self._index)
        encoded = [x.encode("utf-8") for x in ids]
        width = max((len(b) for b in encoded), default=1)
        rec = np.dtype([("id", f"S{width}"), ("vec", "<f4", (self.img_dim,))])
        arr = np.zeros(len(ids), dtype=rec)
        arr["id"] = encoded
        arr["vec"] = self._matrix[[self._index[x] for x in ids]] if ids else arr["vec"]
        with open(path, "wb") as fh:
            fh.write(_FS_HEADER.pack(_FS_MAGIC, _FS_VERSION, len(ids), self.img_dim, width))
            fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStore":
        with open(path, "rb") as fh:
            head = fh.read(_FS_HEADER.size)
        if len(head) != _FS_HEADER.size:
            raise ValueError(f"{path}: truncated feature-store header")
        magic, version, count, img_dim, width = _FS_HEADER.unpack(head)
        if magic != _FS_MAGIC or version != _FS_VERSION:
            raise ValueError(f"{path}: not a version-{_FS_VERSION} feature store")
        rec = np.dtype([("id", f"S{width}"), ("vec", "<f4", (img_dim,))])
        expected = _FS_HEADER.size + count * rec.itemsize
        if Path(path).stat().st_size != expected:
            raise ValueError(f"{path}: size does not match header ({count} records)")
        arr = np.memmap(path, dtype=rec, mode="r", offset=_FS_HEADER.size, shape=(count,)) if count else np.zeros(0, rec)
        store = cls(img_dim)
        store._set([b.decode("utf-8") for b in arr["id"]], np.asarray(arr["vec"]))
        return store


# ---------------------------------------------------------------------------
# encoding and batching


@dataclass
class EncodedExample:
    context_ids: list[list[int]]  # per turn; [] for empty text
    images: np.ndarray  # [n_turns, K, img_dim], zero rows beyond actual images
    image_counts: list[int]
    target_ids: list[int]  # BOS ... EOS


def encode_example(e: TrainingExample, vocab: Vocabulary, max_images: int, features: FeatureStore | None, img_dim: int | None = None) -> EncodedExample:
    dim = features.img_dim if features is not None else (img_dim or 0)
    images = np.zeros((len(e.context), max_images, dim))
    counts = []
    for n, turn in enumerate(e.context):
        ids = turn.image_ids
        if len(ids) > max_images:
            logger.warning("turn with %d images truncated to the first %d", len(ids), max_images)
            ids = ids[:max_images]
        if features is not None:
            for k, img in enumerate(ids):
                images[n, k] = features.get(img)
        counts.append(len(ids))
    return EncodedExample(
        [vocab.encode(t.tokens) for t in e.context],
        images,
        counts,
        [BOS] + vocab.encode(e.target) + [EOS],
    )


@dataclass
class Batch:
    context_ids: list[np.ndarray]  # per turn [B, T_n]
    context_masks: list[np.ndarray]  # per turn [B, T_n], 0/1
    images: np.ndarray  # [B, n_turns, K, img_dim]
    image_counts: np.ndarray  # [B, n_turns]
    target_in: np.ndarray  # [B, L]: BOS w1 ... wn (pad)
    target_out: np.ndarray  # [B, L]: w1 ... wn EOS (pad)
    target_mask: np.ndarray  # [B, L]

    @property
    def size(self) -> int:
        return self.target_in.shape[0]

    @property
    def n_turns(self) -> int:
        return len(self.context_ids)

    def with_images(self, images: np.ndarray) -> "Batch":
        return Batch(self.context_ids, self.context_masks, images, self.image_counts, self.target_in, self.target_out, self.target_mask)

    def last_turns(self, n: int) -> "Batch":
        return Batch(self.context_ids[-n:], self.context_masks[-n:], self.images[:, -n:], self.image_counts[:, -n:], self.target_in, self.target_out, self.target_mask)


def _pad(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def collate(items: Sequence[EncodedExample]) -> Batch:
    n_turns = len(items[0].context_ids)
    if any(len(x.context_ids) != n_turns for x in items):
        raise ValueError("all examples in a batch need the same number of context turns")
    ctx_ids, ctx_masks = [], []
    for n in range(n_turns):
        ids, mask = _pad([x.context_ids[n] for x in items])
        ctx_ids.append(ids)
        ctx_masks.append(mask)
    tin, _ = _pad([x.target_ids[:-1] for x in items])
    tout, tmask = _pad([x.target_ids[1:] for x in items])
    return Batch(
        ctx_ids,
        ctx_masks,
        np.stack([x.images for x in items]),
        np.array([x.image_counts for x in items], dtype=np.int64),
        tin,
        tout,
        tmask,
    )


def batches(items: Sequence[EncodedExample], batch_size: int, order: Sequence[int] | None = None) -> list[Batch]:
    order = list(range(len(items))) if order is None else list(order)
    return [collate([items[i] for i in order[s : s + batch_size]]) for s in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# synthetic corpora

COLORS = ("red", "blue", "green", "black")
MATERIALS = ("cotton", "leather", "silk", "denim")
ITEMS = ("shirt", "jacket", "dress", "bag")
SIZES = ("small", "medium", "large")
_FILLERS = (
    "it is for a party",
    "my budget is small",
    "i like casual styles",
    "please take your time",
    "i saw one online last week",
    "it should go with my shoes",
)


@dataclass
class SyntheticCorpus:
    transcripts: list[DialogueTranscript]
    features: FeatureStore
    meta: dict = field(default_factory=dict)


def _image_vector(rng: np.random.Generator, img_dim: int, color: int, material: int, noise: float) -> np.ndarray:
    v = rng.normal(0.0, noise, size=img_dim)
    v[color] += 1.0
    v[len(COLORS) + material] += 1.0
    return v


def synthesize_corpus(seed: int, n_sessions: int, style: str = "text_driven", img_dim: int = 16, noise: float = 0.05) -> SyntheticCorpus:
    """Templated shopping dialogues.

    ``text_driven``: every agent reply is determined by the preceding user text.
    ``image_driven``: replies describe color and material, which are encoded
    only in the features of the agent's preceding image-only turn.
    ``long_range``: a single reply restates an item named four turns earlier,
    with distractor user turns in between.
    """
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    if img_dim < len(COLORS) + len(MATERIALS):
        raise ValueError(f"img_dim must be at least {len(COLORS) + len(MATERIALS)}")
    rng = np.random.default_rng(seed)
    vectors: dict[str, np.ndarray] = {}
    transcripts = []
    for s in range(n_sessions):
        sid = f"{style}-{seed}-{s:05d}"
        turns: list[Turn] = []
        if style == "text_driven":
            for _ in range(int(rng.integers(1, 4))):
                kind = int(rng.integers(0, 3))
                color, item = COLORS[rng.integers(len(COLORS))], ITEMS[rng.integers(len(ITEMS))]
                if kind == 0:
                    turns += [Turn("user", f"i want a {color} {item}"), Turn("agent", f"here is a {color} {item} for you")]
                elif kind == 1:
                    size = SIZES[rng.integers(len(SIZES))]
                    turns += [Turn("user", f"do you have the {item} in {size} ?"), Turn("agent", f"yes , the {item} comes in {size}")]
                else:
                    turns += [Turn("user", f"how much is the {color} {item} ?"), Turn("agent", f"the {color} {item} costs {10 + 5 * ITEMS.index(item)} dollars")]
        elif style == "image_driven":
            for e in range(int(rng.integers(1, 3))):
                item = ITEMS[rng.integers(len(ITEMS))]
                color, material = int(rng.integers(len(COLORS))), int(rng.integers(len(MATERIALS)))
                ids = []
                for k in range(int(rng.integers(1, 4))):
                    img = f"{sid}-e{e}-img{k}"
                    vectors[img] = _image_vector(rng, img_dim, color, material, noise)
                    ids.append(img)
                turns += [
                    Turn("user", f"show me some {item}s"),
                    Turn("agent", "", tuple(ids)),
                    Turn("user", "tell me more about them"),
                    Turn("agent", f"they are {COLORS[color]} and made of {MATERIALS[material]}"),
                ]
        elif style == "long_range":
            color, item = COLORS[rng.integers(len(COLORS))], ITEMS[rng.integers(len(ITEMS))]
            fill = rng.choice(len(_FILLERS), size=3, replace=False)
            turns = [Turn("user", f"i need a {color} {item}")]
            turns += [Turn("user", _FILLERS[i]) for i in fill]
            turns.append(Turn("agent", f"here is your {color} {item}"))
        else:
            raise ValueError(f"unknown synthetic style {style!r}")
        transcripts.append(DialogueTranscript(sid, tuple(turns)))
    meta = {"seed": seed, "n_sessions": n_sessions, "style": style, "img_dim": img_dim, "noise": noise}
    return SyntheticCorpus(transcripts, FeatureStore(img_dim, vectors), meta)
