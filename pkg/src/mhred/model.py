"""Multimodal hierarchical recurrent encoder-decoder.

Per context turn an utterance encoder reads the words, a linear layer maps the
slot-padded concatenation of the turn's image features to one vector, and a
turn-level GRU consumes ``[text; image]``. Its final state seeds the decoder,
which optionally attends over the encoder token states of the context window.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .cells import AttentionParams, GruParams, bigru_encode, gru_step, luong_attend, run_sequence, uniform_param
from .data import BOS, EOS, Batch
from .tensor import ContractError, DimensionError, Tensor, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mhred-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, corrupt, or of another version."""


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 512
    hid_dim: int = 512
    img_dim: int = 4096
    max_images: int = 5
    context_size: int = 2
    multimodal: bool = True
    use_attention: bool = True
    bidirectional_encoder: bool = True
    tied_embeddings: bool = True
    max_decode_len: int = 30
    max_target_len: int = 128
    attend_over: str = "all"  # "all" turns in the window, or "last"

    def __post_init__(self):
        for name in ("vocab_size", "emb_dim", "hid_dim", "img_dim", "max_images", "context_size", "max_decode_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.attend_over not in ("all", "last"):
            raise ValueError("attend_over must be 'all' or 'last'")

    @property
    def name(self) -> str:
        base = ("M" if self.multimodal else "T") + "-HRED"
        return base + ("--attn" if self.use_attention else "")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ModelParams:
    """Named parameter tensors; the GRU and attention groups are views."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def gru(self, prefix: str) -> GruParams:
        return GruParams(**{f.name: self.tensors[f"{prefix}.{f.name}"] for f in fields(GruParams)})

    def attention(self) -> AttentionParams:
        return AttentionParams(self.tensors["attn.W_a"], self.tensors["attn.W_c"])

    def zero_grad(self) -> None:
        T.zero_grads(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()})

    def assign(self, other: "ModelParams") -> None:
        for k, v in other.items():
            self.tensors[k].data[...] = v.data

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, scale: float = 0.08) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls({name: uniform_param(rng, shape, scale) for name, shape in param_shapes(config).items()})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, h, v = config.emb_dim, config.hid_dim, config.vocab_size

    def gru(prefix, in_dim):
        return {
            **{f"{prefix}.W_{g}": (in_dim, h) for g in "zrh"},
            **{f"{prefix}.U_{g}": (h, h) for g in "zrh"},
            **{f"{prefix}.b_{g}": (h,) for g in "zrh"},
        }

    shapes: dict[str, tuple[int, ...]] = {"embedding": (v, e)}
    if not config.tied_embeddings:
        shapes["dec_embedding"] = (v, e)
    shapes.update(gru("enc_fwd", e))
    if config.bidirectional_encoder:
        shapes.update(gru("enc_bwd", e))
        shapes["enc_proj"] = (2 * h, h)
    if config.multimodal:
        shapes["img.W"] = (config.max_images * config.img_dim, h)
        shapes["img.b"] = (h,)
    shapes.update(gru("cxt", 2 * h if config.multimodal else h))
    shapes.update(gru("dec", e + h if config.use_attention else e))
    if config.use_attention:
        shapes["attn.W_a"] = (h, h)
        shapes["attn.W_c"] = (2 * h, h)
    shapes["out.W"] = (h, v)
    shapes["out.b"] = (v,)
    return shapes


# ---------------------------------------------------------------------------
# encoder side


@dataclass
class EncodedContext:
    text_initial: list[Tensor]  # h^text_{n,0} per turn
    text_final: list[Tensor]  # h^text_{n,M_n}
    image_enc: list[Tensor] | None  # h^img_n, None in text-only mode
    token_states: list[Tensor]  # [B, T_n, hid] per turn
    token_masks: list[np.ndarray]
    context_initial: Tensor  # h^cxt_0
    context_states: list[Tensor]  # h^cxt_1 .. h^cxt_N

    @property
    def final(self) -> Tensor:
        return self.context_states[-1]

    @property
    def decoder_initial(self) -> Tensor:
        return self.final

    @property
    def batch_size(self) -> int:
        return self.final.shape[0]

    def memory(self, config: ModelConfig) -> tuple[Tensor, np.ndarray]:
        """Attention keys over the window's tokens and their mask.

        A row with no real token anywhere gets its first position unmasked so
        the softmax is defined; that key is the encoder's untouched zero state.
        """
        states, masks = self.token_states, self.token_masks
        if config.attend_over == "last":
            states, masks = states[-1:], masks[-1:]
        keys = T.concat(states, axis=1)
        mask = np.concatenate(masks, axis=1).astype(bool)
        empty = ~mask.any(axis=1)
        if empty.any():
            mask = mask.copy()
            mask[empty, 0] = True
        return keys, mask

    def rows(self, index: np.ndarray | list[int]) -> "EncodedContext":
        """Select batch rows (values only, no graph)."""
        idx = np.asarray(index)

        def pick(t: Tensor) -> Tensor:
            return Tensor(t.data[idx])

        return EncodedContext(
            [pick(t) for t in self.text_initial],
            [pick(t) for t in self.text_final],
            None if self.image_enc is None else [pick(t) for t in self.image_enc],
            [pick(t) for t in self.token_states],
            [m[idx] for m in self.token_masks],
            pick(self.context_initial),
            [pick(t) for t in self.context_states],
        )


def encode_utterance(ids: np.ndarray, mask: np.ndarray, params: ModelParams, config: ModelConfig):
    """Embed and run the (bi)GRU utterance encoder from a zero state.

    Returns ``(token_states, h_text_final, h_text_initial)``. An empty turn is a
    single masked pad position, so its final state stays at zero.
    """
    ids = np.asarray(ids)
    if ids.size and ids.max() >= config.vocab_size:
        raise IndexError(f"token id {ids.max()} >= vocab_size {config.vocab_size}")
    xs = T.embedding(params["embedding"], ids)
    h0 = Tensor(np.zeros((ids.shape[0], config.hid_dim)))
    if config.bidirectional_encoder:
        states, final = bigru_encode(xs, mask, params.gru("enc_fwd"), params.gru("enc_bwd"), params["enc_proj"], h0)
    else:
        states, final = run_sequence(xs, h0, mask, params.gru("enc_fwd"))
    return states, final, h0


def image_encoding(images: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """``l_img`` over slot-padded features ``[B, K, img_dim]`` -> ``[B, hid]``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1:] != (config.max_images, config.img_dim):
        raise DimensionError(f"image_encoding: features {images.shape} are not [B, {config.max_images}, {config.img_dim}]")
    flat = Tensor(images.reshape(images.shape[0], -1))
    return T.linear(flat, params["img.W"], params["img.b"])


def aggregate_images(features, params: ModelParams, config: ModelConfig) -> Tensor:
    """Image encoding of one turn from up to K vectors, returned as ``[hid]``."""
    features = [np.asarray(f, dtype=np.float64) for f in features]
    for f in features:
        if f.shape != (config.img_dim,):
            raise DimensionError(f"aggregate_images: feature of shape {f.shape}, expected ({config.img_dim},)")
    if len(features) > config.max_images:
        logger.warning("%d image features truncated to the first %d", len(features), config.max_images)
        features = features[: config.max_images]
    slots = np.zeros((1, config.max_images, config.img_dim))
    for k, f in enumerate(features):
        slots[0, k] = f
    return T.reshape(image_encoding(slots, params, config), (config.hid_dim,))


def encode_context(batch: Batch, params: ModelParams, config: ModelConfig) -> EncodedContext:
    if batch.n_turns != config.context_size:
        raise ContractError(f"encode_context: batch has {batch.n_turns} turns, model expects {config.context_size}")
    h0_cxt = Tensor(np.zeros((batch.size, config.hid_dim)))
    text_init, text_final, states_all, img_all, cxt_states = [], [], [], [], []
    cxt = params.gru("cxt")
    h = h0_cxt
    for n in range(batch.n_turns):
        states, final, init = encode_utterance(batch.context_ids[n], batch.context_masks[n], params, config)
        text_init.append(init)
        text_final.append(final)
        states_all.append(states)
        if config.multimodal:
            h_img = image_encoding(batch.images[:, n], params, config)
            img_all.append(h_img)
            x = T.concat([final, h_img], axis=1)
        else:
            x = final
        h = gru_step(x, h, cxt)
        cxt_states.append(h)
    return EncodedContext(
        text_init,
        text_final,
        img_all if config.multimodal else None,
        states_all,
        [np.asarray(m) for m in batch.context_masks],
        h0_cxt,
        cxt_states,
    )


# ---------------------------------------------------------------------------
# decoder side


def _dec_embedding(params: ModelParams, config: ModelConfig) -> Tensor:
    return params["embedding"] if config.tied_embeddings else params["dec_embedding"]


def decoder_step(emb: Tensor, h: Tensor, attn_prev: Tensor | None, memory, params: ModelParams, config: ModelConfig):
    """One decoder step from an embedded input token; returns ``(h, attn_h, logits)``."""
    x = T.concat([emb, attn_prev], axis=1) if config.use_attention else emb
    h = gru_step(x, h, params.gru("dec"))
    if config.use_attention:
        keys, mask = memory
        out, _ = luong_attend(h, keys, mask, params.attention())
    else:
        out = h
    logits = T.linear(out, params["out.W"], params["out.b"])
    return h, (out if config.use_attention else None), logits


@dataclass
class DecodeResult:
    loss: Tensor
    step_logits: list[Tensor]  # one [B, vocab] per target position
    states: list[Tensor]  # decoder states, states[0] is the initial state

    @property
    def logits(self) -> np.ndarray:
        return np.stack([t.data for t in self.step_logits], axis=1)


def decode_teacher_forced(
    enc: EncodedContext,
    target_in: np.ndarray,
    target_out: np.ndarray,
    target_mask: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    reduction: str = "mean",
) -> DecodeResult:
    batch, steps = target_in.shape
    if steps > config.max_target_len:
        raise ContractError(f"target of {steps} steps exceeds max_target_len {config.max_target_len}")
    memory = enc.memory(config) if config.use_attention else None
    embs = T.embedding(_dec_embedding(params, config), target_in)
    h = enc.decoder_initial
    attn = Tensor(np.zeros((batch, config.hid_dim))) if config.use_attention else None
    states, step_logits = [h], []
    for m in range(steps):
        h, attn, logits = decoder_step(T.select(embs, m, axis=1), h, attn, memory, params, config)
        states.append(h)
        step_logits.append(logits)
    # time-major rows: row m*B + b is step m of example b
    flat = T.concat(step_logits, axis=0)
    loss = T.softmax_cross_entropy(flat, target_out.T.reshape(-1), target_mask.T.reshape(-1), reduction=reduction)
    return DecodeResult(loss, step_logits, states)


def forward(batch: Batch, params: ModelParams, config: ModelConfig, reduction: str = "mean") -> DecodeResult:
    enc = encode_context(batch, params, config)
    return decode_teacher_forced(enc, batch.target_in, batch.target_out, batch.target_mask, params, config, reduction)


def loss(batch: Batch, params: ModelParams, config: ModelConfig) -> Tensor:
    return forward(batch, params, config).loss


def token_accuracy(batch: Batch, params: ModelParams, config: ModelConfig) -> tuple[int, int]:
    """Teacher-forced (correct, total) argmax predictions over unmasked positions."""
    with no_grad():
        logits = forward(batch, params, config).logits
    live = batch.target_mask > 0
    correct = (logits.argmax(axis=-1) == batch.target_out) & live
    return int(correct.sum()), int(live.sum())


def sequence_log_prob(enc: EncodedContext, target_tokens, params: ModelParams, config: ModelConfig, append_eos: bool = True) -> float:
    """Sum of gold-token log-probabilities for one example (batch of one).

    With ``append_eos`` the final EOS prediction is included, giving the
    probability of exactly this response; without it, of this prefix.
    """
    if enc.batch_size != 1:
        raise ContractError("sequence_log_prob expects an encoded context of batch size 1")
    toks = [int(t) for t in target_tokens]
    out = toks + [EOS] if append_eos else toks
    if not out:
        return 0.0
    tin = np.array([[BOS] + out[:-1]], dtype=np.int64)
    tout = np.array([out], dtype=np.int64)
    with no_grad():
        res = decode_teacher_forced(enc, tin, tout, np.ones_like(tout, dtype=np.float64), params, config, reduction="sum")
    return -float(res.loss.data)


# ---------------------------------------------------------------------------
# generation


def generate(enc: EncodedContext, params: ModelParams, config: ModelConfig, mode: str = "greedy", beam_width: int = 4) -> list[list[int]]:
    """Decode one response per batch row, feeding back the model's own tokens.

    At most ``max_decode_len`` steps are taken; the last one can only end the
    response, so outputs hold at most ``max_decode_len - 1`` tokens.
    """
    with no_grad():
        if mode == "greedy":
            return _greedy(enc, params, config)
        if mode == "beam":
            return [_beam(enc.rows([b]), params, config, beam_width) for b in range(enc.batch_size)]
    raise ValueError(f"unknown generation mode {mode!r}")


def _greedy(enc: EncodedContext, params: ModelParams, config: ModelConfig) -> list[list[int]]:
    batch = enc.batch_size
    memory = enc.memory(config) if config.use_attention else None
    emb_w = _dec_embedding(params, config)
    h = enc.decoder_initial
    attn = Tensor(np.zeros((batch, config.hid_dim))) if config.use_attention else None
    tokens = np.full(batch, BOS, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(batch)]
    done = np.zeros(batch, dtype=bool)
    for _ in range(config.max_decode_len - 1):
        h, attn, logits = decoder_step(T.embedding(emb_w, tokens), h, attn, memory, params, config)
        tokens = T.log_softmax(logits.data).argmax(axis=1)
        for b in np.flatnonzero(~done):
            if tokens[b] == EOS:
                done[b] = True
            else:
                out[b].append(int(tokens[b]))
        if done.all():
            break
    return out


def _beam(enc: EncodedContext, params: ModelParams, config: ModelConfig, width: int) -> list[int]:
    """Length-unnormalized beam search for a single row; ties go to the lower token id."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    emb_w = _dec_embedding(params, config)
    keys, mask = enc.memory(config) if config.use_attention else (None, None)
    live = [(0.0, [], enc.decoder_initial.data[0], np.zeros(config.hid_dim))]
    finished: list[tuple[float, list[int]]] = []
    for step in range(config.max_decode_len):
        if step == config.max_decode_len - 1:
            finished.extend((s, toks) for s, toks, _, _ in live)
            break
        n = len(live)
        prev = np.array([BOS if not toks else toks[-1] for _, toks, _, _ in live], dtype=np.int64)
        h = Tensor(np.stack([b[2] for b in live]))
        attn = Tensor(np.stack([b[3] for b in live])) if config.use_attention else None
        memory = None
        if config.use_attention:
            memory = (Tensor(np.repeat(keys.data, n, axis=0)), np.repeat(mask, n, axis=0))
        h, attn, logits = decoder_step(T.embedding(emb_w, prev), h, attn, memory, params, config)
        logp = T.log_softmax(logits.data)
        cands = []
        for i, (score, toks, _, _) in enumerate(live):
            for v in range(logp.shape[1]):
                cands.append((score + logp[i, v], v, i))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for score, v, i in cands[:width]:
            toks = live[i][1]
            if v == EOS:
                finished.append((score, toks))
            else:
                a = attn.data[i] if config.use_attention else live[i][3]
                new_live.append((score, toks + [v], h.data[i], a))
        live = new_live
        if not live:
            break
        if finished and max(s for s, _ in finished) >= live[0][0]:
            break
    finished.sort(key=lambda f: (-f[0], f[1]))
    return finished[0][1]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig, vocab_tokens: list[str] | None = None, extra: dict | None = None) -> None:
    """Write config, vocabulary and every named parameter as one ``.npz`` archive.

    Archive members: ``__meta__`` (JSON string: format, version, config, names,
    vocab, extra) and one float64 array per parameter name.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "names": params.names(),
        "vocab": vocab_tokens,
        "extra": extra or {},
    }
    arrays = {name: t.data for name, t in params.items()}
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: list[str] | None
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not an {CHECKPOINT_FORMAT} file")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
            config = ModelConfig.from_dict(meta["config"])
            tensors = {name: Tensor(np.array(archive[name], dtype=np.float64), requires_grad=True) for name in meta["names"]}
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    expected = param_shapes(config)
    actual = {k: v.shape for k, v in tensors.items()}
    if actual != expected:
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return Checkpoint(ModelParams(tensors), config, meta.get("vocab"), meta.get("extra", {}))
