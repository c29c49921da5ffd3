"""GRU cell, masked sequence runners and Luong attention with input feeding."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor


def uniform_param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, in_dim: int, hid: int, rng: np.random.Generator, scale: float = 0.08) -> "GruParams":
        shapes = {"W": (in_dim, hid), "U": (hid, hid), "b": (hid,)}
        return cls(**{f.name: uniform_param(rng, shapes[f.name[0]], scale) for f in fields(cls)})

    @classmethod
    def zeros(cls, in_dim: int, hid: int) -> "GruParams":
        shapes = {"W": (in_dim, hid), "U": (hid, hid), "b": (hid,)}
        return cls(**{f.name: Tensor(np.zeros(shapes[f.name[0]]), requires_grad=True) for f in fields(cls)})

    @property
    def in_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hid(self) -> int:
        return self.U_z.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass
class AttentionParams:
    W_a: Tensor  # [hid, hid] general score
    W_c: Tensor  # [2*hid, hid] output projection of [context; query]

    @classmethod
    def init(cls, hid: int, rng: np.random.Generator, scale: float = 0.08) -> "AttentionParams":
        return cls(uniform_param(rng, (hid, hid), scale), uniform_param(rng, (2 * hid, hid), scale))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W_a": self.W_a, f"{prefix}.W_c": self.W_c}


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != p.in_dim:
        raise DimensionError(f"gru_step: input {x.shape} does not match in_dim {p.in_dim}")
    if h_prev.shape != (x.shape[0], p.hid):
        raise DimensionError(f"gru_step: state {h_prev.shape} does not match ({x.shape[0]}, {p.hid})")
    z = T.sigmoid(T.add_bias(T.matmul(x, p.W_z) + T.matmul(h_prev, p.U_z), p.b_z))
    r = T.sigmoid(T.add_bias(T.matmul(x, p.W_r) + T.matmul(h_prev, p.U_r), p.b_r))
    h_tilde = T.tanh(T.add_bias(T.matmul(x, p.W_h) + T.matmul(T.mul(r, h_prev), p.U_h), p.b_h))
    return T.mul(1.0 - z, h_prev) + T.mul(z, h_tilde)


def _mask_array(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return m.astype(bool)


def run_sequence(xs: Tensor, h0: Tensor, mask, p: GruParams, reverse: bool = False):
    """Run ``gru_step`` over time; masked positions carry the state unchanged.

    Returns per-position states ``[batch, T, hid]`` and the state after the
    last unmasked position of each row (``h0`` for fully masked rows).
    """
    m = _mask_array(mask)
    if xs.data.ndim != 3 or m.shape != xs.shape[:2]:
        raise DimensionError(f"run_sequence: inputs {xs.shape} vs mask {m.shape}")
    steps = range(xs.shape[1] - 1, -1, -1) if reverse else range(xs.shape[1])
    h = h0
    states: list[Tensor | None] = [None] * xs.shape[1]
    for t in steps:
        h_new = gru_step(T.select(xs, t, axis=1), h, p)
        col = m[:, t : t + 1]
        h = h_new if col.all() else T.where(col, h_new, h)
        states[t] = h
    return T.stack(states, axis=1), h


def bigru_encode(xs: Tensor, mask, p_fwd: GruParams, p_bwd: GruParams, proj: Tensor, h0: Tensor | None = None):
    """Forward and reversed passes, each position's pair projected back to ``hid``."""
    batch, steps, _ = xs.shape
    hid = p_fwd.hid
    if proj.shape != (2 * hid, hid):
        raise DimensionError(f"bigru_encode: projection {proj.shape} is not ({2 * hid}, {hid})")
    if h0 is None:
        h0 = Tensor(np.zeros((batch, hid)))
    fwd_states, fwd_final = run_sequence(xs, h0, mask, p_fwd)
    bwd_states, bwd_final = run_sequence(xs, h0, mask, p_bwd, reverse=True)
    both = T.concat([fwd_states, bwd_states], axis=2)
    states = T.reshape(T.matmul(T.reshape(both, (batch * steps, 2 * hid)), proj), (batch, steps, hid))
    h_final = T.matmul(T.concat([fwd_final, bwd_final], axis=1), proj)
    return states, h_final


def luong_attend(query: Tensor, keys: Tensor, mask, ap: AttentionParams):
    """General-score attention; returns ``tanh([c; query] W_c)`` and the weights."""
    m = _mask_array(mask)
    if not m.any(axis=1).all():
        raise ContractError("luong_attend: every key of some batch row is masked")
    scores = T.batch_dot(keys, T.matmul(query, ap.W_a))
    weights = T.masked_softmax(scores, m)
    context = T.weighted_sum(weights, keys)
    attn_h = T.tanh(T.matmul(T.concat([context, query], axis=1), ap.W_c))
    return attn_h, weights
