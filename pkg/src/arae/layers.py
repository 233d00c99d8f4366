"""Neural building blocks: token embeddings, single-layer LSTM encoder/decoder,
and fully connected networks for the latent generator and critic.

Parameter groups are lightweight descriptors; the actual tensors live in a
ParamStore under dot-separated names derived from each group's prefix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeMismatchError, Tape, Tensor

INIT_RANGE = 0.1
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class EmbeddingTable:
    """Descriptor for a [vocab x dim] embedding matrix, one row per token id."""

    name: str
    vocab_size: int
    dim: int

    def init_params(self, store, rng):
        store.add(self.name, Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (self.vocab_size, self.dim))))


@dataclass(frozen=True)
class LstmParams:
    """Single-layer LSTM cell parameters, gate order (input, forget, cell, output).

    Holds `<prefix>.w_x` [in_dim x 4*hidden], `<prefix>.w_h` [hidden x 4*hidden]
    and `<prefix>.b` [4*hidden]. The forget-gate bias starts at +1, everything
    else uniform in [-0.1, 0.1].
    """

    prefix: str
    in_dim: int
    hidden: int

    def init_params(self, store, rng):
        h = self.hidden
        store.add(f"{self.prefix}.w_x", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (self.in_dim, 4 * h))))
        store.add(f"{self.prefix}.w_h", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (h, 4 * h))))
        b = rng.uniform(-INIT_RANGE, INIT_RANGE, 4 * h)
        b[h : 2 * h] = FORGET_BIAS
        store.add(f"{self.prefix}.b", Tensor(b))


@dataclass(frozen=True)
class MlpParams:
    """Fully connected stack: relu hidden activations, identity output."""

    prefix: str
    dims: tuple  # (in, hidden..., out)

    def init_params(self, store, rng):
        for i, (d_in, d_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            store.add(f"{self.prefix}.fc{i}.w", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (d_in, d_out))))
            store.add(f"{self.prefix}.fc{i}.b", Tensor.zeros(d_out))


def embed(tape, store, table, ids):
    """Row lookup for a sequence of token ids; differentiable into the rows used."""
    node = tape.param(table.name, store[table.name])
    return ad.embed_rows(tape, node, ids)


def lstm_step(tape, store, p, x_t, h_prev, c_prev, mask=None):
    """One gated update; returns (h_t, c_t) nodes."""
    cell = ad.lstm_cell(
        tape,
        x_t,
        h_prev,
        c_prev,
        tape.param(f"{p.prefix}.w_x", store[f"{p.prefix}.w_x"]),
        tape.param(f"{p.prefix}.w_h", store[f"{p.prefix}.w_h"]),
        tape.param(f"{p.prefix}.b", store[f"{p.prefix}.b"]),
        mask=mask,
    )
    h = ad.slice_lastdim(tape, cell, 0, p.hidden)
    c = ad.slice_lastdim(tape, cell, p.hidden, 2 * p.hidden)
    return h, c


@dataclass(frozen=True)
class TextEncoder:
    """Embedding + LSTM; maps a caption to a unit-norm latent code."""

    table: EmbeddingTable
    cell: LstmParams

    def init_params(self, store, rng):
        self.table.init_params(store, rng)
        self.cell.init_params(store, rng)


@dataclass(frozen=True)
class TextDecoder:
    """Embedding + LSTM + output projection back onto the vocabulary."""

    table: EmbeddingTable
    cell: LstmParams
    proj_prefix: str
    vocab_size: int

    def init_params(self, store, rng):
        self.table.init_params(store, rng)
        self.cell.init_params(store, rng)
        store.add(f"{self.proj_prefix}.w", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (self.cell.hidden, self.vocab_size))))
        store.add(f"{self.proj_prefix}.b", Tensor.zeros(self.vocab_size))


def lstm_encode(tape, store, enc, ids, lengths):
    """Run the encoder over a batch of padded captions.

    `ids` is [batch x steps]; positions at or past each caption's length are
    skipped (the state carries through). The final hidden state is
    L2-normalized, so codes live on the unit sphere.
    """
    ids = np.asarray(ids, dtype=np.intp)
    lengths = np.asarray(lengths, dtype=np.intp)
    if ids.ndim != 2:
        raise ShapeMismatchError("lstm_encode", ids.shape, ())
    if np.any(lengths <= 0):
        raise ValueError("lstm_encode: caption with no content tokens")
    batch, steps = ids.shape
    hidden = enc.cell.hidden
    h = tape.constant(np.zeros((batch, hidden)))
    c = tape.constant(np.zeros((batch, hidden)))
    upto = int(lengths.max())
    for t in range(upto):
        x_t = embed(tape, store, enc.table, ids[:, t])
        mask = (t < lengths).astype(np.float64).reshape(-1, 1)
        h, c = lstm_step(tape, store, enc.cell, x_t, h, c, mask=mask)
    return ad.l2norm_rows(tape, h)


def lstm_decode_teacher(tape, store, dec, code, target_ids, target_lengths, bos_id, eos_id):
    """Teacher-forced decode: per-step vocabulary logits plus CE bookkeeping.

    The decode sequence is BOS + caption + EOS; input at step t is the
    embedding of the previous target token, the initial hidden state is the
    code, the initial cell state zeros. Returns (step_logits, targets, mask)
    where step_logits is a list of [batch x vocab] nodes, targets is
    [batch x steps] (caption tokens then EOS) and mask marks real positions.
    """
    target_ids = np.asarray(target_ids, dtype=np.intp)
    lengths = np.asarray(target_lengths, dtype=np.intp)
    batch = target_ids.shape[0]
    if code.shape != (batch, dec.cell.hidden):
        raise ShapeMismatchError("lstm_decode_teacher", code.shape, (batch, dec.cell.hidden))
    steps = int(lengths.max()) + 1  # content tokens plus EOS
    inputs = np.full((batch, steps), bos_id, dtype=np.intp)
    targets = np.full((batch, steps), 0, dtype=np.intp)
    mask = np.zeros((batch, steps), dtype=np.float64)
    for b in range(batch):
        n = lengths[b]
        inputs[b, 1 : n + 1] = target_ids[b, :n]
        targets[b, :n] = target_ids[b, :n]
        targets[b, n] = eos_id
        mask[b, : n + 1] = 1.0
    h = code
    c = tape.constant(np.zeros((batch, dec.cell.hidden)))
    w_proj = tape.param(f"{dec.proj_prefix}.w", store[f"{dec.proj_prefix}.w"])
    b_proj = tape.param(f"{dec.proj_prefix}.b", store[f"{dec.proj_prefix}.b"])
    step_logits = []
    for t in range(steps):
        x_t = embed(tape, store, dec.table, inputs[:, t])
        h, c = lstm_step(tape, store, dec.cell, x_t, h, c)
        step_logits.append(ad.add_bias(tape, ad.matmul(tape, h, w_proj), b_proj))
    return step_logits, targets, mask


def lstm_decode_sample(store, dec, codes, temperature, max_len, rng, bos_id, eos_id, pad_id):
    """Free-running decode from BOS, sampling each token from
    softmax(logits / temperature); stops per sample at EOS or after max_len
    tokens. Returns a list of id lists without BOS/EOS/PAD.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    codes = np.asarray(codes, dtype=np.float64)
    n = codes.shape[0]
    tape = Tape()
    h = tape.constant(codes)
    c = tape.constant(np.zeros((n, dec.cell.hidden)))
    w_proj = tape.param(f"{dec.proj_prefix}.w", store[f"{dec.proj_prefix}.w"])
    b_proj = tape.param(f"{dec.proj_prefix}.b", store[f"{dec.proj_prefix}.b"])
    prev = np.full(n, bos_id, dtype=np.intp)
    done = np.zeros(n, dtype=bool)
    out = [[] for _ in range(n)]
    for _ in range(max_len):
        x_t = embed(tape, store, dec.table, prev)
        h, c = lstm_step(tape, store, dec.cell, x_t, h, c)
        logits = ad.add_bias(tape, ad.matmul(tape, h, w_proj), b_proj).value
        probs = ad.stable_softmax(logits / temperature)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(n)
        picks = np.minimum((cdf < u[:, None]).sum(axis=1), logits.shape[1] - 1)
        for i in range(n):
            if done[i]:
                continue
            tok = int(picks[i])
            if tok == eos_id:
                done[i] = True
            elif tok != pad_id and tok != bos_id:
                out[i].append(tok)
        if done.all():
            break
        prev = picks
    return out


def mlp_forward(tape, store, p, x):
    """Affine -> relu chain with a final affine and no output activation."""
    n_layers = len(p.dims) - 1
    out = x
    for i in range(n_layers):
        w = tape.param(f"{p.prefix}.fc{i}.w", store[f"{p.prefix}.fc{i}.w"])
        b = tape.param(f"{p.prefix}.fc{i}.b", store[f"{p.prefix}.fc{i}.b"])
        out = ad.add_bias(tape, ad.matmul(tape, out, w), b)
        if i < n_layers - 1:
            out = ad.relu(tape, out)
    return out
