"""Recurrent next-token model over the expression-token vocabulary.

From-scratch float64 implementation: training by masked cross-entropy with
exact analytic gradients (checked against finite differences in the test
suite), per-step logit emission for search integration, sampling, and a
portable binary weight format.

No EOS token: a sampled sequence ends when the arity bookkeeping says the
expression is complete.  Logit index i always means library token i.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .expr_core import Traversal, is_complete
from .recurrent import GRUCell, MomentumSGD, log_softmax, softmax

MAGIC = b"MLM1"
FORMAT_VERSION = 1


class MLMError(Exception):
    pass


class EmptyCorpus(MLMError):
    pass


class FormatVersion(MLMError):
    pass


class VocabAlignmentError(MLMError):
    pass


class MLMModel:
    """Embedding -> gated recurrent cell -> linear projection to V logits.

    The BOS marker lives at embedding row V; it is an input-only symbol and
    never appears in the output distribution.
    """

    def __init__(self, vocab_names, d_emb, hidden, rng):
        if d_emb < 1 or hidden < 1:
            raise ValueError("d_emb and hidden must be >= 1")
        self.vocab_names = list(vocab_names)
        self.d_emb = d_emb
        self.hidden = hidden
        V = len(self.vocab_names)
        self.E = rng.uniform(-0.5 / np.sqrt(d_emb), 0.5 / np.sqrt(d_emb),
                             (V + 1, d_emb))
        self.cell = GRUCell(d_emb, hidden, rng)
        self.W_out = np.zeros((hidden, V))
        self.b_out = np.zeros(V)

    @property
    def V(self):
        return len(self.vocab_names)

    @property
    def bos(self):
        return self.V

    def params(self):
        out = {"E": self.E, "W_out": self.W_out, "b_out": self.b_out}
        for name, p in self.cell.params().items():
            out["cell." + name] = p
        return out

    def zero_grads(self):
        return {name: np.zeros_like(p) for name, p in self.params().items()}

    def initial_state(self, batch=1):
        return np.zeros((batch, self.hidden))

    def step_batch(self, token_indices, state):
        x = self.E[np.asarray(token_indices)]
        h, _ = self.cell.forward(x, state)
        logits = h @ self.W_out + self.b_out
        return logits, h

    def equal(self, other):
        if self.vocab_names != other.vocab_names:
            return False
        a, b = self.params(), other.params()
        return all(np.array_equal(a[k], b[k]) for k in a)


def init(vocab, d_emb, hidden, seed):
    """Deterministic model init; zero output layer => uniform first-step
    distribution."""
    names = [t.name for t in vocab]
    rng = np.random.default_rng(seed)
    return MLMModel(names, d_emb, hidden, rng)


def step(model, token_index, state):
    """One recurrence step for a single sequence; returns (logits, new state)."""
    if token_index < 0 or token_index > model.V:
        raise IndexError(f"token index {token_index} out of range")
    if state.ndim == 1:
        state = state[None, :]
    logits, h = model.step_batch([token_index], state)
    return logits[0], h


def score(model, traversal):
    """Total log-probability of a token sequence, stepping from BOS."""
    state = model.initial_state(1)
    prev = model.bos
    total = 0.0
    for idx in traversal:
        logits, state = model.step_batch([prev], state)
        total += log_softmax(logits[0])[idx]
        prev = idx
    return float(total)


def _pad_batch(seqs, bos):
    B = len(seqs)
    T = max(len(s) for s in seqs)
    inputs = np.full((T, B), bos, dtype=np.int64)
    targets = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    for b, s in enumerate(seqs):
        for t, idx in enumerate(s):
            if t > 0:
                inputs[t, b] = s[t - 1]
            targets[t, b] = idx
            mask[t, b] = 1.0
    return inputs, targets, mask


def loss_and_gradients(model, seqs):
    """Masked mean per-token cross-entropy and its exact gradients."""
    if not seqs:
        raise EmptyCorpus("empty batch")
    inputs, targets, mask = _pad_batch(seqs, model.bos)
    T, B = inputs.shape
    n_tokens = mask.sum()
    state = model.initial_state(B)
    caches, hs, probs = [], [], []
    loss = 0.0
    for t in range(T):
        x = model.E[inputs[t]]
        h, cache = model.cell.forward(x, state)
        logits = h @ model.W_out + model.b_out
        logp = log_softmax(logits)
        p = softmax(logits)
        loss -= (logp[np.arange(B), targets[t]] * mask[t]).sum()
        caches.append(cache)
        hs.append(h)
        probs.append(p)
        state = h
    loss /= n_tokens

    grads = model.zero_grads()
    cell_grads = {k[len("cell."):]: v for k, v in grads.items()
                  if k.startswith("cell.")}
    dh_next = np.zeros((B, model.hidden))
    for t in range(T - 1, -1, -1):
        dlogits = probs[t].copy()
        dlogits[np.arange(B), targets[t]] -= 1.0
        dlogits *= mask[t][:, None] / n_tokens
        grads["W_out"] += hs[t].T @ dlogits
        grads["b_out"] += dlogits.sum(axis=0)
        dh = dlogits @ model.W_out.T + dh_next
        dx, dh_next = model.cell.backward(dh, caches[t], cell_grads)
        np.add.at(grads["E"], inputs[t], dx)
    return float(loss), grads


def gradients(model, seqs):
    return loss_and_gradients(model, seqs)[1]


def corpus_loss(model, seqs, batch=256):
    total, n = 0.0, 0
    for i in range(0, len(seqs), batch):
        chunk = seqs[i:i + batch]
        tokens = sum(len(s) for s in chunk)
        loss, _ = loss_and_gradients(model, chunk)
        total += loss * tokens
        n += tokens
    return total / n


def train(model, seqs, epochs, lr, batch=64, seed=0, momentum=0.9):
    """Full-sequence BPTT with momentum SGD; deterministic given seed.

    Returns per-epoch mean per-token cross-entropy, with the pre-update
    corpus loss prepended as a step-0 baseline.
    """
    seqs = [list(s) for s in seqs]
    if not seqs:
        raise EmptyCorpus("corpus is empty")
    rng = np.random.default_rng(seed)
    opt = MomentumSGD(lr, momentum)
    params = model.params()
    history = [corpus_loss(model, seqs)]
    order = np.arange(len(seqs))
    for _ in range(epochs):
        rng.shuffle(order)
        epoch_loss, epoch_tokens = 0.0, 0
        for i in range(0, len(order), batch):
            chunk = [seqs[j] for j in order[i:i + batch]]
            loss, grads = loss_and_gradients(model, chunk)
            opt.update(params, grads)
            tokens = sum(len(s) for s in chunk)
            epoch_loss += loss * tokens
            epoch_tokens += tokens
        history.append(epoch_loss / epoch_tokens)
    return history


def sample(model, lib, max_len, rng):
    """Autoregressive draw until arity-completion or max_len.

    Returns (Traversal, complete flag).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = model.initial_state(1)
    prev = model.bos
    seq = []
    for _ in range(max_len):
        logits, state = model.step_batch([prev], state)
        p = softmax(logits[0])
        idx = int(np.searchsorted(np.cumsum(p), rng.random()))
        idx = min(idx, model.V - 1)
        seq.append(idx)
        prev = idx
        if is_complete(Traversal(seq), lib):
            return Traversal(seq), True
    return Traversal(seq), False


_ARRAY_ORDER = ("E", "cell.Wz", "cell.Uz", "cell.bz", "cell.Wr", "cell.Ur",
                "cell.br", "cell.Wh", "cell.Uh", "cell.bh", "W_out", "b_out")


def save(model, path):
    header = json.dumps({"version": FORMAT_VERSION,
                         "vocab": model.vocab_names,
                         "d_emb": model.d_emb,
                         "H": model.hidden}).encode("utf-8")
    params = model.params()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name in _ARRAY_ORDER:
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            f.write(arr.tobytes())


def load(path, lib=None):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatVersion(f"bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise FormatVersion(f"unsupported version {header.get('version')}")
        vocab = header["vocab"]
        if lib is not None:
            lib_names = [t.name for t in lib]
            if lib_names != vocab:
                raise VocabAlignmentError(
                    f"weight vocabulary {vocab} does not match library {lib_names}")
        model = MLMModel(vocab, header["d_emb"], header["H"],
                         np.random.default_rng(0))
        params = model.params()
        for name in _ARRAY_ORDER:
            arr = params[name]
            data = f.read(arr.size * 8)
            if len(data) != arr.size * 8:
                raise FormatVersion("truncated weight file")
            arr[...] = np.frombuffer(data, dtype="<f8").reshape(arr.shape)
    return model
