"""Transducer decoder: LSTM predictor, joiner, exact loss and greedy decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

BLANK_ID = 0
DESK_SYMBOLS = tuple("abcdefghijklmnop")


@dataclass(frozen=True)
class Vocabulary:
    """Dense ids with blank at 0; ``symbols[i]`` names id ``i + 1``."""

    symbols: tuple = DESK_SYMBOLS

    @classmethod
    def placeholder(cls, size: int) -> "Vocabulary":
        return cls(tuple(f"wp{i}" for i in range(1, size)))

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    def encode(self, transcript) -> list[int]:
        tokens = transcript.split() if isinstance(transcript, str) else list(transcript)
        index = {s: i + 1 for i, s in enumerate(self.symbols)}
        try:
            return [index[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, ids) -> str:
        return " ".join(self.symbols[i - 1] for i in ids if i != BLANK_ID)


class Predictor(nn.Module):
    """Two-layer LSTM over label embeddings.

    Row 0 of the output is the start step, fed an all-zero input so no extra
    token id is reserved. The full-sequence path runs the same per-step cell
    as the incremental path, which keeps the two bit-identical.
    """

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int, num_layers: int = 2):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.embed = nn.Embedding(vocab_size, embed_dim)
        dims = [embed_dim] + [hidden] * (num_layers - 1)
        self.w_ih = nn.ParameterList([nn.Parameter(torch.empty(4 * hidden, d)) for d in dims])
        self.w_hh = nn.ParameterList(
            [nn.Parameter(torch.empty(4 * hidden, hidden)) for _ in dims]
        )
        self.bias = nn.ParameterList([nn.Parameter(torch.empty(4 * hidden)) for _ in dims])

    def initial_state(self, batch: int, dtype=None):
        dtype = dtype or self.embed.weight.dtype
        z = torch.zeros(batch, self.hidden, dtype=dtype, device=self.embed.weight.device)
        return [(z, z) for _ in self.w_ih]

    def _embed(self, labels):
        labels = torch.as_tensor(labels, dtype=torch.long, device=self.embed.weight.device)
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= self.vocab_size):
            raise ValueError("label id outside the vocabulary")
        return self.embed(labels)

    def step(self, label, state=None, batch: int = 1):
        """Advance one label. ``label=None`` runs the start step."""
        if state is None:
            state = self.initial_state(batch)
        if label is None:
            x = torch.zeros(batch, self.embed.embedding_dim, dtype=self.embed.weight.dtype)
        else:
            x = self._embed(torch.as_tensor(label).reshape(-1))
        new_state = []
        for (h, c), w_ih, w_hh, b in zip(state, self.w_ih, self.w_hh, self.bias):
            gates = x @ w_ih.T + h @ w_hh.T + b
            i, f, g, o = gates.chunk(4, dim=-1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            new_state.append((h, c))
            x = h
        return x, new_state

    def forward(self, labels, state=None):
        """``labels`` is ``(B, U)`` (or ``(U,)``); returns ``(B, U + 1, hidden)``."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        squeeze = labels.dim() == 1
        if squeeze:
            labels = labels[None]
        B, U = labels.shape
        out, state = self.step(None, state, batch=B)
        rows = [out]
        for u in range(U):
            out, state = self.step(labels[:, u], state, batch=B)
            rows.append(out)
        out = torch.stack(rows, dim=1)
        return (out[0] if squeeze else out), state


class Joiner(nn.Module):
    """``W2 tanh(W1 (P_e enc + P_p pred) + b1) + b2``."""

    def __init__(self, enc_dim: int, pred_dim: int, hidden: int, vocab_size: int):
        super().__init__()
        self.enc_proj = nn.Linear(enc_dim, hidden, bias=False)
        self.pred_proj = nn.Linear(pred_dim, hidden, bias=False)
        self.hidden = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, vocab_size)

    def forward(self, enc, pred):
        """Broadcasting join: ``enc (..., T, 1, d)`` with ``pred (..., 1, U+1, p)``."""
        return self.out(torch.tanh(self.hidden(self.enc_proj(enc) + self.pred_proj(pred))))

    def lattice(self, enc, pred):
        """Log-probabilities ``(B, T, U + 1, V)`` for batched ``enc`` and ``pred``."""
        return torch.log_softmax(self(enc[:, :, None, :], pred[:, None, :, :]), dim=-1)


# ---------------------------------------------------------------------------
# loss


def _as_batch(log_probs, labels, logit_lengths, label_lengths):
    lp = torch.as_tensor(log_probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if lp.dim() == 3:
        lp, labels = lp[None], labels.reshape(1, -1)
    B, T, U1, _ = lp.shape
    if logit_lengths is None:
        logit_lengths = torch.full((B,), T, dtype=torch.long)
    if label_lengths is None:
        label_lengths = torch.full((B,), labels.shape[1], dtype=torch.long)
    logit_lengths = torch.as_tensor(logit_lengths, dtype=torch.long)
    label_lengths = torch.as_tensor(label_lengths, dtype=torch.long)
    if labels.shape[1] + 1 != U1:
        raise ValueError(f"lattice has U+1={U1} but labels have length {labels.shape[1]}")
    if (logit_lengths < 1).any():
        raise ValueError("label too long: lattice has no frames")
    if (logit_lengths > T).any() or (label_lengths > labels.shape[1]).any():
        raise ValueError("lengths exceed the lattice")
    return lp, labels, logit_lengths, label_lengths


def _forward_backward(lp, labels, logit_lengths, label_lengths):
    """Return ``(losses, grads)`` in float64 for a batched lattice."""
    lp = lp.detach().to(torch.float64)
    B, T, U1, V = lp.shape
    U = U1 - 1
    neg_inf = torch.tensor(-math.inf, dtype=torch.float64)
    blank = lp[..., BLANK_ID]  # B, T, U+1
    emit = torch.gather(lp[:, :, :U, :], 3, labels[:, None, :, None].expand(B, T, U, 1))[..., 0]
    u_idx = torch.arange(U1)
    valid_u = u_idx[None, :] <= label_lengths[:, None]  # B, U+1
    emit = torch.where(u_idx[None, None, :U] < label_lengths[:, None, None], emit, neg_inf)
    # cumulative emission log-prob along u: cum[b, t, u] = sum_{k<u} emit[b, t, k]
    cum = torch.cat([torch.zeros(B, T, 1, dtype=torch.float64), torch.cumsum(emit, dim=2)], dim=2)
    cum_safe = torch.where(torch.isfinite(cum), cum, torch.zeros_like(cum))

    alpha = torch.full((B, T, U1), -math.inf, dtype=torch.float64)
    below = torch.full((B, U1), -math.inf, dtype=torch.float64)
    below[:, 0] = 0.0
    for t in range(T):
        if t > 0:
            below = alpha[:, t - 1] + blank[:, t - 1]
        row = cum_safe[:, t] + torch.logcumsumexp(below - cum_safe[:, t], dim=1)
        alpha[:, t] = torch.where(valid_u & torch.isfinite(cum[:, t]), row, neg_inf)

    bidx = torch.arange(B)
    last_t = logit_lengths - 1
    log_z = alpha[bidx, last_t, label_lengths] + blank[bidx, last_t, label_lengths]

    # beta[b, t, u]: log-prob of finishing from node (t, u), final blank included
    beta = torch.full((B, T, U1), -math.inf, dtype=torch.float64)
    after_blank = torch.full((B, T, U1), -math.inf, dtype=torch.float64)
    for t in range(T - 1, -1, -1):
        nxt = beta[:, t + 1] if t + 1 < T else torch.full((B, U1), -math.inf, dtype=torch.float64)
        ends = last_t == t
        final = torch.where(u_idx[None, :] == label_lengths[:, None], 0.0, -math.inf).to(torch.float64)
        nxt = torch.where(ends[:, None], final, nxt)
        after_blank[:, t] = nxt
        terms = nxt + blank[:, t] + cum_safe[:, t]
        rev = torch.flip(torch.logcumsumexp(torch.flip(terms, [1]), dim=1), [1])
        row = rev - cum_safe[:, t]
        live = valid_u & (t <= last_t)[:, None]
        beta[:, t] = torch.where(live, row, neg_inf)

    grads = torch.zeros_like(lp)
    shift = log_z[:, None, None]
    g_blank = -torch.exp(alpha + blank + after_blank - shift)
    grads[..., BLANK_ID] = torch.nan_to_num(g_blank, nan=0.0)
    if U:
        g_emit = -torch.exp(alpha[:, :, :U] + emit + beta[:, :, 1:] - shift)
        g_emit = torch.nan_to_num(g_emit, nan=0.0)
        grads[:, :, :U, :].scatter_add_(3, labels[:, None, :, None].expand(B, T, U, 1), g_emit[..., None])
    return -log_z, grads


class _TransducerLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, labels, logit_lengths, label_lengths):
        losses, grads = _forward_backward(log_probs, labels, logit_lengths, label_lengths)
        ctx.save_for_backward(grads)
        return losses.to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grads,) = ctx.saved_tensors
        return (grads * grad_out.to(torch.float64)[:, None, None, None]).to(grad_out.dtype), None, None, None


def transducer_loss(log_probs, labels, logit_lengths=None, label_lengths=None, reduction="mean"):
    """Differentiable negative log-likelihood for a batch of lattices.

    ``log_probs`` is ``(B, T, U + 1, V)`` and already log-softmaxed. The batch
    reduction is a mean over utterances.
    """
    lp, labels, logit_lengths, label_lengths = _as_batch(log_probs, labels, logit_lengths, label_lengths)
    losses = _TransducerLoss.apply(lp, labels, logit_lengths, label_lengths)
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    return losses


def rnnt_loss(lattice, labels) -> float:
    """``-log P(labels | lattice)`` for one ``T x (U + 1) x V`` lattice."""
    lp, lab, tl, ul = _as_batch(torch.as_tensor(np.asarray(lattice, dtype=np.float64)), labels, None, None)
    losses, _ = _forward_backward(lp, lab, tl, ul)
    return float(losses[0])


def rnnt_grad(lattice, labels) -> np.ndarray:
    """Gradient of :func:`rnnt_loss` with respect to every lattice entry."""
    lp, lab, tl, ul = _as_batch(torch.as_tensor(np.asarray(lattice, dtype=np.float64)), labels, None, None)
    _, grads = _forward_backward(lp, lab, tl, ul)
    return grads[0].numpy()


# ---------------------------------------------------------------------------
# decoding


@torch.no_grad()
def greedy_decode(encoded, predictor: Predictor, joiner: Joiner, max_symbols_per_frame: int = 10,
                  return_calls: bool = False):
    """Per-frame repeated argmax; emitting a label advances the predictor.

    At most ``max_symbols_per_frame`` labels are emitted per frame.
    """
    encoded = torch.as_tensor(encoded)
    pred_out, state = predictor.step(None, None)
    hyp, calls = [], 0
    for t in range(encoded.shape[0]):
        enc_t = encoded[t : t + 1]
        for _ in range(max_symbols_per_frame):
            calls += 1
            k = int(torch.argmax(joiner(enc_t, pred_out)[0]))
            if k == BLANK_ID:
                break
            hyp.append(k)
            pred_out, state = predictor.step(torch.tensor([k]), state)
    return (hyp, calls) if return_calls else hyp
