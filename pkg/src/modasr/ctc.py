"""CTC loss (log-space forward-backward), greedy decoding and character error rate.

The blank symbol always sits at the last index of a head's output axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import Tensor, custom_op, reshape

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """A transcript needs more frames than the utterance provides."""


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per symbol plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = np.maximum(a, b)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = safe + np.log(np.exp(a - safe) + np.exp(b - safe))
    return np.where(np.isfinite(m), out, NEG_INF)


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))
    return np.where(np.isfinite(m), out, NEG_INF)


def _ctc_batch(lp: np.ndarray, targets: Sequence[Sequence[int]], lengths: Sequence[int]):
    """Per-utterance negative log-likelihoods and their gradients w.r.t. ``lp``.

    lp: [B, T, V+1] log-probabilities, blank = V.
    """
    B, Tmax, C = lp.shape
    blank = C - 1
    S = max(3, max(2 * len(y) + 1 for y in targets))
    labels = np.full((B, S), blank, dtype=np.int64)
    n_states = np.empty(B, dtype=np.int64)
    for b, y in enumerate(targets):
        n_states[b] = 2 * len(y) + 1
        if len(y):
            labels[b, 1 : 2 * len(y) : 2] = y
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (labels[:, 2:] != blank) & (labels[:, 2:] != labels[:, :-2])
    valid = np.arange(S)[None, :] < n_states[:, None]
    lengths = np.asarray(lengths, dtype=np.int64)

    # emission log-probs per state: [B, T, S]
    emit = np.take_along_axis(lp, np.broadcast_to(labels[:, None, :], (B, Tmax, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((B, Tmax, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = np.where(n_states > 1, emit[:, 0, 1], NEG_INF)
    shifted1 = np.full((B, S), NEG_INF)
    shifted2 = np.full((B, S), NEG_INF)
    for t in range(1, Tmax):
        prev = alpha[:, t - 1]
        shifted1[:, 1:] = prev[:, :-1]
        shifted2[:, 2:] = np.where(skip[:, 2:], prev[:, :-2], NEG_INF)
        alpha[:, t] = _lse3(prev, shifted1, shifted2) + emit[:, t]

    beta = np.full((B, Tmax, S), NEG_INF)
    last = lengths - 1
    bidx = np.arange(B)
    for t in range(Tmax - 1, -1, -1):
        if t + 1 < Tmax:
            nxt = beta[:, t + 1]
            s1 = np.full((B, S), NEG_INF)
            s2 = np.full((B, S), NEG_INF)
            s1[:, :-1] = nxt[:, 1:]
            s2[:, :-2] = np.where(skip[:, 2:], nxt[:, 2:], NEG_INF)
            beta[:, t] = _lse3(nxt, s1, s2) + emit[:, t]
        ending = last == t
        if np.any(ending):
            init = np.full((int(ending.sum()), S), NEG_INF)
            eb = bidx[ending]
            init[np.arange(len(eb)), n_states[eb] - 1] = emit[eb, t, n_states[eb] - 1]
            has2 = n_states[eb] > 1
            init[np.arange(len(eb))[has2], n_states[eb][has2] - 2] = emit[eb[has2], t, n_states[eb][has2] - 2]
            beta[eb, t] = init
        beta[lengths <= t, t] = NEG_INF

    a_end = alpha[bidx, last]
    ll = _lse2(a_end[bidx, n_states - 1], np.where(n_states > 1, a_end[bidx, np.maximum(n_states - 2, 0)], NEG_INF))

    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - emit - ll[:, None, None])
    occ = np.where(np.isfinite(occ), occ, 0.0)
    frame_mask = np.arange(Tmax)[None, :] < lengths[:, None]
    occ *= frame_mask[:, :, None]
    onehot = np.zeros((B, S, C))
    onehot[bidx[:, None], np.arange(S)[None, :], labels] = valid.astype(np.float64)
    grad = -np.einsum("bts,bsc->btc", occ, onehot)
    return -ll, grad


def _check_feasible(targets, lengths, n_classes):
    for i, (y, n) in enumerate(zip(targets, lengths)):
        need = min_frames(y)
        if need > n:
            raise InfeasibleTargetError(
                f"utterance {i}: target of length {len(y)} needs {need} frames but only {n} available"
            )
        if any(s < 0 or s >= n_classes - 1 for s in y):
            raise ValueError(f"utterance {i}: symbol id outside head vocabulary of size {n_classes - 1}")


def ctc_loss_batch(logprobs: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int] | None = None) -> Tensor:
    """Mean over the batch of per-utterance CTC negative log-likelihoods.

    logprobs: [B, T, V+1]; frames past ``lengths[b]`` are ignored.
    """
    lp = logprobs.data
    B, Tmax, C = lp.shape
    if lengths is None:
        lengths = [Tmax] * B
    if len(targets) != B or len(lengths) != B:
        raise ValueError("targets/lengths must match the batch size")
    _check_feasible(targets, lengths, C)
    if np.isnan(lp).any():
        # let the caller report divergence rather than blame the targets
        return custom_op(np.array(np.nan), (logprobs,), lambda g: (np.full(lp.shape, np.nan),), "ctc")
    nll, grad = _ctc_batch(lp, targets, lengths)
    if not np.all(np.isfinite(nll)):
        raise InfeasibleTargetError("CTC alignment set has zero probability")
    inv_b = 1.0 / B

    def backward(g):
        return (grad * (float(g) * inv_b),)

    return custom_op(np.array(nll.mean()), (logprobs,), backward, "ctc")


def ctc_loss(logprobs: Tensor, target: Sequence[int]) -> Tensor:
    """CTC loss of a single utterance; logprobs is [frames, V+1]."""
    if logprobs.data.ndim != 2:
        raise ValueError("ctc_loss expects [frames, vocab+1] log-probabilities")
    return ctc_loss_batch(reshape(logprobs, (1,) + logprobs.shape), [list(target)])


def collapse(path: Sequence[int], blank: int) -> list[int]:
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force(probs: np.ndarray, target: Sequence[int]) -> float:
    """-log of the summed probability of every path collapsing to ``target``.

    Enumerates all (V+1)^frames paths, so only for tiny problems.
    """
    probs = np.asarray(probs, dtype=np.float64)
    frames, n_classes = probs.shape
    if frames > 8 or n_classes - 1 > 5:
        raise ValueError("brute force limited to frames <= 8 and vocab <= 5")
    blank = n_classes - 1
    target = [int(s) for s in target]
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=frames):
        if collapse(path, blank) == target:
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return -np.log(total) if total > 0 else np.inf


def greedy_decode(logprobs: np.ndarray, length: int | None = None) -> list[int]:
    """Per-frame argmax (lowest id on ties), collapse repeats, drop blanks."""
    lp = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    if length is not None:
        lp = lp[:length]
    return collapse(np.argmax(lp, axis=-1).tolist(), lp.shape[-1] - 1)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class CerReport:
    distance: int
    ref_length: int

    @property
    def cer(self) -> float:
        if self.ref_length == 0:
            return 0.0 if self.distance == 0 else float("inf")
        return self.distance / self.ref_length


def cer(hyp: Sequence, ref: Sequence) -> CerReport:
    return CerReport(edit_distance(hyp, ref), len(ref))


def corpus_cer(pairs) -> CerReport:
    """Micro-averaged CER over (hyp, ref) pairs."""
    dist = n = 0
    for hyp, ref in pairs:
        dist += edit_distance(hyp, ref)
        n += len(ref)
    return CerReport(dist, n)
