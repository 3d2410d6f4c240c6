"""CTC branch: loss, forced alignment, and boundary extraction.

All trellis math runs in the log domain over the blank-augmented label
sequence [blank, y_1, blank, ..., y_U, blank]. The sum-product recursion
(loss) and the max-product recursion (forced alignment) share the same
topology. Unreachable cells hold LOG_ZERO, a large finite negative number
rather than -inf, so that log-sum-exp stays differentiable everywhere.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch

from .numerics import DTYPE

BLANK = 0

# exp(LOG_ZERO - anything representable) underflows to exactly 0.0, so dead
# trellis cells get zero softmax weight and contribute no gradient.
LOG_ZERO = -1.0e30


class InfeasibleAlignmentError(ValueError):
    """Raised when no CTC path of length T can produce the label sequence."""


def extend_with_blanks(labels: Sequence[int]) -> List[int]:
    """Blank-augmented label sequence, blanks at even positions (0-based)."""
    out = [BLANK]
    for y in labels:
        out.append(int(y))
        out.append(BLANK)
    return out


def min_path_length(labels: Sequence[int]) -> int:
    """Shortest path length: one frame per token plus a separating blank
    between each pair of equal adjacent tokens."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate(log_post: torch.Tensor, labels: Sequence[int]) -> None:
    n_frames, vocab = log_post.shape
    if n_frames < 1:
        raise ValueError("need at least one frame")
    for y in labels:
        if not 1 <= int(y) < vocab:
            raise ValueError(f"label {y} outside vocabulary [1, {vocab - 1}]")
    need = min_path_length(labels)
    if n_frames < need:
        raise InfeasibleAlignmentError(
            f"labels need at least {need} frames, got {n_frames}"
        )


def _skip_mask(ext: List[int]) -> torch.Tensor:
    """Which states may be entered from two states back: non-blank states
    whose token differs from the one two positions earlier."""
    n_states = len(ext)
    mask = torch.zeros(n_states, dtype=torch.bool)
    for s in range(2, n_states):
        mask[s] = ext[s] != BLANK and ext[s] != ext[s - 2]
    return mask


@dataclass
class CtcLattice:
    """Forward/backward trellis of one utterance.

    log_alpha[t, s]: log-prob of emitting frames 0..t and sitting in state s.
    log_beta[t, s]: log-prob of emitting frames t..T-1 given the path enters
    state s at time t. Both are detached diagnostics; gradients flow through
    the loss value returned alongside.
    """

    log_alpha: torch.Tensor
    log_beta: torch.Tensor
    extended_labels: List[int]

    def total_from_alpha(self) -> torch.Tensor:
        final = self.log_alpha[-1, -1:] if self.log_alpha.size(1) == 1 else self.log_alpha[-1, -2:]
        return torch.logsumexp(final, dim=0)

    def total_from_beta(self) -> torch.Tensor:
        first = self.log_beta[0, :1] if self.log_beta.size(1) == 1 else self.log_beta[0, :2]
        return torch.logsumexp(first, dim=0)


def ctc_loss(log_post: torch.Tensor, labels: Sequence[int]) -> Tuple[torch.Tensor, CtcLattice]:
    """Negative log-likelihood of the labels under all collapsing paths.

    Args:
        log_post: [T, V] frame log-posteriors, blank at index 0.
        labels: token ids in [1, V-1].
    Returns:
        (loss, lattice); loss is differentiable w.r.t. log_post.
    """
    _validate(log_post, labels)
    ext = extend_with_blanks(labels)
    n_frames = log_post.size(0)
    n_states = len(ext)
    ext_t = torch.tensor(ext, dtype=torch.long)
    skip_ok = _skip_mask(ext)
    emit = log_post[:, ext_t]  # [T, S] log p_t(z_s)
    dead = torch.full((1,), LOG_ZERO, dtype=log_post.dtype)

    row = torch.full((n_states,), LOG_ZERO, dtype=log_post.dtype)
    row = torch.cat([emit[0, :1], row[1:]])
    if n_states > 1:
        row = torch.cat([row[:1], emit[0, 1:2], row[2:]])
    rows = [row]
    for t in range(1, n_frames):
        prev = rows[-1]
        stay = prev
        step1 = torch.cat([dead, prev[:-1]])
        step2 = torch.cat([dead, dead, prev[:-2]]) if n_states >= 2 else stay
        step2 = torch.where(skip_ok, step2, torch.full_like(step2, LOG_ZERO))
        merged = torch.logsumexp(torch.stack([stay, step1, step2]), dim=0)
        rows.append(emit[t] + merged)
    log_alpha = torch.stack(rows)

    final = log_alpha[-1, -1:] if n_states == 1 else log_alpha[-1, -2:]
    loss = -torch.logsumexp(final, dim=0)

    with torch.no_grad():
        brow = torch.full((n_states,), LOG_ZERO, dtype=log_post.dtype)
        brow[-1] = emit[-1, -1]
        if n_states > 1:
            brow[-2] = emit[-1, -2]
        brows = [brow]
        for t in range(n_frames - 2, -1, -1):
            nxt = brows[-1]
            stay = nxt
            step1 = torch.cat([nxt[1:], dead])
            step2 = torch.cat([nxt[2:], dead, dead]) if n_states >= 2 else stay
            # entering s+2 is legal iff s+2 accepts a skip
            skip_from = torch.cat([skip_ok[2:], torch.zeros(2, dtype=torch.bool)])
            step2 = torch.where(skip_from, step2, torch.full_like(step2, LOG_ZERO))
            merged = torch.logsumexp(torch.stack([stay, step1, step2]), dim=0)
            brows.append(emit[t] + merged)
        log_beta = torch.stack(brows[::-1])

    lattice = CtcLattice(log_alpha.detach(), log_beta, ext)
    return loss, lattice


def ctc_forced_align(log_post: torch.Tensor, labels: Sequence[int]) -> List[int]:
    """Most probable frame labeling consistent with the labels (Viterbi).

    Ties prefer staying in the current state over advancing, and advancing by
    one over skipping, which places each token's run as far left as possible;
    a tie at the final frame prefers the trailing blank.

    Returns:
        Frame-label path of length T (token ids, blanks included).
    """
    _validate(log_post, labels)
    ext = extend_with_blanks(labels)
    n_frames = log_post.size(0)
    n_states = len(ext)
    skip_ok = _skip_mask(ext)

    with torch.no_grad():
        emit = log_post[:, torch.tensor(ext, dtype=torch.long)]
        score = torch.full((n_states,), LOG_ZERO, dtype=log_post.dtype)
        score[0] = emit[0, 0]
        if n_states > 1:
            score[1] = emit[0, 1]
        back = torch.zeros(n_frames, n_states, dtype=torch.long)
        for t in range(1, n_frames):
            best = score.clone()  # stay
            choice = torch.zeros(n_states, dtype=torch.long)
            step1 = torch.cat([torch.full((1,), LOG_ZERO, dtype=score.dtype), score[:-1]])
            better = step1 > best
            best = torch.where(better, step1, best)
            choice = torch.where(better, torch.ones_like(choice), choice)
            step2 = torch.cat([torch.full((2,), LOG_ZERO, dtype=score.dtype), score[:-2]])
            step2 = torch.where(skip_ok, step2, torch.full_like(step2, LOG_ZERO))
            better = step2 > best
            best = torch.where(better, step2, best)
            choice = torch.where(better, torch.full_like(choice, 2), choice)
            score = emit[t] + best
            back[t] = choice

        if n_states == 1 or score[-1] >= score[-2]:
            s = n_states - 1
        else:
            s = n_states - 2
        states = [s]
        for t in range(n_frames - 1, 0, -1):
            s = s - int(back[t, s].item())
            states.append(s)
        states.reverse()
    return [ext[s] for s in states]


def extract_boundaries(path: Sequence[int], n_frames: int) -> List[int]:
    """Per-token boundaries from a forced-alignment path, 1-based.

    Each token's boundary is the leftmost frame of its run (a run breaks at
    any label change, so equal tokens separated by a blank count twice). An
    end-of-sentence boundary at the final frame is appended.
    """
    if len(path) != n_frames:
        raise ValueError(f"path length {len(path)} != frame count {n_frames}")
    starts = []
    prev = None
    for t, lab in enumerate(path):
        if lab != BLANK and lab != prev:
            starts.append(t + 1)
        prev = lab
    starts.append(n_frames)
    return starts


def ctc_greedy_spikes(log_post: torch.Tensor) -> List[Tuple[int, int]]:
    """(1-based frame, token) pairs where the frame argmax is not blank."""
    ids = log_post.argmax(dim=1)
    return [(t + 1, int(v)) for t, v in enumerate(ids) if int(v) != BLANK]
