"""Monotonic attention with chunkwise weighting.

The decoder selects a boundary frame per output token by scanning encoder
memories left to right. During training the selection is marginalized over
all monotone scan outcomes (``expected_alignment``); soft chunk weights are
then spread over the ``w`` frames ending at each candidate boundary
(``chunkwise_attention``). At inference the scan is hard: the first frame
whose selection probability exceeds 0.5 becomes the boundary and attention
is a softmax over the trailing chunk window (``streaming_attend``).
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import DTYPE, PROB_EPS, clamp_prob, exclusive_cumprod


class MonotonicEnergy(nn.Module):
    """Selection energy e_{i,j} between decoder state s_i and memory h_j.

    e = g * (v/||v||) . relu(W_h h_j + W_s s_i + b) + r, with a learned
    scalar gain g and scalar offset r. The offset starts negative so that
    early in training the sigmoid selection probabilities are close to zero
    and alignment mass leaks out slowly.
    """

    def __init__(self, enc_dim: int, dec_dim: int, att_dim: int, init_r: float = -4.0):
        super().__init__()
        self.w_h = nn.Linear(enc_dim, att_dim, bias=False, dtype=DTYPE)
        self.w_s = nn.Linear(dec_dim, att_dim, bias=False, dtype=DTYPE)
        self.b = nn.Parameter(torch.zeros(att_dim, dtype=DTYPE))
        bound = att_dim ** -0.5
        self.v = nn.Parameter(torch.empty(att_dim, dtype=DTYPE).uniform_(-bound, bound))
        self.g = nn.Parameter(torch.tensor(att_dim ** -0.5, dtype=DTYPE))
        self.r = nn.Parameter(torch.tensor(float(init_r), dtype=DTYPE))

    def project_memory(self, h: torch.Tensor) -> torch.Tensor:
        """Precompute W_h h for all frames. h: [T, enc_dim] -> [T, att_dim]."""
        return self.w_h(h)

    def forward(self, h_proj: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """Energies for one decoder state. h_proj: [T, att_dim], s: [dec_dim] -> [T]."""
        v_norm = self.v.norm()
        if v_norm.item() == 0.0:
            raise ValueError("monotonic energy direction vector has zero norm")
        pre = F.relu(h_proj + self.w_s(s) + self.b)
        return self.g * (pre @ (self.v / v_norm)) + self.r


class ChunkEnergy(nn.Module):
    """Chunk energy u_{i,j}: same form as MonotonicEnergy minus gain, offset
    and the normalization of v."""

    def __init__(self, enc_dim: int, dec_dim: int, att_dim: int):
        super().__init__()
        self.w_h = nn.Linear(enc_dim, att_dim, bias=False, dtype=DTYPE)
        self.w_s = nn.Linear(dec_dim, att_dim, bias=False, dtype=DTYPE)
        self.b = nn.Parameter(torch.zeros(att_dim, dtype=DTYPE))
        bound = att_dim ** -0.5
        self.v = nn.Parameter(torch.empty(att_dim, dtype=DTYPE).uniform_(-bound, bound))

    def project_memory(self, h: torch.Tensor) -> torch.Tensor:
        return self.w_h(h)

    def forward(self, h_proj: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        pre = F.relu(h_proj + self.w_s(s) + self.b)
        return pre @ self.v


def expected_alignment_step(alpha_prev: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """One row of the alignment recurrence.

    alpha[j] = p[j] * sum_{k<=j} alpha_prev[k] * prod_{l=k..j-1} (1 - p[l]),
    evaluated in the cumulative form
    alpha = p * cp * cumsum(alpha_prev / cp), cp[j] = prod_{l<j} (1 - p[l]).
    The division is safe because cp is clamped away from zero; where the
    clamp bites, the surviving alignment mass is itself negligible.

    Args:
        alpha_prev: [..., T] previous row (one-hot at frame 1 for the first).
        p: [..., T] selection probabilities.
    """
    p = clamp_prob(p)
    cp = exclusive_cumprod(1.0 - p, dim=-1)
    denom = cp.clamp_min(PROB_EPS)
    return p * cp * torch.cumsum(alpha_prev / denom, dim=-1)


def initial_alignment(n_frames: int) -> torch.Tensor:
    """One-hot row at frame 1: the scan for the first token starts there."""
    alpha0 = torch.zeros(n_frames, dtype=DTYPE)
    alpha0[0] = 1.0
    return alpha0


def expected_alignment(p: torch.Tensor) -> torch.Tensor:
    """Marginalized alignments for a whole [U, T] probability matrix."""
    n_rows, n_frames = p.shape
    alpha_prev = initial_alignment(n_frames)
    rows = []
    for i in range(n_rows):
        alpha_prev = expected_alignment_step(alpha_prev, p[i])
        rows.append(alpha_prev)
    return torch.stack(rows)


def chunkwise_attention_step(alpha: torch.Tensor, u: torch.Tensor, w: int) -> torch.Tensor:
    """Chunk weights for one output step.

    beta[j] = sum_{k=j}^{j+w-1} alpha[k] * exp(u[j]) / sum_{l=k-w+1}^{k} exp(u[l]),
    windows truncated at the sequence edges. Computed by framing u into the
    [T, w] matrix of trailing windows, taking a softmax per window (max
    subtracted for stability) and scattering alpha-weighted rows back onto
    frames. Each window softmax sums to one, so beta redistributes exactly
    the alignment mass.

    Args:
        alpha: [T] alignment row.
        u: [T] chunk energies.
        w: window size >= 1.
    """
    if w < 1:
        raise ValueError(f"chunk size must be >= 1, got {w}")
    n_frames = u.size(0)
    pad = torch.full((w - 1,), -float("inf"), dtype=u.dtype)
    frames = torch.cat([pad, u]).unfold(0, w, 1)  # [T, w]; frames[k, r] = u[k-w+1+r]
    m = frames.max(dim=1, keepdim=True).values.detach()
    ex = torch.exp(frames - m)
    softmaxed = ex / ex.sum(dim=1, keepdim=True)
    weighted = alpha.unsqueeze(1) * softmaxed  # [T, w]
    beta = torch.zeros(n_frames, dtype=u.dtype)
    for r in range(w):
        shift = w - 1 - r  # weighted[k, r] belongs to frame k - shift
        if shift >= n_frames:
            continue
        col = weighted[shift:, r]
        beta = beta + F.pad(col, (0, shift))
    return beta


def chunkwise_attention(alpha: torch.Tensor, u: torch.Tensor, w: int) -> torch.Tensor:
    """Row-wise chunk weights for [U, T] alpha and u."""
    rows = [chunkwise_attention_step(alpha[i], u[i], w) for i in range(alpha.size(0))]
    return torch.stack(rows)


def expected_boundary(alpha: torch.Tensor) -> torch.Tensor:
    """Expected 1-based boundary position sum_j j * alpha[..., j].

    Deliberately not renormalized: when alignment mass leaks, the expectation
    shrinks with it, which is what the quantity and sync terms push against.
    """
    n_frames = alpha.size(-1)
    positions = torch.arange(1, n_frames + 1, dtype=alpha.dtype)
    return alpha @ positions


@dataclass
class EnergyCounter:
    """Tallies energy evaluations during a streaming decode."""
    monotonic: int = 0
    chunk: int = 0


def streaming_attend(
    mono: MonotonicEnergy,
    chunk: ChunkEnergy,
    memories: torch.Tensor,
    mono_proj: torch.Tensor,
    chunk_proj: torch.Tensor,
    s: torch.Tensor,
    prev_boundary: int,
    w: int,
    counter: Optional[EnergyCounter] = None,
) -> Tuple[Optional[int], Optional[torch.Tensor]]:
    """Hard attention step for streaming decode.

    Scans frames j = prev_boundary, prev_boundary + 1, ... (1-based), one
    monotonic energy at a time, and triggers at the first selection
    probability above 0.5. On a trigger, returns the boundary and the
    context vector from a softmax over chunk energies of the window
    [j - w + 1, j] (truncated at frame 1). Returns (None, None) when the
    scan exhausts the available frames without triggering.
    """
    n_frames = memories.size(0)
    for j in range(prev_boundary, n_frames + 1):
        e_j = mono(mono_proj[j - 1 : j], s)
        if counter is not None:
            counter.monotonic += 1
        if torch.sigmoid(e_j)[0].item() > 0.5:
            lo = max(j - w, 0)
            u = chunk(chunk_proj[lo:j], s)
            if counter is not None:
                counter.chunk += j - lo
            weights = torch.softmax(u, dim=0)
            context = weights @ memories[lo:j]
            return j, context
    return None, None
