"""Frame-rate reduction and the chunked bidirectional encoder.

The encoder stacks bidirectional LSTM layers whose direction outputs are
summed. Offline mode runs both directions over the whole utterance. Chunked
mode walks the utterance in windows of n_c frames plus n_r lookahead: the
forward LSTM carries its state across chunk cores, the backward LSTM restarts
from zeros at every window, and only the core frames of each window are
emitted. With a single window covering everything the two modes coincide.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .numerics import DTYPE


def subsample(features: torch.Tensor, factor: int) -> torch.Tensor:
    """Stack-and-skip frame-rate reduction.

    Groups of ``factor`` consecutive frames are concatenated along the
    feature axis; a final partial group is zero-padded.

    Args:
        features: [T0, f].
    Returns:
        [ceil(T0 / factor), f * factor].
    """
    if factor < 1:
        raise ValueError(f"subsample factor must be >= 1, got {factor}")
    n_in, feat = features.shape
    n_out = (n_in + factor - 1) // factor
    padded = torch.zeros(n_out * factor, feat, dtype=features.dtype)
    padded[:n_in] = features
    return padded.reshape(n_out, factor * feat)


@dataclass(frozen=True)
class ChunkConfig:
    """Chunk sizes in raw input frames (before subsampling)."""

    n_c: int
    n_r: int = 0

    def __post_init__(self):
        if self.n_c < 1:
            raise ValueError(f"n_c must be >= 1, got {self.n_c}")
        if self.n_r < 0:
            raise ValueError(f"n_r must be >= 0, got {self.n_r}")

    def scaled(self, factor: int) -> Tuple[int, int]:
        """Post-subsampling (core, lookahead) sizes by integer division."""
        return max(self.n_c // factor, 1), self.n_r // factor


@dataclass
class EncoderOutput:
    memories: torch.Tensor  # [T, d]
    length: int


def lstm_forward(
    lstm: nn.LSTM, frames: torch.Tensor, state: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """Run a single-layer LSTM over [T, d] frames, returning [T, H] outputs
    and the final state for chunk continuation."""
    out, new_state = lstm(frames.unsqueeze(0), state)
    return out.squeeze(0), new_state


class Encoder(nn.Module):
    """Stacked summed-bidirectional LSTM over subsampled features."""

    def __init__(
        self,
        feat_dim: int,
        factor: int,
        hidden: int,
        num_layers: int = 1,
        dropout: float = 0.0,
    ):
        super().__init__()
        if factor < 1:
            raise ValueError(f"subsample factor must be >= 1, got {factor}")
        self.feat_dim = feat_dim
        self.factor = factor
        self.hidden = hidden
        self.fwd = nn.ModuleList()
        self.bwd = nn.ModuleList()
        in_dim = feat_dim * factor
        for _ in range(num_layers):
            self.fwd.append(nn.LSTM(in_dim, hidden, batch_first=True, dtype=DTYPE))
            self.bwd.append(nn.LSTM(in_dim, hidden, batch_first=True, dtype=DTYPE))
            in_dim = hidden
        self.drop = nn.Dropout(dropout)

    @property
    def num_layers(self) -> int:
        return len(self.fwd)

    def forward(self, features: torch.Tensor, chunk: Optional[ChunkConfig] = None) -> EncoderOutput:
        """Encode one utterance.

        Args:
            features: [T0, feat_dim] raw frames.
            chunk: None for the offline bidirectional pass.
        """
        x = subsample(features, self.factor)
        if chunk is None:
            memories = self._forward_offline(x)
        else:
            n_c, n_r = chunk.scaled(self.factor)
            memories = self._forward_chunked(x, n_c, n_r)
        return EncoderOutput(memories=memories, length=memories.size(0))

    def _forward_offline(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i in range(self.num_layers):
            f_out, _ = lstm_forward(self.fwd[i], h)
            b_out, _ = lstm_forward(self.bwd[i], h.flip(0))
            h = f_out + b_out.flip(0)
            if i < self.num_layers - 1:
                h = self.drop(h)
        return h

    def _forward_chunked(self, x: torch.Tensor, n_c: int, n_r: int) -> torch.Tensor:
        n_frames = x.size(0)
        carry: List[Optional[Tuple[torch.Tensor, torch.Tensor]]] = [None] * self.num_layers
        emitted = []
        for cs in range(0, n_frames, n_c):
            core_end = min(cs + n_c, n_frames)
            win_end = min(core_end + n_r, n_frames)
            h = x[cs:win_end]
            core_len = core_end - cs
            for i in range(self.num_layers):
                core_out, new_state = lstm_forward(self.fwd[i], h[:core_len], carry[i])
                if h.size(0) > core_len:
                    look_out, _ = lstm_forward(self.fwd[i], h[core_len:], new_state)
                    f_out = torch.cat([core_out, look_out])
                else:
                    f_out = core_out
                carry[i] = new_state
                b_out, _ = lstm_forward(self.bwd[i], h.flip(0))
                h = f_out + b_out.flip(0)
                if i < self.num_layers - 1:
                    h = self.drop(h)
            emitted.append(h[:core_len])
        return torch.cat(emitted)
