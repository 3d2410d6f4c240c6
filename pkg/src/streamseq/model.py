"""The streaming transducer: shared encoder, CTC head, attention decoder.

Vocabulary convention: id 0 is the CTC blank (never a decoder target), real
tokens occupy 1..n_tokens, and the end-of-sentence id n_tokens + 1 doubles as
the start-of-sentence input. The CTC head classifies over blank + tokens; the
decoder output layer covers the full inventory including eos.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from .attention import (
    ChunkEnergy,
    EnergyCounter,
    MonotonicEnergy,
    chunkwise_attention_step,
    expected_alignment_step,
    expected_boundary,
    initial_alignment,
    streaming_attend,
)
from .encoder import ChunkConfig, Encoder
from .numerics import DTYPE


@dataclass(frozen=True)
class Vocab:
    n_tokens: int

    @property
    def blank(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return self.n_tokens + 1

    @property
    def dec_size(self) -> int:
        return self.n_tokens + 2

    @property
    def ctc_size(self) -> int:
        return self.n_tokens + 1


@dataclass
class TeacherForcedOutput:
    """Per-utterance tensors from a teacher-forced pass.

    logits: [U+1, dec_size] (one row per target incl. eos)
    alpha, beta: [U+1, T]
    b_mocha: [U+1] expected boundaries, 1-based fractional frames
    """

    logits: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor
    b_mocha: torch.Tensor


@dataclass
class DecodeResult:
    tokens: List[int]
    boundaries: List[int] = field(default_factory=list)
    score: float = 0.0
    eos_emitted: bool = False
    counter: EnergyCounter = field(default_factory=EnergyCounter)


class StreamingTransducer(nn.Module):
    def __init__(
        self,
        vocab: Vocab,
        feat_dim: int,
        factor: int = 4,
        enc_hidden: int = 48,
        enc_layers: int = 2,
        dec_hidden: int = 48,
        att_dim: int = 32,
        embed_dim: int = 16,
        chunk_width: int = 4,
        dropout: float = 0.0,
        init_r: float = -4.0,
    ):
        super().__init__()
        self.vocab = vocab
        self.chunk_width = chunk_width
        self.encoder = Encoder(feat_dim, factor, enc_hidden, enc_layers, dropout)
        self.ctc_head = nn.Linear(enc_hidden, vocab.ctc_size, dtype=DTYPE)
        self.embed = nn.Embedding(vocab.dec_size, embed_dim, dtype=DTYPE)
        self.cell = nn.LSTMCell(embed_dim + enc_hidden, dec_hidden, dtype=DTYPE)
        self.mono = MonotonicEnergy(enc_hidden, dec_hidden, att_dim, init_r)
        self.chunk_energy = ChunkEnergy(enc_hidden, dec_hidden, att_dim)
        self.combine = nn.Linear(dec_hidden + enc_hidden, dec_hidden, dtype=DTYPE)
        self.out = nn.Linear(dec_hidden, vocab.dec_size, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden

    def encode(self, features: torch.Tensor, chunk: Optional[ChunkConfig] = None) -> torch.Tensor:
        return self.encoder(features, chunk).memories

    def ctc_log_posteriors(self, memories: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.ctc_head(memories), dim=-1)

    def _cell_step(self, token_id: int, context: torch.Tensor, state):
        emb = self.drop(self.embed(torch.tensor(token_id)))
        x = torch.cat([emb, context]).unsqueeze(0)
        h, c = self.cell(x, state)
        return h.squeeze(0), (h, c)

    def _output_logits(self, s: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return self.out(torch.tanh(self.combine(torch.cat([s, context]))))

    def decode_teacher_forced(
        self, memories: torch.Tensor, labels: Sequence[int]
    ) -> TeacherForcedOutput:
        """Run the decoder over gold inputs [sos, y_1..y_U], producing one
        output row per target [y_1..y_U, eos] along with soft alignments."""
        n_frames = memories.size(0)
        ys_in = [self.vocab.eos] + [int(y) for y in labels]
        mono_proj = self.mono.project_memory(memories)
        chunk_proj = self.chunk_energy.project_memory(memories)
        context = torch.zeros(self.enc_hidden, dtype=DTYPE)
        alpha_prev = initial_alignment(n_frames)
        state = None
        logits_rows, alpha_rows, beta_rows = [], [], []
        for token_id in ys_in:
            s, state = self._cell_step(token_id, context, state)
            e = self.mono(mono_proj, s)
            p = torch.sigmoid(e)
            alpha = expected_alignment_step(alpha_prev, p)
            u = self.chunk_energy(chunk_proj, s)
            beta = chunkwise_attention_step(alpha, u, self.chunk_width)
            context = beta @ memories
            logits_rows.append(self._output_logits(s, context))
            alpha_rows.append(alpha)
            beta_rows.append(beta)
            alpha_prev = alpha
        alpha = torch.stack(alpha_rows)
        return TeacherForcedOutput(
            logits=torch.stack(logits_rows),
            alpha=alpha,
            beta=torch.stack(beta_rows),
            b_mocha=expected_boundary(alpha),
        )

    def _decode_log_probs(self, s: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Log-probs over emittable ids 1..eos (the blank slot is excluded)."""
        logits = self._output_logits(s, context)
        return torch.log_softmax(logits[1:], dim=0)

    @torch.no_grad()
    def decode_greedy(
        self,
        features: torch.Tensor,
        chunk: Optional[ChunkConfig] = None,
        max_len: Optional[int] = None,
    ) -> DecodeResult:
        """Hard streaming decode: scan for a boundary, attend over the trailing
        window, emit the argmax token; stop on eos, stream exhaustion, or the
        length cap."""
        was_training = self.training
        self.eval()
        try:
            memories = self.encode(features, chunk)
            n_frames = memories.size(0)
            if max_len is None:
                max_len = n_frames
            mono_proj = self.mono.project_memory(memories)
            chunk_proj = self.chunk_energy.project_memory(memories)
            result = DecodeResult(tokens=[])
            context = torch.zeros(self.enc_hidden, dtype=DTYPE)
            state = None
            prev_boundary = 1
            prev_token = self.vocab.eos
            for _ in range(max_len):
                s, state = self._cell_step(prev_token, context, state)
                boundary, new_context = streaming_attend(
                    self.mono, self.chunk_energy, memories, mono_proj, chunk_proj,
                    s, prev_boundary, self.chunk_width, result.counter,
                )
                if boundary is None:
                    break
                context = new_context
                log_probs = self._decode_log_probs(s, context)
                best = int(log_probs.argmax().item())
                token = best + 1
                result.score += log_probs[best].item()
                result.boundaries.append(boundary)
                prev_boundary = boundary
                if token == self.vocab.eos:
                    result.eos_emitted = True
                    break
                result.tokens.append(token)
                prev_token = token
            return result
        finally:
            if was_training:
                self.train()
