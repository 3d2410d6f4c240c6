"""Loss terms and their weighted combination.

Per utterance: a label-smoothed cross-entropy over the attention decoder's
teacher-forced outputs, the CTC negative log-likelihood over the shared
encoder, a quantity term |U - total alignment mass| that pushes the selection
probabilities toward emitting one boundary per token, and a boundary
synchronization term that pulls the expected attention boundaries toward the
CTC forced-alignment boundaries. Each term is averaged over the utterances of
a batch before weighting, so the weights transfer across batch sizes.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch

from .ctc import ctc_forced_align, ctc_loss, extract_boundaries
from .encoder import ChunkConfig
from .model import StreamingTransducer
from .numerics import DTYPE


@dataclass(frozen=True)
class LossWeights:
    lambda_ctc: float = 0.3
    lambda_qua: float = 0.0
    lambda_sync: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ValueError(f"lambda_ctc must be in [0, 1], got {self.lambda_ctc}")
        if self.lambda_qua < 0.0:
            raise ValueError(f"lambda_qua must be >= 0, got {self.lambda_qua}")
        if self.lambda_sync < 0.0:
            raise ValueError(f"lambda_sync must be >= 0, got {self.lambda_sync}")


@dataclass
class LossBreakdown:
    """Scalar loss values of one training step, for the metrics log."""

    mocha_nll: float
    ctc: float
    quantity: float
    sync: float
    total: float


def quantity_loss(alpha: torch.Tensor, n_tokens: int) -> torch.Tensor:
    """| n_tokens - total alignment mass |, eos counted in n_tokens."""
    return (float(n_tokens) - alpha.sum()).abs()


def sync_loss(b_ctc: Sequence[int], b_mocha: torch.Tensor) -> torch.Tensor:
    """Mean absolute gap between reference and expected boundaries.

    The reference enters as plain numbers: no gradient flows into the forced
    alignment that produced it.
    """
    if len(b_ctc) != b_mocha.size(0):
        raise ValueError(
            f"boundary count mismatch: {len(b_ctc)} reference vs {b_mocha.size(0)} expected"
        )
    ref = torch.tensor([float(b) for b in b_ctc], dtype=b_mocha.dtype)
    return (ref - b_mocha).abs().mean()


def smoothed_cross_entropy(
    logits: torch.Tensor, targets: Sequence[int], smoothing: float = 0.1
) -> torch.Tensor:
    """Label-smoothed cross-entropy averaged per token.

    The target distribution puts 1 - smoothing on the gold id and spreads
    smoothing uniformly over the remaining classes.
    """
    n, vocab = logits.shape
    if n != len(targets):
        raise ValueError(f"{n} logit rows vs {len(targets)} targets")
    log_probs = torch.log_softmax(logits, dim=1)
    tgt = torch.tensor(list(targets), dtype=torch.long)
    gold = log_probs[torch.arange(n), tgt]
    if smoothing == 0.0:
        return -gold.mean()
    rest = log_probs.sum(dim=1) - gold
    per_token = -(1.0 - smoothing) * gold - smoothing / (vocab - 1) * rest
    return per_token.mean()


def total_loss(
    mocha_nll: torch.Tensor,
    ctc: torch.Tensor,
    quantity: torch.Tensor,
    sync: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """(1 - l_ctc) * nll + l_ctc * ctc + l_qua * quantity + l_sync * sync."""
    return (
        (1.0 - weights.lambda_ctc) * mocha_nll
        + weights.lambda_ctc * ctc
        + weights.lambda_qua * quantity
        + weights.lambda_sync * sync
    )


def batch_loss(
    model: StreamingTransducer,
    features: List[torch.Tensor],
    labels: List[Sequence[int]],
    weights: LossWeights,
    smoothing: float = 0.1,
    chunk: Optional[ChunkConfig] = None,
):
    """Forward pass and loss for a batch of utterances.

    The CTC reference boundaries are regenerated from the current parameters
    on every call; they are never cached across steps.

    Returns:
        (total: scalar tensor, breakdown: LossBreakdown)
    """
    if len(features) == 0:
        raise ValueError("empty batch")
    if len(features) != len(labels):
        raise ValueError("feature/label count mismatch")
    zero = torch.zeros((), dtype=DTYPE)
    terms = {"mocha_nll": zero, "ctc": zero, "quantity": zero, "sync": zero}
    need_sync = weights.lambda_sync > 0.0
    for feats, ys in zip(features, labels):
        ys = list(ys)
        memories = model.encode(feats, chunk)
        dec = model.decode_teacher_forced(memories, ys)
        targets = ys + [model.vocab.eos]
        terms["mocha_nll"] = terms["mocha_nll"] + smoothed_cross_entropy(
            dec.logits, targets, smoothing
        )
        log_post = model.ctc_log_posteriors(memories)
        nll, _ = ctc_loss(log_post, ys)
        terms["ctc"] = terms["ctc"] + nll
        terms["quantity"] = terms["quantity"] + quantity_loss(dec.alpha, len(targets))
        if need_sync:
            with torch.no_grad():
                path = ctc_forced_align(log_post, ys)
            b_ctc = extract_boundaries(path, memories.size(0))
            terms["sync"] = terms["sync"] + sync_loss(b_ctc, dec.b_mocha)
    n = float(len(features))
    mean = {k: v / n for k, v in terms.items()}
    total = total_loss(mean["mocha_nll"], mean["ctc"], mean["quantity"], mean["sync"], weights)
    breakdown = LossBreakdown(
        mocha_nll=mean["mocha_nll"].item(),
        ctc=mean["ctc"].item(),
        quantity=mean["quantity"].item(),
        sync=mean["sync"].item(),
        total=total.item(),
    )
    return total, breakdown
