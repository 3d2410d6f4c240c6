"""Decoding, error rates, length-bucketed reporting, alignment traces."""

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .attention import streaming_attend
from .ctc import ctc_greedy_spikes
from .encoder import ChunkConfig
from .model import DecodeResult, StreamingTransducer
from .numerics import DTYPE
from .pipeline import Utterance


def word_error_rate(hyp: Sequence, ref: Sequence) -> Tuple[float, int, int, int]:
    """Levenshtein alignment of hypothesis against reference.

    Returns (error rate, substitutions, deletions, insertions); the rate is
    (S + D + I) / len(ref). An empty reference has no defined rate.
    """
    if len(ref) == 0:
        raise ValueError("empty reference")
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            dist[i][j] = min(sub, dist[i - 1][j] + 1, dist[i][j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] and ref[i - 1] == hyp[j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return (subs + dels + ins) / n, subs, dels, ins


# ---------------------------------------------------------------------------
# beam decode


@dataclass
class Hypothesis:
    tokens: List[int]
    score: float
    boundaries: List[int]
    eos_emitted: bool = False


@dataclass
class _Beam:
    tokens: List[int]
    boundaries: List[int]
    score: float
    prev_token: int
    prev_boundary: int
    context: torch.Tensor
    state: Optional[Tuple[torch.Tensor, torch.Tensor]]
    eos_emitted: bool = False


def _normalized(h: _Beam) -> float:
    n = len(h.tokens) + (1 if h.eos_emitted else 0)
    return h.score / max(n, 1)


@torch.no_grad()
def beam_decode(
    model: StreamingTransducer,
    features: torch.Tensor,
    beam: int,
    max_len: Optional[int] = None,
    chunk: Optional[ChunkConfig] = None,
) -> Hypothesis:
    """Streaming beam search.

    Hypotheses are pruned by raw cumulative log-probability while alive; the
    final ranking divides by emitted token count (eos included), which favors
    hypotheses that commit to an ending. With beam=1 every step keeps only the
    argmax token, which reproduces the greedy decode exactly.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    was_training = model.training
    model.eval()
    try:
        memories = model.encode(features, chunk)
        n_frames = memories.size(0)
        if max_len is None:
            max_len = n_frames
        mono_proj = model.mono.project_memory(memories)
        chunk_proj = model.chunk_energy.project_memory(memories)
        live = [
            _Beam(
                tokens=[], boundaries=[], score=0.0, prev_token=model.vocab.eos,
                prev_boundary=1, context=torch.zeros(model.enc_hidden, dtype=DTYPE),
                state=None,
            )
        ]
        finished: List[_Beam] = []
        for _ in range(max_len):
            candidates: List[_Beam] = []
            for hyp in live:
                s, state = model._cell_step(hyp.prev_token, hyp.context, hyp.state)
                boundary, context = streaming_attend(
                    model.mono, model.chunk_energy, memories, mono_proj, chunk_proj,
                    s, hyp.prev_boundary, model.chunk_width,
                )
                if boundary is None:
                    finished.append(hyp)
                    continue
                log_probs = model._decode_log_probs(s, context)
                k = min(beam, log_probs.numel())
                top = torch.topk(log_probs, k)
                for lp, idx in zip(top.values.tolist(), top.indices.tolist()):
                    token = idx + 1
                    cand = _Beam(
                        tokens=list(hyp.tokens),
                        boundaries=hyp.boundaries + [boundary],
                        score=hyp.score + lp,
                        prev_token=token,
                        prev_boundary=boundary,
                        context=context,
                        state=state,
                        eos_emitted=False,
                    )
                    if token == model.vocab.eos:
                        cand.eos_emitted = True
                        finished.append(cand)
                    else:
                        cand.tokens.append(token)
                        candidates.append(cand)
            candidates.sort(key=lambda h: h.score, reverse=True)
            live = candidates[:beam]
            if not live:
                break
        pool = finished + live
        best = max(pool, key=_normalized)
        return Hypothesis(
            tokens=best.tokens, score=best.score,
            boundaries=best.boundaries, eos_emitted=best.eos_emitted,
        )
    finally:
        if was_training:
            model.train()


def greedy_hypothesis(
    model: StreamingTransducer,
    features: torch.Tensor,
    max_len: Optional[int] = None,
    chunk: Optional[ChunkConfig] = None,
) -> Hypothesis:
    """The model's greedy streaming decode, repackaged as a Hypothesis."""
    res: DecodeResult = model.decode_greedy(features, chunk=chunk, max_len=max_len)
    return Hypothesis(
        tokens=res.tokens, score=res.score,
        boundaries=res.boundaries, eos_emitted=res.eos_emitted,
    )


# ---------------------------------------------------------------------------
# corpus evaluation and bucketed reporting


@dataclass
class UttEval:
    length: int  # raw input frames
    errors: int
    ref_len: int


@dataclass
class CorpusEval:
    token_error_rate: float
    per_utt: List[UttEval] = field(default_factory=list)

    @property
    def token_accuracy(self) -> float:
        return 1.0 - self.token_error_rate


def evaluate_corpus(
    model: StreamingTransducer,
    utts: Sequence[Utterance],
    beam: int = 1,
    chunk: Optional[ChunkConfig] = None,
) -> CorpusEval:
    per_utt = []
    total_err = 0
    total_ref = 0
    for u in utts:
        if beam == 1:
            hyp = greedy_hypothesis(model, u.features, chunk=chunk)
        else:
            hyp = beam_decode(model, u.features, beam=beam, chunk=chunk)
        _, s, d, i = word_error_rate(hyp.tokens, u.labels)
        errors = s + d + i
        per_utt.append(UttEval(length=u.features.size(0), errors=errors, ref_len=len(u.labels)))
        total_err += errors
        total_ref += len(u.labels)
    return CorpusEval(token_error_rate=total_err / total_ref, per_utt=per_utt)


@dataclass
class BucketRow:
    label: str
    n_utts: int
    errors: int
    ref_tokens: int

    @property
    def wer(self) -> float:
        return self.errors / self.ref_tokens


def bucketed_report(per_utt: Sequence[UttEval], edges: Sequence[int]) -> List[BucketRow]:
    """Group utterances by input length and report per-bucket error rates.

    k strictly increasing edges make k+1 buckets: below the first edge,
    between consecutive edges, and at or above the last. Empty buckets are
    omitted rather than reported as zero.
    """
    edges = list(edges)
    if any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    bounds = [(None, edges[0] if edges else None)]
    for a, b in zip(edges, edges[1:]):
        bounds.append((a, b))
    if edges:
        bounds.append((edges[-1], None))
    rows = []
    for lo, hi in bounds:
        members = [
            u for u in per_utt
            if (lo is None or u.length >= lo) and (hi is None or u.length < hi)
        ]
        if not members:
            continue
        if lo is None and hi is None:
            label = "all"
        elif lo is None:
            label = f"<{hi}"
        elif hi is None:
            label = f">={lo}"
        else:
            label = f"{lo}-{hi}"
        rows.append(
            BucketRow(
                label=label,
                n_utts=len(members),
                errors=sum(u.errors for u in members),
                ref_tokens=sum(u.ref_len for u in members),
            )
        )
    return rows


def write_results_csv(per_utt: Sequence[UttEval], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length", "errors", "ref_len"])
        for u in per_utt:
            writer.writerow([u.length, u.errors, u.ref_len])


def read_results_csv(path: str) -> List[UttEval]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                UttEval(length=int(row["length"]), errors=int(row["errors"]),
                        ref_len=int(row["ref_len"]))
            )
    return out


# ---------------------------------------------------------------------------
# alignment traces

TRACE_COLUMNS = ["utt_id", "token", "mocha_frame", "ctc_spike_frame", "gap", "n_frames"]
_SENTINEL = "-"


@dataclass
class TraceRecord:
    utt_id: str
    token: str
    mocha_frame: int
    ctc_spike_frame: Optional[int]
    gap: Optional[int]
    n_frames: int


def _trace_utterance(
    model: StreamingTransducer, utt: Utterance, utt_id: str,
    chunk: Optional[ChunkConfig] = None,
) -> List[TraceRecord]:
    with torch.no_grad():
        memories = model.encode(utt.features, chunk)
        n_frames = memories.size(0)
        dec = model.decode_teacher_forced(memories, utt.labels)
        spikes = ctc_greedy_spikes(model.ctc_log_posteriors(memories))
    by_token: Dict[int, List[int]] = {}
    for frame, token in spikes:
        by_token.setdefault(token, []).append(frame)
    records = []
    names = [str(y) for y in utt.labels] + ["<eos>"]
    token_ids = list(utt.labels) + [None]
    for i, (name, tid) in enumerate(zip(names, token_ids)):
        raw = dec.b_mocha[i].item()
        mocha = min(max(int(round(raw)), 1), n_frames)
        spike = None
        if tid is not None and tid in by_token:
            spike = min(by_token[tid], key=lambda fr: abs(fr - mocha))
        records.append(
            TraceRecord(
                utt_id=utt_id, token=name, mocha_frame=mocha,
                ctc_spike_frame=spike,
                gap=None if spike is None else abs(mocha - spike),
                n_frames=n_frames,
            )
        )
    return records


def serialize_trace(records: Sequence[TraceRecord]) -> str:
    lines = ["\t".join(TRACE_COLUMNS)]
    for r in records:
        lines.append(
            "\t".join(
                [
                    r.utt_id, r.token, str(r.mocha_frame),
                    _SENTINEL if r.ctc_spike_frame is None else str(r.ctc_spike_frame),
                    _SENTINEL if r.gap is None else str(r.gap),
                    str(r.n_frames),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def export_alignment_trace(
    model: StreamingTransducer,
    utts: Sequence[Utterance],
    path: str,
    chunk: Optional[ChunkConfig] = None,
) -> List[TraceRecord]:
    """Teacher-forced boundary positions next to the nearest same-token CTC
    spike, one tab-separated record per token, 1-based frames."""
    records = []
    for k, utt in enumerate(utts):
        records.extend(_trace_utterance(model, utt, f"utt{k:04d}", chunk))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_trace(records))
    return records


def parse_alignment_trace(path: str) -> List[TraceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(TRACE_COLUMNS):
                raise ValueError(f"malformed trace line {line!r}")
            records.append(
                TraceRecord(
                    utt_id=parts[0],
                    token=parts[1],
                    mocha_frame=int(parts[2]),
                    ctc_spike_frame=None if parts[3] == _SENTINEL else int(parts[3]),
                    gap=None if parts[4] == _SENTINEL else int(parts[4]),
                    n_frames=int(parts[5]),
                )
            )
    return records


def mean_boundary_gap(records: Sequence[TraceRecord]) -> float:
    """Mean |boundary - spike| over records that matched a spike."""
    gaps = [r.gap for r in records if r.gap is not None]
    if not gaps:
        return float("nan")
    return sum(gaps) / len(gaps)
