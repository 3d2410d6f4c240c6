"""Decode wrappers, error-rate accounting, bucket reports, trace files."""

import math
import random

import pytest
import torch

from oracles import edit_distance_dp, enumerate_optimal_scripts
from streamseq.ctc import ctc_greedy_spikes
from streamseq.evaltool import (
    BucketRow,
    Hypothesis,
    TraceRecord,
    UttEval,
    beam_decode,
    bucketed_report,
    evaluate_corpus,
    export_alignment_trace,
    greedy_hypothesis,
    mean_boundary_gap,
    parse_alignment_trace,
    read_results_csv,
    serialize_trace,
    word_error_rate,
    write_results_csv,
)
from streamseq.model import StreamingTransducer, Vocab
from streamseq.numerics import DTYPE
from streamseq.pipeline import ToyTaskSpec, generate_toy_batch


def small_model(seed=7, n_tokens=5, feat_dim=6, trigger_bias=None):
    torch.manual_seed(seed)
    model = StreamingTransducer(
        Vocab(n_tokens), feat_dim=feat_dim, factor=2, enc_hidden=10,
        enc_layers=1, dec_hidden=10, att_dim=8, embed_dim=6, chunk_width=3,
    )
    if trigger_bias is not None:
        # push the selection probabilities above 0.5 so decodes emit something
        model.mono.r.data.fill_(trigger_bias)
    return model


# ---------------------------------------------------------------------------
# word_error_rate


def test_wer_identity():
    assert word_error_rate([1, 2, 3], [1, 2, 3]) == (0.0, 0, 0, 0)


def test_wer_empty_hypothesis_is_all_deletions():
    wer, s, d, i = word_error_rate([], [4, 4, 4])
    assert (wer, s, d, i) == (1.0, 0, 3, 0)


def test_wer_empty_reference_rejected():
    with pytest.raises(ValueError):
        word_error_rate([1], [])


def test_wer_known_mixed_case():
    # ref a b c d / hyp a x c: substitute b, delete d
    wer, s, d, i = word_error_rate(["a", "x", "c"], ["a", "b", "c", "d"])
    assert (s, d, i) == (1, 1, 0)
    assert wer == pytest.approx(0.5)


def test_wer_insertions_only():
    wer, s, d, i = word_error_rate([1, 2, 2], [1])
    assert (s, d, i) == (0, 0, 2)
    assert wer == pytest.approx(2.0)


def test_wer_can_exceed_one():
    wer, s, d, i = word_error_rate([2, 3, 4, 5], [1])
    assert s + d + i == 4
    assert wer == pytest.approx(4.0)


def test_wer_matches_dp_oracle_randomized():
    rng = random.Random(1234)
    for _ in range(200):
        ref = [rng.randint(1, 4) for _ in range(rng.randint(1, 7))]
        hyp = [rng.randint(1, 4) for _ in range(rng.randint(0, 7))]
        wer, s, d, i = word_error_rate(hyp, ref)
        dist = edit_distance_dp(ref, hyp)
        assert s + d + i == dist
        assert wer == pytest.approx(dist / len(ref))
        assert (s, d, i) in enumerate_optimal_scripts(ref, hyp)


# ---------------------------------------------------------------------------
# buckets and results files


def test_bucketed_report_three_buckets():
    per_utt = [
        UttEval(length=5, errors=1, ref_len=4),
        UttEval(length=15, errors=0, ref_len=5),
        UttEval(length=25, errors=2, ref_len=8),
    ]
    rows = bucketed_report(per_utt, [10, 20])
    assert [r.label for r in rows] == ["<10", "10-20", ">=20"]
    assert [r.n_utts for r in rows] == [1, 1, 1]
    assert rows[0].wer == pytest.approx(0.25)
    assert rows[2].wer == pytest.approx(0.25)


def test_bucketed_report_omits_empty_buckets():
    per_utt = [
        UttEval(length=5, errors=0, ref_len=3),
        UttEval(length=25, errors=1, ref_len=3),
    ]
    rows = bucketed_report(per_utt, [10, 20])
    assert [r.label for r in rows] == ["<10", ">=20"]


def test_bucketed_report_pools_errors_not_rates():
    # 1/4 and 3/6 pooled: 4/10, not the mean of the two rates
    per_utt = [
        UttEval(length=12, errors=1, ref_len=4),
        UttEval(length=13, errors=3, ref_len=6),
    ]
    rows = bucketed_report(per_utt, [10, 20])
    assert len(rows) == 1
    assert rows[0].wer == pytest.approx(0.4)
    assert rows[0].errors == 4 and rows[0].ref_tokens == 10


def test_bucketed_report_rejects_bad_edges():
    with pytest.raises(ValueError):
        bucketed_report([UttEval(1, 0, 1)], [20, 10])
    with pytest.raises(ValueError):
        bucketed_report([UttEval(1, 0, 1)], [10, 10])


def test_bucketed_report_no_edges_is_one_row():
    rows = bucketed_report([UttEval(3, 1, 2), UttEval(9, 0, 2)], [])
    assert len(rows) == 1
    assert rows[0].label == "all"
    assert rows[0].wer == pytest.approx(0.25)


def test_bucket_boundary_is_left_inclusive():
    rows = bucketed_report([UttEval(length=10, errors=0, ref_len=1)], [10])
    assert [r.label for r in rows] == [">=10"]


def test_results_csv_roundtrip(tmp_path):
    per_utt = [UttEval(8, 2, 5), UttEval(11, 0, 3)]
    path = str(tmp_path / "results.csv")
    write_results_csv(per_utt, path)
    assert read_results_csv(path) == per_utt


# ---------------------------------------------------------------------------
# beam decode


def test_beam_width_validated():
    model = small_model()
    with pytest.raises(ValueError):
        beam_decode(model, torch.zeros(8, 6, dtype=DTYPE), beam=0)


def test_beam_one_equals_greedy_bit_for_bit():
    model = small_model(seed=11, trigger_bias=2.0)
    for utt_seed in range(6):
        g = torch.Generator().manual_seed(utt_seed)
        feats = torch.randn(14, 6, generator=g, dtype=DTYPE)
        greedy = greedy_hypothesis(model, feats)
        beamed = beam_decode(model, feats, beam=1)
        assert beamed.tokens == greedy.tokens
        assert beamed.boundaries == greedy.boundaries
        assert beamed.score == greedy.score  # exact float equality
        assert beamed.eos_emitted == greedy.eos_emitted


def test_beam_decode_boundaries_monotone_and_in_range():
    model = small_model(seed=3, trigger_bias=2.0)
    g = torch.Generator().manual_seed(99)
    feats = torch.randn(20, 6, generator=g, dtype=DTYPE)
    hyp = beam_decode(model, feats, beam=4)
    n_frames = model.encode(feats).size(0)
    assert all(1 <= b <= n_frames for b in hyp.boundaries)
    assert all(a <= b for a, b in zip(hyp.boundaries, hyp.boundaries[1:]))
    assert math.isfinite(hyp.score)


def test_beam_decode_restores_train_mode():
    model = small_model(trigger_bias=2.0)
    model.train()
    beam_decode(model, torch.zeros(8, 6, dtype=DTYPE), beam=2)
    assert model.training


def test_beam_decode_empty_when_nothing_triggers():
    # at the default init the selection probabilities sit near zero
    model = small_model(seed=5)
    hyp = beam_decode(model, torch.zeros(10, 6, dtype=DTYPE), beam=3)
    assert hyp.tokens == []
    assert hyp.boundaries == []
    assert not hyp.eos_emitted


# ---------------------------------------------------------------------------
# corpus evaluation


def test_evaluate_corpus_untrained_model_scores_total_miss():
    spec = ToyTaskSpec(n_tokens=5, feat_dim=6, min_duration=8, max_duration=10,
                       min_tokens=2, max_tokens=3)
    utts = generate_toy_batch(spec, seed=21, n_utts=4)
    model = small_model(n_tokens=5, feat_dim=6)  # never triggers, decodes empty
    ev = evaluate_corpus(model, utts)
    assert ev.token_error_rate == pytest.approx(1.0)
    assert ev.token_accuracy == pytest.approx(0.0)
    for u, r in zip(utts, ev.per_utt):
        assert r.length == u.features.size(0)
        assert r.errors == r.ref_len == len(u.labels)


def test_evaluate_corpus_pools_token_counts():
    spec = ToyTaskSpec(n_tokens=5, feat_dim=6, min_duration=8, max_duration=12,
                       min_tokens=2, max_tokens=4)
    utts = generate_toy_batch(spec, seed=22, n_utts=5)
    model = small_model(n_tokens=5, feat_dim=6, trigger_bias=2.0)
    ev = evaluate_corpus(model, utts)
    total_err = sum(r.errors for r in ev.per_utt)
    total_ref = sum(r.ref_len for r in ev.per_utt)
    assert ev.token_error_rate == pytest.approx(total_err / total_ref)


# ---------------------------------------------------------------------------
# alignment traces


def trace_fixture(tmp_path):
    spec = ToyTaskSpec(n_tokens=5, feat_dim=6, min_duration=8, max_duration=12,
                       min_tokens=2, max_tokens=4)
    utts = generate_toy_batch(spec, seed=31, n_utts=3)
    model = small_model(n_tokens=5, feat_dim=6, trigger_bias=1.0)
    path = str(tmp_path / "trace.tsv")
    records = export_alignment_trace(model, utts, path)
    return model, utts, path, records


def test_trace_roundtrips_unchanged(tmp_path):
    _, _, path, records = trace_fixture(tmp_path)
    parsed = parse_alignment_trace(path)
    assert parsed == records
    with open(path, "r", encoding="utf-8") as fh:
        original = fh.read()
    assert serialize_trace(parsed) == original


def test_trace_one_record_per_token_plus_eos(tmp_path):
    _, utts, _, records = trace_fixture(tmp_path)
    assert len(records) == sum(len(u.labels) + 1 for u in utts)
    by_utt = {}
    for r in records:
        by_utt.setdefault(r.utt_id, []).append(r)
    for k, u in enumerate(utts):
        rows = by_utt[f"utt{k:04d}"]
        assert [r.token for r in rows[:-1]] == [str(y) for y in u.labels]
        assert rows[-1].token == "<eos>"
        assert rows[-1].ctc_spike_frame is None and rows[-1].gap is None


def test_trace_frames_in_range_and_gaps_consistent(tmp_path):
    _, _, _, records = trace_fixture(tmp_path)
    for r in records:
        assert 1 <= r.mocha_frame <= r.n_frames
        if r.ctc_spike_frame is None:
            assert r.gap is None
        else:
            assert 1 <= r.ctc_spike_frame <= r.n_frames
            assert r.gap == abs(r.mocha_frame - r.ctc_spike_frame)


def test_trace_picks_nearest_same_token_spike(tmp_path):
    model, utts, _, records = trace_fixture(tmp_path)
    by_utt = {}
    for r in records:
        by_utt.setdefault(r.utt_id, []).append(r)
    for k, u in enumerate(utts):
        with torch.no_grad():
            spikes = ctc_greedy_spikes(model.ctc_log_posteriors(model.encode(u.features)))
        rows = by_utt[f"utt{k:04d}"]
        for row, token in zip(rows[:-1], u.labels):
            same = [fr for fr, tok in spikes if tok == token]
            if not same:
                assert row.ctc_spike_frame is None
            else:
                assert row.ctc_spike_frame in same
                best = min(abs(fr - row.mocha_frame) for fr in same)
                assert abs(row.ctc_spike_frame - row.mocha_frame) == best


def test_parse_trace_rejects_bad_header(tmp_path):
    path = str(tmp_path / "bad.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("nope\tcolumns\n")
    with pytest.raises(ValueError):
        parse_alignment_trace(path)


def test_parse_trace_rejects_short_line(tmp_path):
    from streamseq.evaltool import TRACE_COLUMNS

    path = str(tmp_path / "short.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(TRACE_COLUMNS) + "\n")
        fh.write("utt0000\t3\t4\n")
    with pytest.raises(ValueError):
        parse_alignment_trace(path)


def test_mean_boundary_gap():
    rec = [
        TraceRecord("u", "1", 4, 2, 2, 10),
        TraceRecord("u", "2", 6, 10, 4, 10),
        TraceRecord("u", "<eos>", 10, None, None, 10),
    ]
    assert mean_boundary_gap(rec) == pytest.approx(3.0)
    assert math.isnan(mean_boundary_gap([rec[2]]))
