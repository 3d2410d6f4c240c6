import math

import numpy as np
import pytest
import torch

from streamseq.model import StreamingTransducer, Vocab
from streamseq.numerics import DTYPE, grad_check
from streamseq.objectives import (
    LossWeights,
    batch_loss,
    quantity_loss,
    smoothed_cross_entropy,
    sync_loss,
    total_loss,
)

from oracles import smoothed_ce_np


def t(values):
    return torch.tensor(values, dtype=DTYPE)


class TestLossWeights:
    def test_defaults_valid(self):
        w = LossWeights()
        assert w.lambda_ctc == 0.3

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_ctc=1.5)
        with pytest.raises(ValueError):
            LossWeights(lambda_qua=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda_sync=-1.0)


class TestQuantityLoss:
    def test_perfectly_scaled(self):
        alpha = t([[0.5, 0.5, 0.0], [0.0, 0.4, 0.6], [0.0, 0.0, 1.0]])
        assert quantity_loss(alpha, 3).item() == 0.0

    def test_partial_mass(self):
        alpha = t([[1.0, 0.5], [0.5, 0.5]])  # total 2.5
        assert abs(quantity_loss(alpha, 3).item() - 0.5) < 1e-15

    def test_all_zero(self):
        assert quantity_loss(torch.zeros(3, 4, dtype=DTYPE), 3).item() == 3.0

    def test_redistribution_invariant(self):
        rng = np.random.default_rng(70)
        a = rng.uniform(0, 0.3, size=(3, 5))
        b = np.roll(a, 2, axis=1)  # same total, different placement
        assert abs(
            quantity_loss(t(a), 3).item() - quantity_loss(t(b), 3).item()
        ) < 1e-12


class TestSyncLoss:
    def test_identical_boundaries(self):
        assert sync_loss([2, 5], t([2.0, 5.0])).item() == 0.0

    def test_half_gap(self):
        assert abs(sync_loss([2, 5], t([3.0, 5.0])).item() - 0.5) < 1e-15

    def test_single_eos_entry(self):
        assert sync_loss([7], t([7.0])).item() == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            sync_loss([1, 2, 3], t([1.0, 2.0]))

    def test_no_gradient_into_reference(self):
        b_mocha = torch.tensor([2.0, 4.0], dtype=DTYPE, requires_grad=True)
        loss = sync_loss([3, 4], b_mocha)
        loss.backward()
        assert b_mocha.grad is not None


class TestSmoothedCrossEntropy:
    def test_uniform_no_smoothing(self):
        vocab = 7
        logits = torch.zeros(3, vocab, dtype=DTYPE)
        loss = smoothed_cross_entropy(logits, [1, 2, 3], smoothing=0.0)
        assert abs(loss.item() - math.log(vocab)) < 1e-12

    def test_confident_correct_no_smoothing(self):
        logits = torch.full((2, 4), -40.0, dtype=DTYPE)
        logits[0, 1] = 40.0
        logits[1, 3] = 40.0
        loss = smoothed_cross_entropy(logits, [1, 3], smoothing=0.0)
        assert loss.item() < 1e-12

    def test_matches_hand_formula(self):
        rng = np.random.default_rng(71)
        logits = rng.normal(size=(2, 5))
        targets = [4, 0]
        got = smoothed_cross_entropy(t(logits), targets, smoothing=0.1).item()
        want = np.mean(
            [smoothed_ce_np(logits[i], targets[i], 0.1) for i in range(2)]
        )
        assert abs(got - want) < 1e-12

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            smoothed_cross_entropy(torch.zeros(2, 3, dtype=DTYPE), [1])


class TestTotalLoss:
    def test_stage2_defaults_combination(self):
        w = LossWeights(lambda_ctc=0.3, lambda_qua=0.0, lambda_sync=1.0)
        got = total_loss(t(2.0), t(10.0), t(0.7), t(1.5), w).item()
        assert abs(got - (0.7 * 2.0 + 0.3 * 10.0 + 1.5)) < 1e-12

    def test_stage1_defaults_combination(self):
        w = LossWeights(lambda_ctc=0.3, lambda_qua=2.0, lambda_sync=0.0)
        got = total_loss(t(2.0), t(10.0), t(0.7), t(9.9), w).item()
        assert abs(got - (0.7 * 2.0 + 0.3 * 10.0 + 2.0 * 0.7)) < 1e-12

    def test_pure_attention(self):
        w = LossWeights(lambda_ctc=0.0, lambda_qua=0.0, lambda_sync=0.0)
        assert total_loss(t(3.3), t(1.0), t(1.0), t(1.0), w).item() == 3.3


def tiny_model(seed, n_tokens=3, feat=4):
    torch.manual_seed(seed)
    return StreamingTransducer(
        Vocab(n_tokens), feat_dim=feat, factor=1, enc_hidden=6, enc_layers=1,
        dec_hidden=6, att_dim=5, embed_dim=4, chunk_width=3,
    )


def tiny_batch(seed, feat=4):
    rng = np.random.default_rng(seed)
    features = [
        torch.tensor(rng.normal(size=(7, feat)), dtype=DTYPE),
        torch.tensor(rng.normal(size=(5, feat)), dtype=DTYPE),
    ]
    labels = [[1, 2, 3], [2, 1]]
    return features, labels


class TestBatchLoss:
    def test_breakdown_reproduces_total(self):
        model = tiny_model(80)
        features, labels = tiny_batch(80)
        w = LossWeights(lambda_ctc=0.3, lambda_qua=0.5, lambda_sync=1.0)
        total, br = batch_loss(model, features, labels, w)
        recombined = (
            0.7 * br.mocha_nll + 0.3 * br.ctc + 0.5 * br.quantity + 1.0 * br.sync
        )
        assert abs(br.total - recombined) < 1e-12
        assert abs(total.item() - br.total) < 1e-15

    def test_sync_skipped_when_weight_zero(self):
        model = tiny_model(81)
        features, labels = tiny_batch(81)
        _, br = batch_loss(model, features, labels, LossWeights(lambda_sync=0.0))
        assert br.sync == 0.0

    def test_deterministic(self):
        model = tiny_model(82)
        features, labels = tiny_batch(82)
        w = LossWeights(lambda_ctc=0.3, lambda_qua=1.0, lambda_sync=1.0)
        a = batch_loss(model, features, labels, w)[0].item()
        b = batch_loss(model, features, labels, w)[0].item()
        assert a == b

    def test_empty_batch_rejected(self):
        model = tiny_model(83)
        with pytest.raises(ValueError):
            batch_loss(model, [], [], LossWeights())

    def test_gradients_flow_to_all_terms(self):
        model = tiny_model(84)
        features, labels = tiny_batch(84)
        w = LossWeights(lambda_ctc=0.3, lambda_qua=0.5, lambda_sync=1.0)
        total, _ = batch_loss(model, features, labels, w)
        total.backward()
        grads = [p.grad for p in model.parameters()]
        assert all(g is not None for g in grads)
        assert any(g.abs().sum().item() > 0 for g in grads)

    def test_selected_parameter_gradients_match_fd(self):
        # spot check a few parameter tensors; the full sweep runs in the
        # acceptance suite
        model = tiny_model(85)
        features, labels = tiny_batch(85)
        w = LossWeights(lambda_ctc=0.3, lambda_qua=0.5, lambda_sync=1.0)

        def f():
            return batch_loss(model, features, labels, w)[0]

        probes = [model.mono.r, model.mono.g, model.combine.bias, model.cell.bias_hh]
        assert grad_check(f, probes) < 1e-4
