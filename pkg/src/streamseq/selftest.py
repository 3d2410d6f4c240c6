"""Built-in correctness drills, runnable from an installed copy.

Each suite re-derives expected values from a tiny brute-force reference
written out longhand here, so a deployment can be checked without the
development tree. The CLI maps a failing suite to its own exit code.
"""

import itertools
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, TextIO

import numpy as np
import torch

from .attention import chunkwise_attention, expected_alignment
from .ctc import ctc_forced_align, ctc_loss
from .encoder import ChunkConfig, Encoder
from .model import StreamingTransducer, Vocab
from .numerics import DTYPE, grad_check
from .objectives import LossWeights, batch_loss
from .pipeline import ToyTaskSpec, generate_toy_batch


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# attention: enumerate Bernoulli selection paths


def _enum_alpha(p: np.ndarray) -> np.ndarray:
    """Expected selection distribution by summing over every boundary tuple.

    Row i is the marginal over non-decreasing prefixes (t_0 <= ... <= t_i),
    enumerated per row: later rows may fail to select anything, so the
    marginal cannot be read off complete tuples alone.
    """
    n_tokens, n_frames = p.shape
    alpha = np.zeros_like(p)
    for i in range(n_tokens):
        for tup in itertools.combinations_with_replacement(range(n_frames), i + 1):
            prob = 1.0
            prev = 0
            for r, t in enumerate(tup):
                for j in range(prev, t):
                    prob *= 1.0 - p[r, j]
                prob *= p[r, t]
                prev = t
            alpha[i, tup[-1]] += prob
    return alpha


def _naive_beta(alpha: np.ndarray, u: np.ndarray, w: int) -> np.ndarray:
    n_tokens, n_frames = alpha.shape
    beta = np.zeros_like(alpha)
    for i in range(n_tokens):
        for j in range(n_frames):
            acc = 0.0
            for k in range(j, min(j + w, n_frames)):
                lo = max(k - w + 1, 0)
                denom = np.exp(u[lo:k + 1]).sum()
                acc += alpha[i, k] * np.exp(u[j]) / denom
            beta[i, j] = acc
    return beta


def _suite_attention() -> SuiteResult:
    rng = np.random.default_rng(2024)
    worst = 0.0
    cases = 0
    for _ in range(40):
        n_tokens = int(rng.integers(1, 4))
        n_frames = int(rng.integers(n_tokens, 7))
        p_np = rng.uniform(0.05, 0.9, size=(n_tokens, n_frames))
        p = torch.tensor(p_np, dtype=DTYPE)
        alpha = expected_alignment(p)
        ref = _enum_alpha(p_np)
        worst = max(worst, float(np.abs(alpha.numpy() - ref).max()))
        u_np = rng.normal(size=n_frames)
        w = int(rng.integers(1, 4))
        u_rows = torch.tensor(np.tile(u_np, (n_tokens, 1)), dtype=DTYPE)
        beta = chunkwise_attention(alpha, u_rows, w)
        ref_beta = _naive_beta(alpha.numpy(), u_np, w)
        worst = max(worst, float(np.abs(beta.numpy() - ref_beta).max()))
        cases += 1
    ok = worst < 1e-10
    return SuiteResult("attention", ok, f"{cases} cases, max abs err {worst:.3e}")


# ---------------------------------------------------------------------------
# ctc: enumerate every label-collapsing path


def _collapse(path: List[int]) -> List[int]:
    out = []
    for sym in path:
        if out and out[-1] == sym:
            continue
        out.append(sym)
    return [sym for sym in out if sym != 0]


def _enum_ctc(log_post: np.ndarray, labels: List[int]):
    n_frames, n_symbols = log_post.shape
    total = -np.inf
    best = -np.inf
    best_path = None
    for path in itertools.product(range(n_symbols), repeat=n_frames):
        if _collapse(list(path)) != labels:
            continue
        lp = sum(log_post[t, s] for t, s in enumerate(path))
        total = np.logaddexp(total, lp)
        if lp > best:
            best = lp
            best_path = list(path)
    return total, best, best_path


def _suite_ctc() -> SuiteResult:
    rng = np.random.default_rng(4096)
    worst_loss = 0.0
    worst_path = 0.0
    cases = 0
    while cases < 40:
        n_frames = int(rng.integers(2, 6))
        n_symbols = int(rng.integers(2, 4))
        n_labels = int(rng.integers(1, 3))
        labels = [int(x) for x in rng.integers(1, n_symbols, size=n_labels)]
        logits = rng.normal(size=(n_frames, n_symbols))
        log_post = torch.log_softmax(torch.tensor(logits, dtype=DTYPE), dim=-1)
        total_ref, best_ref, _ = _enum_ctc(log_post.numpy(), labels)
        if not np.isfinite(total_ref):
            continue  # no feasible path at this length
        loss, _ = ctc_loss(log_post, labels)
        worst_loss = max(worst_loss, abs(float(loss) + total_ref))
        path = ctc_forced_align(log_post, labels)
        achieved = sum(float(log_post[t, s]) for t, s in enumerate(path))
        worst_path = max(worst_path, abs(achieved - best_ref))
        if _collapse(path) != labels:
            return SuiteResult("ctc", False, f"case {cases}: path collapses wrong")
        cases += 1
    ok = worst_loss < 1e-9 and worst_path < 1e-12
    return SuiteResult(
        "ctc", ok, f"{cases} cases, loss err {worst_loss:.3e}, path err {worst_path:.3e}"
    )


# ---------------------------------------------------------------------------
# gradients: finite differences through the full objective


def _suite_gradients() -> SuiteResult:
    torch.manual_seed(85)
    spec = ToyTaskSpec(n_tokens=4, feat_dim=4, min_duration=8, max_duration=10,
                       min_tokens=2, max_tokens=3)
    utts = generate_toy_batch(spec, seed=85, n_utts=2)
    model = StreamingTransducer(
        Vocab(4), feat_dim=4, factor=2, enc_hidden=8, enc_layers=1,
        dec_hidden=8, att_dim=6, embed_dim=4, chunk_width=3,
    )
    weights = LossWeights(lambda_ctc=0.3, lambda_qua=1.0, lambda_sync=1.0)

    def objective():
        total, _ = batch_loss(
            model, [u.features for u in utts], [u.labels for u in utts], weights
        )
        return total

    probes = [model.mono.r, model.mono.g, model.combine.bias, model.cell.bias_hh]
    err = grad_check(objective, probes)
    ok = err < 1e-4
    return SuiteResult("gradients", ok, f"4 probe tensors, max rel err {err:.3e}")


# ---------------------------------------------------------------------------
# encoder: chunked scheme against the offline pass


def _suite_encoder() -> SuiteResult:
    torch.manual_seed(31)
    enc = Encoder(feat_dim=4, factor=2, hidden=8, num_layers=2)
    enc.eval()
    g = torch.Generator().manual_seed(64)
    feats = torch.randn(24, 4, generator=g, dtype=DTYPE)
    with torch.no_grad():
        offline = enc(feats, None).memories
        whole = enc(feats, ChunkConfig(n_c=feats.size(0), n_r=0)).memories
    eq_err = float((offline - whole).abs().max())

    # frames beyond the lookahead horizon must not reach a chunk's output
    n_c, n_r = 8, 4
    with torch.no_grad():
        base = enc(feats, ChunkConfig(n_c=n_c, n_r=n_r)).memories
        bumped = feats.clone()
        bumped[n_c + n_r:] += 100.0
        pert = enc(bumped, ChunkConfig(n_c=n_c, n_r=n_r)).memories
    core = n_c // enc.factor
    leak = not torch.equal(base[:core], pert[:core])

    ok = eq_err <= 1e-12 and not leak
    detail = f"offline vs one-chunk max err {eq_err:.3e}, lookahead leak: {leak}"
    return SuiteResult("encoder", ok, detail)


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "attention": _suite_attention,
    "ctc": _suite_ctc,
    "gradients": _suite_gradients,
    "encoder": _suite_encoder,
}


def run_selftest(name_filter: str = "", stream: Optional[TextIO] = None) -> bool:
    """Run matching suites; report one line each; True iff all passed."""
    if stream is None:
        stream = sys.stdout
    selected = {k: v for k, v in SUITES.items() if name_filter in k}
    if not selected:
        raise ValueError(f"no selftest suite matches {name_filter!r}")
    all_ok = True
    for name, fn in selected.items():
        res = fn()
        verdict = "PASS" if res.passed else "FAIL"
        stream.write(f"[{verdict}] {name}: {res.detail}\n")
        all_ok = all_ok and res.passed
    return all_ok
