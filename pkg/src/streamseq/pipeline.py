"""Training pipeline: synthetic task, augmentation, curriculum, checkpoints.

The synthetic task renders each vocabulary token as a fixed Gaussian feature
template repeated for a per-token duration, plus i.i.d. noise, so the mapping
from frames to tokens is monotone by construction and a correct streaming
model can read the boundaries straight off the signal.

Training runs in two stages: stage-1 uses the offline bidirectional encoder
and the quantity-regularized objective; stage-2 restarts from a stage-1
checkpoint, switches the encoder to chunked operation, and replaces the
quantity term with the boundary-synchronization term.
"""

import csv
import dataclasses
import io
import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .encoder import ChunkConfig
from .model import StreamingTransducer, Vocab
from .numerics import DTYPE
from .objectives import LossBreakdown, LossWeights, batch_loss

log = logging.getLogger("streamseq")

METRICS_COLUMNS = ["step", "mocha_nll", "ctc", "quantity", "sync", "total"]


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class ToyTaskSpec:
    n_tokens: int = 8
    feat_dim: int = 8
    min_duration: int = 8
    max_duration: int = 12
    min_tokens: int = 3
    max_tokens: int = 10
    noise: float = 0.3
    template_seed: int = 97

    def templates(self) -> np.ndarray:
        rng = np.random.default_rng(self.template_seed)
        return rng.normal(size=(self.n_tokens, self.feat_dim))


@dataclass
class Utterance:
    features: torch.Tensor  # [T0, feat_dim]
    labels: List[int]
    token_ends: List[int]  # 1-based last raw frame of each token


def generate_toy_batch(spec: ToyTaskSpec, seed: int, n_utts: int) -> List[Utterance]:
    """Deterministic synthetic utterances: same (spec, seed, n) -> same data."""
    rng = np.random.default_rng(seed)
    templates = spec.templates()
    utts = []
    for _ in range(n_utts):
        n_tok = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        labels = [int(v) for v in rng.integers(1, spec.n_tokens + 1, size=n_tok)]
        durations = [
            int(v) for v in rng.integers(spec.min_duration, spec.max_duration + 1, size=n_tok)
        ]
        rows = []
        ends = []
        total = 0
        for lab, dur in zip(labels, durations):
            block = templates[lab - 1][None, :].repeat(dur, axis=0)
            block = block + spec.noise * rng.normal(size=block.shape)
            rows.append(block)
            total += dur
            ends.append(total)
        features = torch.tensor(np.concatenate(rows, axis=0), dtype=DTYPE)
        utts.append(Utterance(features=features, labels=labels, token_ends=ends))
    return utts


def spec_augment(
    features: torch.Tensor,
    freq_param: int,
    time_param: int,
    n_freq: int,
    n_time: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Zero out random frequency bands and time spans; returns a copy.

    Mask widths are drawn uniformly from [0, param]; start positions uniformly
    over the valid range for the drawn width.
    """
    n_frames, feat = features.shape
    if freq_param > feat:
        raise ValueError(f"frequency mask parameter {freq_param} exceeds feature dim {feat}")
    out = features.clone()
    for _ in range(n_freq):
        width = int(rng.integers(0, freq_param + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, feat - width + 1))
        out[:, start : start + width] = 0.0
    for _ in range(n_time):
        width = int(rng.integers(0, min(time_param, n_frames) + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, n_frames - width + 1))
        out[start : start + width, :] = 0.0
    return out


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    stage: str = "stage1"
    seed: int = 1

    # task
    n_tokens: int = 8
    feat_dim: int = 8
    min_duration: int = 8
    max_duration: int = 12
    min_tokens: int = 3
    max_tokens: int = 10
    noise: float = 0.3
    template_seed: int = 97
    data_seed: int = 11
    train_utts: int = 320
    dev_utts: int = 60

    # model
    factor: int = 4
    enc_hidden: int = 48
    enc_layers: int = 2
    dec_hidden: int = 48
    att_dim: int = 32
    embed_dim: int = 16
    chunk_width: int = 4
    init_r: float = -4.0
    dropout: float = 0.0

    # encoder chunking, raw frames (stage-2 only)
    chunk_nc: int = 16
    chunk_nr: int = 16

    # objective
    lambda_ctc: float = 0.3
    lambda_qua: float = 2.0
    lambda_sync: float = 0.0
    smoothing: float = 0.1

    # optimization
    lr: float = 1e-3
    decay: float = 0.9
    decay_start_epoch: int = 6
    epochs: int = 15
    batch_size: int = 32
    clip_norm: float = 5.0
    patience: int = 5

    # augmentation (stage-2 only)
    augment: bool = False
    aug_freq_param: int = 2
    aug_time_param: int = 8
    aug_n_freq: int = 2
    aug_n_time: int = 2

    # outputs
    out_checkpoint: str = "model.ckpt"
    metrics_out: str = ""
    seed_checkpoint: str = ""

    def __post_init__(self):
        if self.stage not in ("stage1", "stage2"):
            raise ValueError(f"stage must be stage1 or stage2, got {self.stage!r}")
        if self.augment and self.stage != "stage2":
            raise ValueError("augmentation is a stage-2 setting; stage-1 runs unmasked")
        LossWeights(self.lambda_ctc, self.lambda_qua, self.lambda_sync)

    def task_spec(self) -> ToyTaskSpec:
        return ToyTaskSpec(
            n_tokens=self.n_tokens,
            feat_dim=self.feat_dim,
            min_duration=self.min_duration,
            max_duration=self.max_duration,
            min_tokens=self.min_tokens,
            max_tokens=self.max_tokens,
            noise=self.noise,
            template_seed=self.template_seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ctc, self.lambda_qua, self.lambda_sync)

    def encoder_chunk(self) -> Optional[ChunkConfig]:
        if self.stage == "stage2":
            return ChunkConfig(n_c=self.chunk_nc, n_r=self.chunk_nr)
        return None


_FIELD_TYPES = {
    f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
    for f in dataclasses.fields(TrainConfig)
}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r} for key {key}")
    return raw


def parse_config_text(text: str, overrides: Sequence[str] = ()) -> TrainConfig:
    """Parse plain key=value lines; '#' starts a comment; later overrides win.

    Unknown keys are rejected so typos fail loudly instead of silently using
    a default.
    """
    values: Dict[str, object] = {}

    def apply(line: str, where: str):
        body = line.split("#", 1)[0].strip()
        if not body:
            return
        if "=" not in body:
            raise ValueError(f"{where}: expected key=value, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{where}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)

    for idx, line in enumerate(text.splitlines(), 1):
        apply(line, f"line {idx}")
    for idx, ov in enumerate(overrides, 1):
        apply(ov, f"override {idx}")
    return TrainConfig(**values)


def parse_config_file(path: str, overrides: Sequence[str] = ()) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


_TASK_FIELDS = {
    f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
    for f in dataclasses.fields(ToyTaskSpec)
}


def parse_dataset_text(text: str) -> Tuple[ToyTaskSpec, int, int]:
    """A dataset file pins a generated batch: task fields plus seed and
    n_utts, same line syntax as configs. Returns (spec, seed, n_utts)."""
    values: Dict[str, object] = {}
    extras = {"seed": 1, "n_utts": 32}
    for idx, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {idx}: expected key=value, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if key in extras:
            extras[key] = int(raw)
        elif key in _TASK_FIELDS:
            values[key] = float(raw) if _TASK_FIELDS[key] == "float" else int(raw)
        else:
            raise ValueError(f"line {idx}: unknown dataset key {key!r}")
    return ToyTaskSpec(**values), extras["seed"], extras["n_utts"]


def load_dataset(path: str) -> List[Utterance]:
    with open(path, "r", encoding="utf-8") as fh:
        spec, seed, n_utts = parse_dataset_text(fh.read())
    return generate_toy_batch(spec, seed, n_utts)


def build_model(config: TrainConfig) -> StreamingTransducer:
    return StreamingTransducer(
        Vocab(config.n_tokens),
        feat_dim=config.feat_dim,
        factor=config.factor,
        enc_hidden=config.enc_hidden,
        enc_layers=config.enc_layers,
        dec_hidden=config.dec_hidden,
        att_dim=config.att_dim,
        embed_dim=config.embed_dim,
        chunk_width=config.chunk_width,
        dropout=config.dropout,
        init_r=config.init_r,
    )


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SSEQCKPT"
_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: StreamingTransducer, config: TrainConfig, path: str) -> None:
    """Self-describing binary file; identical model + config -> identical bytes.

    Layout: magic, version, header length, JSON header (config and sorted
    parameter names/shapes), raw little-endian float64 parameter buffers,
    crc32 of everything before it. Written to a temp file and renamed so a
    crash never leaves a truncated checkpoint behind.
    """
    state = model.state_dict()
    names = sorted(state.keys())
    header = {
        "config": dataclasses.asdict(config),
        "params": [[n, list(state[n].shape)] for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for n in names:
        buf.write(state[n].detach().to(DTYPE).numpy().astype("<f8").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.write(struct.pack("<I", crc))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Tuple[TrainConfig, Dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 12:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    if payload[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != _VERSION:
        raise CheckpointError(f"{path}: version {version} unsupported (want {_VERSION})")
    (hlen,) = struct.unpack_from("<I", payload, off)
    off += 4
    header = json.loads(payload[off : off + hlen].decode("utf-8"))
    off += hlen
    config = TrainConfig(**header["config"])
    state: Dict[str, torch.Tensor] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: parameter {name} truncated")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
        state[name] = torch.tensor(arr, dtype=DTYPE)
        off += nbytes
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing bytes")
    return config, state


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, dump_path: str):
        super().__init__(
            f"non-finite loss at step {step}; offending batch dumped to {dump_path}"
        )
        self.dump_path = dump_path


@dataclass
class TrainResult:
    model: StreamingTransducer
    config: TrainConfig
    history: List[LossBreakdown] = field(default_factory=list)
    dev_losses: List[float] = field(default_factory=list)
    best_dev: float = float("inf")
    steps: int = 0


def _dev_loss(model, dev, weights, smoothing, chunk) -> float:
    model.eval()
    with torch.no_grad():
        total = 0.0
        for u in dev:
            loss, _ = batch_loss(model, [u.features], [u.labels], weights, smoothing, chunk)
            total += loss.item()
    model.train()
    return total / len(dev)


def train_stage(
    config: TrainConfig,
    seed_state: Optional[Dict[str, torch.Tensor]] = None,
    metrics_path: Optional[str] = None,
) -> TrainResult:
    """Run one curriculum stage to convergence or the epoch budget.

    seed_state is the loaded parameter dict of an earlier stage; shapes must
    match because the encoder weights are shared between the offline and the
    chunked mode.
    """
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    spec = config.task_spec()
    train = generate_toy_batch(spec, config.data_seed, config.train_utts)
    dev = generate_toy_batch(spec, config.data_seed + 1, config.dev_utts)
    model = build_model(config)
    if seed_state is not None:
        model.load_state_dict(seed_state)
    weights = config.loss_weights()
    chunk = config.encoder_chunk()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    result = TrainResult(model=model, config=config)

    writer = None
    metrics_file = None
    if metrics_path:
        metrics_file = open(metrics_path, "w", encoding="utf-8", newline="")
        writer = csv.writer(metrics_file)
        writer.writerow(METRICS_COLUMNS)

    model.train()
    step = 0
    stale = 0
    best_state = None
    try:
        for epoch in range(config.epochs):
            order_rng = np.random.default_rng((config.seed, epoch))
            order = order_rng.permutation(len(train))
            aug_rng = np.random.default_rng((config.seed, epoch, 7))
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo : lo + config.batch_size]
                feats = []
                labels = []
                for k in idx:
                    u = train[int(k)]
                    f = u.features
                    if config.augment:
                        f = spec_augment(
                            f, config.aug_freq_param, config.aug_time_param,
                            config.aug_n_freq, config.aug_n_time, aug_rng,
                        )
                    feats.append(f)
                    labels.append(u.labels)
                loss, br = batch_loss(model, feats, labels, weights, config.smoothing, chunk)
                if not torch.isfinite(loss):
                    dump = os.path.abspath(f"diverged-step{step}.pt")
                    torch.save({"features": feats, "labels": labels, "step": step}, dump)
                    raise TrainingDiverged(step, dump)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
                opt.step()
                step += 1
                result.history.append(br)
                if writer:
                    writer.writerow(
                        [step, repr(br.mocha_nll), repr(br.ctc), repr(br.quantity),
                         repr(br.sync), repr(br.total)]
                    )
            # exponential step-size decay after the warm period
            if epoch + 1 >= config.decay_start_epoch:
                scale = config.decay ** (epoch + 2 - config.decay_start_epoch)
                for group in opt.param_groups:
                    group["lr"] = config.lr * scale
            dev_loss = _dev_loss(model, dev, weights, config.smoothing, chunk)
            result.dev_losses.append(dev_loss)
            log.info("epoch %d step %d dev_loss %.6f", epoch + 1, step, dev_loss)
            if dev_loss < result.best_dev - 1e-9:
                result.best_dev = dev_loss
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop after %d stale evaluations", stale)
                    break
    finally:
        if metrics_file:
            metrics_file.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.steps = step
    return result
