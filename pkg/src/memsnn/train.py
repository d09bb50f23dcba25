"""Training loop: membrane-potential NLL, BPTT through the tape, Adam."""

from __future__ import annotations

import csv
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, make_batches
from .device import AlphaParams, MifParams, StepConfig
from .errors import BadMagic, ConfigError, DataError, NonFiniteError, TruncatedFile
from .network import (AlphaEncoder, CrossbarLayer, MifLayer, MsnnModel, count_spikes,
                      model_forward)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSNN"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    steps: int = 1000
    seed: int = 0
    softmax_beta: float = 100.0
    patience: int = 5
    eval_fraction: float = 0.1
    eval_steps: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.steps < 1:
            raise ConfigError("epochs, batch_size and steps must be >= 1")
        if self.softmax_beta <= 0:
            raise ConfigError("softmax_beta must be positive")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights])


def adam_step(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> list[np.ndarray]:
    """Bias-corrected Adam; advances ``state`` in place and returns new weights."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to the optimizer")
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    out = []
    for k, (w, g) in enumerate(zip(weights, grads, strict=True)):
        state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out.append(w - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def loss_nll_membrane(v_out, target, beta: float = 100.0):
    """Sum over steps of -log softmax(beta * v)[target], averaged over the batch.

    ``v_out`` is ``(T, classes)`` for one sample or ``(T, B, classes)``.
    """
    vals = np.asarray(ad.value_of(v_out))
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("non-finite output membrane potential")
    target = np.atleast_1d(np.asarray(target, dtype=int))
    n_classes = vals.shape[-1]
    onehot = np.eye(n_classes)[target]
    if vals.ndim == 2:
        onehot = onehot[0]
    batch = 1 if vals.ndim == 2 else vals.shape[1]
    logp = ad.log_softmax(ad.scale(v_out, beta))
    return ad.scale(ad.sum(ad.mul(logp, onehot)), -1.0 / batch)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    activity: float = 0.0
    spikes_per_neuron: float = 0.0


def predict(v_out: np.ndarray, readout: str = "membrane", threshold: float = 0.025) -> np.ndarray:
    if readout == "membrane":
        return np.argmax(np.sum(v_out, axis=0), axis=-1)
    if readout == "spikes":
        return np.argmax(count_spikes(v_out, threshold), axis=-1)
    raise ConfigError(f"unknown readout {readout!r}")


def evaluate(model: MsnnModel, inputs: np.ndarray, labels: np.ndarray, steps: int,
             batch_size: int = 256, readout: str = "membrane", n_classes: int | None = None) -> EvalResult:
    """Tape-free accuracy and confusion matrix (rows = true class)."""
    n_classes = n_classes or model.arch[-1]
    labels = np.asarray(labels, dtype=int)
    preds = np.empty(len(labels), dtype=int)
    above = 0.0
    cells = 0
    spikes = 0
    for start in range(0, len(labels), batch_size):
        trace = model_forward(model, inputs[start:start + batch_size], steps, record_hidden=True)
        v = trace.v_out_values
        preds[start:start + batch_size] = predict(v, readout, model.layers[-1].params.v_th)
        for layer_v in trace.hidden + [v]:
            above += np.sum(layer_v >= model.layers[-1].params.v_th)
            cells += layer_v.size
            spikes += int(count_spikes(layer_v).sum())
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(confusion, (labels, preds), 1)
    n_neurons = sum(model.arch[1:])
    return EvalResult(
        accuracy=float(np.mean(preds == labels)) if len(labels) else float("nan"),
        confusion=confusion,
        predictions=preds,
        activity=above / cells if cells else 0.0,
        spikes_per_neuron=spikes / (n_neurons * max(len(labels), 1)),
    )


def batch_gradients(model: MsnnModel, batch: Batch, steps: int, beta: float, workers: int = 1):
    """Mean batch loss and its gradient w.r.t. every crossbar matrix.

    With ``workers > 1`` the batch is split into shards, each on its own
    tape, and shard results are combined in shard order.
    """
    n = len(batch.labels)
    shards = np.array_split(np.arange(n), min(workers, n))

    def run(idx):
        tape = ad.Tape()
        leaves = [tape.leaf(w) for w in model.weights]
        trace = model_forward(model, batch.inputs[idx], steps, weights=leaves)
        loss = loss_nll_membrane(trace.v_out, batch.labels[idx], beta)
        grads = ad.backward(tape, loss, leaves)
        return float(loss.value), [grads[leaf] for leaf in leaves], len(idx)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, shards))
    else:
        results = [run(shards[0])]
    loss = sum(l * k for l, _, k in results) / n
    grads = [sum(g[j] * (k / n) for _, g, k in results) for j in range(len(model.weights))]
    return loss, grads


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    checkpoint: Checkpoint
    best_epoch: int


def model_config(model: MsnnModel) -> dict:
    enc = model.encoder
    return {
        "arch": model.arch,
        "attenuation": [c.attenuation for c in model.crossbars],
        "input_gain": enc.input_gain,
        "spike_period": enc.spike_period,
        "events": enc.events,
        "mif": asdict(model.layers[-1].params),
        "alpha": asdict(enc.params),
        "step": {**asdict(model.step), "integrator": model.step.integrator.value},
    }


def make_checkpoint(model: MsnnModel, cfg: TrainConfig | None = None, history=()) -> Checkpoint:
    weights = {f"crossbar{k}": np.array(w) for k, w in enumerate(model.weights)}
    config = {"model": model_config(model)}
    if cfg is not None:
        config["train"] = asdict(cfg)
    return Checkpoint(weights, config, [asdict(h) if isinstance(h, EpochRecord) else dict(h) for h in history])


def model_from_checkpoint(ckpt: Checkpoint) -> MsnnModel:
    mc = ckpt.config["model"]
    params = MifParams(**mc["mif"])
    encoder = AlphaEncoder(mc["arch"][0], AlphaParams(**mc["alpha"]), mc["spike_period"],
                           mc["input_gain"], mc["events"])
    layers: list = []
    for k, att in enumerate(mc["attenuation"]):
        w = ckpt.weights[f"crossbar{k}"]
        layers.append(CrossbarLayer(np.array(w), att))
        layers.append(MifLayer(w.shape[0], params))
    return MsnnModel(encoder, layers, StepConfig(**mc["step"]))


def train(model: MsnnModel, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          eval_inputs: np.ndarray | None = None, eval_labels: np.ndarray | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Adam on the crossbar weights with early stopping on validation accuracy.

    Validation data: ``eval_inputs`` if given, else a seeded ``eval_fraction``
    hold-out of the training set, else (fraction 0) the training set itself.
    Epoch 0 records the untrained model.  The model ends holding the best
    weights.
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise DataError("training set is empty")
    if eval_inputs is None:
        if cfg.eval_fraction > 0:
            order = np.random.default_rng(cfg.seed).permutation(len(labels))
            n_val = max(1, int(round(cfg.eval_fraction * len(labels))))
            val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
            eval_inputs, eval_labels = inputs[val_idx], labels[val_idx]
            inputs, labels = inputs[train_idx], labels[train_idx]
        else:
            eval_inputs, eval_labels = inputs, labels
    eval_steps = cfg.eval_steps or cfg.steps

    def validate():
        return evaluate(model, eval_inputs, eval_labels, eval_steps).accuracy

    adam = AdamState.zeros_like(model.weights)
    history = [EpochRecord(0, float("nan"), validate())]
    if on_epoch:
        on_epoch(history[0])
    best = (history[0].val_acc, 0, [w.copy() for w in model.weights])
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for b, batch in enumerate(make_batches((inputs, labels), cfg.batch_size, cfg.seed + epoch, shuffle=True)):
            try:
                loss, grads = batch_gradients(model, batch, cfg.steps, cfg.softmax_beta, cfg.workers)
                model.set_weights(adam_step(model.weights, grads, adam, cfg.lr))
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(loss)
        record = EpochRecord(epoch, float(np.mean(losses)), validate())
        history.append(record)
        if on_epoch:
            on_epoch(record)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, record.train_loss, record.val_acc)
        if record.val_acc > best[0]:
            best = (record.val_acc, epoch, [w.copy() for w in model.weights])
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.set_weights(best[2])
    return TrainResult(history, make_checkpoint(model, cfg, history), best[1])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(ckpt.weights))]
    for name, w in ckpt.weights.items():
        raw = name.encode()
        w = np.asarray(w, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{w.ndim}I", w.ndim, *w.shape))
        parts.append(np.ascontiguousarray(w).tobytes())
    blob = json.dumps({"config": ckpt.config, "history": ckpt.history}, allow_nan=True).encode()
    parts.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"{path}: checkpoint ends early")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    weights = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        weights[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    (blob_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(blob_len).decode())
    return Checkpoint(weights, meta["config"], meta["history"])


@dataclass
class ExportRow:
    tensor: str
    row: int
    col: int
    weight: float
    g_plus: float
    g_minus: float
    reconstructed: float

    @property
    def error(self) -> float:
        return abs(self.weight - self.reconstructed)


def export_weights(weights: dict[str, np.ndarray], r_on: float = 1e3, r_off: float = 1e5,
                   g_scale: float | None = None) -> tuple[list[ExportRow], float]:
    """Split signed weights into differential conductance pairs (G+, G-).

    ``g_scale`` (S per unit weight) defaults to mapping the largest |w| onto
    the full conductance window.  Returns the rows and the maximum
    reconstruction error ``|w - (G+ - G-) / g_scale|``.
    """
    g_min, g_max = 1.0 / r_off, 1.0 / r_on
    if g_scale is None:
        peak = max((float(np.max(np.abs(w))) for w in weights.values() if np.size(w)), default=0.0)
        g_scale = (g_max - g_min) / peak if peak > 0 else 1.0
    rows = []
    for name, w in weights.items():
        w = np.atleast_2d(w)
        g_plus = np.clip(np.maximum(w, 0) * g_scale + g_min, g_min, g_max)
        g_minus = np.clip(np.maximum(-w, 0) * g_scale + g_min, g_min, g_max)
        recon = (g_plus - g_minus) / g_scale
        for (i, j), val in np.ndenumerate(w):
            rows.append(ExportRow(name, i, j, float(val), float(g_plus[i, j]), float(g_minus[i, j]),
                                  float(recon[i, j])))
    max_err = max((r.error for r in rows), default=0.0)
    return rows, max_err


def write_export_csv(path: str | Path, rows: Sequence[ExportRow]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["tensor", "row", "col", "weight", "g_plus", "g_minus", "reconstructed", "error"])
        for r in rows:
            out.writerow([r.tensor, r.row, r.col, repr(r.weight), repr(r.g_plus), repr(r.g_minus),
                          repr(r.reconstructed), repr(r.error)])


def format_history(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_acc"]
    lines += [f"{h.epoch},{h.train_loss:.6g},{h.val_acc:.6f}" for h in history]
    return "\n".join(lines)

