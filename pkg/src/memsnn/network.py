"""Fully memristive dense network: alpha encoder, crossbars and MIF layers.

A batch is processed in one pass: every per-neuron state is an array of
shape ``(B, n)``.  Weights may be swapped for tape Vars to differentiate the
unrolled computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .device import (AlphaParams, AlphaState, MifParams, MifState, StepConfig,
                     alpha_step, mif_step)
from .errors import ConfigError, ShapeError


@dataclass
class CrossbarLayer:
    """Bit-line current summation ``I_n = attenuation * sum_i w_ni v_i``."""

    weights: np.ndarray
    attenuation: float = 1e-6

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("crossbar weights must be a matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigError("crossbar weights must be finite")
        if self.attenuation <= 0:
            raise ConfigError("attenuation must be positive")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class MifLayer:
    n: int
    params: MifParams = field(default_factory=MifParams)

    def initial_state(self, batch: int) -> MifState:
        shape = (batch, self.n)
        return MifState(np.full(shape, self.params.e_rest), np.zeros(shape), np.zeros(shape))


@dataclass
class AlphaEncoder:
    """Turns intensities (static) or per-step event counts into alpha currents.

    Static inputs inject ``input_gain * intensity`` every ``spike_period``
    steps; event inputs inject ``input_gain * count`` on every step.
    """

    n: int
    params: AlphaParams = field(default_factory=AlphaParams)
    spike_period: int = 100
    input_gain: float = 3e-5
    events: bool = False

    def __post_init__(self):
        if self.spike_period < 1:
            raise ConfigError("spike_period must be >= 1")
        if self.input_gain <= 0:
            raise ConfigError("input_gain must be positive")

    def initial_state(self, batch: int) -> AlphaState:
        return AlphaState(np.zeros((batch, self.n)), np.zeros((batch, self.n)))


def crossbar_forward(layer: CrossbarLayer, v_in, weights=None):
    w = layer.weights if weights is None else weights
    if np.shape(ad.value_of(v_in))[-1] != layer.n_in:
        raise ShapeError(f"crossbar expects {layer.n_in} inputs, got {np.shape(ad.value_of(v_in))}")
    return ad.scale(ad.matvec(w, v_in), layer.attenuation)


def encode_step(enc: AlphaEncoder, state: AlphaState, inputs, t: int, cfg: StepConfig = StepConfig()) -> AlphaState:
    """Advance the encoder one step; the returned ``.i`` is the drive current.

    ``inputs`` is the intensity vector for static data or the event counts
    of step ``t`` for event data.
    """
    if enc.events:
        weight = enc.input_gain * np.asarray(inputs, dtype=np.float64)
    elif t % enc.spike_period == 0:
        weight = enc.input_gain * np.asarray(inputs, dtype=np.float64)
    else:
        weight = 0.0
    return alpha_step(state, enc.params, weight, cfg)


def encode(enc: AlphaEncoder, sample: np.ndarray, steps: int, cfg: StepConfig = StepConfig()) -> np.ndarray:
    """Drive currents for a whole batch, shape ``(steps, B, n)``.

    Static samples are ``(B, n)``; event samples are ``(B, T, n)`` with
    ``T >= steps``.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if enc.events:
        if sample.ndim != 3 or sample.shape[2] != enc.n or sample.shape[1] < steps:
            raise ShapeError(f"event batch must be (B, >={steps}, {enc.n}), got {sample.shape}")
    elif sample.ndim != 2 or sample.shape[1] != enc.n:
        raise ShapeError(f"static batch must be (B, {enc.n}), got {sample.shape}")
    state = enc.initial_state(sample.shape[0])
    out = np.empty((steps,) + state.i.shape)
    for t in range(steps):
        state = encode_step(enc, state, sample[:, t] if enc.events else sample, t, cfg)
        out[t] = state.i
    return out


@dataclass
class MsnnModel:
    encoder: AlphaEncoder
    layers: list
    step: StepConfig = field(default_factory=StepConfig)

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], MifLayer):
            raise ConfigError("the last layer must be a MIF layer")
        width = self.encoder.n
        expect_crossbar = True
        for layer in self.layers:
            if expect_crossbar != isinstance(layer, CrossbarLayer):
                raise ConfigError("layers must alternate crossbar, MIF, crossbar, ...")
            if isinstance(layer, CrossbarLayer):
                if layer.n_in != width:
                    raise ShapeError(f"crossbar expects {layer.n_in} inputs, previous layer has {width}")
                width = layer.n_out
            elif layer.n != width:
                raise ShapeError(f"MIF layer of {layer.n} neurons after {width} currents")
            expect_crossbar = not expect_crossbar

    @property
    def crossbars(self) -> list[CrossbarLayer]:
        return [layer for layer in self.layers if isinstance(layer, CrossbarLayer)]

    @property
    def weights(self) -> list[np.ndarray]:
        return [c.weights for c in self.crossbars]

    def set_weights(self, weights: Sequence[np.ndarray]):
        for c, w in zip(self.crossbars, weights, strict=True):
            if np.shape(w) != c.weights.shape:
                raise ShapeError("weight shape changed")
            c.weights = np.array(w, dtype=np.float64)

    @property
    def arch(self) -> list[int]:
        return [self.encoder.n] + [c.n_out for c in self.crossbars]


@dataclass
class ForwardTrace:
    """``v_out`` is ``(T, B, classes)``; a tape Var when weights were Vars."""

    v_out: object
    hidden: list[np.ndarray] = field(default_factory=list)

    @property
    def v_out_values(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.v_out))

    @property
    def steps(self) -> int:
        return self.v_out_values.shape[0]


def parse_arch(text: str) -> list[int]:
    """'784-100-10' or '784,100,10' -> [784, 100, 10]."""
    parts = text.replace(",", "-").split("-")
    try:
        sizes = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad architecture string {text!r}") from exc
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"architecture needs >= 2 positive sizes, got {text!r}")
    return sizes


def init_weights(arch: Sequence[int], seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        bound = 1.0 / np.sqrt(n_in)
        out.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
    return out


def build_model(arch: Sequence[int] = (784, 100, 10), seed: int = 0, *, input_gain: float = 3e-5,
                input_attenuation: float = 1.0, attenuation: float = 3e-5, spike_period: int = 100,
                events: bool = False, params: MifParams | None = None, alpha: AlphaParams | None = None,
                step: StepConfig | None = None) -> MsnnModel:
    """Dense stack with seeded uniform(+-1/sqrt(fan_in)) weights.

    The first crossbar carries encoder currents (attenuation in A/A); later
    crossbars read membrane voltages (attenuation in A/V).
    """
    params = params or MifParams()
    encoder = AlphaEncoder(arch[0], alpha or AlphaParams(), spike_period, input_gain, events)
    layers: list = []
    for k, w in enumerate(init_weights(arch, seed)):
        layers.append(CrossbarLayer(w, input_attenuation if k == 0 else attenuation))
        layers.append(MifLayer(w.shape[0], params))
    return MsnnModel(encoder, layers, step or StepConfig())


def model_forward(model: MsnnModel, sample, steps: int, weights: Sequence | None = None,
                  record_hidden: bool = False) -> ForwardTrace:
    """Unroll the network from the reset state for ``steps`` steps.

    ``weights`` optionally replaces the crossbar matrices, e.g. with tape
    leaves.  An unbatched sample is promoted to a batch of one.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim == (2 if model.encoder.events else 1):
        sample = sample[None]
    crossbars = model.crossbars
    if weights is None:
        weights = [c.weights for c in crossbars]
    if len(weights) != len(crossbars):
        raise ShapeError("one weight matrix per crossbar required")

    drive = encode(model.encoder, sample, steps, model.step)
    batch = sample.shape[0]
    mif_layers = [layer for layer in model.layers if isinstance(layer, MifLayer)]
    states = [layer.initial_state(batch) for layer in mif_layers]
    outputs = []
    hidden = [[] for _ in mif_layers[:-1]] if record_hidden else []
    for t in range(steps):
        signal = drive[t]
        for k, (xbar, w, layer) in enumerate(zip(crossbars, weights, mif_layers)):
            current = crossbar_forward(xbar, signal, w)
            states[k] = mif_step(states[k], layer.params, current, model.step)
            signal = states[k].v
            if record_hidden and k < len(hidden):
                hidden[k].append(np.array(ad.value_of(signal)))
        outputs.append(signal)
    return ForwardTrace(ad.stack(outputs), [np.stack(h) for h in hidden])


def count_spikes(v: np.ndarray, threshold: float = 0.025) -> np.ndarray:
    """Rising threshold crossings along axis 0 (time), per neuron."""
    v = np.asarray(v)
    rising = (v[:-1] < threshold) & (v[1:] >= threshold)
    return rising.sum(axis=0)


def activity(v: np.ndarray, threshold: float = 0.025) -> float:
    """Mean fraction of neurons above threshold at any given step."""
    return float(np.mean(np.asarray(v) >= threshold))
