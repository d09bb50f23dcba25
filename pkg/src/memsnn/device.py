"""MIF neuron and alpha synaptic current dynamics.

State updates are written against :mod:`memsnn.autodiff` primitives so the
same code runs on floats, numpy arrays (one neuron per element) or tape
Vars.  All quantities are SI units: volts, ohms, seconds, amperes, farads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
from scipy.optimize import brentq

from . import autodiff as ad
from .errors import ConfigError, DomainError, NonFiniteError


@dataclass(frozen=True)
class MifParams:
    r_on1: float = 1e3
    r_off1: float = 1e5
    r_on2: float = 1e3
    r_off2: float = 1e5
    v_on1: float = 0.110
    v_off1: float = 0.005
    v_on2: float = 0.110
    v_off2: float = 0.005
    tau1: float = 1e-3
    tau2: float = 1e-3
    e_rest: float = 0.0
    e_reset: float = 0.050
    v_th: float = 0.025
    k_v: float = 0.6
    c: float = 100e-12

    def __post_init__(self):
        for on, off in ((self.r_on1, self.r_off1), (self.r_on2, self.r_off2)):
            if not 0 < on < off:
                raise ConfigError(f"need 0 < r_on < r_off, got {on}, {off}")
        if not 0 < self.k_v <= 1:
            raise ConfigError(f"k_v must lie in (0, 1], got {self.k_v}")
        if self.c <= 0 or self.tau1 <= 0 or self.tau2 <= 0 or self.v_th <= 0:
            raise ConfigError("c, tau1, tau2 and v_th must be positive")

    @property
    def slope(self) -> float:
        return self.v_th * self.k_v


@dataclass
class MifState:
    v: object
    x1: object
    x2: object


@dataclass(frozen=True)
class AlphaParams:
    tau_syn: float = 0.64e-3

    def __post_init__(self):
        if self.tau_syn <= 0:
            raise ConfigError(f"tau_syn must be positive, got {self.tau_syn}")


@dataclass
class AlphaState:
    i: object = 0.0
    a: object = 0.0


class Integrator(str, enum.Enum):
    EXPONENTIAL_EULER = "expeuler"
    FORWARD_EULER = "euler"


@dataclass(frozen=True)
class StepConfig:
    dt: float = 1e-5
    integrator: Integrator = Integrator.EXPONENTIAL_EULER
    substeps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "integrator", Integrator(self.integrator))
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ConfigError(f"substeps must be a positive integer, got {self.substeps}")


def conductance(x, r_on, r_off):
    """Memristor conductance for occupancy ``x`` in [0, 1]."""
    xv = ad.value_of(x)
    if np.any(xv < -1e-12) or np.any(xv > 1 + 1e-12):
        raise DomainError("memristor state outside [0, 1]")
    return x * (1.0 / r_on - 1.0 / r_off) + 1.0 / r_off


def state_rate(x, v_drop, *, v_on, v_off, tau, v_th, k_v):
    """dx/dt of the metastable-switch population.

    Bounded by 1/tau in magnitude: both logistic factors lie in [0, 1] and
    are weighted by (1 - x) and x.
    """
    slope = v_th * k_v
    p_on = ad.logistic((v_drop - v_on) / slope)
    p_off = ad.logistic((v_off - v_drop) / slope)
    return ((1.0 - x) * p_on - x * p_off) / tau


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(ad.value_of(x))):
            raise NonFiniteError("MIF state became non-finite; the integrator is unstable at this dt")


def mif_step(state: MifState, params: MifParams, i_in, cfg: StepConfig = StepConfig()) -> MifState:
    v, x1, x2 = state.v, state.x1, state.x2
    h = cfg.dt / cfg.substeps
    p = params
    # overflow surfaces as NonFiniteError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.substeps):
            g1 = conductance(x1, p.r_on1, p.r_off1)
            g2 = conductance(x2, p.r_on2, p.r_off2)
            if cfg.integrator is Integrator.EXPONENTIAL_EULER:
                g_sum = g1 + g2
                v_inf = (g1 * p.e_rest + g2 * p.e_reset + i_in) / g_sum
                v_new = v_inf + (v - v_inf) * ad.exp(g_sum * (-h / p.c))
            else:
                v_new = v + (i_in - g1 * (v - p.e_rest) - g2 * (v - p.e_reset)) * (h / p.c)
            r1 = state_rate(x1, v - p.e_rest, v_on=p.v_on1, v_off=p.v_off1, tau=p.tau1, v_th=p.v_th, k_v=p.k_v)
            r2 = state_rate(x2, v - p.e_reset, v_on=p.v_on2, v_off=p.v_off2, tau=p.tau2, v_th=p.v_th, k_v=p.k_v)
            x1 = ad.clip(x1 + r1 * h, 0.0, 1.0)
            x2 = ad.clip(x2 + r2 * h, 0.0, 1.0)
            v = v_new
            _check_finite(v, x1, x2)
    return MifState(v, x1, x2)


def alpha_step(state: AlphaState, params: AlphaParams, spike_weight, cfg: StepConfig = StepConfig()) -> AlphaState:
    """One Euler step of the alpha current; a spike adds its weight to ``a``."""
    k = cfg.dt / params.tau_syn
    a = state.a + state.a * (-k) + spike_weight
    i = state.i + (a - state.i) * k
    return AlphaState(i=i, a=a)


def equilibrium_occupancy(v_drop, v_on, v_off, slope):
    p_on = 1.0 / (1.0 + math.exp(-(v_drop - v_on) / slope))
    p_off = 1.0 / (1.0 + math.exp(-(v_off - v_drop) / slope))
    return p_on / (p_on + p_off)


def rest_state(params: MifParams) -> MifState:
    """The undriven equilibrium; a fixed point of both integrators."""
    p = params

    def occupancies(v):
        x1 = equilibrium_occupancy(v - p.e_rest, p.v_on1, p.v_off1, p.slope)
        x2 = equilibrium_occupancy(v - p.e_reset, p.v_on2, p.v_off2, p.slope)
        return x1, x2

    def residual(v):
        x1, x2 = occupancies(v)
        g1 = float(conductance(x1, p.r_on1, p.r_off1))
        g2 = float(conductance(x2, p.r_on2, p.r_off2))
        return v - (g1 * p.e_rest + g2 * p.e_reset) / (g1 + g2)

    lo, hi = sorted((p.e_rest, p.e_reset))
    v = brentq(residual, lo, hi, xtol=1e-18, rtol=4 * np.finfo(float).eps)
    x1, x2 = occupancies(v)
    return MifState(v, x1, x2)


@dataclass
class NeuronTrace:
    v: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    i: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.v))


def _schedule(spike_schedule: Iterable[tuple[int, float]], steps: int) -> np.ndarray:
    drive = np.zeros(steps)
    for step, weight in spike_schedule:
        if 0 <= step < steps:
            drive[int(step)] += weight
    return drive


def simulate_neuron(params: MifParams = MifParams(), alpha: AlphaParams = AlphaParams(),
                    spike_schedule: Sequence[tuple[int, float]] = (), steps: int = 1000,
                    cfg: StepConfig = StepConfig(), initial: MifState | None = None) -> NeuronTrace:
    """Drive one neuron with an alpha current; sample ``k`` is the state after step ``k``."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    drive = _schedule(spike_schedule, steps)
    state = initial if initial is not None else rest_state(params)
    syn = AlphaState()
    out = np.empty((steps, 4))
    for k in range(steps):
        syn = alpha_step(syn, alpha, drive[k], cfg)
        state = mif_step(state, params, syn.i, cfg)
        out[k] = state.v, state.x1, state.x2, syn.i
    return NeuronTrace(*out.T.copy())


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-min(max(z, -ad.EXP_CLAMP), ad.EXP_CLAMP)))


def _rate(x, drop, v_on, v_off, tau, slope):
    return ((1.0 - x) * _sigmoid((drop - v_on) / slope) - x * _sigmoid((v_off - drop) / slope)) / tau


def _derivative(y, p: MifParams, tau_syn: float):
    # scalar math: this runs 4 * steps * substeps times per trace
    v, x1, x2, i, a = y
    g1 = x1 / p.r_on1 + (1 - x1) / p.r_off1
    g2 = x2 / p.r_on2 + (1 - x2) / p.r_off2
    return (
        (i - g1 * (v - p.e_rest) - g2 * (v - p.e_reset)) / p.c,
        _rate(x1, v - p.e_rest, p.v_on1, p.v_off1, p.tau1, p.slope),
        _rate(x2, v - p.e_reset, p.v_on2, p.v_off2, p.tau2, p.slope),
        (a - i) / tau_syn,
        -a / tau_syn,
    )


def rk4_reference(params: MifParams = MifParams(), alpha: AlphaParams = AlphaParams(),
                  spike_schedule: Sequence[tuple[int, float]] = (), steps: int = 1000,
                  dt_inner: float = 1e-6, dt: float = 1e-5, initial: MifState | None = None) -> NeuronTrace:
    """Classic RK4 on the continuous system, sampled every ``dt``.

    Verification only.  A spike at step ``k`` is an impulse into ``a`` at
    time ``k * dt``; sample ``k`` is the state at ``(k + 1) * dt``.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if not 0 < dt_inner <= dt:
        raise ConfigError("need 0 < dt_inner <= dt")
    n = max(1, round(dt / dt_inner))
    h = dt / n
    drive = _schedule(spike_schedule, steps)
    s = initial if initial is not None else rest_state(params)
    y = [float(s.v), float(s.x1), float(s.x2), 0.0, 0.0]
    out = np.empty((steps, 4))
    f = _derivative
    tau = alpha.tau_syn
    try:
        for k in range(steps):
            y[4] += drive[k]
            for _ in range(n):
                k1 = f(y, params, tau)
                k2 = f([a + 0.5 * h * b for a, b in zip(y, k1)], params, tau)
                k3 = f([a + 0.5 * h * b for a, b in zip(y, k2)], params, tau)
                k4 = f([a + h * b for a, b in zip(y, k3)], params, tau)
                y = [a + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
                     for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
            if not all(map(math.isfinite, y)):
                raise NonFiniteError(f"RK4 diverged at step {k}; reduce dt_inner")
            out[k] = y[:4]
    except OverflowError as exc:
        raise NonFiniteError("RK4 diverged; reduce dt_inner") from exc
    return NeuronTrace(*out.T.copy())


# A single alpha impulse, after a 100-step rest, large enough to carry the
# membrane through threshold, an undershoot below rest and back.
STANDARD_DRIVE = ((100, 5e-6),)


def load_device_config(path: str | Path) -> tuple[MifParams, AlphaParams, StepConfig]:
    """Read flat TOML keys named after the dataclass fields; missing keys keep defaults."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return device_config_from_dict(raw)


def device_config_from_dict(raw: dict) -> tuple[MifParams, AlphaParams, StepConfig]:
    groups = (MifParams, AlphaParams, StepConfig)
    known = {f.name: cls for cls in groups for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {cls: {} for cls in groups}
    for key, value in raw.items():
        kwargs[known[key]][key] = value
    try:
        return tuple(cls(**kwargs[cls]) for cls in groups)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
