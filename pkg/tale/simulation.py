"""Synthetic event sequences with known ground truth.

Times are generated directly in model units on ``[0, T]``: homogeneous processes by exponential
inter-arrivals, the piecewise process by thinning against its maximum rate, and the
exponential-kernel self-exciting process by Ogata thinning.
"""

import logging

import numpy as np

from .errors import InputError
from .events import EventSequence
from .schemas import SyntheticTruth

logger = logging.getLogger(__name__)


def _poisson_times(rng: np.random.Generator, rate: float, T: float) -> list[float]:
    times: list[float] = []
    t = rng.exponential(1.0 / rate)
    while t < T:
        times.append(t)
        t += rng.exponential(1.0 / rate)
    return times


def _thinned_piecewise(rng: np.random.Generator, truth: SyntheticTruth, T: float) -> list[float]:
    bound = truth.max_rate()
    times: list[float] = []
    for candidate in _poisson_times(rng, bound, T):
        if rng.uniform() * bound <= truth.intensity(candidate):
            times.append(candidate)
    return times


def _ogata(rng: np.random.Generator, truth: SyntheticTruth, T: float) -> list[float]:
    mu, alpha, beta = truth.mu, truth.alpha_h, truth.beta_h
    times: list[float] = []
    t = 0.0
    # excitation = sum_i exp(-beta (t - t_i)) over accepted events, kept at the current time
    excitation = 0.0
    while True:
        bound = mu + alpha * excitation
        step = rng.exponential(1.0 / bound)
        t_next = t + step
        if t_next >= T:
            break
        excitation *= np.exp(-beta * step)
        t = t_next
        if rng.uniform() * bound <= mu + alpha * excitation:
            times.append(t)
            excitation += 1.0
    return times


def simulate(truth: SyntheticTruth, T: float, n_codes: int, seed: int, *,
             first_code: int | None = None, patient_id: str | None = None) -> tuple[EventSequence, SyntheticTruth]:
    """Draw one sequence. The result may contain no events."""

    if T <= 0:
        raise InputError(f"horizon T must be positive, got {T}")
    if n_codes < 1:
        raise InputError(f"n_codes must be >= 1, got {n_codes}")
    truth.check_stable()
    truth = truth.model_copy(update={"horizon": float(T)})
    rng = np.random.default_rng(seed)

    if truth.process_kind == "piecewise_poisson":
        times = _thinned_piecewise(rng, truth, T)
    elif truth.process_kind == "self_exciting":
        times = _ogata(rng, truth, T)
    else:
        times = _poisson_times(rng, truth.rate, T)

    if truth.code_rule == "cyclic":
        start = int(rng.integers(n_codes)) if first_code is None else first_code % n_codes
        codes = [(start + j) % n_codes for j in range(len(times))]
    else:
        codes = rng.integers(n_codes, size=len(times)).tolist()

    demographics = [float(rng.integers(2)), float(rng.uniform(0.2, 0.8))]
    seq = EventSequence(patient_id or f"sim-{seed}", times, codes, demographics, float(T))
    return seq, truth


def simulate_dataset(truth: SyntheticTruth, T: float, n_codes: int, n_seq: int, seed: int, *,
                     first_code: int | None = None) -> list[EventSequence]:
    """Independent sequences with per-sequence seeds spawned from ``seed``."""

    children = np.random.SeedSequence(seed).spawn(n_seq)
    sequences = []
    for i, child in enumerate(children):
        seq, _ = simulate(truth, T, n_codes, int(child.generate_state(1)[0]),
                          first_code=first_code, patient_id=f"sim-{seed}-{i}")
        sequences.append(seq)
    logger.info("Simulated %s %s sequences (T=%s, events=%s)", n_seq, truth.process_kind, T,
                sum(len(s) for s in sequences))
    return sequences
