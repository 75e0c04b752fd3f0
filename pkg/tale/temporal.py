import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, InputError
from .events import to_days, to_model_time
from .layers import MLP
from .schemas import SUPPORTED_VARIANTS, TimeWeightConfig

logger = logging.getLogger(__name__)

# Raw-day bin edges of the piecewise variant; the last bin is open-ended
PIECEWISE_EDGES_DAYS = (0.0, 7.0, 30.0, 90.0, 180.0, 365.0, 720.0)


class TemporalWeightFn(Protocol):
    variant: str

    def weights(self, dt: np.ndarray) -> Tensor:
        """
        Elementwise w(dt) for an array of non-negative model-time differences.

        Returns a tensor of the same shape as ``dt`` with values in [0, 1].
        """

    def between(self, t_a: np.ndarray, t_b: np.ndarray) -> Tensor:
        """w of the gap between two broadcastable arrays of model times."""

    def named_parameters(self) -> dict[str, Tensor]:
        ...


@dataclass
class PolynomialWeight:
    """w(dt) = sigmoid(a_0 + a_1 dt + ... + a_s dt^s)."""

    coefficients: Tensor
    variant: str = "polynomial"

    @property
    def order(self) -> int:
        return self.coefficients.shape[0] - 1

    def weights(self, dt: np.ndarray) -> Tensor:
        dt = np.asarray(dt, dtype=np.float64)
        basis = dt.reshape(-1, 1) ** np.arange(self.order + 1)
        z = ad.matmul(ad.constant(basis), self.coefficients)
        return ad.reshape(ad.sigmoid(z), dt.shape)

    def between(self, t_a: np.ndarray, t_b: np.ndarray) -> Tensor:
        return self.weights(model_time_gaps(t_a, t_b))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"wfn.coefficients": self.coefficients}


@dataclass
class MLPWeight:
    """w(dt) = sigmoid(MLP(dt)) with one GELU hidden layer."""

    net: MLP
    variant: str = "mlp"

    def weights(self, dt: np.ndarray) -> Tensor:
        dt = np.asarray(dt, dtype=np.float64)
        z = self.net(ad.constant(dt.reshape(-1, 1)))
        return ad.reshape(ad.sigmoid(z), dt.shape)

    def between(self, t_a: np.ndarray, t_b: np.ndarray) -> Tensor:
        return self.weights(model_time_gaps(t_a, t_b))

    def named_parameters(self) -> dict[str, Tensor]:
        return self.net.named_parameters("wfn.net")


@dataclass
class PiecewiseWeight:
    """One learnable logit per fixed raw-day interval.

    Bins are chosen by the gap in calendar days, so two events ten days apart share a bin no matter
    how far they sit from the initial record. ``weights`` takes a model-time gap measured from the
    origin, which is how curves are dumped.
    """

    logits: Tensor
    variant: str = "piecewise"

    def weights(self, dt: np.ndarray) -> Tensor:
        dt = np.asarray(dt, dtype=np.float64)
        return self._from_days(to_days(dt))

    def between(self, t_a: np.ndarray, t_b: np.ndarray) -> Tensor:
        return self._from_days(np.abs(to_days(t_a) - to_days(t_b)))

    def _from_days(self, days: np.ndarray) -> Tensor:
        return ad.sigmoid(ad.getitem(self.logits, day_bins(days)))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"wfn.logits": self.logits}


@dataclass
class ConstantWeight:
    """w(dt) = 1: attention without any temporal modulation."""

    variant: str = "constant"

    def weights(self, dt: np.ndarray) -> Tensor:
        return ad.constant(np.ones(np.shape(dt)))

    def between(self, t_a: np.ndarray, t_b: np.ndarray) -> Tensor:
        return self.weights(model_time_gaps(t_a, t_b))

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


def model_time_gaps(t_a: np.ndarray, t_b: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(t_a, dtype=np.float64) - np.asarray(t_b, dtype=np.float64))


def day_bins(days: np.ndarray) -> np.ndarray:
    return np.searchsorted(PIECEWISE_EDGES_DAYS, np.asarray(days, dtype=np.float64), side="right") - 1


def piecewise_bins(dt: np.ndarray) -> np.ndarray:
    """Bin of a model-time gap measured from the initial record."""

    return day_bins(to_days(dt))


def build_weight_fn(config: TimeWeightConfig, rng: np.random.Generator) -> TemporalWeightFn:
    variant = config.variant
    if variant == "polynomial":
        coefficients = np.zeros((config.order + 1, 1))
        coefficients[0, 0] = config.init_bias
        if config.order >= 1:
            coefficients[1, 0] = config.init_slope
        return PolynomialWeight(ad.parameter(coefficients))
    if variant == "mlp":
        net = MLP([1, config.mlp_width, 1], rng)
        net.output_layer.bias.data[:] = config.init_bias
        return MLPWeight(net)
    if variant == "piecewise":
        return PiecewiseWeight(ad.parameter(np.full(len(PIECEWISE_EDGES_DAYS), config.init_bias)))
    if variant == "constant":
        return ConstantWeight()
    raise InputError(f"Unsupported temporal weight variant: {variant} (expected one of {sorted(SUPPORTED_VARIANTS)})")


def evaluate(fn: TemporalWeightFn, dt: float) -> Tensor:
    """w(dt) for a single non-negative model-time difference, as a differentiable scalar."""

    if not dt >= 0:
        raise DomainError(f"time difference must be non-negative, got {dt}")
    return ad.reshape(fn.weights(np.array([dt])), ())


def dump_curve(fn: TemporalWeightFn, dt_grid_days: Sequence[float], out: str | Path) -> int:
    """Write ``dt_days,w`` rows, evaluating w at the preprocessed equivalent of each day value."""

    grid = np.asarray(list(dt_grid_days), dtype=np.float64)
    if grid.size == 0:
        raise InputError("dt grid must not be empty")
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise DomainError("dt grid values must be finite and non-negative")
    with ad.no_grad():
        w = fn.weights(to_model_time(grid)).data
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for days, value in zip(grid, w):
            writer.writerow([format(days, ".10g"), repr(float(value))])
    logger.info("Wrote %s-point %s weight curve to %s", grid.size, fn.variant, out)
    return int(grid.size)
