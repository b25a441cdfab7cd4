"""
Link functions, sampling distributions and generation of 1-bit observations.

An observation y in {-1, +1} of the entry T(w) is +1 with probability f(T(w)),
where f is the link (dithering) function.  Both supported links are symmetric,
f(-x) = 1 - f(x), which the likelihood relies on.
"""
from typing import Optional, Sequence, Tuple, Union
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, ndtr, log_ndtr
from scipy.stats import norm

from one_bit_tensor.tensor_core import Shape, DenseTensor, check_shape, check_indices

import logging
logger = logging.getLogger(__name__)

LINK_KINDS = ("logistic", "probit")

DEFAULT_CLAMP: float = 1e-12

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class LinkConstants:
    """
    Steepness (L), flatness (beta) and range (U) constants of a link on [-alpha, alpha].
    For probit these are closed-form upper bounds rather than exact suprema.
    """
    alpha: float
    L: float
    beta: float
    U: float
    upper_bound: bool = False


@dataclass(frozen=True)
class LinkFunction:
    """
    Dithering model: logistic f(x) = e^x/(1+e^x) or probit f(x) = Phi(x/sigma).
    """
    kind: str = "logistic"
    sigma: float = 1.0
    eps: float = DEFAULT_CLAMP

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValueError(f"LinkFunction(): unknown link kind '{self.kind}', expected one of {LINK_KINDS}")
        if not self.sigma > 0:
            raise ValueError(f"LinkFunction(): sigma must be positive, got {self.sigma}")
        if not 0 < self.eps < 1e-6:
            raise ValueError(f"LinkFunction(): clamp eps must lie in (0, 1e-6), got {self.eps}")

    @classmethod
    def logistic(cls) -> "LinkFunction":
        return cls(kind="logistic")

    @classmethod
    def probit(cls, sigma: float) -> "LinkFunction":
        return cls(kind="probit", sigma=sigma)

    def describe(self) -> str:
        return "logistic" if self.kind == "logistic" else f"probit(sigma={self.sigma:g})"

    def cdf(self, x):
        """Unclamped f(x)."""
        if self.kind == "logistic":
            return expit(x)
        return ndtr(np.asarray(x, dtype=np.float64) / self.sigma)

    def pdf(self, x):
        """f'(x)."""
        if self.kind == "logistic":
            return expit(x) * expit(np.negative(x))
        return norm.pdf(np.asarray(x, dtype=np.float64) / self.sigma) / self.sigma

    def log_cdf(self, x):
        """log f(x), evaluated without forming f (stable deep in either tail)."""
        if self.kind == "logistic":
            return log_expit(x)
        return log_ndtr(np.asarray(x, dtype=np.float64) / self.sigma)

    def dlog_cdf(self, x):
        """f'(x) / f(x), the derivative of log f."""
        if self.kind == "logistic":
            return expit(np.negative(x))
        z = np.asarray(x, dtype=np.float64) / self.sigma
        return np.exp(norm.logpdf(z) - log_ndtr(z)) / self.sigma


def link_eval(link: LinkFunction, x) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate a link and its derivative.

    :param link: LinkFunction
    :param x: real or array of reals
    :return: Tuple, (f(x) clamped to [eps, 1 - eps], f'(x) of the unclamped f)
    """
    if not np.all(np.isfinite(x)):
        raise ValueError("link_eval(): arguments must be finite")
    f = np.clip(link.cdf(x), link.eps, 1.0 - link.eps)
    return f, link.pdf(x)


def link_constants(link: LinkFunction, alpha: float) -> LinkConstants:
    """
    Constants L_alpha, beta_alpha, U_alpha of a link on [-alpha, alpha].

    :param link: LinkFunction
    :param alpha: float, bound on the magnitude of tensor entries
    :return: LinkConstants
    """
    if not alpha > 0:
        raise ValueError(f"link_constants(): alpha must be positive, got {alpha}")
    if link.kind == "logistic":
        return LinkConstants(
            alpha=alpha,
            L=1.0,
            # (1 + e^a)^2 / e^a
            beta=2.0 + 2.0 * np.cosh(alpha),
            U=2.0 * np.logaddexp(alpha / 2.0, -alpha / 2.0),
            upper_bound=False
        )
    ratio = alpha / link.sigma
    return LinkConstants(
        alpha=alpha,
        L=4.0 / link.sigma * (ratio + 1.0),
        beta=np.pi * link.sigma ** 2 * np.exp(ratio ** 2 / 2.0),
        U=(ratio + 1.0) ** 2,
        upper_bound=True
    )


@dataclass(frozen=True, eq=False)
class SamplingDistribution:
    """
    Sampling distribution Pi over tensor indices; 'weights' of None marks the uniform distribution.
    """
    shape: Shape
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "shape", check_shape(self.shape))
        if self.weights is not None:
            pi = np.array(self.weights, dtype=np.float64)
            if pi.shape != self.shape:
                raise ValueError(f"SamplingDistribution(): weights of shape {pi.shape} do not match {self.shape}")
            if np.any(pi < 0) or not np.all(np.isfinite(pi)):
                raise ValueError("SamplingDistribution(): weights must be finite and nonnegative")
            if abs(pi.sum() - 1.0) > 1e-9:
                raise ValueError(f"SamplingDistribution(): weights sum to {pi.sum()}, not 1")
            pi.setflags(write=False)
            object.__setattr__(self, "weights", pi)

    @classmethod
    def uniform(cls, shape: Sequence[int]) -> "SamplingDistribution":
        return cls(shape=tuple(shape))

    @classmethod
    def point_mass(cls, shape: Sequence[int], index: Sequence[int]) -> "SamplingDistribution":
        shape = check_shape(shape)
        pi = np.zeros(shape)
        pi[tuple(check_indices([index], shape)[0])] = 1.0
        return cls(shape=shape, weights=pi)

    @property
    def is_uniform(self) -> bool:
        return self.weights is None

    def probabilities(self) -> np.ndarray:
        """Dense array of pi_w."""
        if self.weights is None:
            return np.full(self.shape, 1.0 / np.prod(self.shape))
        return self.weights


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """
    m sampled (index, sign) pairs of a tensor; duplicated indices are kept.
    """
    shape: Shape
    indices: np.ndarray
    labels: np.ndarray
    distribution: Optional[SamplingDistribution] = None
    link: Optional[LinkFunction] = None

    def __post_init__(self):
        shape = check_shape(self.shape)
        idx = check_indices(self.indices, shape)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if idx.shape[0] < 1:
            raise ValueError("ObservationSet(): at least one observation is required")
        if labels.shape[0] != idx.shape[0]:
            raise ValueError(f"ObservationSet(): {idx.shape[0]} indices but {labels.shape[0]} labels")
        if not np.all(np.isin(labels, (-1, 1))):
            raise ValueError("ObservationSet(): labels must be -1 or +1")
        distribution = self.distribution or SamplingDistribution.uniform(shape)
        if distribution.shape != shape:
            raise ValueError(f"ObservationSet(): sampling distribution shape {distribution.shape} != {shape}")
        idx.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "distribution", distribution)

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def dithered(self) -> bool:
        return self.link is not None

    @property
    def targets(self) -> np.ndarray:
        return self.labels

    def subset(self, positions: Sequence[int]) -> "ObservationSet":
        """Observations at the given sample positions (in the given order)."""
        positions = np.asarray(positions, dtype=np.int64)
        return ObservationSet(
            shape=self.shape,
            indices=self.indices[positions],
            labels=self.labels[positions],
            distribution=self.distribution,
            link=self.link
        )

    def flipped(self) -> "ObservationSet":
        """The same samples with every sign reversed."""
        return ObservationSet(
            shape=self.shape,
            indices=self.indices,
            labels=-self.labels,
            distribution=self.distribution,
            link=self.link
        )


@dataclass(frozen=True, eq=False)
class RealObservationSet:
    """
    m sampled (index, value) pairs of a tensor, observed without quantization.
    Fitted with a squared loss in place of the 1-bit likelihood.
    """
    shape: Shape
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        shape = check_shape(self.shape)
        idx = check_indices(self.indices, shape)
        values = np.array(self.values, dtype=np.float64).ravel()
        if idx.shape[0] < 1:
            raise ValueError("RealObservationSet(): at least one observation is required")
        if values.shape[0] != idx.shape[0]:
            raise ValueError(f"RealObservationSet(): {idx.shape[0]} indices but {values.shape[0]} values")
        if not np.all(np.isfinite(values)):
            raise ValueError("RealObservationSet(): values must be finite")
        idx.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def targets(self) -> np.ndarray:
        return self.values

    def subset(self, positions: Sequence[int]) -> "RealObservationSet":
        positions = np.asarray(positions, dtype=np.int64)
        return RealObservationSet(shape=self.shape, indices=self.indices[positions], values=self.values[positions])


def sample_indices(distribution: SamplingDistribution, m: int, seed: SeedLike = None) -> np.ndarray:
    """
    Draw m i.i.d. indices from Pi, with replacement.

    :param distribution: SamplingDistribution
    :param m: int, number of draws
    :param seed: seed or generator; identical seeds give identical draws
    :return: np.ndarray, m x d array of 0-based indices
    """
    if m < 1:
        raise ValueError(f"sample_indices(): number of samples must be positive, got {m}")
    rng = as_generator(seed)
    shape = distribution.shape
    if distribution.is_uniform:
        return np.stack([rng.integers(0, n, size=m) for n in shape], axis=1).astype(np.int64)
    linear = rng.choice(int(np.prod(shape)), size=m, replace=True, p=distribution.weights.ravel(order="F"))
    return np.stack(np.unravel_index(linear, shape, order="F"), axis=1).astype(np.int64)


UNDITHERED = "none"


def quantize(
        tensor: DenseTensor,
        indices: np.ndarray,
        link: Union[LinkFunction, str, None],
        seed: SeedLike = None,
        distribution: Optional[SamplingDistribution] = None
) -> ObservationSet:
    """
    1-bit measurements of a tensor at sampled indices.

    :param tensor: DenseTensor, ground truth
    :param indices: np.ndarray, m x d sampled 0-based indices
    :param link: LinkFunction for dithered measurements, or "none" for y = sign(T(w))
    :param seed: seed or generator for the dithering draws
    :param distribution: Optional[SamplingDistribution], recorded on the result (default: uniform)
    :return: ObservationSet
    """
    if link is None:
        raise ValueError("quantize(): dithered mode requires a link function (pass 'none' for undithered signs)")
    idx = check_indices(indices, tensor.shape)
    values = tensor.entries[tuple(idx.T)]
    if isinstance(link, LinkFunction):
        rng = as_generator(seed)
        uniforms = rng.random(idx.shape[0])
        labels = np.where(uniforms < link.cdf(values), 1, -1)
    elif link == UNDITHERED:
        # sign(0) = +1
        labels = np.where(values >= 0.0, 1, -1)
        link = None
    else:
        raise ValueError(f"quantize(): unknown link '{link}'")
    logger.debug(f"quantize(): {idx.shape[0]} samples, {int((labels > 0).sum())} positive")
    return ObservationSet(
        shape=tensor.shape,
        indices=idx,
        labels=labels,
        distribution=distribution,
        link=link
    )
