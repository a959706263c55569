"""Relaxed binary mask sampling (concrete dropout) in two algebraic forms.

Masks are sampled from per-pixel logits through a temperature-controlled
sigmoid relaxation.  Two mathematically equivalent formulations are provided:

* ``original``   -- the classic chained form
  ``z = sigmoid((log(sigmoid(v) / (1 - sigmoid(v))) + n) / t)``,
  kept verbatim with no algebraic shortcut.  In single precision the inner
  sigmoid rounds to 0 or 1 for moderately large ``|v|``, after which the
  division and logarithm produce non-finite intermediates and gradients.

* ``simplified`` -- the collapsed form ``z = sigmoid((v + n) / t)``, which is
  finite (values and gradients) for every finite input in every precision.

``n`` is the logit of uniform noise, ``n = log(eta / (1 - eta))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fidomasks import tensor as T
from fidomasks.tensor import Tape, Tensor, permissive

DEFAULT_TEMPERATURE = 0.1
FORMULATIONS = ("original", "simplified")


@dataclass
class MaskParams:
    """Unconstrained per-pixel logits; the attribution map is sigmoid(logits)."""

    logits: Tensor

    @classmethod
    def zeros(cls, height: int, width: int, precision: str = "double") -> "MaskParams":
        return cls(Tensor(np.zeros((height, width)), precision=precision, requires_grad=True))

    @property
    def shape(self) -> tuple:
        return self.logits.shape

    def theta(self) -> np.ndarray:
        """Current mask probabilities in (0, 1), computed off-tape."""
        from scipy.special import expit

        return expit(self.logits.data)


@dataclass
class NoiseDraw:
    """Uniform noise and its logit transform, drawn once per sampling step."""

    eta: np.ndarray
    eta_hat: np.ndarray


@dataclass
class MaskBatch:
    """A batch of sampled relaxed masks plus the settings that produced it."""

    values: Tensor
    formulation: str
    temperature: float
    noise: NoiseDraw | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def noise_logit(eta):
    """log(eta / (1 - eta)) for uniform draws strictly inside (0, 1)."""
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(eta <= 0.0) or np.any(eta >= 1.0):
        raise ValueError("noise_logit requires values strictly inside (0, 1)")
    return np.log(eta / (1.0 - eta))


def draw_noise(shape, rng: np.random.Generator) -> NoiseDraw:
    """Uniform noise on the open interval (0, 1); boundary draws are redrawn."""
    eta = rng.random(shape, dtype=np.float64)
    bad = eta <= 0.0
    while np.any(bad):
        eta[bad] = rng.random(int(bad.sum()), dtype=np.float64)
        bad = eta <= 0.0
    return NoiseDraw(eta=eta, eta_hat=noise_logit(eta))


def _prepare(logits, eta_hat, temperature: float):
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    noise = Tensor(np.asarray(eta_hat), precision=logits.precision)
    if noise.shape == logits.shape:
        batch = None
    elif noise.ndim == logits.ndim + 1 and noise.shape[1:] == logits.shape:
        batch = noise.shape[0]
    else:
        raise ValueError(f"noise shape {noise.shape} incompatible with logits {logits.shape}")
    return logits, noise, batch


def sample_original(logits, eta_hat, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Sample relaxed masks with the literal chained formulation.

    The chain sigmoid -> ratio -> log -> outer sigmoid is evaluated exactly as
    written so that its numerical breakdown in single precision is observable
    (strict mode raises on the first non-finite intermediate, permissive mode
    propagates it).
    """
    logits, noise, batch = _prepare(logits, eta_hat, temperature)
    theta = T.sigmoid(logits)
    if batch is not None:
        theta = T.expand(theta, 0, batch)
    ratio = T.div(theta, T.sub(1.0, theta))
    inner = T.add(T.log(ratio), noise)
    return T.sigmoid(T.div(inner, temperature))


def sample_simplified(logits, eta_hat, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Sample relaxed masks with the collapsed single-sigmoid formulation."""
    logits, noise, batch = _prepare(logits, eta_hat, temperature)
    if batch is not None:
        logits = T.expand(logits, 0, batch)
    return T.sigmoid(T.div(T.add(logits, noise), temperature))


_SAMPLERS = {"original": sample_original, "simplified": sample_simplified}


def sample_batch(
    params,
    batch_size: int,
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
    formulation: str = "simplified",
) -> MaskBatch:
    """Draw ``batch_size`` independent relaxed masks, deterministic in ``seed``.

    Noise comes from a counter-based Philox generator keyed by ``seed``; the
    same seed reproduces the batch bit for bit.  Uniform draws are made in
    double precision and their logits are cast to the working precision, so
    runs in different precisions share identical noise up to rounding.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if formulation not in _SAMPLERS:
        raise ValueError(f"unknown formulation {formulation!r}; expected one of {FORMULATIONS}")
    logits = params.logits if isinstance(params, MaskParams) else params
    rng = np.random.Generator(np.random.Philox(seed))
    noise = draw_noise((batch_size,) + logits.shape, rng)
    values = _SAMPLERS[formulation](logits, noise.eta_hat, temperature)
    return MaskBatch(values=values, formulation=formulation, temperature=temperature, noise=noise)


def sample_with_gradient(
    logits_values: np.ndarray,
    eta_hat: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    formulation: str = "simplified",
    precision: str = "double",
):
    """Forward values, d(sum z)/d(logits) and a non-finite census for one draw.

    Runs in permissive mode on a private tape and reports how many non-finite
    entries appeared anywhere in the forward intermediates, the outputs, or
    the gradient.  Because each mask entry depends only on its own logit, the
    returned gradient is the per-element derivative dz/dlogit.
    """
    logits = Tensor(logits_values, precision=precision, requires_grad=True)
    with permissive():
        with Tape() as tape:
            z = _SAMPLERS[formulation](logits, eta_hat, temperature)
            total = T.sum_(z)
        grad = tape.backward(total).get(logits, np.zeros_like(logits.data))
        nonfinite = tape.nonfinite_value_count()
        nonfinite += int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
    return z.data, grad, nonfinite
