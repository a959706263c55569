"""Score and loss terms for mask optimization.

The classifier score is the log-odds of the target-class probability.  The
two region objectives are Monte-Carlo estimates over a batch of sampled masks:

* ``ssr`` keeps the score high while penalizing the retained area ``|1 - z|``
  (smallest sufficient region);
* ``sdr`` pushes the score down while penalizing the perturbed area ``|z|``
  (smallest destroying region).

Both can add a total-variation coherency term.  By default TV is applied to
the expected mask sigmoid(logits), which is noise-free and deterministic;
``LossConfig.tv_per_sample`` switches it to the per-sample masks instead, for
comparison.  Either way the TV term is added outside the Monte-Carlo mean.
"""

from __future__ import annotations

from dataclasses import dataclass

from fidomasks import tensor as T
from fidomasks.tensor import Tensor

OBJECTIVES = ("ssr", "sdr")


@dataclass
class LossConfig:
    lambda_l1: float = 0.001
    tv_weight: float = 0.01
    prob_clamp_eps: float = 1e-6
    tv_per_sample: bool = False

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.tv_weight < 0:
            raise ValueError("regularization weights must be non-negative")
        if not 0.0 < self.prob_clamp_eps < 0.5:
            raise ValueError(f"prob_clamp_eps must be in (0, 0.5), got {self.prob_clamp_eps}")


def log_odds(p, eps: float = 1e-6) -> Tensor:
    """log(p / (1 - p)) with p clamped to [eps, 1 - eps] before the ratio."""
    if not isinstance(p, Tensor):
        p = Tensor(p)
    clamped = T.clip(p, eps, 1.0 - eps)
    return T.sub(T.log(clamped), T.log(T.sub(1.0, clamped)))


def total_variation(m: Tensor) -> Tensor:
    """Sum of squared horizontal and vertical neighbor differences.

    Works on a single (H, W) map or a (B, H, W) batch (summed over the batch).
    Zero exactly when the map is constant; invariant under m -> 1 - m.
    """
    if not isinstance(m, Tensor):
        m = Tensor(m)
    if m.ndim == 2:
        h = T.sub(m[:, 1:], m[:, :-1])
        v = T.sub(m[1:, :], m[:-1, :])
    elif m.ndim == 3:
        h = T.sub(m[:, :, 1:], m[:, :, :-1])
        v = T.sub(m[:, 1:, :], m[:, :-1, :])
    else:
        raise ValueError(f"total_variation expects (H, W) or (B, H, W), got {m.shape}")
    return T.add(T.sum_(T.mul(h, h)), T.sum_(T.mul(v, v)))


def _row_losses(scores, z, cfg: LossConfig, score_sign: float, penalize_retained: bool) -> Tensor:
    if not isinstance(scores, Tensor):
        scores = Tensor(scores)
    z_t = z.values if hasattr(z, "values") else z
    if not isinstance(z_t, Tensor):
        z_t = Tensor(z_t)
    if z_t.ndim != 3:
        raise ValueError(f"expected a (B, H, W) mask batch, got shape {z_t.shape}")
    batch = z_t.shape[0]
    if batch == 0:
        raise ValueError("empty mask batch")
    if scores.shape != (batch,):
        raise ValueError(f"scores shape {scores.shape} does not match batch size {batch}")
    area = T.sub(1.0, z_t) if penalize_retained else z_t
    penalty = T.sum_(T.abs_(area), axes=(1, 2))
    return T.add(T.mul(scores, score_sign), T.mul(penalty, cfg.lambda_l1))


def combine_loss(rows: Tensor, z, cfg: LossConfig, theta) -> Tensor:
    """Monte-Carlo mean of per-sample row losses plus the TV coherency term."""
    z_t = z.values if hasattr(z, "values") else z
    loss = T.mean(rows)
    if cfg.tv_weight > 0.0:
        if cfg.tv_per_sample:
            tv = T.div(total_variation(z_t), float(rows.shape[0]))
        else:
            if theta is None:
                raise ValueError("theta (expected mask) is required for the TV term")
            tv = total_variation(theta)
        loss = T.add(loss, T.mul(tv, cfg.tv_weight))
    return loss


def ssr_row_losses(scores, z, cfg: LossConfig) -> Tensor:
    """Per-sample smallest-sufficient-region terms: -score + l1 * |1 - z|."""
    return _row_losses(scores, z, cfg, score_sign=-1.0, penalize_retained=True)


def sdr_row_losses(scores, z, cfg: LossConfig) -> Tensor:
    """Per-sample smallest-destroying-region terms: +score + l1 * |z|."""
    return _row_losses(scores, z, cfg, score_sign=1.0, penalize_retained=False)


def ssr_loss(scores, z, cfg: LossConfig, theta=None) -> Tensor:
    """Monte-Carlo smallest-sufficient-region loss (mean row loss + TV term)."""
    return combine_loss(ssr_row_losses(scores, z, cfg), z, cfg, theta)


def sdr_loss(scores, z, cfg: LossConfig, theta=None) -> Tensor:
    """Monte-Carlo smallest-destroying-region loss (mean row loss + TV term)."""
    return combine_loss(sdr_row_losses(scores, z, cfg), z, cfg, theta)
