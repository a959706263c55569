"""The FIDO loop: sample mask batches, compose, score, and update the logits.

Each step draws a fresh noise batch, samples relaxed perturbation masks with
the configured concrete-dropout formulation, composes infilled inputs, scores
them with the classifier's log-odds, and takes one Adam step on the per-pixel
logits.  The tape is rebuilt every step, so memory stays bounded.

Orientation of the returned attribution maps: both are *importance* maps
(high = evidence for the target class).  Internally the sufficiency run
learns perturbation probabilities, so its importance map is the retention
probability 1 - sigmoid(logits); the destruction run's importance map is its
perturbation probability sigmoid(logits) directly.

The loop runs with permissive numerics by default so that the breakdown of
the chained formulation can be *measured*: non-finite gradient entries are
counted into the trace and zeroed before the update (leaving the affected
pixels frozen for that step).  With ``strict=True`` the first non-finite loss
or intermediate aborts the run instead, reporting the step index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from fidomasks import evaluation, objectives
from fidomasks import tensor as T
from fidomasks.dropout import FORMULATIONS, DEFAULT_TEMPERATURE, MaskParams, _SAMPLERS, draw_noise
from fidomasks.infill import InfillSpec, compose, make_infill
from fidomasks.objectives import LossConfig, log_odds, sdr_row_losses, ssr_row_losses
from fidomasks.optim import Adam
from fidomasks.tensor import NonFiniteError, Tape, Tensor, permissive

# Chosen so the default 100 steps drive saturated pixels into the regime
# where single precision separates the two formulations; see FidoConfig.
DEFAULT_MASK_LR = 0.2


class FidoError(RuntimeError):
    """Optimization aborted in strict mode; carries the failing step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class FidoConfig:
    objective: str = "ssr"
    formulation: str = "simplified"
    batch_size: int = 8
    steps: int = 100
    temperature: float = DEFAULT_TEMPERATURE
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    learning_rate: float = DEFAULT_MASK_LR
    seed: int = 0
    precision: str = "single"
    strict: bool = False
    track_per_sample: bool = False
    infill: InfillSpec = field(default_factory=InfillSpec)

    def __post_init__(self):
        if self.objective not in objectives.OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.precision not in T.PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class OptimizationTrace:
    """Per-step loss and gradient statistics; all lists have length ``steps``.

    ``grad_var`` is the mean over pixels of the empirical variance of the
    per-sample gradients across the mini-batch; it is NaN unless the run was
    configured with ``track_per_sample`` (which costs one backward pass per
    batch row).  ``nonfinite_count`` counts non-finite entries of the averaged
    gradient before they are zeroed.
    """

    loss: list = field(default_factory=list)
    grad_mean_abs: list = field(default_factory=list)
    grad_var: list = field(default_factory=list)
    nonfinite_count: list = field(default_factory=list)

    def rows(self):
        for i in range(len(self.loss)):
            yield {
                "step": i,
                "loss": self.loss[i],
                "grad_mean_abs": self.grad_mean_abs[i],
                "grad_var": self.grad_var[i],
                "nonfinite_count": self.nonfinite_count[i],
            }


@dataclass
class AttributionResult:
    """Importance maps from paired sufficiency/destruction runs plus traces."""

    theta_ssr: np.ndarray
    theta_sdr: np.ndarray
    theta_joint: np.ndarray
    trace_ssr: OptimizationTrace
    trace_sdr: OptimizationTrace
    config: FidoConfig


def derive_pair_seeds(seed: int) -> tuple[int, int]:
    """Independent child seeds for the SSR and SDR runs."""
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def optimize_mask(x: np.ndarray, target: int, model, cfg: FidoConfig, x_hat: np.ndarray | None = None):
    """Optimize perturbation-mask logits for one image and target class.

    Returns (MaskParams, OptimizationTrace).  Deterministic given cfg.seed.
    The infill is computed once and reused across steps; pass ``x_hat`` to
    share it across calls.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a CHW image, got shape {x.shape}")
    if not 0 <= target < model.classes:
        raise ValueError(f"target class {target} out of range for {model.classes} classes")
    model_p = model.cast(cfg.precision)
    if x_hat is None:
        x_hat = make_infill(x, cfg.infill)
    height, width = x.shape[1], x.shape[2]
    x_t = Tensor(x, precision=cfg.precision)
    xh_t = Tensor(x_hat, precision=cfg.precision)
    logits = Tensor(np.zeros((height, width)), precision=cfg.precision, requires_grad=True)
    opt = Adam([logits], lr=cfg.learning_rate)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    sampler = _SAMPLERS[cfg.formulation]
    row_losses = ssr_row_losses if cfg.objective == "ssr" else sdr_row_losses
    trace = OptimizationTrace()
    guard = permissive() if not cfg.strict else _null_context()
    with guard:
        for step in range(cfg.steps):
            noise = draw_noise((cfg.batch_size, height, width), rng)
            try:
                with Tape() as tape:
                    z = sampler(logits, noise.eta_hat, cfg.temperature)
                    phi = compose(x_t, xh_t, z)
                    log_p = model_p.forward_log_probs(phi)
                    p_target = T.exp(log_p[:, target])
                    scores = log_odds(p_target, cfg.loss.prob_clamp_eps)
                    rows = row_losses(scores, z, cfg.loss)
                    theta_t = T.sigmoid(logits)
                    loss = objectives.combine_loss(rows, z, cfg.loss, theta_t)
                    row_scalars = [rows[b] for b in range(cfg.batch_size)] if cfg.track_per_sample else None
            except NonFiniteError as exc:
                raise FidoError(step, str(exc)) from exc
            loss_val = loss.item()
            if cfg.strict and not np.isfinite(loss_val):
                raise FidoError(step, f"non-finite loss {loss_val}")
            grads = tape.backward(loss)
            g = grads.get(logits)
            if g is None:
                g = np.zeros_like(logits.data)
            finite = np.isfinite(g)
            bad = int(g.size - np.count_nonzero(finite))
            if bad:
                if cfg.strict:
                    raise FidoError(step, f"{bad} non-finite gradient entries")
                g = np.where(finite, g, 0.0).astype(g.dtype)
            if cfg.track_per_sample:
                per_sample = np.stack(
                    [tape.backward(rs).get(logits, np.zeros_like(logits.data)) for rs in row_scalars]
                )
                with np.errstate(all="ignore"):
                    var = float(np.nanmean(np.var(per_sample.astype(np.float64), axis=0)))
            else:
                var = float("nan")
            trace.loss.append(loss_val)
            trace.grad_mean_abs.append(float(np.mean(np.abs(g))))
            trace.grad_var.append(var)
            trace.nonfinite_count.append(bad)
            opt.step({logits: g})
    return MaskParams(logits), trace


class _null_context:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def estimate_pair(x: np.ndarray, target: int, model, cfg: FidoConfig) -> AttributionResult:
    """Run the sufficiency and destruction objectives and fuse their maps.

    The two runs use independent noise streams derived from cfg.seed.  All
    returned maps are float64 importance maps in (0, 1).
    """
    ssr_seed, sdr_seed = derive_pair_seeds(cfg.seed)
    x_hat = make_infill(np.asarray(x, dtype=np.float64), cfg.infill)
    ssr_params, trace_ssr = optimize_mask(
        x, target, model, replace(cfg, objective="ssr", seed=ssr_seed), x_hat=x_hat
    )
    sdr_params, trace_sdr = optimize_mask(
        x, target, model, replace(cfg, objective="sdr", seed=sdr_seed), x_hat=x_hat
    )
    theta_ssr = 1.0 - expit(ssr_params.logits.data.astype(np.float64))
    theta_sdr = expit(sdr_params.logits.data.astype(np.float64))
    theta_joint = evaluation.fuse_attributions(theta_ssr, theta_sdr)
    return AttributionResult(
        theta_ssr=theta_ssr,
        theta_sdr=theta_sdr,
        theta_joint=theta_joint,
        trace_ssr=trace_ssr,
        trace_sdr=trace_sdr,
        config=cfg,
    )


def gradient_precision_deviation(
    x: np.ndarray, target: int, model, cfg: FidoConfig, draws: int = 5
) -> float:
    """Mean |grad_single - grad_double| of the step-0 loss gradient, shared noise.

    Measures how far the single-precision pipeline gradient drifts from the
    double-precision reference at the common starting point, isolating numeric
    fidelity from trajectory divergence.
    """
    x = np.asarray(x, dtype=np.float64)
    height, width = x.shape[1], x.shape[2]
    x_hat = make_infill(x, cfg.infill)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    total = 0.0
    row_losses = ssr_row_losses if cfg.objective == "ssr" else sdr_row_losses
    for _ in range(draws):
        noise = draw_noise((cfg.batch_size, height, width), rng)
        grads = {}
        for precision in ("single", "double"):
            model_p = model.cast(precision)
            logits = Tensor(np.zeros((height, width)), precision=precision, requires_grad=True)
            with permissive(), Tape() as tape:
                z = _SAMPLERS[cfg.formulation](logits, noise.eta_hat, cfg.temperature)
                phi = compose(Tensor(x, precision=precision), Tensor(x_hat, precision=precision), z)
                log_p = model_p.forward_log_probs(phi)
                scores = log_odds(T.exp(log_p[:, target]), cfg.loss.prob_clamp_eps)
                rows = row_losses(scores, z, cfg.loss)
                loss = objectives._mc_loss(rows, z, cfg.loss, T.sigmoid(logits))
                g = tape.backward(loss).get(logits, np.zeros((height, width)))
            grads[precision] = np.where(np.isfinite(g), g, 0.0).astype(np.float64)
        total += float(np.mean(np.abs(grads["single"] - grads["double"])))
    return total / draws


def compare_formulations(
    x: np.ndarray,
    target: int,
    model,
    cfg: FidoConfig,
    batch_sizes: tuple = (4, 8),
    steps_list: tuple = (30, 100),
    gt_mask: np.ndarray | None = None,
) -> list[dict]:
    """Grid comparison of the two formulations on one image.

    Both formulations in a cell share noise seeds.  Each record carries the
    mean per-sample gradient variance, the single-vs-double step-0 gradient
    deviation, total non-finite gradient count, wall time, and (when a ground
    truth mask is given) the IoU of the thresholded joint map.
    """
    records = []
    for batch_size in batch_sizes:
        for steps in steps_list:
            for formulation in FORMULATIONS:
                run_cfg = replace(
                    cfg,
                    batch_size=batch_size,
                    steps=steps,
                    formulation=formulation,
                    track_per_sample=True,
                )
                start = time.perf_counter()
                result = estimate_pair(x, target, model, run_cfg)
                seconds = time.perf_counter() - start
                trace = result.trace_ssr if cfg.objective == "ssr" else result.trace_sdr
                with np.errstate(all="ignore"):
                    grad_var = float(np.nanmean(trace.grad_var))
                record = {
                    "formulation": formulation,
                    "batch_size": batch_size,
                    "steps": steps,
                    "grad_var_mean": grad_var,
                    "grad_dev_single_vs_double": gradient_precision_deviation(
                        x, target, model, replace(run_cfg, track_per_sample=False), draws=3
                    ),
                    "nonfinite_total": int(
                        sum(result.trace_ssr.nonfinite_count) + sum(result.trace_sdr.nonfinite_count)
                    ),
                    "seconds": seconds,
                }
                if gt_mask is not None:
                    record["iou_joint"] = evaluation.iou(
                        evaluation.threshold_mask(result.theta_joint), gt_mask
                    )
                records.append(record)
    return records
