"""Evaluation statistics: accuracy score, resolution, coverage, error CDF.

The accuracy score is one minus the prior-weighted misclassification
probability, estimated empirically.  All evaluation drops are derived from
(master seed, drop index) so every metric run is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .baseline import BeamBank, bearing_segment_midpoint, estimate_position, receiver_bearing
from .channel import Scenario, apply_target, draw_null_rays
from .dataset import capture_frame, record_seed, sample_target_center, valid_bin_centers
from .errors import DegenerateGeometry, LengthMismatch, MissingClass, SingleLink
from .frame import CsiFrame, to_tensor
from .geometry import Point2D, Target
from .sensenet import TrainedModel


@dataclass(frozen=True)
class ConfusionCounts:
    null_as_null: int
    null_as_target: int
    target_as_null: int
    target_as_target: int

    @property
    def total(self) -> int:
        return (self.null_as_null + self.null_as_target
                + self.target_as_null + self.target_as_target)


def accuracy_score(counts: ConfusionCounts, priors: tuple[float, float] | None = None) -> float:
    """P = 1 - (p(target|null) p(null) + p(null|target) p(target)).

    Priors default to the empirical class fractions; conditional error rates
    are always estimated from the counts.
    """
    n_null = counts.null_as_null + counts.null_as_target
    n_target = counts.target_as_null + counts.target_as_target
    if n_null == 0 or n_target == 0:
        raise MissingClass(f"need samples of both hypotheses, got {n_null} null / {n_target} target")
    p_fa = counts.null_as_target / n_null
    p_miss = counts.target_as_null / n_target
    if priors is None:
        p_null = n_null / counts.total
        p_target = n_target / counts.total
    else:
        p_null, p_target = priors
    return 1.0 - (p_fa * p_null + p_miss * p_target)


def paired_drop(
    scenario: Scenario,
    sigma: float,
    master_seed: int,
    index: int,
    center: Point2D | None = None,
) -> tuple[Point2D, CsiFrame, CsiFrame]:
    """One evaluation drop: null frame and perturbed frame share the channel
    realization; noise is drawn independently per capture."""
    seed = record_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    rays = draw_null_rays(scenario, rng)
    if center is None:
        center = sample_target_center(scenario, sigma, rng)
    target = Target(center=center, diameter=sigma)
    perturbed, scatters = apply_target(rays, target, scenario, rng)
    null_frame = capture_frame(scenario, rays, None, rng, scenario.name, seed)
    alt_frame = capture_frame(scenario, perturbed, scatters, rng, scenario.name, seed)
    return center, null_frame, alt_frame


def detection_counts(
    model: TrainedModel,
    scenario: Scenario,
    sigma: float,
    n_drops: int,
    master_seed: int,
) -> ConfusionCounts:
    """Fresh paired drops pushed through the detector at its threshold."""
    null_t = []
    alt_t = []
    for i in range(n_drops):
        _, null_frame, alt_frame = paired_drop(scenario, sigma, master_seed, i)
        null_t.append(to_tensor(null_frame))
        alt_t.append(to_tensor(alt_frame))
    p_null = model.prob_batch(np.stack(null_t))
    p_alt = model.prob_batch(np.stack(alt_t))
    tau = model.threshold
    fa = int(np.sum(p_null >= tau))
    det = int(np.sum(p_alt >= tau))
    return ConfusionCounts(
        null_as_null=n_drops - fa, null_as_target=fa,
        target_as_null=n_drops - det, target_as_target=det,
    )


def resolution_curve(
    model: TrainedModel,
    scenario: Scenario,
    sigmas: Sequence[float],
    drops_per_sigma: int,
    gamma: float,
    master_seed: int,
) -> tuple[list[tuple[float, float]], float | None]:
    """Accuracy versus target size, plus the smallest size exceeding gamma."""
    if list(sigmas) != sorted(sigmas):
        raise ValueError("sigma list must be sorted ascending")
    curve = []
    for j, sigma in enumerate(sigmas):
        counts = detection_counts(model, scenario, sigma, drops_per_sigma,
                                  record_seed(master_seed, j))
        curve.append((float(sigma), accuracy_score(counts)))
    crossing = next((s for s, p in curve if p > gamma), None)
    return curve, crossing


@dataclass
class CoverageMap:
    pitch: float
    room_side: float
    score: np.ndarray      # (n, n), NaN where no samples; index [ix, iy]
    counts: np.ndarray     # evaluation drops per bin (per hypothesis)

    def defined_scores(self) -> np.ndarray:
        return self.score[self.counts > 0]


def coverage_map(
    model: TrainedModel,
    scenario: Scenario,
    sigma: float,
    drops_per_bin: int,
    pitch: float,
    master_seed: int,
) -> CoverageMap:
    """Per-bin accuracy score from paired drops at each margin-valid bin center."""
    n = int(math.floor(scenario.room_side / pitch + 1e-9))
    score = np.full((n, n), np.nan)
    counts = np.zeros((n, n), dtype=int)
    centers = valid_bin_centers(scenario, sigma, pitch)
    for b, c in enumerate(centers):
        ix = int(c.x / pitch)
        iy = int(c.y / pitch)
        bin_seed = record_seed(master_seed, b)
        null_t, alt_t = [], []
        for i in range(drops_per_bin):
            _, null_frame, alt_frame = paired_drop(scenario, sigma, bin_seed, i, center=c)
            null_t.append(to_tensor(null_frame))
            alt_t.append(to_tensor(alt_frame))
        p_null = model.prob_batch(np.stack(null_t))
        p_alt = model.prob_batch(np.stack(alt_t))
        fa = int(np.sum(p_null >= model.threshold))
        det = int(np.sum(p_alt >= model.threshold))
        cc = ConfusionCounts(drops_per_bin - fa, fa, drops_per_bin - det, det)
        score[ix, iy] = accuracy_score(cc)
        counts[ix, iy] = drops_per_bin
    return CoverageMap(pitch=pitch, room_side=scenario.room_side, score=score, counts=counts)


@dataclass
class ErrorSummary:
    mean: float
    p90: float
    errors: np.ndarray     # sorted ascending

    def cdf(self, x: float) -> float:
        return float(np.searchsorted(self.errors, x, side="right")) / len(self.errors)


def error_summary(estimates: Sequence[Point2D], truths: Sequence[Point2D]) -> ErrorSummary:
    """Euclidean position errors: mean, linearly interpolated 90th percentile,
    and the sorted error list backing the empirical CDF."""
    if len(estimates) != len(truths):
        raise LengthMismatch(f"{len(estimates)} estimates vs {len(truths)} truths")
    if not estimates:
        raise LengthMismatch("need at least one estimate")
    errs = np.sort([e.distance_to(t) for e, t in zip(estimates, truths)])
    return ErrorSummary(
        mean=float(errs.mean()),
        p90=float(np.percentile(errs, 90.0, method="linear")),
        errors=errs,
    )


def layer_cake_mean(summary: ErrorSummary) -> float:
    """Integral of (1 - CDF) over [0, max error]; equals the mean exactly."""
    errs = summary.errors
    n = len(errs)
    edges = np.concatenate([[0.0], errs])
    survive = (n - np.arange(n)) / n
    return float(np.sum(np.diff(edges) * survive))


@dataclass
class PositioningResult:
    truths: list[Point2D]
    estimates: list[Point2D]
    variant: str
    degraded: list[bool]

    def summary(self) -> ErrorSummary:
        return error_summary(self.estimates, self.truths)


def baseline_positions(
    scenario: Scenario,
    sigma: float,
    n_drops: int,
    master_seed: int,
    bank: BeamBank,
) -> PositioningResult:
    """Run the angle-based estimator over paired drops.

    Single-receiver scenarios and all-parallel bearing draws fall back to the
    midpoint of the strongest bearing's in-room segment, marked degraded.
    """
    truths: list[Point2D] = []
    estimates: list[Point2D] = []
    degraded: list[bool] = []
    for i in range(n_drops):
        center, null_frame, alt_frame = paired_drop(scenario, sigma, master_seed, i)
        truths.append(center)
        try:
            est = estimate_position(null_frame, alt_frame, scenario, bank)
            flag = False
        except (SingleLink, DegenerateGeometry):
            line = receiver_bearing(null_frame, alt_frame, scenario, 0, bank)
            est = bearing_segment_midpoint(scenario, line)
            flag = True
        estimates.append(est)
        degraded.append(flag)
    return PositioningResult(truths=truths, estimates=estimates,
                             variant=bank.variant, degraded=degraded)


def model_positions(
    model: TrainedModel,
    scenario: Scenario,
    sigma: float,
    n_drops: int,
    master_seed: int,
) -> PositioningResult:
    """CNN position estimates on the same drop sequence the baseline sees."""
    truths: list[Point2D] = []
    tensors = []
    for i in range(n_drops):
        center, _, alt_frame = paired_drop(scenario, sigma, master_seed, i)
        truths.append(center)
        tensors.append(to_tensor(alt_frame))
    xy = model.locate_batch(np.stack(tensors))
    side = scenario.room_side
    estimates = [
        Point2D(min(max(float(x), 0.0), side), min(max(float(y), 0.0), side))
        for x, y in xy
    ]
    return PositioningResult(truths=truths, estimates=estimates,
                             variant="csisensenet", degraded=[False] * n_drops)


def write_resolution_csv(fp: IO[str], curve: Sequence[tuple[float, float]], n: int) -> None:
    fp.write("sigma,P,n\n")
    for sigma, p in curve:
        fp.write(f"{sigma!r},{p!r},{n}\n")


def write_coverage_csv(fp: IO[str], cmap: CoverageMap) -> None:
    fp.write("bin_x,bin_y,P,n\n")
    n = cmap.score.shape[0]
    for ix in range(n):
        for iy in range(n):
            if cmap.counts[ix, iy] > 0:
                x = (ix + 0.5) * cmap.pitch
                y = (iy + 0.5) * cmap.pitch
                fp.write(f"{x!r},{y!r},{float(cmap.score[ix, iy])!r},{int(cmap.counts[ix, iy])}\n")


def write_coverage_pgm(fp: IO[str], cmap: CoverageMap) -> None:
    """P2 grayscale map, accuracy scaled to 0..255; undefined bins are 0.
    Raster rows run top (max y) to bottom."""
    n = cmap.score.shape[0]
    fp.write(f"P2\n{n} {n}\n255\n")
    for iy in range(n - 1, -1, -1):
        row = []
        for ix in range(n):
            v = cmap.score[ix, iy]
            row.append(str(int(round(v * 255)) if np.isfinite(v) else 0))
        fp.write(" ".join(row) + "\n")


def write_positioning_csv(fp: IO[str], summary: ErrorSummary) -> None:
    fp.write("drop,err\n")
    for i, e in enumerate(summary.errors):
        fp.write(f"{i},{float(e)!r}\n")


def write_baseline_csv(fp: IO[str], results: Sequence[PositioningResult]) -> None:
    fp.write("drop,true_x,true_y,est_x,est_y,error_m,variant\n")
    for res in results:
        for i, (t, e, d) in enumerate(zip(res.truths, res.estimates, res.degraded)):
            variant = res.variant + ("-degraded" if d else "")
            fp.write(
                f"{i},{t.x!r},{t.y!r},{e.x!r},{e.y!r},{e.distance_to(t)!r},{variant}\n"
            )
