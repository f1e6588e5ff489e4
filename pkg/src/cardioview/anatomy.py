"""Anatomical features of a sector mask, Gaussian priors over standard
views, and the prior-conformity scores that drive the reward.

Feature conventions:

* per-entity polar angle ``theta_c`` and normalized radius ``r_c`` are
  pixel-count means taken in the polar frame about the sector apex
  (angle from the straight-down depth axis, positive clockwise; radius
  divided by ``depth_px`` so it lives in [0, 1]);
* area ratios use LV as the reference, ``alpha_c = S_c / S_LV``, so
  ``alpha_LV`` is exactly 1 whenever LV is visible;
* ``phi_all`` is the mean polar angle over the union of visible included
  entities, divided by the sector half-angle (so +/-1 is the wedge edge).

Pairwise offsets never wrap: within a +/-45 degree wedge the raw angle
difference cannot cross the branch cut, so plain subtraction is used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError
from .imaging import MaskImage, pixel_polar
from .phantom import A4C_EXCLUDED, A4C_INCLUDED, A4C_PAIRS, EntityLabel

Pair = tuple[EntityLabel, EntityLabel]

# fitted variances never drop below this, so degenerate ensembles cannot
# produce infinitely sharp priors
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class AnatomyFeatures:
    """Quantified anatomy of one mask. Pair offsets appear only when both
    members are visible; area ratios only when LV is visible."""

    theta: dict[EntityLabel, float]
    radius: dict[EntityLabel, float]
    areas: dict[EntityLabel, int]
    visible: dict[EntityLabel, bool]
    dtheta: dict[Pair, float]
    dr: dict[Pair, float]
    alpha_in: dict[EntityLabel, float]
    alpha_ex: dict[EntityLabel, float]
    phi_all: float

    def visible_included(self) -> int:
        return sum(1 for ent in A4C_INCLUDED if self.visible[ent])


def extract_features(mask: MaskImage) -> AnatomyFeatures:
    """Measure per-entity polar statistics, pair offsets, area ratios and
    the global polar angle of one mask."""
    theta_px, radius_px = pixel_polar(mask.width, mask.height)
    flat = mask.labels.ravel()
    n_labels = len(EntityLabel)
    counts = np.bincount(flat, minlength=n_labels)
    theta_sums = np.bincount(flat, weights=theta_px.ravel(), minlength=n_labels)
    radius_sums = np.bincount(flat, weights=radius_px.ravel(), minlength=n_labels)

    theta: dict[EntityLabel, float] = {}
    radius: dict[EntityLabel, float] = {}
    areas: dict[EntityLabel, int] = {}
    visible: dict[EntityLabel, bool] = {}
    for ent in EntityLabel:
        if ent is EntityLabel.BACKGROUND:
            continue
        n = int(counts[ent])
        areas[ent] = n
        visible[ent] = n > 0
        if n:
            theta[ent] = float(theta_sums[ent] / n)
            radius[ent] = float(radius_sums[ent] / n) / mask.depth_px

    dtheta: dict[Pair, float] = {}
    dr: dict[Pair, float] = {}
    for ci, cj in A4C_PAIRS:
        if visible[ci] and visible[cj]:
            dtheta[(ci, cj)] = theta[ci] - theta[cj]
            dr[(ci, cj)] = radius[ci] - radius[cj]

    alpha_in: dict[EntityLabel, float] = {}
    alpha_ex: dict[EntityLabel, float] = {}
    s_lv = areas[EntityLabel.LV]
    if s_lv > 0:
        for ent in A4C_INCLUDED:
            alpha_in[ent] = areas[ent] / s_lv
        for ent in A4C_EXCLUDED:
            alpha_ex[ent] = areas[ent] / s_lv

    n_union = int(counts[list(A4C_INCLUDED)].sum())
    if n_union:
        phi = float(theta_sums[list(A4C_INCLUDED)].sum() / n_union) / mask.half_angle
    else:
        phi = 0.0  # no visible anatomy, no centroid; scores are zero anyway

    return AnatomyFeatures(
        theta=theta,
        radius=radius,
        areas=areas,
        visible=visible,
        dtheta=dtheta,
        dr=dr,
        alpha_in=alpha_in,
        alpha_ex=alpha_ex,
        phi_all=phi,
    )


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairPrior:
    mu_theta: float
    var_theta: float
    mu_r: float
    var_r: float


@dataclass(frozen=True)
class AlphaPrior:
    mu: float
    var: float


@dataclass(frozen=True)
class PriorSet:
    """Gaussian parameters of the standard-view feature distribution,
    fitted over an ensemble of M standard views."""

    pairs: dict[Pair, PairPrior]
    alphas: dict[EntityLabel, AlphaPrior]
    ensemble_size: int

    def to_json(self) -> str:
        doc = {
            "pairs": [
                {
                    "i": i.name,
                    "j": j.name,
                    "mu_theta": p.mu_theta,
                    "var_theta": p.var_theta,
                    "mu_r": p.mu_r,
                    "var_r": p.var_r,
                }
                for (i, j), p in self.pairs.items()
            ],
            "alphas": [
                {"entity": ent.name, "mu": a.mu, "var": a.var}
                for ent, a in self.alphas.items()
            ],
            "M": self.ensemble_size,
        }
        return json.dumps(doc, indent=1)

    @staticmethod
    def from_json(text: str) -> "PriorSet":
        try:
            doc = json.loads(text)
            pairs = {
                (EntityLabel[e["i"]], EntityLabel[e["j"]]): PairPrior(
                    float(e["mu_theta"]), float(e["var_theta"]),
                    float(e["mu_r"]), float(e["var_r"]),
                )
                for e in doc["pairs"]
            }
            alphas = {
                EntityLabel[e["entity"]]: AlphaPrior(float(e["mu"]), float(e["var"]))
                for e in doc["alphas"]
            }
            m = int(doc["M"])
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed prior file: {exc}") from exc
        return PriorSet(pairs, alphas, m)


def save_priors(priors: PriorSet, path) -> None:
    Path(path).write_text(priors.to_json() + "\n", encoding="utf-8")


def load_priors(path) -> PriorSet:
    return PriorSet.from_json(Path(path).read_text(encoding="utf-8"))


# area-ratio priors are fitted for the included entities other than the LV
# reference, whose ratio is identically 1
ALPHA_PRIOR_ENTITIES = (EntityLabel.RV, EntityLabel.LA, EntityLabel.RA)


def fit_priors(ensemble: Sequence[AnatomyFeatures]) -> PriorSet:
    """Fit population-statistics Gaussians (mean and mean squared deviation,
    dividing by M) over an ensemble of standard-view features."""
    if len(ensemble) < 2:
        raise ValueError("need at least 2 ensemble members to fit priors")
    for idx, f in enumerate(ensemble):
        missing = [e.name for e in A4C_INCLUDED if not f.visible[e]]
        if missing:
            raise ValueError(
                f"ensemble member {idx} is missing included entities: {missing}"
            )

    def pop_stats(values: list[float]) -> tuple[float, float]:
        mu = sum(values) / len(values)
        var = sum((v - mu) ** 2 for v in values) / len(values)
        return mu, max(var, VARIANCE_FLOOR)

    pairs: dict[Pair, PairPrior] = {}
    for pair in A4C_PAIRS:
        mu_t, var_t = pop_stats([f.dtheta[pair] for f in ensemble])
        mu_r, var_r = pop_stats([f.dr[pair] for f in ensemble])
        pairs[pair] = PairPrior(mu_t, var_t, mu_r, var_r)
    alphas: dict[EntityLabel, AlphaPrior] = {}
    for ent in ALPHA_PRIOR_ENTITIES:
        mu, var = pop_stats([f.alpha_in[ent] for f in ensemble])
        alphas[ent] = AlphaPrior(mu, var)
    return PriorSet(pairs, alphas, len(ensemble))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    """Reward hyperparameters; the defaults are the published MDP settings."""

    w1: float = 0.7    # included-area consistency
    w2: float = 0.14   # excluded-area consistency
    w3: float = 3.0    # global polar angle penalty
    w4: float = 0.1    # pairwise position consistency
    pair_weights: Mapping[Pair, float] = field(
        default_factory=lambda: {pair: 1.0 for pair in A4C_PAIRS}
    )
    entity_weights: Mapping[EntityLabel, float] = field(
        default_factory=lambda: {
            EntityLabel.RV: 0.2,
            EntityLabel.LA: 0.5,
            EntityLabel.RA: 0.5,
        }
    )
    excluded_weights: Mapping[EntityLabel, float] = field(
        default_factory=lambda: {EntityLabel.AORTA: 1.0}
    )

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ValueError("reward weights must be non-negative")


def peak_gaussian(x: float, mu: float, var: float) -> float:
    """Gaussian density rescaled to 1 at its mean: exp(-(x-mu)^2 / (2 var)).

    Bounded in (0, 1], symmetric about mu and strictly decreasing in
    |x - mu|, so it orders candidates exactly like the raw density while
    keeping scores normalized.
    """
    return math.exp(-((x - mu) ** 2) / (2.0 * var))


def score_position(f: AnatomyFeatures, priors: PriorSet, w: RewardWeights) -> float:
    """Weighted mean of peak-normalized densities over pair offsets.

    Pairs with an invisible member contribute 0 (their worst-case limit),
    while the denominator keeps every pair weight, so the score stays in
    [0, 1] and reaches 1 only with every offset at its prior mean.
    """
    total = 0.0
    weight_sum = 0.0
    for pair, prior in priors.pairs.items():
        wij = w.pair_weights.get(pair, 0.0)
        weight_sum += wij
        if pair in f.dtheta:
            total += wij * (
                peak_gaussian(f.dtheta[pair], prior.mu_theta, prior.var_theta)
                + peak_gaussian(f.dr[pair], prior.mu_r, prior.var_r)
            )
    if weight_sum == 0.0:
        return 0.0
    return total / (2.0 * weight_sum)


def score_alpha_included(f: AnatomyFeatures, priors: PriorSet, w: RewardWeights) -> float:
    """Area-ratio consistency over the weighted included entities (LV is
    the reference and carries no weight). Invisible entities contribute 0."""
    total = 0.0
    weight_sum = 0.0
    for ent, prior in priors.alphas.items():
        wc = w.entity_weights.get(ent, 0.0)
        weight_sum += wc
        if ent in f.alpha_in and f.visible[ent]:
            total += wc * peak_gaussian(f.alpha_in[ent], prior.mu, prior.var)
    if weight_sum == 0.0:
        return 0.0
    return total / weight_sum


def score_alpha_excluded(f: AnatomyFeatures, w: RewardWeights) -> float:
    """Excluded entities are scored as the negated area ratio, so any
    excluded pixel hurts and zero excluded area scores exactly 0."""
    total = 0.0
    weight_sum = 0.0
    for ent, wc in w.excluded_weights.items():
        weight_sum += wc
        total += wc * (-f.alpha_ex.get(ent, 0.0))
    if weight_sum == 0.0:
        return 0.0
    return total / weight_sum


def score_alpha(f: AnatomyFeatures, priors: PriorSet, w: RewardWeights,
                which: str) -> float:
    if which == "included":
        return score_alpha_included(f, priors, w)
    if which == "excluded":
        return score_alpha_excluded(f, w)
    raise ValueError(f"which must be 'included' or 'excluded', got {which!r}")


def reward(f: AnatomyFeatures, priors: PriorSet, w: RewardWeights) -> float:
    """Scalar view quality; the centered-view term enters as a penalty so a
    drifting cardiac centroid always costs reward. Peaks at w1 + w4."""
    r_in = score_alpha_included(f, priors, w)
    r_ex = score_alpha_excluded(f, w)
    s_pos = score_position(f, priors, w)
    return w.w1 * r_in + w.w2 * r_ex - w.w3 * abs(f.phi_all) + w.w4 * s_pos
