"""MDP for probe fine-tuning over one labeled volume.

The state packs seven scalars:
``[alpha_LV, alpha_RV, alpha_LA, alpha_RA, alpha_aorta, phi_all, s_position]``
with invisible-entity ratios encoded as 0. Seven discrete actions rotate
the probe +/-delta about its local x/y/z axes; the last action holds the
pose and ends the episode, so "maintain posture" doubles as the stop
signal. Transitions are deterministic: a pose and an action fully
determine the next mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import anatomy
from .anatomy import AnatomyFeatures, PriorSet, RewardWeights, extract_features
from .errors import EpisodeError
from .imaging import ImageConfig, ProbePose, rotate_pose, slice_volume
from .phantom import A4C_EXCLUDED, A4C_INCLUDED, EntityLabel, LabeledVolume

N_ACTIONS = 7
STATE_DIM = 7

# action id -> (probe axis, sign); action 6 holds the pose
_ACTION_AXES = (("x", 1.0), ("x", -1.0), ("y", 1.0), ("y", -1.0), ("z", 1.0), ("z", -1.0))
HOLD_ACTION = 6


class DeviationClass(Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"


@dataclass(frozen=True)
class EpisodeConfig:
    delta_deg: float = 1.0
    max_steps: int = 100
    init_jitter_deg: tuple[float, float, float] = (15.0, 15.0, 15.0)
    success_phi: float = 0.2
    deviation_phi: float = 0.5
    severe_max_visible: int = 2

    def __post_init__(self):
        if self.delta_deg <= 0:
            raise ValueError("delta_deg must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        jit = self.init_jitter_deg
        if isinstance(jit, (int, float)):
            jit = (float(jit),) * 3
        jit = tuple(float(j) for j in jit)
        if len(jit) != 3 or any(j < 0 for j in jit):
            raise ValueError("init_jitter_deg needs 3 non-negative entries")
        object.__setattr__(self, "init_jitter_deg", jit)


@dataclass(frozen=True)
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    info: dict


def state_vector(f: AnatomyFeatures, priors: PriorSet, w: RewardWeights) -> np.ndarray:
    s = np.zeros(STATE_DIM, dtype=np.float64)
    for k, ent in enumerate(A4C_INCLUDED):
        s[k] = f.alpha_in.get(ent, 0.0)
    s[4] = f.alpha_ex.get(A4C_EXCLUDED[0], 0.0)
    s[5] = f.phi_all
    s[6] = anatomy.score_position(f, priors, w)
    return s


def is_success(f: AnatomyFeatures, success_phi: float = 0.2) -> bool:
    """Standard-view criterion: every included entity visible and the
    cardiac centroid within `success_phi` of the central depth axis."""
    return all(f.visible[e] for e in A4C_INCLUDED) and abs(f.phi_all) <= success_phi


def classify_deviation(f: AnatomyFeatures, deviation_phi: float = 0.5,
                       severe_max_visible: int = 2) -> DeviationClass:
    """Categorize an initial view.

    Mild: all included entities visible and |phi_all| within the threshold.
    Severe: at most `severe_max_visible` entities visible and |phi_all|
    beyond it. Everything else (a structure missing, or only the centroid
    off) is moderate. The three predicates partition the feature space.
    """
    n_vis = f.visible_included()
    phi_big = abs(f.phi_all) > deviation_phi
    if n_vis == len(A4C_INCLUDED) and not phi_big:
        return DeviationClass.MILD
    if n_vis <= severe_max_visible and phi_big:
        return DeviationClass.SEVERE
    return DeviationClass.MODERATE


class ProbeEnv:
    """Single-threaded, stateful episode over a shared read-only volume."""

    def __init__(
        self,
        volume: LabeledVolume,
        priors: PriorSet,
        weights: RewardWeights | None = None,
        episode: EpisodeConfig | None = None,
        img: ImageConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.volume = volume
        self.priors = priors
        self.weights = weights if weights is not None else RewardWeights()
        self.episode = episode if episode is not None else EpisodeConfig()
        self.img = img if img is not None else ImageConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.pose: ProbePose | None = None
        self.features: AnatomyFeatures | None = None
        self.step_index = 0
        self._active = False

    # -- episode lifecycle -------------------------------------------------

    def reset(
        self,
        volume: LabeledVolume | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, DeviationClass]:
        """Start an episode at the standard pose jittered by independent
        per-axis rotations, resampled until some included entity is visible."""
        if volume is not None:
            self.volume = volume
        if rng is not None:
            self.rng = rng
        base = self.volume.standard_pose
        jit = self.episode.init_jitter_deg
        for _ in range(100):
            pose = base
            for axis, bound in zip(("x", "y", "z"), jit):
                if bound > 0:
                    pose = rotate_pose(pose, axis, float(self.rng.uniform(-bound, bound)))
            features = extract_features(slice_volume(self.volume, pose, self.img))
            if features.visible_included() >= 1:
                break
        else:
            raise EpisodeError("no pose with visible anatomy found in 100 tries")
        self.pose = pose
        self.features = features
        self.step_index = 0
        self._active = True
        state = state_vector(features, self.priors, self.weights)
        return state, classify_deviation(
            features, self.episode.deviation_phi, self.episode.severe_max_visible
        )

    def step(self, action: int) -> StepResult:
        if not self._active:
            raise EpisodeError("step() called on a finished or unstarted episode")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")

        if action != HOLD_ACTION:
            axis, sign = _ACTION_AXES[action]
            self.pose = rotate_pose(self.pose, axis, sign * self.episode.delta_deg)
            self.features = extract_features(slice_volume(self.volume, self.pose, self.img))

        self.step_index += 1
        f = self.features
        done = action == HOLD_ACTION or self.step_index >= self.episode.max_steps
        success = done and is_success(f, self.episode.success_phi)
        if done:
            self._active = False
        return StepResult(
            state=state_vector(f, self.priors, self.weights),
            reward=anatomy.reward(f, self.priors, self.weights),
            done=done,
            info={
                "success": success,
                "step_index": self.step_index,
                "visible_count": f.visible_included(),
                "phi_all": f.phi_all,
            },
        )

    # -- helpers -----------------------------------------------------------

    @property
    def active(self) -> bool:
        return self._active


def write_episode_log(path, records: list[dict]) -> None:
    """Append one JSONL record per step: {t, action, state, reward, done, success}."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
