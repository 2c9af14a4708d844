"""Frame records, stage schedules and smoothing settings."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..energies import LandmarkWeights, ParamMask
from ..rig import FaceRig, PoseParams
from ..solver import SolveOptions

STATUSES = ("unsolved", "solved", "detector_failed", "infilled", "smoothed")
_TRANSITIONS = {
    "unsolved": {"solved", "detector_failed"},
    "solved": {"solved", "smoothed", "infilled"},
    "detector_failed": {"infilled", "detector_failed"},
    "infilled": {"infilled", "smoothed"},
    "smoothed": {"smoothed"},
}
LANDMARK_SUBSETS = ("all", "non_jaw", "jaw_only", "mouth_heavy")


@dataclass
class FrameState:
    index: int
    images: list  # one (H, W, 3) array per camera
    params: PoseParams | None = None
    status: str = "unsolved"
    reports: list = field(default_factory=list)  # (stage name, SolveReport)
    flagged: bool = False

    def advance(self, status):
        if status not in STATUSES:
            raise ValueError(f"unknown frame status {status!r}")
        if status not in _TRANSITIONS[self.status]:
            raise ValueError(f"frame {self.index}: cannot go from {self.status} to {status}")
        self.status = status

    def copy(self):
        return FrameState(self.index, self.images, None if self.params is None else self.params.copy(),
                          self.status, list(self.reports), self.flagged)


@dataclass(frozen=True)
class StageSpec:
    """One solve in a staged schedule.

    ``shapes`` lists blendshape names or tags; ``prior_weight`` tethers the
    active rigid entries to their values at the start of the stage.
    """

    name: str
    theta: bool = False
    t: bool = False
    shapes: tuple = ()
    landmarks: str = "all"
    landmark_weight: float = 1.0
    edge_weight: float = 1.0
    regularization: float = 0.0
    prior_weight: float = 0.0
    options: SolveOptions = field(default_factory=SolveOptions)

    def __post_init__(self):
        if self.landmarks not in LANDMARK_SUBSETS:
            raise ValueError(f"stage {self.name}: unknown landmark subset {self.landmarks!r}")
        for name in ("landmark_weight", "edge_weight", "regularization", "prior_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"stage {self.name}: {name} must be non-negative")

    def mask(self, rig: FaceRig) -> ParamMask:
        return ParamMask.build(rig, theta=self.theta, t=self.t, shapes=self.shapes)

    def weights(self, rig: FaceRig) -> LandmarkWeights:
        return LandmarkWeights.subset(rig, self.landmarks)

    def validate(self, rig: FaceRig):
        self.mask(rig)
        self.weights(rig)
        return self

    def with_options(self, **kw):
        return replace(self, options=self.options.replace(**kw))

    def without_rigid(self):
        return replace(self, theta=False, t=False, prior_weight=0.0)


def default_rigid_stages():
    return (
        StageSpec("translation", t=True, landmarks="non_jaw", options=SolveOptions(max_iterations=10)),
        StageSpec("rigid_non_jaw", theta=True, t=True, landmarks="non_jaw", options=SolveOptions(max_iterations=20)),
        StageSpec("rigid_jaw", theta=True, t=True, landmarks="jaw_only", options=SolveOptions(max_iterations=20)),
        StageSpec("rigid_all", theta=True, t=True, landmarks="all", options=SolveOptions(max_iterations=20)),
    )


def default_expression_stages(regularization=100.0, prior_weight=1.0, tether=True):
    pw = prior_weight if tether else 0.0
    opts = SolveOptions(max_iterations=30)
    return (
        StageSpec("jaw_open", theta=True, t=True, shapes=("jaw_open",), landmarks="mouth_heavy",
                  regularization=regularization, prior_weight=pw, options=opts),
        StageSpec("jaw", shapes=("jaw",), landmarks="mouth_heavy", regularization=regularization, options=opts),
        StageSpec("jaw_mouth", theta=True, t=True, shapes=("jaw", "mouth"), landmarks="mouth_heavy",
                  regularization=regularization, prior_weight=pw, options=opts),
    )


SMOOTHING_MODES = ("averaging", "self_flow", "plate_flow", "hybrid")


@dataclass(frozen=True)
class SmoothingConfig:
    mode: str = "averaging"
    window: tuple = (0.25, 0.5, 0.25)
    sweeps: int = 1
    prior_weight: float = 1.0
    gauss_seidel: bool = False
    flow_stage: StageSpec = field(default_factory=lambda: StageSpec(
        "flow_smooth", theta=True, t=True, shapes=("jaw", "mouth"), options=SolveOptions(max_iterations=10)))

    def __post_init__(self):
        if self.mode not in SMOOTHING_MODES:
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        w = np.asarray(self.window, dtype=float)
        if w.shape != (3,) or (w < 0).any() or w[1] <= 0:
            raise ValueError("window needs three non-negative weights with a positive centre")
        if w[1] < w[0] or w[1] < w[2]:
            raise ValueError("the centre window weight must be the largest")
        if self.sweeps < 1:
            raise ValueError("sweeps must be at least 1")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be non-negative")
