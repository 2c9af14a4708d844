"""Synthetic ground-truth sequences rendered from the procedural rig."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..pipeline.stages import FrameState
from ..procedural import build_face_rig, paint_fiducials, skin_albedo
from ..render import AppearanceModel, Camera, MeshSurface, default_camera, look_at, rasterize, white_light
from ..rig import FaceRig, PoseParams, load_rig, posed_vertices, save_rig
from .io import (
    CameraRecord,
    FrameRecord,
    SequenceManifest,
    params_filename,
    save_appearance,
    save_image,
    save_manifest,
    write_params,
)

STEREO_HALF_ANGLE = 10.0


def default_appearance(rig: FaceRig, fiducials=True) -> AppearanceModel:
    albedo = skin_albedo(rig)
    if fiducials:
        albedo = paint_fiducials(rig, albedo)
    return AppearanceModel(albedo, white_light())


def orbit_camera(yaw_deg, base: Camera | None = None, distance=50.0) -> Camera:
    """``base`` intrinsics on a horizontal orbit around the origin."""
    base = default_camera() if base is None else base
    a = np.deg2rad(yaw_deg)
    R, t = look_at(distance * np.array([np.sin(a), 0.0, np.cos(a)]))
    return Camera(base.fx, base.fy, base.cx, base.cy, base.width, base.height, R, t, base.near)


def stereo_cameras(half_angle=STEREO_HALF_ANGLE):
    """Verged pair at -half_angle and +half_angle degrees of yaw."""
    return [orbit_camera(-half_angle), orbit_camera(half_angle)]


def random_pose(rng, rig: FaceRig, max_deg=(8.0, 6.0, 8.0), t_low=(-2.0, -2.0, -4.0), t_high=(2.0, 2.0, 4.0),
                weights=None) -> PoseParams:
    theta = np.deg2rad(rng.uniform(-1.0, 1.0, 3) * np.asarray(max_deg))
    t = rng.uniform(t_low, t_high)
    w = np.zeros(rig.n_shapes)
    for name, val in (weights or {}).items():
        w[rig.shape_index(name)] = val
    return PoseParams(theta, t, w)


class PoseRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    theta_deg: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    t: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    w: dict[str, float] = Field(default_factory=dict)

    @field_validator("theta_deg", "t")
    @classmethod
    def _three(cls, v):
        if len(v) != 3:
            raise ValueError("expected three values")
        return v

    def to_params(self, rig: FaceRig) -> PoseParams:
        w = np.zeros(rig.n_shapes)
        for name, val in self.w.items():
            w[rig.shape_index(name)] = val
        return PoseParams(np.deg2rad(self.theta_deg), self.t, w)

    @classmethod
    def from_params(cls, p: PoseParams, rig: FaceRig):
        return cls(theta_deg=np.rad2deg(p.theta).tolist(), t=p.t.tolist(),
                   w={n: float(x) for n, x in zip(rig.shape_names, p.w) if x != 0.0})


class SyntheticScenario(BaseModel):
    model_config = ConfigDict(extra="forbid")
    rig: str | None = None  # rig file; the procedural rig when omitted
    trajectory: list[PoseRecord]
    cameras: str | list[CameraRecord] = "mono"  # "mono", "stereo" or explicit records
    stereo_half_angle: float = STEREO_HALF_ANGLE
    noise_sigma: float = 0.0
    motion_blur: bool = False
    blur_samples: int = 3
    fiducials: bool = True
    failed_frames: list[int] = Field(default_factory=list)
    seed: int = 0
    image_format: str = "npy"

    @field_validator("trajectory")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("trajectory needs at least one frame")
        return v

    @field_validator("noise_sigma")
    @classmethod
    def _sigma(cls, v):
        if v < 0:
            raise ValueError("noise_sigma must be non-negative")
        return v

    @field_validator("image_format")
    @classmethod
    def _fmt(cls, v):
        if v not in ("npy", "png"):
            raise ValueError("image_format must be npy or png")
        return v

    def load_rig(self) -> FaceRig:
        if self.rig is None:
            return build_face_rig()
        if not Path(self.rig).exists():
            raise FileNotFoundError(f"rig file {self.rig!r} not found")
        return load_rig(self.rig)

    def camera_list(self):
        if self.cameras == "mono":
            return [("cam0", orbit_camera(-self.stereo_half_angle))]
        if self.cameras == "stereo":
            return list(zip(("cam0", "cam1"), stereo_cameras(self.stereo_half_angle)))
        if isinstance(self.cameras, str):
            raise ValueError(f"unknown camera preset {self.cameras!r}")
        return [(c.name, c.to_camera()) for c in self.cameras]


class SyntheticSequence:
    """In-memory result of rendering a scenario."""

    def __init__(self, rig, appearance, cameras, camera_names, ground_truth, images, failed):
        self.rig = rig
        self.appearance = appearance
        self.cameras = cameras
        self.camera_names = camera_names
        self.ground_truth = ground_truth
        self.images = images  # [frame][camera] -> (H, W, 3)
        self.failed = failed

    def frames(self, cameras=None):
        """Fresh FrameState list; ``cameras`` selects camera indices."""
        sel = range(len(self.cameras)) if cameras is None else cameras
        return [FrameState(i, [imgs[c] for c in sel]) for i, imgs in enumerate(self.images)]


def _render(rig, camera, appearance, params):
    surf = MeshSurface(posed_vertices(rig, params), rig.triangles)
    return rasterize(camera, surf, appearance).image


def render_frame(rig, camera, appearance, params, previous=None, blur_samples=3):
    """Render ``params``; with ``previous`` the shutter integrates the second half of the motion."""
    if previous is None or blur_samples < 2:
        return _render(rig, camera, appearance, params)
    a, b = previous.to_vector(), params.to_vector()
    acc = 0.0
    for s in np.linspace(0.5, 1.0, blur_samples):
        acc = acc + _render(rig, camera, appearance, PoseParams.from_vector((1 - s) * a + s * b))
    return acc / blur_samples


def render_scenario(scenario: SyntheticScenario, rig: FaceRig | None = None,
                    appearance: AppearanceModel | None = None) -> SyntheticSequence:
    rig = scenario.load_rig() if rig is None else rig
    appearance = default_appearance(rig, scenario.fiducials) if appearance is None else appearance
    named = scenario.camera_list()
    cams = [c for _, c in named]
    gt = [p.to_params(rig) for p in scenario.trajectory]
    rng = np.random.default_rng(scenario.seed)
    images = []
    for i, p in enumerate(gt):
        prev = gt[i - 1] if scenario.motion_blur and i > 0 else None
        row = []
        for cam in cams:
            img = render_frame(rig, cam, appearance, p, prev, scenario.blur_samples)
            if scenario.noise_sigma > 0:
                img = img + scenario.noise_sigma * rng.standard_normal(img.shape)
            row.append(img)
        images.append(row)
    return SyntheticSequence(rig, appearance, cams, [n for n, _ in named], gt, images,
                             sorted(set(scenario.failed_frames)))


def generate_synthetic(scenario: SyntheticScenario, out_dir) -> SequenceManifest:
    """Write images, ground truth, rig, appearance and a manifest to ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "ground_truth").mkdir(exist_ok=True)
    seq = render_scenario(scenario)
    save_rig(seq.rig, out / "rig.json")
    save_appearance(out / "appearance.json", seq.appearance)
    records = []
    for i, row in enumerate(seq.images):
        paths = []
        for name, img in zip(seq.camera_names, row):
            rel = f"images/frame_{i:05d}_{name}.{scenario.image_format}"
            save_image(out / rel, img)
            paths.append(rel)
        gt_rel = f"ground_truth/{params_filename(i)}"
        write_params(out / gt_rel, seq.ground_truth[i], seq.rig, i, status="ground_truth")
        records.append(FrameRecord(index=i, images=paths, detector_failed=i in seq.failed, ground_truth=gt_rel))
    manifest = SequenceManifest(
        cameras=[CameraRecord.from_camera(n, c) for n, c in zip(seq.camera_names, seq.cameras)],
        frames=records, rig="rig.json", appearance="appearance.json")
    save_manifest(out / "manifest.json", manifest)
    (out / "scenario.json").write_text(scenario.model_dump_json(indent=1) + "\n")
    manifest.root = str(out)
    return manifest
