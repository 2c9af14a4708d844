"""File formats: parameter files, images, manifests, diagnostics.

Parameter files are JSON with named fields.  Python's float repr is the
shortest string that parses back to the same double, so a write/read
cycle is bit-exact.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..render import AppearanceModel, Camera
from ..rig import FaceRig, PoseParams

PARAMS_FORMAT = "deepfit-params"


class FormatError(ValueError):
    pass


# -- parameter files ---------------------------------------------------------

def params_to_dict(params: PoseParams | None, rig: FaceRig, frame: int, status: str,
                   flagged=False, extra=None) -> dict:
    d = {"format": PARAMS_FORMAT, "frame": int(frame), "status": status, "flagged": bool(flagged)}
    if params is None:
        d.update(theta=None, t=None, w=None)
    else:
        d["theta"] = [float(x) for x in params.theta]
        d["t"] = [float(x) for x in params.t]
        d["w"] = {n: float(x) for n, x in zip(rig.shape_names, params.w)}
    if extra:
        d.update(extra)
    return d


def params_from_dict(d: dict, rig: FaceRig):
    """(PoseParams or None, frame, status, flagged)."""
    if d.get("format") != PARAMS_FORMAT:
        raise FormatError(f"not a {PARAMS_FORMAT} file")
    if d.get("theta") is None:
        return None, int(d["frame"]), d["status"], bool(d.get("flagged", False))
    w = d["w"]
    unknown = set(w) - set(rig.shape_names)
    if unknown:
        raise FormatError(f"unknown blendshapes {sorted(unknown)}")
    wv = np.array([float(w.get(n, 0.0)) for n in rig.shape_names])
    return PoseParams(d["theta"], d["t"], wv), int(d["frame"]), d["status"], bool(d.get("flagged", False))


def write_params(path, params, rig, frame, status="solved", flagged=False, extra=None):
    Path(path).write_text(json.dumps(params_to_dict(params, rig, frame, status, flagged, extra), indent=1) + "\n")


def read_params(path, rig):
    try:
        return params_from_dict(json.loads(Path(path).read_text()), rig)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from e


def params_filename(frame):
    return f"frame_{int(frame):05d}.json"


# -- images ------------------------------------------------------------------

def save_image(path, image):
    """``.npy`` keeps full precision; ``.png`` is quantised to 8 bits."""
    path = Path(path)
    img = np.asarray(image, dtype=float)
    if path.suffix == ".npy":
        np.save(path, img)
    elif path.suffix == ".png":
        q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(q).save(path)
    else:
        raise FormatError(f"unsupported image type {path.suffix!r}")


def load_image(path):
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path)
    else:
        img = np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"{path}: expected an RGB image")
    return img


def save_appearance(path, appearance: AppearanceModel):
    Path(path).write_text(json.dumps(appearance.to_dict()))


def load_appearance(path) -> AppearanceModel:
    return AppearanceModel.from_dict(json.loads(Path(path).read_text()))


# -- manifests ---------------------------------------------------------------

class CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: list[list[float]]
    t: list[float]

    def to_camera(self) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      np.asarray(self.R, dtype=float), np.asarray(self.t, dtype=float))

    @classmethod
    def from_camera(cls, name, cam: Camera):
        return cls(name=name, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
                   height=cam.height, R=np.asarray(cam.R).tolist(), t=np.asarray(cam.t).tolist())


class FrameRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    index: int
    images: list[str]
    bboxes: list[list[float] | None] | None = None
    detector_failed: bool = False  # simulated failure: skip detection on this frame
    ground_truth: str | None = None


class SequenceManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    format: str = "deepfit-sequence"
    cameras: list[CameraRecord]
    frames: list[FrameRecord]
    rig: str
    appearance: str | None = None
    appearance_frame: int | None = None
    root: str | None = Field(default=None, exclude=True)

    @field_validator("frames")
    @classmethod
    def _increasing(cls, v):
        idx = [f.index for f in v]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if not self.cameras:
            raise ValueError("at least one camera is required")
        for f in self.frames:
            if len(f.images) != len(self.cameras):
                raise ValueError(f"frame {f.index}: {len(f.images)} images for {len(self.cameras)} cameras")
            if f.bboxes is not None and len(f.bboxes) != len(self.cameras):
                raise ValueError(f"frame {f.index}: one bbox entry per camera")
        if self.appearance is None and self.appearance_frame is None:
            raise ValueError("either appearance or appearance_frame is required")
        return self

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p

    def check_paths(self):
        missing = [str(self.resolve(p)) for f in self.frames for p in f.images if not self.resolve(p).exists()]
        missing += [str(self.resolve(self.rig))] if not self.resolve(self.rig).exists() else []
        if missing:
            raise FormatError(f"unresolvable paths: {missing[:5]}")
        return self

    def camera_objects(self, names=None):
        cams = self.cameras if names is None else [c for c in self.cameras if c.name in names]
        if names is not None and len(cams) != len(names):
            raise FormatError(f"unknown cameras in {names}")
        return [c.to_camera() for c in cams]

    def camera_indices(self, names=None):
        if names is None:
            return list(range(len(self.cameras)))
        lookup = {c.name: i for i, c in enumerate(self.cameras)}
        try:
            return [lookup[n] for n in names]
        except KeyError as e:
            raise FormatError(f"unknown camera {e.args[0]!r}") from None


def load_manifest(path) -> SequenceManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from e
    m = SequenceManifest.model_validate(data)
    m.root = str(path.parent)
    return m


def save_manifest(path, manifest: SequenceManifest):
    Path(path).write_text(manifest.model_dump_json(indent=1, exclude={"root"}) + "\n")


# -- diagnostics ---------------------------------------------------------------

DIAGNOSTIC_FIELDS = ("frame", "stage", "camera_count", "iterations", "accepted", "termination",
                     "initial_residual", "final_residual", "seconds")


def diagnostics_rows(frame, reports, seconds=None, cameras=1):
    rows = []
    for name, rep in reports:
        norms = rep.residual_norms
        rows.append({
            "frame": frame, "stage": name, "camera_count": cameras, "iterations": rep.iterations,
            "accepted": rep.accepted, "termination": rep.termination,
            "initial_residual": repr(norms[0]) if norms else "",
            "final_residual": repr(norms[-1]) if norms else "",
            "seconds": "" if seconds is None else f"{seconds:.3f}",
        })
    return rows


def write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
