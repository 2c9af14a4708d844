import functools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from conftest import render
from deepfit.harness.config import ConfigError, SolveConfig, parse_config
from deepfit.harness.io import (
    FormatError,
    SequenceManifest,
    load_image,
    load_manifest,
    params_filename,
    read_params,
    save_image,
    write_params,
)
from deepfit.harness.runner import parse_frame_range, rotation_error_deg
from deepfit.harness.synthetic import PoseRecord, SyntheticScenario, generate_synthetic, render_scenario
from deepfit.procedural import build_face_rig
from deepfit.rig import PoseParams


def test_neutral_single_frame_matches_direct_render(rig, appearance, camera):
    seq = render_scenario(SyntheticScenario(trajectory=[PoseRecord()]), rig, appearance)
    assert np.array_equal(seq.images[0][0], render(rig, camera, appearance, PoseParams.neutral(rig)))


def test_seed_determinism(rig, appearance):
    sc = SyntheticScenario(trajectory=[PoseRecord(), PoseRecord(t=[0.5, 0, 0])], noise_sigma=0.02, seed=7)
    a = render_scenario(sc, rig, appearance)
    b = render_scenario(sc, rig, appearance)
    c = render_scenario(sc.model_copy(update={"seed": 8}), rig, appearance)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.images, b.images))
    assert not np.array_equal(a.images[0][0], c.images[0][0])


def test_noise_level(rig, appearance, camera):
    sc = SyntheticScenario(trajectory=[PoseRecord()], noise_sigma=0.01, seed=3)
    img = render_scenario(sc, rig, appearance).images[0][0]
    clean = render(rig, camera, appearance, PoseParams.neutral(rig))
    rms = np.sqrt(np.mean((img - clean) ** 2))
    assert abs(rms - 0.01) < 0.002


def test_stereo_scenario_has_two_views(rig, appearance):
    seq = render_scenario(SyntheticScenario(trajectory=[PoseRecord()], cameras="stereo"), rig, appearance)
    assert seq.camera_names == ["cam0", "cam1"] and len(seq.images[0]) == 2
    assert not np.array_equal(seq.images[0][0], seq.images[0][1])


def test_scenario_validation():
    with pytest.raises(ValidationError):
        SyntheticScenario(trajectory=[])
    with pytest.raises(ValidationError):
        SyntheticScenario(trajectory=[PoseRecord()], noise_sigma=-1)
    with pytest.raises(ValidationError):
        PoseRecord(theta_deg=[1.0, 2.0])


@functools.cache
def _rig():
    # hypothesis tests cannot take function-scoped fixtures
    return build_face_rig()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=17, max_size=17), st.booleans())
def test_params_round_trip_bit_exact(tmp_path_factory, values, flagged):
    rig = _rig()
    p = PoseParams.from_vector(np.array(values[:6 + rig.n_shapes]))
    path = tmp_path_factory.mktemp("p") / params_filename(3)
    write_params(path, p, rig, 3, "smoothed", flagged)
    q, frame, status, fl = read_params(path, rig)
    assert np.array_equal(q.to_vector(), p.to_vector())
    assert (frame, status, fl) == (3, "smoothed", flagged)


def test_params_without_estimate(tmp_path, rig):
    write_params(tmp_path / "f.json", None, rig, 0, "detector_failed")
    assert read_params(tmp_path / "f.json", rig) == (None, 0, "detector_failed", False)


def test_params_format_errors(tmp_path, rig):
    (tmp_path / "a.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        read_params(tmp_path / "a.json", rig)
    (tmp_path / "b.json").write_text('{\n  "format": \n}')
    with pytest.raises(FormatError, match="line 3"):
        read_params(tmp_path / "b.json", rig)
    p = PoseParams.neutral(rig)
    write_params(tmp_path / "c.json", p, rig, 0)
    d = json.loads((tmp_path / "c.json").read_text())
    d["w"]["smile_wide"] = 1.0
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(FormatError, match="smile_wide"):
        read_params(tmp_path / "c.json", rig)


def test_png_is_quantised_npy_exact(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (8, 10, 3))
    save_image(tmp_path / "a.npy", img)
    save_image(tmp_path / "a.png", img)
    assert np.array_equal(load_image(tmp_path / "a.npy"), img)
    assert np.max(np.abs(load_image(tmp_path / "a.png") - img)) <= 0.5 / 255 + 1e-12


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    sc = SyntheticScenario(trajectory=[PoseRecord(), PoseRecord(t=[0.3, 0, 0])], failed_frames=[1])
    generate_synthetic(sc, out)
    return out


def test_generated_manifest_loads(synth_dir):
    m = load_manifest(synth_dir / "manifest.json").check_paths()
    assert [f.index for f in m.frames] == [0, 1]
    assert m.frames[1].detector_failed and not m.frames[0].detector_failed
    assert m.camera_indices(["cam0"]) == [0]
    with pytest.raises(FormatError):
        m.camera_indices(["cam9"])


def test_manifest_validation(synth_dir):
    d = json.loads((synth_dir / "manifest.json").read_text())
    bad = dict(d, frames=list(reversed(d["frames"])))
    with pytest.raises(ValidationError, match="increasing"):
        SequenceManifest.model_validate(bad)
    bad = dict(d, frames=[dict(d["frames"][0], images=[])])
    with pytest.raises(ValidationError, match="images"):
        SequenceManifest.model_validate(bad)
    bad = {k: v for k, v in d.items() if k != "appearance"}
    with pytest.raises(ValidationError, match="appearance"):
        SequenceManifest.model_validate(bad)
    m = SequenceManifest.model_validate(dict(d, rig="missing.json"))
    m.root = str(synth_dir)
    with pytest.raises(FormatError, match="unresolvable"):
        m.check_paths()


def test_config_defaults_and_digest():
    a, b = parse_config(""), SolveConfig()
    assert a.digest() == b.digest()
    assert parse_config("seed: 4").digest() != b.digest()


def test_config_error_names_line_and_field():
    text = "seed: 1\nsmoothing:\n  mode: averaging\n  sweeps: 0\n"
    with pytest.raises(ConfigError, match=r"line 4: field 'smoothing.sweeps'"):
        parse_config(text, "c.yaml")
    with pytest.raises(ConfigError, match=r"line 2: field 'detector.colour'"):
        parse_config("detector:\n  colour: red\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("a: 1\n b: [\n")
    with pytest.raises(ConfigError, match="window"):
        parse_config("smoothing:\n  window: [0.5, 0.1, 0.4]\n")


def test_config_checked_against_rig(rig):
    cfg = parse_config("infill:\n  shapes: [no_such_shape]\n")
    with pytest.raises(ConfigError):
        cfg.validate_for_rig(rig)


def test_frame_range():
    assert parse_frame_range("2..4", range(10)) == [2, 3, 4]
    assert parse_frame_range("7", range(10)) == [7]
    assert parse_frame_range(None, [1, 2]) == [1, 2]
    with pytest.raises(FormatError):
        parse_frame_range("20..30", range(10))
    with pytest.raises(FormatError):
        parse_frame_range("a-b", range(10))


def test_rotation_error():
    assert rotation_error_deg(np.zeros(3), np.zeros(3)) == 0.0
    assert abs(rotation_error_deg(np.zeros(3), np.deg2rad([0, 5.0, 0])) - 5.0) < 1e-9
