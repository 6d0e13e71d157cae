import json

import jsonschema
import numpy as np
import pytest

from fantasyid.facepipe import PoseAngles, crop_face, synth_head_render
from fantasyid.head import IdentityParams
from fantasyid.metrics import (REPORT_SCHEMA, EvalVideo, MetricError, cosine, dense_flow, evaluate,
                               face_motion, frechet_distance, inter_frame_similarity,
                               reference_similarity, toy_face_embed)

from oracles import textured_image


def render_crop(ident, yaw=0.0):
    frame, lm, _ = synth_head_render(ident, PoseAngles(yaw, 0, 0), 64)
    return crop_face(frame, lm)


def test_embed_is_unit_and_deterministic(nprng):
    crop = nprng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    e = toy_face_embed(crop)
    assert e.shape == (64,) and abs(np.linalg.norm(e) - 1) < 1e-12
    assert np.array_equal(e, toy_face_embed(crop))
    assert cosine(e, e) == pytest.approx(1.0)
    assert cosine(e, toy_face_embed(255 - crop)) < 1.0


def test_embed_separates_identities():
    rng = np.random.default_rng(0)
    idents = [IdentityParams(float(rng.uniform(0.85, 1.2)), float(rng.uniform(0.8, 1.4)), s) for s in range(4)]
    for yaw in (15.0, -15.0):
        for i, a in enumerate(idents):
            base = toy_face_embed(render_crop(a))
            same = cosine(base, toy_face_embed(render_crop(a, yaw)))
            for j, b in enumerate(idents):
                if i != j:
                    assert same > cosine(base, toy_face_embed(render_crop(b)))


def test_reference_and_inter_frame_similarity(nprng):
    a = nprng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    b = nprng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    assert reference_similarity(a, [a, a, a]) == pytest.approx(1.0)
    assert inter_frame_similarity([a] * 4) == pytest.approx(1.0)
    alt = inter_frame_similarity([a, b, a, b])
    assert alt == pytest.approx(cosine(toy_face_embed(a), toy_face_embed(b)), abs=1e-12)
    assert -1 <= reference_similarity(a, [b]) <= 1
    with pytest.raises(MetricError):
        reference_similarity(a, [])
    with pytest.raises(MetricError):
        inter_frame_similarity([a])


def test_frechet_identical_and_symmetric(nprng):
    x = nprng.standard_normal((500, 6))
    y = nprng.standard_normal((400, 6)) + 0.3
    assert frechet_distance(x, x) < 1e-6
    assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), rel=1e-9)
    with pytest.raises(MetricError):
        frechet_distance(x, y[:, :5])


def test_frechet_gaussian_closed_forms(nprng):
    n, d = 100_000, 4
    a = nprng.standard_normal((n, d))
    shift = nprng.standard_normal((n, d)) + 2.0 * np.eye(d)[0]
    assert frechet_distance(a, shift) == pytest.approx(4.0, rel=0.05)
    wide = 2.0 * nprng.standard_normal((n, d))  # sigma = 2, closed form D (sigma - 1)^2
    assert frechet_distance(a, wide) == pytest.approx(d * (2 - 1) ** 2, rel=0.05)


@pytest.mark.parametrize("dx,dy", [(2, 0), (0, 3), (-1, 2), (3, -3)])
def test_flow_recovers_translation(dx, dy, nprng):
    img = textured_image(nprng, 64)
    moved = np.roll(img, (dy, dx), axis=(0, 1))
    flow = dense_flow(img, moved)[8:-8, 8:-8]
    assert abs(flow[..., 0].mean() - dx) < 0.5 and abs(flow[..., 1].mean() - dy) < 0.5


def test_flow_static_and_diagonal(nprng):
    img = textured_image(nprng, 64)
    assert np.abs(dense_flow(img, img)).max() < 1e-3
    diag = dense_flow(img, np.roll(img, (1, 1), axis=(0, 1)))[8:-8, 8:-8]
    assert abs(np.hypot(diag[..., 0], diag[..., 1]).mean() - np.sqrt(2)) < 0.4


def test_flow_flip_negates_x(nprng):
    img = textured_image(nprng, 64)
    moved = np.roll(img, 2, axis=1)
    f = dense_flow(img, moved)[8:-8, 8:-8, 0].mean()
    g = dense_flow(img[:, ::-1], moved[:, ::-1])[8:-8, 8:-8, 0].mean()
    assert abs(f + g) < 0.2


def test_face_motion_oracles(nprng):
    img = textured_image(nprng, 64)
    box = (8, 8, 56, 56)
    assert face_motion([img] * 3, box) < 1e-4
    frames = [np.roll(img, 2 * k, axis=1) for k in range(4)]
    frac = 2 / np.hypot(48, 48)
    assert face_motion(frames, box) == pytest.approx(frac, rel=0.25)
    with pytest.raises(MetricError):
        face_motion([img], box)


def eval_set():
    videos, real = [], []
    for s in range(3):
        ident = IdentityParams(albedo_seed=s)
        frames, lms = [], []
        for yaw in (-10, 0, 10):
            f, lm, _ = synth_head_render(ident, PoseAngles(yaw, 0, 0), 64)
            frames.append(f)
            lms.append(lm)
        ref = crop_face(frames[1], lms[1])
        videos.append(EvalVideo(f"v{s}", frames, lms, ref))
        real += [crop_face(f, lm) for f, lm in zip(frames, lms)]
    return videos, real


def test_evaluate_report(tmp_path):
    videos, real = eval_set()
    rep = evaluate(videos, real, config_hash="abc")
    assert rep.FID < 1e-6 and rep.RS > 0.8
    doc = rep.to_json()
    jsonschema.validate(doc, REPORT_SCHEMA)
    rep.write(tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text())["config_hash"] == "abc"
    assert (tmp_path / "report.csv").read_text().startswith("name,RS,IFS,FM,frames")
    shuffled = evaluate(videos[::-1], real, config_hash="abc")
    assert shuffled.to_json() == doc
    with pytest.raises(MetricError):
        evaluate([], real)
