from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from errors import DegenerateConfiguration, InvalidFaceSpec, ShapeMismatch
from synthface import (
    NUM_LANDMARKS, MakeupStyle, MouthEdit, SkinEdit, apply_makeup, load_manifest, load_record,
    make_style_catalog, region_means, render_face, sample_face_spec, synthesize_dataset, with_pose_shift,
)


def test_render_is_deterministic():
    spec = sample_face_spec(3)
    a, b = render_face(spec), render_face(spec)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.masks.masks, b.masks.masks)
    assert np.array_equal(a.structure, b.structure)
    assert len(a.landmarks) == NUM_LANDMARKS


def test_pose_shift_translates_landmarks_exactly():
    spec = sample_face_spec(7)
    base = render_face(with_pose_shift(spec, (0.0, 0.0)), 64)
    moved = render_face(with_pose_shift(spec, (5.0, 3.0)), 64)
    np.testing.assert_allclose(moved.landmarks.points - base.landmarks.points, [[5.0, 3.0]] * NUM_LANDMARKS,
                               atol=1e-9)


def test_masks_disjoint_and_inside_face(face):
    masks = face.masks.masks
    assert masks.sum(axis=0).max() <= 1
    assert np.array_equal(masks.any(axis=0), face.masks.face_mask)
    assert all(m.any() for m in masks)


def test_structure_has_no_color():
    a = render_face(sample_face_spec(7))
    b = render_face(replace(sample_face_spec(7), skin_color=(0.2, 0.9, 0.1), lip_color=(0.0, 0.0, 1.0)))
    assert np.array_equal(a.structure, b.structure)
    assert set(np.unique(a.structure)) <= {0.0, 1.0}


def test_out_of_bounds_spec_rejected():
    spec = replace(sample_face_spec(1), face_center=(5.0, 5.0))
    with pytest.raises(InvalidFaceSpec):
        render_face(spec)


def test_tiny_render_rejected():
    with pytest.raises(InvalidFaceSpec):
        render_face(sample_face_spec(1), size=16)


def test_identity_style_is_noop(face):
    out = apply_makeup(face.image, face.masks, MakeupStyle.identity())
    assert np.array_equal(out, face.image)


def test_full_alpha_lipstick(face):
    style = MakeupStyle(0, "red", "red lips", mouth_edit=MouthEdit((1.0, 0.0, 0.0), 1.0))
    out = apply_makeup(face.image, face.masks, style)
    np.testing.assert_allclose(region_means(out, face.masks)[3], [1.0, 0.0, 0.0])


def test_style_alpha_out_of_range():
    with pytest.raises(InvalidFaceSpec, match="mouth alpha"):
        MakeupStyle(0, "red", "red lips", mouth_edit=MouthEdit((1.0, 0.0, 0.0), 1.5))


def test_skin_tint_blend():
    face = render_face(replace(sample_face_spec(7), skin_color=(0.8, 0.6, 0.5)))
    style = MakeupStyle(0, "tint", "tint", skin_edit=SkinEdit((1.0, 0.0, 0.0), 0.5))
    out = apply_makeup(face.image, face.masks, style)
    np.testing.assert_allclose(region_means(out, face.masks)[0], [0.9, 0.3, 0.25], atol=1e-12)


def test_makeup_is_local(face, styles):
    for style in styles:
        out = apply_makeup(face.image, face.masks, style)
        outside = face.masks.non_face_mask
        assert np.array_equal(out[outside], face.image[outside])


def test_makeup_shape_mismatch(face, styles):
    with pytest.raises(ShapeMismatch):
        apply_makeup(face.image[:32], face.masks, styles[0])


def test_catalog_of_fifty():
    catalog = make_style_catalog(50, seed=0)
    assert [s.style_id for s in catalog] == list(range(50))
    assert len({s.description for s in catalog}) == 50
    again = make_style_catalog(50, seed=0)
    assert [s.to_dict() for s in catalog] == [s.to_dict() for s in again]


def test_minimum_catalog_differs():
    a, b = make_style_catalog(2, seed=11)
    edits = lambda s: (s.skin_edit, s.eye_edit, s.nose_edit, s.mouth_edit)
    assert edits(a) != edits(b)


def test_catalog_needs_two_styles():
    with pytest.raises(DegenerateConfiguration):
        make_style_catalog(1, seed=0)


def test_descriptions_use_style_name(styles):
    for style in styles:
        assert style.description.startswith(style.name)


def test_dataset_layout(tmp_path, styles):
    manifest = synthesize_dataset(10, styles[:2], seed=1, out_dir=tmp_path, size=32)
    root = Path(tmp_path)
    assert len(list(root.glob("faces/*/before.png"))) == 10
    assert len(list(root.glob("faces/*/after_*.png"))) == 20
    reloaded = load_manifest(tmp_path)
    assert reloaded.records == manifest.records
    assert reloaded.status == "complete"


def test_after_images_keep_background(dataset):
    for record in dataset.records[:6]:
        images = load_record(dataset, record)
        outside = images.masks.non_face_mask
        assert np.array_equal(images.before[outside], images.after[outside])
