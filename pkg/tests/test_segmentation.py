import numpy as np
import pytest

from semaforge.errors import (ContractError, FragmentError, GeometryError,
                              LandmarkFormatError)
from semaforge.imgio import load_landmarks, save_landmarks
from semaforge.segmentation import (FRAGMENTS, convex_hull, dilate_polygon,
                                    extract_fragments, group_landmarks,
                                    rasterize_masks, segment_image)
from semaforge.synthetic import FaceParams, generate_face


@pytest.fixture(scope="module")
def face():
    rng = np.random.Generator(np.random.PCG64(7))
    params = FaceParams.sample(rng)
    return generate_face(params)


class TestLandmarkIO:
    def test_roundtrip_bit_exact(self, tmp_path, face):
        _, lm = face
        path = tmp_path / "lm.txt"
        save_landmarks(path, lm)
        assert np.array_equal(load_landmarks(path), lm)

    def test_wrong_count_message(self, tmp_path):
        path = tmp_path / "lm68.txt"
        with open(path, "w") as fh:
            for i in range(68):
                fh.write(f"{i}.0 {i}.5\n")
        with pytest.raises(LandmarkFormatError) as err:
            load_landmarks(path)
        assert "expected 81 landmarks, found 68" in str(err.value)

    def test_non_numeric_reports_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        with open(path, "w") as fh:
            fh.write("1.0 2.0\n")
            fh.write("abc 3.0\n")
        with pytest.raises(LandmarkFormatError) as err:
            load_landmarks(path)
        assert ":2:" in str(err.value)

    def test_save_wrong_count(self, tmp_path):
        with pytest.raises(LandmarkFormatError):
            save_landmarks(tmp_path / "x.txt", np.zeros((68, 2)))


def _point_in_hull(point, hull):
    """Cross-product sign test for convex polygons (either orientation)."""
    x, y = point
    signs = []
    n = len(hull)
    for i in range(n):
        x1, y1 = hull[i]
        x2, y2 = hull[(i + 1) % n]
        signs.append((x2 - x1) * (y - y1) - (y2 - y1) * (x - x1))
    signs = np.asarray(signs)
    return bool(np.all(signs >= -1e-9) or np.all(signs <= 1e-9))


class TestGrouping:
    def test_mouth_hull_contains_mouth_points(self, face):
        _, lm = face
        polys = group_landmarks(lm)
        for idx in range(48, 68):
            assert _point_in_hull(lm[idx], polys["m"])

    def test_face_hull_contains_feature_hulls(self, face):
        _, lm = face
        polys = group_landmarks(lm)
        for key in ("e", "n", "m"):
            for vertex in polys[key]:
                assert _point_in_hull(vertex, polys["f"]), (key, vertex)

    def test_translation_equivariance(self, face):
        _, lm = face
        a = group_landmarks(lm)
        b = group_landmarks(lm + np.array([10.0, 10.0]))
        for key in a:
            assert np.allclose(b[key], a[key] + 10.0, atol=1e-9)

    def test_collinear_points_rejected(self):
        pts = np.stack([np.arange(81, dtype=float), np.arange(81, dtype=float)], axis=1)
        with pytest.raises(GeometryError):
            convex_hull(pts)

    def test_dilation_grows_polygon(self):
        square = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
        grown = dilate_polygon(square, 2.0)
        assert grown[:, 0].min() < 0.0 and grown[:, 0].max() > 10.0
        for vertex in square:
            assert _point_in_hull(vertex, grown)


class TestMasks:
    def test_partition_invariants(self, face):
        img, lm = face
        masks = rasterize_masks(group_landmarks(lm), *img.shape[:2])
        b, f, p = masks["b"], masks["f"], masks["p"]
        assert np.array_equal(b | f, p)
        assert not (b & f).any()
        for key in ("e", "n", "m"):
            assert not (masks[key] & ~f.astype(bool)).any()

    def test_face_covering_whole_image_empties_background(self):
        polys = {
            "f": np.array([[-5.0, -5.0], [70.0, -5.0], [70.0, 70.0], [-5.0, 70.0]]),
            "e": np.array([[5.0, 5.0], [10.0, 5.0], [10.0, 10.0], [5.0, 10.0]]),
            "n": np.array([[20.0, 5.0], [25.0, 5.0], [25.0, 10.0], [20.0, 10.0]]),
            "m": np.array([[5.0, 20.0], [10.0, 20.0], [10.0, 25.0], [5.0, 25.0]]),
        }
        masks = rasterize_masks(polys, 64, 64)
        assert not masks["b"].any()
        assert masks["f"].all()

    def test_mask_equivariance_under_integer_translation(self, face):
        _, lm = face
        h = w = 128
        m0 = rasterize_masks(group_landmarks(lm), h, w)
        m1 = rasterize_masks(group_landmarks(lm + np.array([6.0, 4.0])), h, w)
        for key in ("f", "e", "n", "m"):
            a = m0[key]
            b = m1[key]
            # shifted copy must match wherever both are in-frame
            assert np.array_equal(a[: h - 4, : w - 6], b[4:, 6:])

    def test_clip_warning_recorded(self, face):
        _, lm = face
        masks = rasterize_masks(group_landmarks(lm + np.array([80.0, 0.0])), 128, 128)
        assert masks.warnings


class TestFragments:
    def test_p_is_whole_image_resized(self, face):
        img, lm = face
        masks, frags = segment_image(img, lm, size=64)
        from semaforge import kernels as K

        expect = K.resize_bilinear(np.ascontiguousarray(img), 64, 64)
        assert np.array_equal(frags["p"], expect)

    def test_constant_image_constant_inside_mask(self, face):
        _, lm = face
        img = np.full((128, 128, 3), 0.6)
        masks, frags = segment_image(img, lm, size=64)
        # p has no zeroed-out pixels: exactly constant everywhere
        assert np.allclose(frags["p"], 0.6)
        # face crop: every pixel is either blank (masked off) or blends of 0.6
        assert frags["f"].max() <= 0.6 + 1e-12

    def test_centered_square_crop_is_exact(self):
        rng = np.random.Generator(np.random.PCG64(3))
        img = rng.uniform(size=(128, 128, 3))
        mask = np.zeros((128, 128), dtype=np.uint8)
        mask[32:96, 32:96] = 1
        masks = {
            "p": np.ones((128, 128), np.uint8),
            "b": (1 - mask).astype(np.uint8),
            "f": mask, "e": mask, "n": mask, "m": mask,
        }
        from semaforge.segmentation import FragmentMaskSet

        maskset = FragmentMaskSet(masks=masks, height=128, width=128)
        frags = extract_fragments(img, maskset, size=64)
        assert np.array_equal(frags["f"], img[32:96, 32:96])

    def test_empty_mask_names_fragment(self, face):
        img, _ = face
        masks = {k: np.ones((128, 128), np.uint8) for k in FRAGMENTS}
        masks["n"] = np.zeros((128, 128), np.uint8)
        from semaforge.segmentation import FragmentMaskSet

        maskset = FragmentMaskSet(masks=masks, height=128, width=128)
        with pytest.raises(FragmentError) as err:
            extract_fragments(img, maskset, size=64)
        assert "'n'" in str(err.value)

    def test_determinism(self, face):
        img, lm = face
        _, f1 = segment_image(img, lm, size=48)
        _, f2 = segment_image(img, lm, size=48)
        for key in FRAGMENTS:
            assert np.array_equal(f1[key], f2[key])

    def test_size_below_32_rejected(self, face):
        img, lm = face
        with pytest.raises(ContractError):
            segment_image(img, lm, size=16)

    def test_landmarks_out_of_bounds_rejected(self, face):
        img, lm = face
        with pytest.raises(ContractError):
            segment_image(img, lm + 500.0, size=64)


class TestPartitionProperty:
    def test_many_faces(self):
        rng = np.random.Generator(np.random.PCG64(99))
        for _ in range(10):
            img, lm = generate_face(FaceParams.sample(rng))
            masks = rasterize_masks(group_landmarks(lm), *img.shape[:2])
            assert np.array_equal(masks["b"] | masks["f"], masks["p"])
            assert not (masks["b"] & masks["f"]).any()
            for key in ("e", "n", "m"):
                assert not (masks[key] & ~masks["f"].astype(bool)).any()
                assert masks[key].sum() > 0
