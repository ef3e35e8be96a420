import numpy as np
import pytest

from canonseg import data as D
from canonseg import groups as G
from canonseg import losses as L


class TestFtsFormat:
    def test_byte_layout_f32_pair(self, tmp_path):
        path = tmp_path / "pair.fts"
        D.write_fts(path, np.array([1.5, -2.0], dtype=np.float32))
        raw = path.read_bytes()
        # magic(4) + dtype(1) + ndim(1) + one u32 dim(4) + 2 f32 payload(8) = 18 bytes
        assert len(raw) == 18
        assert raw[:4] == b"FTS1"
        assert raw[4] == 0 and raw[5] == 1
        assert int.from_bytes(raw[6:10], "little") == 2
        assert np.frombuffer(raw[10:], dtype="<f4").tolist() == [1.5, -2.0]

    @pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.int32])
    def test_round_trip_bit_exact(self, tmp_path, rng, dtype):
        arr = (rng.random((3, 4, 5)) * 100).astype(dtype)
        path = tmp_path / "t.fts"
        D.write_fts(path, arr)
        back = D.read_fts(path)
        assert back.dtype == np.dtype(dtype).newbyteorder("<") or back.dtype == np.dtype(dtype)
        assert back.tobytes() == arr.tobytes()
        assert back.shape == arr.shape

    def test_zero_dim_scalar(self, tmp_path):
        D.write_fts(tmp_path / "s.fts", np.float32(3.25))
        assert D.read_fts(tmp_path / "s.fts") == np.float32(3.25)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fts"
        D.write_fts(p, np.zeros(3, dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[0] = ord("X")
        p.write_bytes(bytes(raw))
        with pytest.raises(D.BadMagic):
            D.read_fts(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.fts"
        D.write_fts(p, np.zeros((2, 3), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 4])  # drop one float
        with pytest.raises(D.TruncatedPayload):
            D.read_fts(p)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(D.UnsupportedDtype):
            D.write_fts(tmp_path / "f64.fts", np.zeros(2, dtype=np.float64))


class TestGenerateDataset:
    def test_deterministic_per_seed(self, tmp_path):
        spec = D.PhantomSpec(seed=7)
        m1 = D.generate_dataset(spec, 5, tmp_path / "a")
        m2 = D.generate_dataset(D.PhantomSpec(seed=7), 5, tmp_path / "b")
        for e1, e2 in zip(m1.samples, m2.samples):
            assert m1.load_image(e1).tobytes() == m2.load_image(e2).tobytes()
            assert e1.present == e2.present
            for ci in e1.present:
                assert m1.load_mask(e1, ci).tobytes() == m2.load_mask(e2, ci).tobytes()

    def test_blob_size_filter(self, tmp_path):
        man = D.generate_dataset(D.PhantomSpec(seed=3), 30, tmp_path)
        for e in man.samples:
            for ci in e.present:
                assert man.load_mask(e, ci).sum() >= 30

    def test_class0_centroid_upper_left(self, tmp_path):
        man = D.generate_dataset(D.PhantomSpec(seed=5), 40, tmp_path)
        half = man.image_size / 2
        seen = 0
        for e in man.samples:
            if 0 not in e.present:
                continue
            seen += 1
            ys, xs = np.nonzero(man.load_mask(e, 0))
            assert ys.mean() < half and xs.mean() < half
        assert seen > 0

    def test_classes_disjoint_dice_zero(self, tmp_path):
        man = D.generate_dataset(D.PhantomSpec(seed=11), 25, tmp_path)
        for e in man.samples:
            masks = man.load_masks(e)
            ids = sorted(masks)
            for i, a in enumerate(ids):
                for b in ids[i + 1 :]:
                    assert L.dice_metric(masks[a], masks[b]) == 0.0

    def test_at_least_one_class_present(self, tmp_path):
        man = D.generate_dataset(D.PhantomSpec(seed=2), 50, tmp_path)
        assert all(len(e.present) >= 1 for e in man.samples)

    def test_images_normalized(self, tmp_path):
        man = D.generate_dataset(D.PhantomSpec(seed=4), 10, tmp_path)
        for e in man.samples:
            img = man.load_image(e)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_manifest_round_trip_and_validation(self, tmp_path):
        D.generate_dataset(D.PhantomSpec(seed=1), 4, tmp_path)
        man = D.Manifest.load(tmp_path)
        assert len(man.samples) == 4
        (tmp_path / man.samples[0].image).unlink()
        with pytest.raises(FileNotFoundError):
            D.Manifest.load(tmp_path)


class TestTransforms:
    def test_identity_only_bit_exact_with_flag_cleared(self, tmp_path):
        src = D.generate_dataset(D.PhantomSpec(seed=9), 6, tmp_path / "src")
        action = G.GroupAction(4)
        out = D.apply_dataset_transforms(
            src, action, seed=0, out_dir=tmp_path / "dst", elements=[G.identity(4)]
        )
        assert out.canonical is False
        for e1, e2 in zip(src.samples, out.samples):
            assert src.load_image(e1).tobytes() == out.load_image(e2).tobytes()
            for ci in e1.present:
                assert src.load_mask(e1, ci).tobytes() == out.load_mask(e2, ci).tobytes()

    def test_inverse_recovers_original_bit_exact(self, tmp_path):
        src = D.generate_dataset(D.PhantomSpec(seed=12), 8, tmp_path / "src")
        action = G.GroupAction(4)
        out = D.apply_dataset_transforms(src, action, seed=5, out_dir=tmp_path / "dst")
        for e1, e2 in zip(src.samples, out.samples):
            g = D.recorded_transform(e2)
            restored = action.act(G.inverse(g), out.load_image(e2))
            assert restored.tobytes() == src.load_image(e1).tobytes()

    def test_mask_image_consistency(self, tmp_path):
        src = D.generate_dataset(D.PhantomSpec(seed=13), 8, tmp_path / "src")
        action = G.GroupAction(4)
        out = D.apply_dataset_transforms(src, action, seed=3, out_dir=tmp_path / "dst")
        for e1, e2 in zip(src.samples, out.samples):
            g = D.recorded_transform(e2)
            for ci in e1.present:
                expected = action.act(g, src.load_mask(e1, ci), mask=True)
                assert np.array_equal(out.load_mask(e2, ci), expected)

    def test_elements_uniform_chi2(self, tmp_path):
        src = D.generate_dataset(D.PhantomSpec(seed=1, image_size=16), 1000, tmp_path / "src")
        action = G.GroupAction(4)
        out = D.apply_dataset_transforms(src, action, seed=42, out_dir=tmp_path / "dst")
        counts = np.zeros(8)
        for e in out.samples:
            counts[D.recorded_transform(e).index] += 1
        expected = len(out.samples) / 8
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 18.48  # 7 dof, p > 0.01
