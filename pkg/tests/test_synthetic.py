import json
import math
import os

import numpy as np
import pytest

from hcseg.data.synthetic import (CLASS_NAMES, SyntheticSpec, generate_sample, generate_synthetic,
                                  load_manifest, load_split, rasterize, sample_rng, synthesize)


def _files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = os.path.join(dirpath, n)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


class TestGenerate:
    def test_count_zero(self, tmp_path):
        m = generate_synthetic(SyntheticSpec(count=0), tmp_path)
        assert m.entries == []
        assert json.loads((tmp_path / "manifest.json").read_text())["entries"] == []

    def test_byte_identical_reruns(self, tmp_path):
        spec = SyntheticSpec(count=4, val_count=2, seed=3)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert a == b and len(a) == 6 * 3 + 1

    def test_seed_changes_data(self):
        a = synthesize(SyntheticSpec(seed=1), 1)[0]
        b = synthesize(SyntheticSpec(seed=2), 1)[0]
        assert not np.array_equal(a.image, b.image)

    def test_samples_independent_of_count(self):
        a = synthesize(SyntheticSpec(seed=5), 3)
        b = synthesize(SyntheticSpec(seed=5), 1, offset=2)
        np.testing.assert_array_equal(a[2].image, b[0].image)

    def test_manifest_roundtrip_and_splits(self, tmp_path):
        spec = SyntheticSpec(count=3, val_count=2, size=(32, 32), size_range=(4, 8))
        generate_synthetic(spec, tmp_path)
        m = load_manifest(tmp_path / "manifest.json")
        assert len(m.split("train")) == 3 and len(m.split("val")) == 2
        assert m.classes == dict(enumerate(CLASS_NAMES))
        assert m.metadata["overlap_resolution"] == "rejected"
        val = load_split(m, "val")
        ref = synthesize(spec, 2, offset=3)
        for s, r in zip(val, ref):
            np.testing.assert_array_equal(s.image, r.image)
            np.testing.assert_array_equal(s.instance, r.instance)

    def test_manifest_missing_file(self, tmp_path):
        generate_synthetic(SyntheticSpec(count=1), tmp_path)
        os.remove(tmp_path / "semantic" / "00000.pgm")
        with pytest.raises(FileNotFoundError, match="00000.pgm"):
            load_manifest(tmp_path / "manifest.json")

    def test_manifest_bad_schema(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"schema_version": 99}))
        with pytest.raises(ValueError, match="schema_version"):
            load_manifest(tmp_path / "manifest.json")

    @pytest.mark.parametrize("kw", [dict(size=(32, 32)), dict(size_range=(5, 3)), dict(count=-1),
                                    dict(color_mode="grey"), dict(shapes_per_image=(2, 1))])
    def test_invalid_spec(self, tmp_path, kw):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**kw), tmp_path)

    def test_unwritable_dir_has_path_context(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            generate_synthetic(SyntheticSpec(count=1), blocker / "sub")


class TestSampleInvariants:
    @pytest.mark.parametrize("seed", range(20))
    def test_consistency(self, seed):
        s = generate_sample(sample_rng(seed, 0), SyntheticSpec())
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.uint8
        ids = [i for i in np.unique(s.instance) if i]
        assert ids == list(range(1, len(ids) + 1))
        for i in ids:
            classes = np.unique(s.semantic[s.instance == i])
            assert len(classes) == 1 and classes[0] > 0
        np.testing.assert_array_equal(s.semantic > 0, s.instance > 0)
        # shapes stay inside the canvas with a margin
        border = np.concatenate([s.instance[0], s.instance[-1], s.instance[:, 0], s.instance[:, -1]])
        assert not border.any()

    @pytest.mark.parametrize("seed", range(10))
    def test_no_touching_instances(self, seed):
        s = generate_sample(sample_rng(seed, 1), SyntheticSpec(shapes_per_image=(3, 3)))
        inst = s.instance
        for a, b in ((inst[1:], inst[:-1]), (inst[:, 1:], inst[:, :-1])):
            assert not ((a > 0) & (b > 0) & (a != b)).any()

    def test_overlap_mode_painter_order(self, tmp_path):
        spec = SyntheticSpec(count=5, allow_overlap=True, shapes_per_image=(3, 3), size_range=(12, 16))
        m = generate_synthetic(spec, tmp_path)
        assert m.metadata["overlap_resolution"] == "painter"
        for s in synthesize(spec, 5):
            ids = [i for i in np.unique(s.instance) if i]
            assert ids == list(range(1, len(ids) + 1))
            for i in ids:
                assert len(np.unique(s.semantic[s.instance == i])) == 1


class TestRasterize:
    @pytest.mark.parametrize("r", [3.0, 5.5, 8.0, 12.0, 16.0])
    def test_disk_area(self, r):
        area = int(rasterize(1, 64, 64, 31.3, 32.7, r).sum())
        assert abs(area - math.pi * r * r) <= 4 * r

    def test_rectangle_exact(self):
        m = rasterize(2, 20, 20, 10.0, 10.0, (3, 5))
        assert m.sum() == 6 * 10

    def test_triangle_area(self):
        r = 12.0
        area = rasterize(3, 64, 64, 32.0, 32.0, r, 0.3).sum()
        assert abs(area - 3 * math.sqrt(3) / 4 * r * r) <= 4 * r

    def test_single_disk_semantic_area(self):
        spec = SyntheticSpec(shapes_per_image=(1, 1))
        for seed in range(40):
            s = generate_sample(sample_rng(seed, 0), spec)
            if (s.semantic == 1).any():
                break
        area = int((s.semantic == 1).sum())
        r = math.sqrt(area / math.pi)
        # the radius is an integer in the size range; find it from the nearest candidate
        cands = [k for k in range(spec.size_range[0], spec.size_range[1] + 1) if abs(area - math.pi * k * k) <= 4 * k]
        assert cands and abs(cands[0] - r) < 1

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            rasterize(7, 4, 4, 2, 2, 1)
