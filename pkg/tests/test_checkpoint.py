import numpy as np
import pytest

from semaforge.checkpoint import MAGIC, read_params, write_params
from semaforge.config import ModelConfig
from semaforge.errors import ContractError
from semaforge.model import DetectorModel
from semaforge.segmentation import FRAGMENTS


class TestContainer:
    def test_roundtrip_preserves_order_shapes_values(self, tmp_path, rng):
        entries = [
            ("conv.kernel", rng.normal(size=(3, 3, 2, 4))),
            ("conv.bias", rng.normal(size=4)),
            ("scalar", np.array(3.25)),
        ]
        path = tmp_path / "params.bin"
        write_params(path, entries)
        back = read_params(path)
        assert list(back.keys()) == [name for name, _ in entries]
        for name, arr in entries:
            assert back[name].shape == np.asarray(arr).shape
            assert np.array_equal(back[name], arr)

    def test_rewrite_is_byte_identical(self, tmp_path, rng):
        entries = [("w", rng.normal(size=(5, 5)))]
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_params(a, entries)
        write_params(b, entries)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ContractError):
            read_params(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.bin"
        path.write_bytes(MAGIC + (9).to_bytes(4, "little") + (0).to_bytes(4, "little"))
        with pytest.raises(ContractError):
            read_params(path)


class TestModelPersistence:
    CFG = ModelConfig(fragment_size=32, backbone_stages=(4, 8), backbone_hidden=16)

    def test_save_load_roundtrip_identical_outputs(self, tmp_path, rng):
        model = DetectorModel(self.CFG, seed=3)
        model.save(tmp_path / "model")
        clone = DetectorModel.load(tmp_path / "model")
        frags = {k: rng.normal(size=(32, 32, 3)) for k in FRAGMENTS}
        P1, xa1, _ = model.fbranch_forward(frags, training=False)
        P2, xa2, _ = clone.fbranch_forward(frags, training=False)
        assert np.array_equal(P1, P2)
        W1, s1, l1 = model.gbranch_forward(P1, xa1, training=False)
        W2, s2, l2 = clone.gbranch_forward(P2, xa2, training=False)
        assert np.array_equal(W1, W2) and np.array_equal(s1, s2) and l1 == l2

    def test_saved_files_one_per_subnetwork(self, tmp_path):
        model = DetectorModel(self.CFG, seed=0)
        model.save(tmp_path / "model")
        names = sorted(p.name for p in (tmp_path / "model").iterdir())
        expect = sorted([f"fbranch_{k}.bin" for k in FRAGMENTS]
                        + [f"gbranch_{k}.bin" for k in FRAGMENTS]
                        + ["manifest.json"])
        assert names == expect

    def test_resave_is_byte_identical(self, tmp_path):
        model = DetectorModel(self.CFG, seed=5)
        model.save(tmp_path / "a")
        model.save(tmp_path / "b")
        for name in [f"fbranch_{k}.bin" for k in FRAGMENTS] + ["manifest.json"]:
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_missing_parameter_detected(self, tmp_path):
        model = DetectorModel(self.CFG, seed=0)
        model.save(tmp_path / "model")
        write_params(tmp_path / "model" / "fbranch_p.bin", [("junk", np.zeros(3))])
        with pytest.raises(ContractError):
            DetectorModel.load(tmp_path / "model")
