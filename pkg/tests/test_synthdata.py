import hashlib

import numpy as np
import pytest
import torch

from inputdrop.container import ContainerError, read_container, write_container
from inputdrop.synthdata import (
    SynthClassTaskSpec,
    SynthDehazeTaskSpec,
    SynthHazeParams,
    generate_classification_dataset,
    generate_dehaze_dataset,
    load_classification_dataset,
    load_dehaze_dataset,
    remove_haze,
    save_classification_dataset,
    save_dehaze_dataset,
    spec_hash,
    synthesize_haze,
)

SMALL = SynthClassTaskSpec(n_train=60, n_val=30, n_test=60, seed=3)
SMALL_HAZE = SynthDehazeTaskSpec(n_train=6, n_val=3, n_test=4, seed=2)


@pytest.fixture(scope="module")
def cls_data():
    return generate_classification_dataset(SMALL)


class TestHaze:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.clear = rng.random((3, 8, 8))
        self.depth = rng.random((8, 8))

    def test_zero_depth_is_identity(self):
        out = synthesize_haze(self.clear, np.zeros((8, 8)), SynthHazeParams((0.8, 0.8, 0.8), 1.5))
        np.testing.assert_array_equal(out, self.clear)

    def test_zero_beta_is_identity(self):
        out = synthesize_haze(self.clear, self.depth, SynthHazeParams((0.8, 0.7, 0.6), 0.0))
        np.testing.assert_array_equal(out, self.clear)

    def test_dense_haze_tends_to_airlight(self):
        a = (0.9, 0.8, 0.7)
        out = synthesize_haze(self.clear, np.full((8, 8), 50.0), SynthHazeParams(a, 2.0))
        np.testing.assert_allclose(out, np.broadcast_to(np.array(a)[:, None, None], out.shape), atol=1e-12)

    def test_closed_form_pixel(self):
        p = SynthHazeParams((0.9, 0.9, 0.9), 1.0)
        out = synthesize_haze(np.full((3, 1, 1), 0.2), np.full((1, 1), np.log(2.0)), p)
        # t = 1/2: 0.2 * 0.5 + 0.9 * 0.5
        np.testing.assert_allclose(out, 0.55, atol=1e-15)

    def test_stays_in_unit_range(self):
        out = synthesize_haze(self.clear, 3 * self.depth, SynthHazeParams((1.0, 0.5, 0.2), 2.0))
        assert out.min() >= 0 and out.max() <= 1

    def test_inversion(self):
        p = SynthHazeParams((0.85, 0.9, 0.95), 1.3)
        hazy = synthesize_haze(self.clear, self.depth, p)
        np.testing.assert_allclose(remove_haze(hazy, self.depth, p), self.clear, atol=1e-6)

    def test_errors(self):
        with pytest.raises(ValueError):
            SynthHazeParams((0.9, 0.9, 0.9), -1.0)
        with pytest.raises(ValueError):
            synthesize_haze(self.clear, -self.depth, SynthHazeParams())
        with pytest.raises(ValueError):
            SynthHazeParams((0.0, 0.5, 0.5))


class TestClassification:
    def test_shapes(self, cls_data):
        tr = cls_data["train"]
        assert tr.batch.data.shape == (60, 4, 32, 32)
        assert list(tr.batch.layout.names) == ["rgb", "depth"]
        assert tr.labels.dtype == torch.int64

    def test_determinism(self, cls_data):
        again = generate_classification_dataset(SMALL)
        for split in cls_data:
            assert torch.equal(cls_data[split].batch.data, again[split].batch.data)
            assert torch.equal(cls_data[split].labels, again[split].labels)

    def test_seed_changes_data(self, cls_data):
        other = generate_classification_dataset(SynthClassTaskSpec(n_train=60, n_val=30, n_test=60, seed=4))
        assert not torch.equal(cls_data["train"].batch.data, other["train"].batch.data)

    def test_labels_uniform(self, cls_data):
        for split in cls_data.values():
            counts = torch.bincount(split.labels, minlength=SMALL.num_classes)
            assert counts.max() - counts.min() <= 1

    def test_splits_disjoint(self, cls_data):
        seen = {}
        for name, split in cls_data.items():
            for img in split.batch.data.numpy():
                h = hashlib.sha256(img.tobytes()).hexdigest()
                assert seen.setdefault(h, name) == name

    def test_value_ranges(self, cls_data):
        x = cls_data["train"].batch.data
        assert x.min() >= 0 and x.max() <= 1

    def test_rho_zero_all_cues_in_rgb(self):
        d = generate_classification_dataset(SynthClassTaskSpec(n_train=30, n_val=0, n_test=0, rho=0.0))
        assert d["train"].cue_in_rgb.all()

    def test_rho_one_no_cue_in_rgb(self):
        spec = SynthClassTaskSpec(n_train=30, n_val=0, n_test=0, rho=1.0, rgb_noise=0.0)
        d = generate_classification_dataset(spec)["train"]
        assert not d.cue_in_rgb.any()
        # without noise and without the cue, the dome and bowl of one shape
        # share an identical luminance inside the mask
        rgb = d.batch.data[:, :3]
        height = d.batch.data[:, 3]
        inside = height > 0
        for i in range(len(d)):
            vals = rgb[i].mean(0)[inside[i]]
            assert vals.max() - vals.min() < 1e-6

    def test_cue_tracks_height(self):
        spec = SynthClassTaskSpec(n_train=30, n_val=0, n_test=0, rho=0.0, rgb_noise=0.0)
        d = generate_classification_dataset(spec)["train"]
        lum = d.batch.data[:, :3].mean(1)
        h = d.batch.data[:, 3]
        for i in range(len(d)):
            m = h[i] > 0
            c = np.corrcoef(lum[i][m].numpy(), h[i][m].numpy())[0, 1]
            assert c > 0.99

    def test_depth_background_is_zero(self, cls_data):
        h = cls_data["train"].batch.data[:, 3]
        assert (h[:, 0, 0] == 0).float().mean() > 0.9

    def test_rho_fraction(self):
        d = generate_classification_dataset(SynthClassTaskSpec(n_train=2000, n_val=0, n_test=0, rho=0.3, image_size=16))
        assert 1 - d["train"].cue_in_rgb.float().mean().item() == pytest.approx(0.3, abs=0.04)

    @pytest.mark.parametrize(
        "kw", [{"rho": 1.5}, {"rgb_noise": -0.1}, {"num_classes": 5}, {"num_classes": 10}, {"image_size": 8}]
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthClassTaskSpec(**kw)


@pytest.fixture(scope="module")
def haze_data():
    return generate_dehaze_dataset(SMALL_HAZE)


class TestDehazeData:
    @pytest.fixture
    def data(self, haze_data):
        return haze_data

    def test_depth_channel_regenerates_hazy(self, data):
        tr = data["train"]
        for i in range(len(tr)):
            p = SynthHazeParams(tuple(tr.airlight[i].tolist()), float(tr.beta[i]))
            hazy = synthesize_haze(tr.clear[i].double().numpy(), tr.batch.data[i, 3:].double().numpy(), p)
            np.testing.assert_allclose(hazy, tr.batch.data[i, :3].numpy(), atol=1e-6)

    def test_ranges(self, data):
        for s in data.values():
            assert s.clear.min() >= 0 and s.clear.max() <= 1
            assert s.batch.data.min() >= 0 and s.batch.data.max() <= 1
            assert ((s.beta >= 0.8) & (s.beta <= 2.0)).all()

    def test_determinism(self, data):
        again = generate_dehaze_dataset(SMALL_HAZE)
        assert torch.equal(again["test"].batch.data, data["test"].batch.data)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SynthDehazeTaskSpec(beta_range=(2.0, 1.0))


class TestContainer:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones((1, 2, 2), np.float32)}
        path = write_container(tmp_path / "x.idds", arrays, layout={"k": 1}, seed=5, spec_hash="abc")
        header, out = read_container(path)
        assert header["seed"] == 5 and header["spec_hash"] == "abc"
        for k in arrays:
            np.testing.assert_array_equal(out[k], arrays[k])

    def test_byte_layout(self, tmp_path):
        path = write_container(tmp_path / "x.idds", {"a": np.array([1.5], np.float32)})
        raw = path.read_bytes()
        assert raw[:4] == b"IDDS"
        assert int.from_bytes(raw[4:8], "little") == 1
        hlen = int.from_bytes(raw[8:12], "little")
        assert raw[12 + hlen :] == np.array([1.5], "<f4").tobytes()

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="dataset not found"):
            read_container(tmp_path / "nope.idds")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.idds"
        p.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ContainerError):
            read_container(p)

    def test_truncated(self, tmp_path):
        path = write_container(tmp_path / "x.idds", {"a": np.zeros(10, np.float32)})
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ContainerError):
            read_container(path)

    def test_classification_dataset(self, tmp_path, cls_data):
        path = save_classification_dataset(cls_data, SMALL, tmp_path / "c.idds")
        loaded, spec = load_classification_dataset(path)
        assert spec == SMALL
        assert read_container(path)[0]["spec_hash"] == spec_hash(SMALL)
        for split in cls_data:
            assert torch.equal(loaded[split].batch.data, cls_data[split].batch.data)
            assert torch.equal(loaded[split].labels, cls_data[split].labels)

    def test_dehaze_dataset(self, tmp_path):
        data = generate_dehaze_dataset(SMALL_HAZE)
        loaded, spec = load_dehaze_dataset(save_dehaze_dataset(data, SMALL_HAZE, tmp_path / "d.idds"))
        assert spec == SMALL_HAZE
        assert torch.equal(loaded["val"].clear, data["val"].clear)

    def test_kind_mismatch(self, tmp_path, cls_data):
        path = save_classification_dataset(cls_data, SMALL, tmp_path / "c.idds")
        with pytest.raises(ValueError):
            load_dehaze_dataset(path)
