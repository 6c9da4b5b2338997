import numpy as np
import pytest

from tentaclenet.data import (
    CIFAR_RECORD,
    DatasetError,
    load_cifar10,
    load_grayscale_csv,
    nearest_template_accuracy,
    parse_grayscale_csv,
    read_cifar10_batch,
    synth_dataset,
    synth_templates,
    write_grayscale_csv,
)


def fake_batch(path, records=10000, seed=0):
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, size=(records, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, size=records)
    rec.tofile(path)
    return rec


class TestCifar:
    def test_batch(self, tmp_path):
        rec = fake_batch(tmp_path / "b.bin")
        x, y = read_cifar10_batch(tmp_path / "b.bin")
        assert x.shape == (10000, 3, 32, 32) and y.shape == (10000,)
        assert y[0] == rec[0, 0]
        # channel-major: first 1024 pixel bytes are the red plane
        assert np.array_equal(x[0, 0].ravel(), rec[0, 1:1025])

    def test_truncated(self, tmp_path):
        fake_batch(tmp_path / "b.bin", records=3)
        data = (tmp_path / "b.bin").read_bytes()
        (tmp_path / "b.bin").write_bytes(data[:-1])
        with pytest.raises(DatasetError, match="truncated batch"):
            read_cifar10_batch(tmp_path / "b.bin")

    def test_bad_label(self, tmp_path):
        rec = fake_batch(tmp_path / "b.bin", records=5)
        rec[3, 0] = 10
        rec.tofile(tmp_path / "b.bin")
        with pytest.raises(DatasetError, match="corrupt record 3"):
            read_cifar10_batch(tmp_path / "b.bin")

    def test_directory(self, tmp_path):
        for i in range(1, 6):
            fake_batch(tmp_path / f"data_batch_{i}.bin", records=20, seed=i)
        fake_batch(tmp_path / "test_batch.bin", records=10, seed=9)
        ds = load_cifar10(tmp_path, expected_records=None)
        assert len(ds) == 110 and ds.classes == 10
        assert (ds.split == "train").sum() == 100
        xt, _ = ds.subset("train")
        np.testing.assert_allclose(xt.mean(axis=(0, 2, 3)), 0, atol=1e-5)

    def test_directory_size_check(self, tmp_path):
        for i in range(1, 6):
            fake_batch(tmp_path / f"data_batch_{i}.bin", records=20, seed=i)
        fake_batch(tmp_path / "test_batch.bin", records=10, seed=9)
        with pytest.raises(DatasetError, match="truncated"):
            load_cifar10(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError, match="missing"):
            load_cifar10(tmp_path)


class TestCsv:
    def test_zero_row(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("emotion,pixels,Usage\n3," + " ".join(["0"] * 2304) + ",Training\n")
        px, labels, tags = parse_grayscale_csv(p)
        assert labels.tolist() == [3] and tags.tolist() == ["train"]
        assert px.shape == (1, 1, 48, 48) and not px.any()

    def test_short_row(self, tmp_path):
        p = tmp_path / "f.csv"
        good = "0," + " ".join(["1"] * 2304) + ",Training\n"
        p.write_text("emotion,pixels,Usage\n" + good + "1," + " ".join(["1"] * 2303) + ",PublicTest\n")
        with pytest.raises(DatasetError, match="row 3"):
            parse_grayscale_csv(p)

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        px = rng.integers(0, 256, size=(6, 1, 48, 48), dtype=np.uint8)
        labels = rng.integers(0, 7, size=6)
        tags = np.array(["train", "train", "val", "test", "train", "val"])
        write_grayscale_csv(tmp_path / "a.csv", px, labels, tags)
        px2, labels2, tags2 = parse_grayscale_csv(tmp_path / "a.csv")
        assert np.array_equal(px, px2) and np.array_equal(labels, labels2)
        assert tags2.tolist() == tags.tolist()
        write_grayscale_csv(tmp_path / "b.csv", px2, labels2, tags2)
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_load_standardizes(self, tmp_path):
        rng = np.random.default_rng(1)
        px = rng.integers(0, 256, size=(8, 1, 48, 48), dtype=np.uint8)
        write_grayscale_csv(tmp_path / "a.csv", px, np.arange(8) % 7, ["train"] * 6 + ["test"] * 2)
        ds = load_grayscale_csv(tmp_path / "a.csv")
        assert ds.classes == 7 and ds.has("test") and not ds.has("val")
        assert abs(float(ds.subset("train")[0].mean())) < 1e-5


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(4, n_train=60, n_test=30), synth_dataset(4, n_train=60, n_test=30)
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
        assert not np.array_equal(a.x, synth_dataset(5, n_train=60, n_test=30).x)

    def test_balanced(self):
        ds = synth_dataset(0)
        for tag, n in (("train", 3000), ("test", 600)):
            _, y = ds.subset(tag)
            assert np.bincount(y).tolist() == [n // 3] * 3

    def test_noiseless(self):
        ds = synth_dataset(2, sigma=0.0, n_train=30, n_test=90)
        assert nearest_template_accuracy(ds, synth_templates(2, 3, 1, 16, 16)) == 100.0

    @pytest.mark.parametrize("seed", range(5))
    def test_default_ceiling(self, seed):
        ds = synth_dataset(seed)
        assert nearest_template_accuracy(ds, synth_templates(seed, 3, 1, 16, 16)) >= 90.0

    def test_one_class(self):
        with pytest.raises(ValueError):
            synth_dataset(classes=1)
