import numpy as np
import pytest

from xicpeak import data as D


def test_position_channel_endpoints():
    assert np.array_equal(D.make_position_channel(2), [0.0, 1.0])


def test_position_channel_ramp():
    np.testing.assert_allclose(D.make_position_channel(5), [0, 0.25, 0.5, 0.75, 1])
    v = D.make_position_channel(175)
    assert v[0] == 0.0 and v[-1] == 1.0
    assert np.all(np.diff(v) > 0)


def test_position_channel_degenerate():
    with pytest.raises(ValueError):
        D.make_position_channel(1)


def test_annotation_to_mask():
    mask = D.annotation_to_mask(D.Annotation(2, 4), 7)
    assert mask.tolist() == [0, 0, 1, 1, 1, 0, 0]
    assert D.annotation_to_mask(D.Annotation(0, 0), 3).tolist() == [1, 0, 0]


def test_annotation_out_of_range():
    with pytest.raises(ValueError):
        D.annotation_to_mask(D.Annotation(5, 6), 4)
    with pytest.raises(ValueError):
        D.Annotation(3, 2).validate(10)


def test_mask_to_annotations():
    runs = D.mask_to_annotations(np.array([0, 1, 1, 0, 1]))
    assert [(a.left, a.right) for a in runs] == [(1, 2), (4, 4)]
    assert D.mask_to_annotations(np.zeros(6)) == []
    runs = D.mask_to_annotations(np.ones(4))
    assert [(a.left, a.right) for a in runs] == [(0, 3)]


def test_mask_annotation_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mask = (rng.random(30) < 0.4).astype(np.uint8)
        runs = D.mask_to_annotations(mask)
        rebuilt = np.zeros(30, dtype=np.uint8)
        for ann in runs:
            rebuilt |= D.annotation_to_mask(ann, 30)
        assert np.array_equal(rebuilt, mask)


class TestSynthGenerate:
    def test_noise_free_positive_matches_closed_form(self):
        cfg = D.SynthConfig(length=64, trace_channels=1, p_pos=1.0, noise_floor=0.0,
                            noise_scale=0.0, p_interferent=0.0, seed=7)
        ((xic, mask),) = D.synth_generate(cfg, 1)
        # recover the generator's own draws by replaying its RNG
        rng = np.random.default_rng(7)
        assert rng.random() < 1.0
        sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max)
        center = rng.uniform(2 * sigma, 63 - 2 * sigma)
        amp = np.exp(rng.uniform(np.log(cfg.amp_min), np.log(cfg.amp_max)))
        expected = amp * D.gaussian_peak(64, center, sigma)
        np.testing.assert_allclose(xic.values[0], expected, rtol=1e-6)
        lo = round(center - 2 * sigma)
        hi = round(center + 2 * sigma)
        assert D.mask_to_annotations(mask) == [D.Annotation(lo, hi)]

    def test_p_pos_zero_all_negative(self):
        cfg = D.SynthConfig(p_pos=0.0, seed=1)
        for _, mask in D.synth_generate(cfg, 20):
            assert mask.sum() == 0

    def test_determinism(self):
        cfg = D.SynthConfig(seed=3)
        a = D.synth_generate(cfg, 5)
        b = D.synth_generate(cfg, 5)
        for (xa, ma), (xb, mb) in zip(a, b):
            assert np.array_equal(xa.values, xb.values)
            assert np.array_equal(ma, mb)

    def test_samples_are_valid(self):
        for xic, mask in D.synth_generate(D.SynthConfig(seed=5), 10):
            xic.validate()
            assert len(mask) == xic.length

    def test_coelution_cross_correlation(self):
        # peak channels correlate maximally at lag zero in a noise-free config
        cfg = D.SynthConfig(length=80, trace_channels=4, p_pos=1.0, noise_floor=0.0,
                            noise_scale=0.0, p_interferent=0.0, seed=11)
        for xic, _ in D.synth_generate(cfg, 5):
            a, b = xic.values[0].astype(np.float64), xic.values[1].astype(np.float64)
            corr = np.correlate(a - a.mean(), b - b.mean(), mode="full")
            assert np.argmax(corr) == len(a) - 1

    def test_position_channel_exact(self):
        for xic, _ in D.synth_generate(D.SynthConfig(seed=2), 5):
            np.testing.assert_array_equal(xic.position_channel,
                                          D.make_position_channel(xic.length))

    def test_infeasible_geometry(self):
        with pytest.raises(ValueError):
            D.SynthConfig(length=10, sigma_min=3, sigma_max=5).validate()


class TestSplit:
    def test_ratio_sizes(self):
        samples = list(range(10))
        train, val, test = D.split_dataset(samples, (0.7, 0.2, 0.1), seed=0)
        assert (len(train.labeled), len(val.labeled), len(test.labeled)) == (7, 2, 1)

    def test_empty(self):
        train, val, test = D.split_dataset([], (0.7, 0.2, 0.1), seed=0)
        assert len(train.labeled) == len(val.labeled) == len(test.labeled) == 0

    def test_deterministic_and_exhaustive(self):
        samples = list(range(53))
        a = D.split_dataset(samples, seed=9)
        b = D.split_dataset(samples, seed=9)
        for ds_a, ds_b in zip(a, b):
            assert ds_a.labeled == ds_b.labeled
        union = sorted(x for ds in a for x in ds.labeled)
        assert union == samples

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            D.split_dataset([1, 2], (0.5, 0.2, 0.1))


class TestXicFile:
    def _samples(self, n=4, seed=0):
        return D.synth_generate(D.SynthConfig(seed=seed), n)

    def test_round_trip_bit_exact(self, tmp_path):
        samples = self._samples()
        path = tmp_path / "a.xic"
        D.write_xic_file(path, samples)
        back = D.read_xic_file(path)
        assert len(back) == len(samples)
        for (xa, ma), (xb, mb) in zip(samples, back):
            assert xa.id == xb.id
            assert xa.trace_channels == xb.trace_channels
            assert xa.values.tobytes() == xb.values.tobytes()
            assert np.array_equal(ma, mb)

    def test_unlabeled_round_trip(self, tmp_path):
        samples = [(x, None) for x, _ in self._samples()]
        path = tmp_path / "u.xic"
        D.write_xic_file(path, samples)
        back = D.read_xic_file(path)
        assert all(m is None for _, m in back)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.xic"
        D.write_xic_file(path, [])
        assert D.read_xic_file(path) == []

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "bad.xic"
        D.write_xic_file(path, self._samples(1))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(raw)
        with pytest.raises(D.FormatError):
            D.read_xic_file(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.xic"
        D.write_xic_file(path, self._samples(2))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 20])
        with pytest.raises(D.FormatError) as err:
            D.read_xic_file(path)
        assert err.value.offset is not None

    def test_sidecar_round_trip(self, tmp_path):
        samples = self._samples(6, seed=4)
        path = tmp_path / "s.jsonl"
        D.write_annotation_sidecar(path, samples)
        anns = D.read_annotation_sidecar(path)
        for xic, mask in samples:
            expected = D.mask_to_annotations(mask)
            assert anns.get(xic.id, []) == expected
