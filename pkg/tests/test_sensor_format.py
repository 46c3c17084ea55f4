import numpy as np
import pytest

from eofuse import sensor_format as sf
from eofuse import tensor as tz


def sar_image(rng, c, h=4, w=4):
    return sf.RawSensorImage(rng.random((c, h, w)).astype(np.float32), "sar")


def test_pad_sar_single_channel_zero_pad():
    rng = np.random.default_rng(0)
    img = sar_image(rng, 1)
    out = sf.pad_sar(img, "zero_pad")
    assert out.shape == (3, 4, 4)
    assert np.array_equal(out[0], img.bands[0])
    assert np.all(out[1:] == 0.0)


def test_pad_sar_single_channel_replicate():
    rng = np.random.default_rng(1)
    img = sar_image(rng, 1)
    out = sf.pad_sar(img, "replicate")
    for i in range(3):
        assert np.array_equal(out[i], img.bands[0])


def test_pad_sar_dual_channel_zero_pad():
    rng = np.random.default_rng(2)
    img = sar_image(rng, 2)
    out = sf.pad_sar(img, "zero_pad")
    assert np.array_equal(out[0], img.bands[0])
    assert np.array_equal(out[1], img.bands[1])
    assert np.all(out[2] == 0.0)


def test_pad_sar_dual_channel_replicate_cyclic():
    rng = np.random.default_rng(3)
    img = sar_image(rng, 2)
    out = sf.pad_sar(img, "replicate")
    assert np.array_equal(out[2], img.bands[0])


def test_pad_sar_three_channel_noop():
    rng = np.random.default_rng(4)
    img = sar_image(rng, 3)
    out = sf.pad_sar(img, "zero_pad")
    assert np.array_equal(out, img.bands)


def test_pad_sar_channel_slice_recovers_input():
    rng = np.random.default_rng(5)
    for c in (1, 2):
        img = sar_image(rng, c)
        for mode in sf.PAD_MODES:
            out = sf.pad_sar(img, mode)
            assert np.array_equal(out[:c], img.bands)


def test_pad_sar_too_many_channels():
    rng = np.random.default_rng(6)
    with pytest.raises(tz.DomainError):
        sf.RawSensorImage(rng.random((4, 4, 4)).astype(np.float32), "sar")


def test_group_bands_triplets():
    rng = np.random.default_rng(7)
    img = sf.RawSensorImage(rng.random((6, 4, 4)).astype(np.float32), "multispectral")
    seq = sf.group_bands(img, "triplet")
    assert len(seq.frames) == 2
    assert seq.ordering == [(0, 1, 2), (3, 4, 5)]
    assert np.array_equal(seq.frames[1][2], img.bands[5])


def test_group_bands_partial_triplet_zero_padded():
    rng = np.random.default_rng(8)
    img = sf.RawSensorImage(rng.random((7, 4, 4)).astype(np.float32), "multispectral")
    seq = sf.group_bands(img, "triplet")
    assert len(seq.frames) == 3
    assert seq.ordering[2] == (6,)
    assert np.array_equal(seq.frames[2][0], img.bands[6])
    assert np.all(seq.frames[2][1:] == 0.0)


def test_group_bands_single():
    rng = np.random.default_rng(9)
    img = sf.RawSensorImage(rng.random((2, 4, 4)).astype(np.float32), "multispectral")
    seq = sf.group_bands(img, "single")
    assert len(seq.frames) == 2
    for i, frame in enumerate(seq.frames):
        assert np.array_equal(frame[0], img.bands[i])
        assert np.all(frame[1:] == 0.0)
        assert seq.ordering[i] == (i,)


def test_group_bands_frame_counts():
    rng = np.random.default_rng(10)
    for c in range(1, 12):
        img = sf.RawSensorImage(rng.random((c, 2, 2)).astype(np.float32), "multispectral")
        assert len(sf.group_bands(img, "triplet").frames) == -(-c // 3)
        assert len(sf.group_bands(img, "single").frames) == c


def test_losslessness_multiset():
    # every source band appears exactly once across the non-padded channels
    rng = np.random.default_rng(11)
    for trial in range(20):
        c = int(rng.integers(1, 11))
        img = sf.RawSensorImage(rng.random((c, 3, 3)).astype(np.float32), "multispectral")
        for mode in sf.GROUP_MODES:
            seq = sf.group_bands(img, mode)
            seen = []
            for frame, order in zip(seq.frames, seq.ordering):
                for slot, band in enumerate(order):
                    assert np.array_equal(frame[slot], img.bands[band])
                    seen.append(band)
            assert sorted(seen) == list(range(c))
