import struct

import cv2
import numpy as np
import pytest

from dippas.fingerprint import Fingerprint, FingerprintKind
from dippas.formats import (FormatError, decode_dpim, decode_fingerprint, encode_dpim,
                            encode_fingerprint, read_dpim, read_fingerprint, write_dpim,
                            write_fingerprint)
from dippas.io import (DatasetManifest, DeviceEntry, center_crop, load_and_prepare, quantize,
                       read_image, write_png)


def test_fingerprint_header_layout():
    fp = Fingerprint(np.arange(6, dtype=float).reshape(1, 2, 3), FingerprintKind.NOISE_RESIDUAL)
    data = encode_fingerprint(fp)
    assert data[:4] == b"DPFP" and data[4] == 1 and data[5] == 1
    assert struct.unpack("<3I", data[6:18]) == (1, 2, 3)
    assert np.frombuffer(data[18:], "<f4").tolist() == list(range(6))


def test_fingerprint_round_trip_is_bitwise(tmp_path):
    pattern = np.random.default_rng(0).normal(size=(5, 7, 3))
    fp = Fingerprint(pattern, FingerprintKind.DEVICE_PRNU)
    write_fingerprint(tmp_path / "k.dpfp", fp)
    back = read_fingerprint(tmp_path / "k.dpfp")
    assert back.kind is FingerprintKind.DEVICE_PRNU
    np.testing.assert_array_equal(back.pattern, pattern.astype(np.float32).astype(np.float64))
    write_fingerprint(tmp_path / "k2.dpfp", back)
    assert (tmp_path / "k.dpfp").read_bytes() == (tmp_path / "k2.dpfp").read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda d: d[:10],
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + b"\x02" + d[5:],
    lambda d: d[:5] + b"\x09" + d[6:],
    lambda d: d + b"\x00",
])
def test_fingerprint_decode_rejects_corruption(mutate):
    data = encode_fingerprint(Fingerprint(np.zeros((2, 2, 1)), 0))
    with pytest.raises(FormatError):
        decode_fingerprint(mutate(data))


def test_dpim_round_trip(tmp_path):
    img = np.random.default_rng(1).uniform(size=(4, 6, 3)).astype(np.float32)
    write_dpim(tmp_path / "a.dpimg", img)
    np.testing.assert_array_equal(read_dpim(tmp_path / "a.dpimg"), img)
    assert decode_dpim(encode_dpim(img)).shape == (4, 6, 3)
    with pytest.raises(FormatError):
        decode_dpim(b"DPIM" + encode_dpim(img)[4:-4])


def test_center_crop_origin_is_floor():
    img = np.arange(514 * 516).reshape(514, 516, 1)
    out = center_crop(img, 512)
    assert out.shape == (512, 512, 1)
    assert out[0, 0, 0] == img[1, 2, 0]
    same = np.zeros((512, 512, 3))
    assert center_crop(same, 512) is not None and center_crop(same, 512).shape == same.shape
    with pytest.raises(ValueError):
        center_crop(np.zeros((100, 600, 1)), 512)


def test_png_8bit_endpoints_and_channel_order(tmp_path):
    raw = np.zeros((2, 2, 3), np.uint8)
    raw[0, 0] = (255, 0, 0)  # BGR on disk: blue
    cv2.imwrite(str(tmp_path / "x.png"), raw)
    img = read_image(tmp_path / "x.png")
    assert img[0, 0].tolist() == [0.0, 0.0, 1.0]
    assert img.min() == 0.0 and img.max() == 1.0


def test_png_16bit_round_trip_and_idempotent_prepare(tmp_path):
    img = np.random.default_rng(2).uniform(size=(32, 32, 3))
    write_png(tmp_path / "a.png", img, bits=16)
    a = load_and_prepare(tmp_path / "a.png", 32)
    np.testing.assert_allclose(a, img, atol=0.5 / 65535 + 1e-12)
    write_png(tmp_path / "b.png", a, bits=16)
    np.testing.assert_array_equal(load_and_prepare(tmp_path / "b.png", 32), a)


def test_grayscale_png_and_quantize(tmp_path):
    img = np.linspace(0, 1, 16).reshape(4, 4, 1)
    write_png(tmp_path / "g.png", img)
    back = read_image(tmp_path / "g.png")
    assert back.shape == (4, 4, 1)
    np.testing.assert_array_equal(back, quantize(img) / 255.0)


def test_read_image_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ValueError):
        read_image(tmp_path / "junk.png")
    write_png(tmp_path / "small.png", np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        load_and_prepare(tmp_path / "small.png", 16)


def test_manifest_load_validate_and_lookup(tmp_path):
    write_png(tmp_path / "f0.png", np.zeros((4, 4, 3)))
    (tmp_path / "m.json").write_text(
        '{"devices": [{"id": "cam", "flats": ["f0.png"], "images": []}]}')
    m = DatasetManifest.load(tmp_path / "m.json")
    assert m.device("cam").flats == [str(tmp_path / "f0.png")]
    with pytest.raises(KeyError):
        m.device("other")
    dup = DatasetManifest([DeviceEntry("a"), DeviceEntry("a")])
    with pytest.raises(ValueError):
        dup.validate()
    missing = DatasetManifest([DeviceEntry("a", flats=[str(tmp_path / "nope.png")])])
    with pytest.raises(FileNotFoundError):
        missing.validate()
    assert '"f0.png"' in m.to_json(root=tmp_path)
