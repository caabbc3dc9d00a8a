import struct
import zlib

import numpy as np
import pytest
from scipy import ndimage

from emsr.atw import atw_decompose
from emsr.io import (
    FormatError,
    checkpoint_bytes,
    list_images,
    load_checkpoint,
    load_image,
    parse_checkpoint,
    read_pgm,
    read_raw,
    save_checkpoint,
    save_image,
    write_pgm,
    write_raw,
)
from emsr.net import EmsrConfig, EmsrModel
from emsr.phantom import PhantomConfig, PlacementError, generate_phantom, phantom_set, render_phantom
from emsr.training import AdamState


class TestImages:
    def test_raw_round_trip_bit_exact(self):
        img = np.random.default_rng(0).normal(size=(7, 5))
        back = read_raw(write_raw(img))
        assert back.tobytes() == img.tobytes()

    def test_raw_header_layout(self):
        data = write_raw(np.zeros((3, 4)))
        assert data[:4] == b"EMF8" and struct.unpack("<II", data[4:12]) == (3, 4)
        assert len(data) == 12 + 8 * 12

    def test_raw_truncated(self):
        with pytest.raises(FormatError):
            read_raw(write_raw(np.zeros((4, 4)))[:-3])

    @pytest.mark.parametrize("bits, step", [(8, 255), (16, 65535)])
    def test_pgm_round_trip_half_step(self, bits, step):
        img = np.random.default_rng(1).uniform(size=(9, 11))
        back = read_pgm(write_pgm(img, bits))
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 1 / (2 * step) + 1e-15

    def test_pgm_header_and_comment(self):
        data = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
        np.testing.assert_array_equal(read_pgm(data), [[0.0, 1.0]])

    def test_pgm_16bit_big_endian(self):
        data = b"P5 1 1 65535\n" + bytes([0x80, 0x00])
        assert read_pgm(data)[0, 0] == 0x8000 / 65535

    def test_pgm_clamps_on_export(self):
        back = read_pgm(write_pgm(np.array([[-0.5, 1.5]])))
        np.testing.assert_array_equal(back, [[0.0, 1.0]])

    def test_pgm_errors(self):
        with pytest.raises(FormatError):
            read_pgm(b"P2\n1 1\n255\n0")
        with pytest.raises(FormatError):
            read_pgm(b"P5\n4 4\n255\n" + bytes(3))

    def test_save_load_by_extension(self, tmp_path):
        img = np.random.default_rng(2).uniform(size=(6, 6))
        save_image(tmp_path / "a.emf", img)
        save_image(tmp_path / "b.pgm", img)
        (tmp_path / "c.txt").write_text("x")
        assert load_image(tmp_path / "a.emf").tobytes() == img.tobytes()
        assert np.max(np.abs(load_image(tmp_path / "b.pgm") - img)) <= 1 / 510 + 1e-15
        assert [p.name for p in list_images(tmp_path)] == ["a.emf", "b.pgm"]

    def test_unknown_format(self, tmp_path):
        (tmp_path / "x.emf").write_bytes(b"nope")
        with pytest.raises(FormatError):
            load_image(tmp_path / "x.emf")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = EmsrModel(EmsrConfig.tiny(), seed=4)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back, adam = load_checkpoint(tmp_path / "m.ckpt")
        assert adam is None and back.config == m.config
        for k in m.params:
            assert back.params[k].data.tobytes() == m.params[k].data.tobytes()

    def test_round_trip_with_adam(self):
        m = EmsrModel(EmsrConfig.tiny(), seed=5)
        rng = np.random.default_rng(0)
        st = AdamState.for_params(m.params)
        for k in st.m:
            st.m[k][...] = rng.normal(size=st.m[k].shape)
            st.v[k][...] = rng.uniform(size=st.v[k].shape)
        st.t = 123
        data = checkpoint_bytes(m, st)
        _, back = parse_checkpoint(data)
        assert back.t == 123 and (back.beta1, back.beta2, back.eps) == (0.9, 0.999, 1e-8)
        for k in st.m:
            assert back.m[k].tobytes() == st.m[k].tobytes() and back.v[k].tobytes() == st.v[k].tobytes()
        assert checkpoint_bytes(*parse_checkpoint(data)) == data

    def test_corrupted_byte(self):
        data = bytearray(checkpoint_bytes(EmsrModel(EmsrConfig.tiny())))
        data[200] ^= 0x01
        with pytest.raises(FormatError, match="CRC"):
            parse_checkpoint(bytes(data))

    def test_truncated(self):
        data = checkpoint_bytes(EmsrModel(EmsrConfig.tiny()))
        body = data[:-40]
        with pytest.raises(FormatError, match="truncated"):
            parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_version_mismatch(self):
        data = bytearray(checkpoint_bytes(EmsrModel(EmsrConfig.tiny())))
        data[4:8] = struct.pack("<I", 2)
        body = bytes(data[:-4])
        with pytest.raises(FormatError, match="version 2"):
            parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_tiny_size_bound(self):
        m = EmsrModel(EmsrConfig.tiny())
        size = len(checkpoint_bytes(m, AdamState.for_params(m.params)))
        assert size <= 5 * 1024 * 1024
        assert size >= 3 * 8 * m.num_parameters()

    def test_not_a_checkpoint(self):
        with pytest.raises(FormatError):
            parse_checkpoint(b"XXXX" + bytes(20))


class TestPhantom:
    def test_deterministic(self):
        a = generate_phantom(PhantomConfig(seed=3))
        b = generate_phantom(PhantomConfig(seed=3))
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != generate_phantom(PhantomConfig(seed=4)).tobytes()

    def test_range_and_size(self):
        img = generate_phantom(PhantomConfig(size=80, seed=1))
        assert img.shape == (80, 80) and img.min() >= 0 and img.max() <= 1

    def test_no_structures(self):
        cfg = PhantomConfig(num_structures=0, seed=2)
        ph = render_phantom(cfg)
        assert not ph.ring_mask.any()
        assert abs(ph.image.mean() - cfg.background) < 2 * cfg.texture_amplitude
        assert np.ptp(ph.image) <= 2 * cfg.texture_amplitude

    def test_edge_energy_on_membranes(self):
        for seed in range(3):
            ph = render_phantom(PhantomConfig(seed=seed))
            w1 = atw_decompose(ph.image, 1).details[0]
            near = ndimage.binary_dilation(ph.ring_mask, iterations=3)
            e_in = np.sum(w1[near] ** 2)
            e_out = np.sum(w1[~near] ** 2)
            assert e_in >= 5 * e_out

    def test_too_many_structures(self):
        with pytest.raises(PlacementError, match="reduce num_structures"):
            generate_phantom(PhantomConfig(size=64, num_structures=60))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PhantomConfig(size=32)
        with pytest.raises(ValueError):
            PhantomConfig(membrane=1.2)

    def test_set_uses_distinct_seeds(self):
        imgs = phantom_set(3, seed=7, size=64)
        assert len({im.tobytes() for im in imgs}) == 3
