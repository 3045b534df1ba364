"""Data model, phantom generation, normalization, and container tests."""

import json
import struct

import numpy as np
import pytest

from octadapt.data import (Domain, DomainDataset, ImageTensor, PhantomConfig,
                           RangeTag, SegMask, Volume, denormalize,
                           generate_phantom, load_volume, load_volume_dir,
                           normalize, normalize_volume, save_volume,
                           save_volumes)
from octadapt.errors import ConfigError, ContractError, FormatError


def u8(arr):
    return ImageTensor(values=np.asarray(arr, dtype=np.uint8),
                       range_tag=RangeTag.RAW_U8)


def test_image_tensor_rejects_wrong_dtype_for_raw():
    with pytest.raises(ContractError):
        ImageTensor(values=np.zeros((32, 32), dtype=np.float32),
                    range_tag=RangeTag.RAW_U8)


def test_image_tensor_rejects_out_of_range_norm():
    vals = np.full((32, 32), 1.5, dtype=np.float32)
    with pytest.raises(ContractError):
        ImageTensor(values=vals, range_tag=RangeTag.NORM)


def test_image_tensor_rejects_small_and_non_2d():
    with pytest.raises(ContractError):
        u8(np.zeros((16, 32), dtype=np.uint8))
    with pytest.raises(ContractError):
        u8(np.zeros((32, 32, 3), dtype=np.uint8))


def test_seg_mask_rejects_non_binary():
    with pytest.raises(ContractError):
        SegMask(labels=np.full((32, 32), 2, dtype=np.uint8))


def test_volume_rejects_mismatched_dims_and_mask_count():
    scans = [u8(np.zeros((32, 32), dtype=np.uint8)),
             u8(np.zeros((32, 48), dtype=np.uint8))]
    with pytest.raises(ContractError):
        Volume(id="v", bscans=scans, domain=Domain.A)
    scans = [u8(np.zeros((32, 32), dtype=np.uint8))] * 2
    masks = [SegMask(labels=np.zeros((32, 32), dtype=np.uint8))]
    with pytest.raises(ContractError):
        Volume(id="v", bscans=scans, domain=Domain.A, masks=masks)


def test_dataset_rejects_foreign_domain():
    vol = generate_phantom(PhantomConfig(seed=0, n_volumes=1,
                                         bscans_per_volume=1))[0]
    with pytest.raises(ContractError):
        DomainDataset(domain=Domain.B, volumes=[vol])


def test_normalize_endpoints():
    img = u8(np.array([[0, 255]] * 16 + [[127, 128]] * 16, dtype=np.uint8)
             .repeat(16, axis=1))
    out = normalize(img)
    assert out.range_tag is RangeTag.NORM
    assert out.values.dtype == np.float32
    assert out.values[0, 0] == -1.0
    assert out.values[0, 16] == 1.0


def test_normalize_rejects_norm_input_and_vice_versa():
    img = u8(np.zeros((32, 32), dtype=np.uint8))
    norm = normalize(img)
    with pytest.raises(ContractError):
        normalize(norm)
    with pytest.raises(ContractError):
        denormalize(img)


def test_round_trip_exhaustive_all_256_values():
    # one row per raw intensity; exhaustive bijection check
    vals = np.tile(np.arange(256, dtype=np.uint8)[:, None], (1, 32))
    img = u8(vals)
    back = denormalize(normalize(img))
    assert back.values.dtype == np.uint8
    np.testing.assert_array_equal(back.values, vals)


def test_phantom_determinism_same_seed():
    cfg = PhantomConfig(seed=7, n_volumes=2, bscans_per_volume=3)
    a = generate_phantom(cfg)
    b = generate_phantom(cfg)
    for va, vb in zip(a, b):
        assert va.id == vb.id
        for sa, sb in zip(va.bscans, vb.bscans):
            np.testing.assert_array_equal(sa.values, sb.values)
        for ma, mb in zip(va.masks, vb.masks):
            np.testing.assert_array_equal(ma.labels, mb.labels)


def test_phantom_seeds_differ():
    a = generate_phantom(PhantomConfig(seed=1, n_volumes=1, bscans_per_volume=1))
    b = generate_phantom(PhantomConfig(seed=2, n_volumes=1, bscans_per_volume=1))
    assert not np.array_equal(a[0].bscans[0].values, b[0].bscans[0].values)


def test_style_b_variance_strictly_lower_than_a():
    kw = dict(seed=11, n_volumes=1, bscans_per_volume=4)
    vol_a = generate_phantom(PhantomConfig.for_style("A_speckled", **kw))[0]
    vol_b = generate_phantom(PhantomConfig.for_style("B_flattened", **kw))[0]
    for sa, sb in zip(vol_a.bscans, vol_b.bscans):
        assert sb.values.astype(np.float64).var() < sa.values.astype(np.float64).var()


def test_mask_retina_fraction_strictly_interior():
    for seed in range(6):
        for style in ("A_speckled", "B_flattened"):
            cfg = PhantomConfig.for_style(style, seed=seed, n_volumes=1,
                                          bscans_per_volume=2)
            for vol in generate_phantom(cfg):
                for mask in vol.masks:
                    frac = mask.retina_fraction()
                    assert 0.0 < frac < 1.0


def test_mask_consistent_with_image_contrast():
    # retina band must be brighter than background in both styles
    for style in ("A_speckled", "B_flattened"):
        cfg = PhantomConfig.for_style(style, seed=3, n_volumes=1,
                                      bscans_per_volume=3)
        vol = generate_phantom(cfg)[0]
        for scan, mask in zip(vol.bscans, vol.masks):
            inside = scan.values[mask.labels == 1].astype(np.float64)
            outside = scan.values[mask.labels == 0].astype(np.float64)
            assert inside.mean() > outside.mean()


def test_phantom_rejects_small_dims():
    with pytest.raises(ConfigError):
        PhantomConfig(height=16, width=128)
    with pytest.raises(ConfigError):
        PhantomConfig(style="C_unknown")


def test_save_load_round_trip(tmp_path):
    cfg = PhantomConfig(seed=5, n_volumes=1, bscans_per_volume=3)
    vol = generate_phantom(cfg)[0]
    path = tmp_path / "vol.octv"
    save_volume(path, vol)
    back = load_volume(path)
    assert back.id == vol.id
    assert back.domain == vol.domain
    assert len(back.bscans) == len(vol.bscans)
    for sa, sb in zip(vol.bscans, back.bscans):
        assert sb.range_tag is RangeTag.RAW_U8
        np.testing.assert_array_equal(sa.values, sb.values)
    for ma, mb in zip(vol.masks, back.masks):
        np.testing.assert_array_equal(ma.labels, mb.labels)


def test_save_load_round_trip_norm_volume(tmp_path):
    vol = generate_phantom(PhantomConfig(seed=5, n_volumes=1,
                                         bscans_per_volume=2))[0]
    norm = normalize_volume(vol)
    path = tmp_path / "norm.octv"
    save_volume(path, norm)
    back = load_volume(path)
    for sa, sb in zip(norm.bscans, back.bscans):
        assert sb.range_tag is RangeTag.NORM
        np.testing.assert_array_equal(sa.values, sb.values)


def test_load_truncated_file_fails(tmp_path):
    vol = generate_phantom(PhantomConfig(seed=1, n_volumes=1,
                                         bscans_per_volume=1))[0]
    path = tmp_path / "vol.octv"
    save_volume(path, vol)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 100])
    with pytest.raises(FormatError):
        load_volume(path)


def test_load_bad_magic_fails(tmp_path):
    path = tmp_path / "vol.octv"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_volume(path)


def test_load_mask_count_mismatch_fails(tmp_path):
    vol = generate_phantom(PhantomConfig(seed=1, n_volumes=1,
                                         bscans_per_volume=2))[0]
    path = tmp_path / "vol.octv"
    save_volume(path, vol)
    raw = path.read_bytes()
    _, header_len = struct.unpack_from("<HI", raw, 4)
    header = json.loads(raw[10:10 + header_len].decode())
    header["n_masks"] = 1  # claims fewer masks than bscans
    new_header = json.dumps(header).encode()
    tampered = (raw[:4] + struct.pack("<HI", 1, len(new_header)) + new_header
                + raw[10 + header_len:])
    path.write_bytes(tampered)
    with pytest.raises(FormatError):
        load_volume(path)


def test_save_volumes_and_load_dir_sorted(tmp_path):
    vols = generate_phantom(PhantomConfig(seed=9, n_volumes=3,
                                          bscans_per_volume=1))
    save_volumes(tmp_path, vols)
    back = load_volume_dir(tmp_path)
    assert [v.id for v in back] == sorted(v.id for v in vols)
