import filecmp
import struct

import numpy as np
import pytest

from voxelformer.data import (
    SynthConfig,
    batch_iterator,
    generate,
    least_squares_oracle,
    load_dataset,
    write_dataset,
)
from voxelformer.errors import ConfigError, ContractError


def small(**kw):
    base = dict(subjects=2, train_stimuli=40, test_stimuli=12, voxel_counts=(10, 14), target_dim=6)
    base.update(kw)
    return SynthConfig(**base)


def test_same_seed_gives_byte_identical_files(tmp_path):
    a = write_dataset(generate(small(seed=7)), tmp_path / "a")
    b = write_dataset(generate(small(seed=7)), tmp_path / "b")
    names = sorted(p.name for p in a.iterdir())
    assert names == ["manifest.json", "subject_00.bin", "subject_01.bin", "targets.bin"]
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert match == names and not mismatch and not errors


def test_different_seed_differs():
    assert not np.array_equal(generate(small(seed=1)).targets, generate(small(seed=2)).targets)


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
def test_noiseless_responses_are_exact_linear_maps(beta):
    ds = generate(small(noise_sigma=0.0, subject_specific=beta))
    latents = None
    for s in ds.subjects:
        # recover the shared latents from the first subject, then check every subject against them
        if latents is None:
            latents = np.linalg.lstsq(s.mixing, s.responses.T, rcond=None)[0].T
        np.testing.assert_allclose(s.responses, latents @ s.mixing.T, atol=1e-10)
    np.testing.assert_allclose(ds.targets, latents / np.linalg.norm(latents, axis=1, keepdims=True), atol=1e-8)


def test_default_config_echo(tmp_path):
    ds = generate(SynthConfig())
    assert [s.n_voxels for s in ds.subjects] == [64, 80, 96]
    path = write_dataset(ds, tmp_path / "d")
    for sid, n in enumerate((64, 80, 96)):
        raw = (path / f"subject_{sid:02d}.bin").read_bytes()
        assert raw[:4] == b"VXF1"
        assert struct.unpack_from("<III", raw, 4) == (n, 700, 64)
        assert len(raw) == 16 + n * 3 * 8 + 700 * (4 + 8 * n)


def test_round_trip(tmp_path):
    ds = generate(small())
    back = load_dataset(write_dataset(ds, tmp_path / "d"))
    np.testing.assert_array_equal(back.targets, ds.targets)
    np.testing.assert_array_equal(back.train_ids, ds.train_ids)
    for a, b in zip(ds.subjects, back.subjects):
        np.testing.assert_array_equal(a.responses, b.responses)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.stimulus_ids, b.stimulus_ids)


def test_bad_magic_rejected(tmp_path):
    path = write_dataset(generate(small()), tmp_path / "d")
    raw = bytearray((path / "subject_00.bin").read_bytes())
    raw[:4] = b"XXXX"
    (path / "subject_00.bin").write_bytes(bytes(raw))
    with pytest.raises(ContractError):
        load_dataset(path)


def test_split_hygiene_and_coords_range():
    ds = generate(SynthConfig())
    assert not set(ds.train_ids.tolist()) & set(ds.test_ids.tolist())
    assert ds.train_ids.size == 600 and ds.test_ids.size == 100
    for s in ds.subjects:
        assert np.all(np.abs(s.coords) <= 1.0)
    np.testing.assert_allclose(np.linalg.norm(ds.targets, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("kw", [dict(noise_sigma=-0.1), dict(voxel_counts=(10,)), dict(subject_specific=1.5)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        generate(small(**kw))


def test_counts_exhausting_merge_schedule_rejected():
    with pytest.raises(ConfigError):
        generate(small(voxel_counts=(10, 14)), merge=3, layers=2)


def test_batches_are_subject_homogeneous_and_cover_epoch():
    ds = generate(small())
    seen = []
    order = []
    for batch in batch_iterator(ds, 16, "train", np.random.default_rng(0)):
        s = ds.subject(batch.subject_id)
        assert batch.responses.shape == (len(batch), s.n_voxels)
        assert batch.coords.shape == (len(batch), s.n_voxels, 3)
        np.testing.assert_array_equal(batch.targets, ds.targets[batch.stimulus_ids])
        seen.extend((batch.subject_id, int(i)) for i in batch.stimulus_ids)
        order.append(batch.subject_id)
    expected = {(s.subject_id, int(i)) for s in ds.subjects for i in ds.train_ids}
    assert len(seen) == len(expected) and set(seen) == expected
    assert order == [0, 1, 0, 1, 0, 1]


def test_batch_order_is_seeded():
    ds = generate(small())
    ids = [b.stimulus_ids.tolist() for b in batch_iterator(ds, 8, "train", np.random.default_rng(3))]
    again = [b.stimulus_ids.tolist() for b in batch_iterator(ds, 8, "train", np.random.default_rng(3))]
    assert ids == again


def test_oversized_batch_rejected():
    with pytest.raises(ContractError):
        list(batch_iterator(generate(small()), 13, "test"))


def test_least_squares_oracle_solves_default_split():
    report = least_squares_oracle(generate(SynthConfig()), pool_size=50, trials=30, seed=0)
    assert report.fwd_top1 >= 0.99 and report.bwd_top1 >= 0.99
