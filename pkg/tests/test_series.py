import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.errors import DataError, FormatError, ShapeError
from flowcast.series import (
    MaskPlan,
    SplitManifest,
    Volume,
    VolumeSequence,
    mask_plan_hash,
    read_series,
    read_volume,
    write_series,
    write_volume,
)

from conftest import make_sequence, random_volume


def test_volume_validation():
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(DataError):
        Volume(np.full((2, 2, 2), np.nan, dtype=np.float32))


def test_volume_is_immutable(rng):
    vol = random_volume(rng)
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 1.0


def test_sequence_invariants(rng):
    vol = random_volume(rng)
    with pytest.raises(DataError):
        VolumeSequence(contexts=(), target=vol, target_time=1.0, patient_id="p")
    with pytest.raises(DataError):
        VolumeSequence(
            contexts=((vol, 1.0), (random_volume(rng), 0.5)),
            target=vol,
            target_time=2.0,
            patient_id="p",
        )
    # target before last context is rejected unless explicitly allowed
    with pytest.raises(DataError):
        VolumeSequence(contexts=((vol, 1.0),), target=vol, target_time=0.5, patient_id="p")
    seq = VolumeSequence(
        contexts=((vol, 1.0),), target=vol, target_time=0.5, patient_id="p",
        allow_past_target=True,
    )
    assert seq.target_time == 0.5


def test_blob_size_is_exact(tmp_path, rng):
    seq = make_sequence(rng, n_contexts=2, shape=(2, 2, 2))
    write_series(seq, tmp_path)
    # 3 frames of 8 voxels, 4 bytes each
    assert (tmp_path / "volumes.f32").stat().st_size == 3 * 8 * 4


def test_round_trip_exact(tmp_path, rng):
    seq = make_sequence(rng, n_contexts=3, shape=(3, 4, 5))
    write_series(seq, tmp_path)
    back = read_series(tmp_path)
    assert back.patient_id == seq.patient_id
    assert back.n_contexts == seq.n_contexts
    assert np.array_equal(back.context_stack(), seq.context_stack())
    assert np.array_equal(back.target.voxels, seq.target.voxels)
    assert back.times.tolist() == seq.times.tolist()
    assert back.target_time == seq.target_time


def test_timestamps_survive_as_exact_reals(tmp_path, rng):
    vol = random_volume(rng, (2, 2, 2))
    seq = VolumeSequence(
        contexts=((vol, 0.0), (random_volume(rng, (2, 2, 2)), 1.5)),
        target=vol,
        target_time=3.0,
        patient_id="p",
    )
    write_series(seq, tmp_path)
    back = read_series(tmp_path)
    assert back.times.tolist() == [0.0, 1.5]
    assert back.target_time == 3.0


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.tuples(
        st.integers(min_value=1, max_value=4),
        st.integers(min_value=1, max_value=4),
        st.integers(min_value=1, max_value=4),
    ),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_round_trip_property(tmp_path_factory, n_contexts, shape, seed):
    rng = np.random.default_rng(seed)
    out = tmp_path_factory.mktemp("series")
    seq = make_sequence(rng, n_contexts=n_contexts, shape=shape)
    write_series(seq, out)
    back = read_series(out)
    assert np.array_equal(back.context_stack(), seq.context_stack())
    assert np.array_equal(back.target.voxels, seq.target.voxels)


def test_truncated_blob_rejected(tmp_path, rng):
    seq = make_sequence(rng, n_contexts=2, shape=(2, 2, 2))
    write_series(seq, tmp_path)
    blob = (tmp_path / "volumes.f32").read_bytes()
    (tmp_path / "volumes.f32").write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="length"):
        read_series(tmp_path)


def test_bad_manifest_rejected(tmp_path, rng):
    seq = make_sequence(rng, n_contexts=2, shape=(2, 2, 2))
    write_series(seq, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())

    bad = dict(manifest, timestamps=["1.0", "0.5"])
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError, match="increasing"):
        read_series(tmp_path)

    bad = dict(manifest, dtype="f64")
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError, match="dtype"):
        read_series(tmp_path)


def test_frame_count_definition(tmp_path, rng):
    seq = make_sequence(rng, n_contexts=4, shape=(2, 2, 2))
    write_series(seq, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    back = read_series(tmp_path)
    assert back.n_contexts == len(manifest["timestamps"])
    assert back.n_contexts + 1 == 5  # contexts plus target in the blob


def test_single_volume_round_trip(tmp_path, rng):
    vol = random_volume(rng, (3, 3, 3))
    write_volume(vol, tmp_path, meta={"note": "x"})
    back = read_volume(tmp_path)
    assert np.array_equal(back.voxels, vol.voxels)


def test_mask_plan_round_trip(tmp_path):
    plan = MaskPlan(split_name="val", seed=7, masks={"a": (True, False), "b": (False, True)})
    path = tmp_path / "masks.json"
    plan.save(path)
    again = MaskPlan.load(path)
    assert again == plan
    again.save(tmp_path / "masks2.json")
    assert (tmp_path / "masks.json").read_bytes() == (tmp_path / "masks2.json").read_bytes()
    assert mask_plan_hash(path) == mask_plan_hash(tmp_path / "masks2.json")


def test_mask_plan_requires_observed_slot():
    with pytest.raises(DataError):
        MaskPlan(split_name="val", seed=0, masks={"a": (False, False)})


def test_split_manifest_disjoint(tmp_path):
    with pytest.raises(DataError):
        SplitManifest(root=".", train=("a",), val=("a",), test=())
    man = SplitManifest(root=".", train=("a",), val=("b",), test=("c",), horizon=2.0)
    path = tmp_path / "splits.json"
    man.save(path)
    assert SplitManifest.load(path) == man
