import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_traj, write_jsonl
from dualpost.trajectory import (
    SCHEMA_VERSION, Dataset, DomainTag, Frame, SchemaError, Trajectory, dataset_stats, entropy_bits,
    load_dataset, save_dataset,
)
from oracles import entropy


def _record(**over):
    rec = {"id": "x", "instruction": "do it", "domain_tag": "Robot", "meta": {},
           "frames": [{"index": 0, "pose": [0, 0, 0, 0, 0, 0], "gripper": 0, "action": [1.0],
                       "reasoning": "go", "observation_ref": "x/0.png"}]}
    rec.update(over)
    return rec


def test_load_two_valid(two_traj_file):
    ds = load_dataset(two_traj_file)
    assert len(ds) == 2 and [t.id for t in ds] == ["a", "b"]


def test_five_entry_pose_names_field_and_line(tmp_path):
    bad = _record()
    bad["frames"][0]["pose"] = [0, 0, 0, 0, 0]
    path = write_jsonl(tmp_path / "d.jsonl", [bad])
    with pytest.raises(SchemaError) as err:
        load_dataset(path)
    assert err.value.line == 1 and "pose" in err.value.field


def test_fractional_gripper_rejected(tmp_path):
    bad = _record()
    bad["frames"][0]["gripper"] = 0.5
    with pytest.raises(SchemaError, match="gripper"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [bad]))


@pytest.mark.parametrize("mutate,field", [
    (lambda r: r["frames"].clear(), "frames"),
    (lambda r: r.update(instruction=""), "instruction"),
    (lambda r: r["frames"][0].update(index=1), "index"),
    (lambda r: r["frames"][0].update(pose=[0, 0, 0, float("nan"), 0, 0]), "pose"),
    (lambda r: r.update(domain_tag="Video"), "domain_tag"),
    (lambda r: r.update(schema_version="other/9"), "schema_version"),
])
def test_invalid_records_rejected_with_location(tmp_path, mutate, field):
    good = _record(id="ok")
    bad = _record(id="bad")
    mutate(bad)
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad, allow_nan=True) + "\n")
    with pytest.raises(SchemaError) as err:
        load_dataset(path)
    assert err.value.line == 2 and field in err.value.field


def test_multimodal_with_action_rejected(tmp_path):
    bad = _record(domain_tag="Multimodal")
    with pytest.raises(SchemaError, match="action"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [bad]))


def test_duplicate_ids_rejected(tmp_path):
    with pytest.raises(SchemaError, match="duplicate"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [_record(), _record()]))


def test_empty_dataset_round_trip(tmp_path):
    save_dataset(Dataset(), tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""
    assert len(load_dataset(tmp_path / "e.jsonl")) == 0


def test_unknown_fields_preserved(tmp_path):
    rec = _record(source="sim-v2")
    rec["frames"][0]["depth_ref"] = "x/0.depth"
    path = write_jsonl(tmp_path / "d.jsonl", [rec])
    out = tmp_path / "o.jsonl"
    save_dataset(load_dataset(path), out)
    back = json.loads(out.read_text())
    assert back["source"] == "sim-v2" and back["frames"][0]["depth_ref"] == "x/0.depth"
    assert back["schema_version"] == SCHEMA_VERSION


def test_save_is_byte_stable(tmp_path):
    ds = Dataset((make_traj("a"), make_traj("b", domain=DomainTag.MULTIMODAL, n=1)))
    save_dataset(ds, tmp_path / "1.jsonl")
    save_dataset(load_dataset(tmp_path / "1.jsonl"), tmp_path / "2.jsonl")
    assert (tmp_path / "1.jsonl").read_bytes() == (tmp_path / "2.jsonl").read_bytes()


_text = st.text(alphabet="abc xyz", max_size=12)
_num = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def trajectories(draw, tid):
    n = draw(st.integers(1, 6))
    robot = draw(st.booleans())
    frames = tuple(
        Frame(index=k, pose=draw(st.lists(_num, min_size=6, max_size=6)), gripper=draw(st.integers(0, 1)),
              action=tuple(draw(st.lists(_num, min_size=1, max_size=4))) if robot else (),
              reasoning=draw(_text), observation_ref=draw(_text),
              meta=draw(st.dictionaries(st.sampled_from(["k", "q"]), st.integers(0, 3), max_size=2)))
        for k in range(n)
    )
    return Trajectory(tid, draw(_text.filter(str.strip)) if robot else draw(_text), frames,
                      DomainTag.ROBOT if robot else DomainTag.MULTIMODAL,
                      draw(st.dictionaries(st.sampled_from(["src", "split"]), _text, max_size=2)))


@st.composite
def datasets(draw):
    n = draw(st.integers(0, 5))
    return Dataset(tuple(draw(trajectories(f"t{k}")) for k in range(n)))


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_round_trip_property(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_dataset(ds, path)
    assert load_dataset(path) == ds


def test_hundred_seeded_round_trip(tmp_path, rng):
    trajs = []
    for k in range(100):
        n = int(rng.integers(1, 8))
        poses = rng.normal(size=(n, 6)).tolist()
        trajs.append(make_traj(f"r{k}", poses=poses, grippers=rng.integers(0, 2, n).tolist()))
    ds = Dataset(tuple(trajs))
    save_dataset(ds, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl") == ds


def test_stats_zero_entropy():
    s = dataset_stats(Dataset((make_traj("a", 4, reasoning=["Move Near"] * 4),)))
    assert s.distinct_reasoning == 1 and s.entropy_bits == 0.0 and s.reasoning_tokens == 8


def test_stats_one_bit():
    s = dataset_stats(Dataset((make_traj("a", 2, reasoning=["a", "b"]),)))
    assert s.entropy_bits == pytest.approx(1.0, abs=1e-12)


def test_stats_counts_six_three_one():
    texts = ["x"] * 6 + ["y"] * 3 + ["z"]
    s = dataset_stats(Dataset((make_traj("a", 10, reasoning=texts),)))
    expected = -(0.6 * math.log2(0.6) + 0.3 * math.log2(0.3) + 0.1 * math.log2(0.1))
    assert s.entropy_bits == pytest.approx(expected, abs=1e-12)
    assert s.entropy_bits == pytest.approx(entropy([6, 3, 1]), abs=1e-12)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=8))
def test_entropy_bounds(counts):
    h = entropy_bits(counts)
    assert -1e-12 <= h <= math.log2(len(counts)) + 1e-12
    if len(set(counts)) == 1:
        assert h == pytest.approx(math.log2(len(counts)), abs=1e-9)


def test_stats_retention_only_after_pruning():
    assert dataset_stats(Dataset((make_traj("a"),))).retention_ratio is None
    t = make_traj("a", 4, meta={"keyframe_mask": [1, 0, 0, 1]})
    assert dataset_stats(Dataset((t,))).retention_ratio == 0.5
