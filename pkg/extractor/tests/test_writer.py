import json
import struct

import numpy as np
import pytest
from attntrace import InvalidConfig, ManifestRow, encode_trajectory, write_manifest, write_trajectory

import dynattn


def small_maps(frames=2, tokens=3, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, (frames, tokens, dim, dim)).astype(np.float32)


def test_byte_layout_field_by_field():
    maps = small_maps()
    roles = [0, 1, 2]
    blob = encode_trajectory(maps, roles, "id-1", "café ☃")
    assert blob[:4] == b"DAAT"
    version, n_frames, n_tokens, map_dim, eos_index = struct.unpack_from("<5I", blob, 4)
    assert (version, n_frames, n_tokens, map_dim, eos_index) == (1, 2, 3, 2, 3)
    assert blob[24:27] == bytes([0, 1, 2])
    pos = 27
    (sid_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    assert blob[pos : pos + sid_len].decode("utf-8") == "id-1"
    pos += sid_len
    (prompt_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    assert blob[pos : pos + prompt_len].decode("utf-8") == "café ☃"
    pos += prompt_len
    payload = np.frombuffer(blob, dtype="<f4", offset=pos).reshape(2, 3, 2, 2)
    assert np.array_equal(payload, maps)
    assert pos + payload.nbytes == len(blob)


def test_primary_loader_round_trip(tmp_path):
    maps = small_maps(frames=4, tokens=5, dim=3, seed=1)
    roles = [0, 1, 1, 1, 2]
    path = write_trajectory(maps, roles, "rt", "a fox", tmp_path / "rt.daat")
    traj = dynattn.load_trajectory(path)
    assert traj.n_frames == 4
    assert traj.n_tokens == 5
    assert traj.map_dim == 3
    assert traj.eos_index == 5
    assert traj.sample_id == "rt"
    assert traj.prompt == "a fox"
    assert np.array_equal(traj.roles, np.array(roles, dtype=np.uint8))
    assert np.array_equal(traj.maps.astype(np.float32), maps)


def test_bytes_match_reference_serializer():
    # Two independent implementations of the same wire contract must agree on
    # every byte, not just on round-tripped values.
    maps = small_maps(frames=3, tokens=4, dim=2, seed=2)
    roles = np.array([0, 1, 1, 2], dtype=np.uint8)
    ours = encode_trajectory(maps, roles, "same", "prompt text")
    reference = dynattn.save_trajectory(
        dynattn.Trajectory(
            maps=maps.astype(np.float64),
            roles=roles,
            eos_index=4,
            sample_id="same",
            prompt="prompt text",
        )
    )
    assert ours == reference


@pytest.mark.parametrize(
    "maps,roles",
    [
        (small_maps() * -1.0, [0, 1, 2]),
        (np.full((2, 3, 2, 2), np.nan, dtype=np.float32), [0, 1, 2]),
        (small_maps(), [0, 1]),
        (small_maps(), [0, 2, 1]),
        (small_maps(), [0, 2, 2]),
        (small_maps()[0], [0, 1, 2]),
        (small_maps(tokens=1)[:, :, :, :1], [2]),
    ],
)
def test_encode_rejects_contract_violations(maps, roles):
    with pytest.raises(InvalidConfig):
        encode_trajectory(maps, roles, "bad", "")


def test_manifest_round_trip(tmp_path):
    for stem, label in (("a", "benign"), ("b", "backdoor")):
        write_trajectory(small_maps(), [0, 1, 2], stem, "", tmp_path / f"{stem}.daat")
    rows = [
        ManifestRow(path="a.daat", label="benign", scenario="clean", split="train"),
        ManifestRow(path="b.daat", label="backdoor", scenario="badnets"),
    ]
    path = write_manifest(rows, tmp_path / "manifest.jsonl")
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert records[0] == {"path": "a.daat", "label": "benign", "scenario": "clean", "split": "train"}
    assert records[1]["split"] == "test"
    manifest = dynattn.load_manifest(path)
    assert [e.label for e in manifest.entries] == ["benign", "backdoor"]
    assert [e.split for e in manifest.entries] == ["train", "test"]


def test_manifest_rejects_bad_rows():
    with pytest.raises(InvalidConfig):
        ManifestRow(path="x.daat", label="poisoned")
    with pytest.raises(InvalidConfig):
        ManifestRow(path="x.daat", label="benign", split="validation")


def test_empty_manifest(tmp_path):
    path = write_manifest([], tmp_path / "manifest.jsonl")
    assert path.read_text() == ""
