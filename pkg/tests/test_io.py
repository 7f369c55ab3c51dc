import json
import struct

import numpy as np
import pytest

from digisib import io
from digisib.cohort_analytics import occupancy_heatmap
from digisib.core import Cohort, LabelMap, Latent, Provenance


def test_labelmap_roundtrip_and_byte_order(tmp_path, phantom):
    p = io.write_labelmap(tmp_path / "a.dlm", phantom)
    back = io.read_labelmap(p)
    assert np.array_equal(back.labels, phantom.labels) and back.voxel_size == phantom.voxel_size
    raw = p.read_bytes()
    magic, hlen = struct.unpack_from("<4sI", raw)
    header = json.loads(raw[8:8 + hlen])
    payload = raw[8 + hlen:]
    assert magic == b"DSIB" and header["format_version"] == 1
    # x varies fastest
    x, y, z = 3, 5, 7
    nx, ny, _ = phantom.dims
    assert payload[x + nx * (y + ny * z)] == phantom.labels[x, y, z]


def test_latent_and_heatmap_roundtrip(tmp_path, gen, phantom):
    v = gen.normal(size=(7, 4, 5, 6)).astype(np.float32).astype(float)
    back = io.read_latent(io.write_latent(tmp_path / "z.dlt", Latent(v, 0.5)))
    assert np.array_equal(back.values, v) and back.sigma_tag == 0.5
    h = occupancy_heatmap([phantom, phantom])
    hb = io.read_heatmap(io.write_heatmap(tmp_path / "h.dhm", h))
    np.testing.assert_allclose(hb.P, h.P, atol=1e-7)


def test_truncated_and_corrupt_files(tmp_path, phantom):
    p = io.write_labelmap(tmp_path / "a.dlm", phantom)
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(io.SizeMismatchError) as e:
        io.read_labelmap(p)
    assert str(p) in str(e.value)
    p.write_bytes(raw[:6])
    with pytest.raises(io.TruncatedFileError):
        io.read_labelmap(p)
    p.write_bytes(raw[:20])
    with pytest.raises(io.TruncatedFileError):
        io.read_labelmap(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.FormatError):
        io.read_labelmap(p)


def test_version_and_kind_mismatch(tmp_path, phantom):
    p = io.write_labelmap(tmp_path / "a.dlm", phantom)
    raw = p.read_bytes()
    hlen = struct.unpack_from("<I", raw, 4)[0]
    header = json.loads(raw[8:8 + hlen])
    header["format_version"] = 2
    blob = json.dumps(header).encode()
    p.write_bytes(b"DSIB" + struct.pack("<I", len(blob)) + blob + raw[8 + hlen:])
    with pytest.raises(io.VersionMismatchError):
        io.read_labelmap(p)
    q = io.write_labelmap(tmp_path / "b.dlm", phantom)
    with pytest.raises(io.FormatError):
        io.read_latent(q)


def _cohort(phantom, n=3):
    return Cohort([phantom] * n, [Provenance(f"t{k}", "phantom", {"k": k}, (1, k)) for k in range(n)])


def test_cohort_manifest_roundtrip(tmp_path, phantom):
    c = _cohort(phantom)
    io.write_cohort(tmp_path / "c", c, config_digest="abc")
    assert io.validate_manifest(tmp_path / "c", "abc") == []
    back = io.read_cohort(tmp_path / "c", "abc")
    assert len(back) == 3 and back.provenance[2].params == {"k": 2}
    assert np.array_equal(back[1].labels, phantom.labels)
    with pytest.raises(FileExistsError):
        io.write_cohort(tmp_path / "c", c)


def test_manifest_problems(tmp_path, phantom):
    io.write_cohort(tmp_path / "c", _cohort(phantom), config_digest="abc")
    (tmp_path / "c" / "member_0001.dlm").unlink()
    f2 = tmp_path / "c" / "member_0002.dlm"
    f2.write_bytes(f2.read_bytes()[:-3])
    problems = io.validate_manifest(tmp_path / "c", "xyz")
    assert len(problems) == 3
    assert any("missing file member_0001.dlm" in p for p in problems)
    with pytest.raises(io.ManifestError):
        io.read_cohort(tmp_path / "c")


def test_checksum_mismatch(tmp_path, phantom):
    io.write_cohort(tmp_path / "c", _cohort(phantom, 1))
    lab = phantom.labels.copy()
    lab[0, 0, 0] = 1
    io.write_labelmap(tmp_path / "c" / "member_0000.dlm", LabelMap(lab, phantom.voxel_size))
    assert io.validate_manifest(tmp_path / "c") == ["checksum mismatch for member_0000.dlm"]


def test_write_table(tmp_path):
    p = io.write_table(tmp_path / "t.csv", [{"a": np.float64(1.5), "b": 2}, {"a": 3, "b": 4}])
    assert p.read_text() == "a,b\n1.5,2\n3,4\n"
    assert io.write_table(tmp_path / "e.csv", []).read_text() == ""
