"""Binary volume files, cohort manifests and report serialization.

Volume file layout (all integers little-endian)::

    offset 0   4 bytes   magic b"DSIB"
    offset 4   4 bytes   uint32 header length H
    offset 8   H bytes   UTF-8 JSON header
    offset 8+H           payload, exactly header["payload_bytes"] bytes

Label maps store one ``uint8`` per voxel. Latents and heatmaps store ``<f4``
values channel by channel. Inside every channel, x varies fastest, then y,
then z.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .anatomy_metrics import CHECK_NAMES, MORPH_NAMES
from .cohort_analytics import Heatmap
from .core import N_TISSUES, TISSUE_NAMES, Cohort, LabelMap, Latent, Provenance

FORMAT_VERSION = 1
MAGIC = b"DSIB"
_PRE = struct.Struct("<4sI")
MANIFEST_NAME = "manifest.json"


class FormatError(ValueError):
    """Base class for unreadable artifact files; always names the offending path."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    """The file ends before its fixed preamble or JSON header is complete."""


class SizeMismatchError(FormatError):
    """Payload length disagrees with what the header declares."""


class ManifestError(FormatError):
    """A manifest whose listed files are missing or whose config hash does not match."""


# --------------------------------------------------------------------------- raw container


def _write_volume(path, header: dict, payload: bytes) -> Path:
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, **header, "payload_bytes": len(payload)}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PRE.pack(MAGIC, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def _read_volume(path, kind: str) -> tuple[dict, bytes]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PRE.size:
        raise TruncatedFileError(path, f"file is {len(raw)} bytes, shorter than the {_PRE.size}-byte preamble")
    magic, hlen = _PRE.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if len(raw) < _PRE.size + hlen:
        raise TruncatedFileError(path, f"header declares {hlen} bytes but the file ends early")
    try:
        header = json.loads(raw[_PRE.size:_PRE.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"header is not valid JSON ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(path, f"format version {version!r}, this reader handles {FORMAT_VERSION}")
    if header.get("kind") != kind:
        raise FormatError(path, f"expected a {kind} file, found {header.get('kind')!r}")
    payload = raw[_PRE.size + hlen:]
    declared = header.get("payload_bytes")
    if len(payload) != declared:
        raise SizeMismatchError(path, f"payload is {len(payload)} bytes, header declares {declared}")
    return header, payload


def _expected(path, header: dict, shape: tuple, itemsize: int) -> None:
    need = int(np.prod(shape)) * itemsize
    if header["payload_bytes"] != need:
        raise SizeMismatchError(path, f"dims {list(shape)} need {need} payload bytes, header declares "
                                      f"{header['payload_bytes']}")


def _channels_to_bytes(values: np.ndarray) -> bytes:
    # (c, x, y, z) -> c slowest, x fastest
    return np.ascontiguousarray(values.transpose(0, 3, 2, 1), dtype="<f4").tobytes()


def _channels_from_bytes(payload: bytes, shape: tuple) -> np.ndarray:
    c, x, y, z = shape
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, z, y, x)
    return arr.transpose(0, 3, 2, 1).astype(np.float64)


# --------------------------------------------------------------------------- typed readers/writers


def write_labelmap(path, lmap: LabelMap) -> Path:
    header = {"kind": "labelmap", "dims": list(lmap.dims), "voxel_size": lmap.voxel_size,
              "tissues": TISSUE_NAMES, "dtype": "u1", "order": "x-fastest"}
    return _write_volume(path, header, lmap.labels.tobytes(order="F"))


def read_labelmap(path) -> LabelMap:
    header, payload = _read_volume(path, "labelmap")
    dims = tuple(header["dims"])
    _expected(path, header, dims, 1)
    if header.get("tissues") != TISSUE_NAMES:
        raise FormatError(path, f"tissue table {header.get('tissues')} differs from {TISSUE_NAMES}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dims, order="F")
    return LabelMap(labels, float(header["voxel_size"]))


def write_latent(path, latent: Latent) -> Path:
    """Values are stored as float32; reading back rounds float64 input once."""
    header = {"kind": "latent", "dims": list(latent.dims), "channels": latent.dims[0],
              "sigma_tag": latent.sigma_tag, "dtype": "<f4", "order": "x-fastest"}
    return _write_volume(path, header, _channels_to_bytes(latent.values))


def read_latent(path) -> Latent:
    header, payload = _read_volume(path, "latent")
    shape = tuple(header["dims"])
    _expected(path, header, shape, 4)
    return Latent(_channels_from_bytes(payload, shape), float(header.get("sigma_tag", 0.0)))


def write_heatmap(path, heat: Heatmap) -> Path:
    header = {"kind": "heatmap", "dims": list(heat.P.shape), "tissues": TISSUE_NAMES,
              "dtype": "<f4", "order": "x-fastest"}
    return _write_volume(path, header, _channels_to_bytes(heat.P))


def read_heatmap(path) -> Heatmap:
    header, payload = _read_volume(path, "heatmap")
    shape = tuple(header["dims"])
    _expected(path, header, shape, 4)
    if shape[0] != N_TISSUES:
        raise FormatError(path, f"heatmap needs {N_TISSUES} channels, got {shape[0]}")
    return Heatmap(_channels_from_bytes(payload, shape))


# --------------------------------------------------------------------------- manifests


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_cohort(directory, cohort: Cohort, config_digest: str | None = None,
                 prefix: str = "member") -> Path:
    """Write every member plus a manifest; refuses to replace existing files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = d / MANIFEST_NAME
    if manifest.exists():
        raise FileExistsError(f"{manifest}: results directories are append-only")
    entries = []
    for k, (m, prov) in enumerate(zip(cohort.members, cohort.provenance)):
        name = f"{prefix}_{k:04d}.dlm"
        if (d / name).exists():
            raise FileExistsError(f"{d / name}: results directories are append-only")
        write_labelmap(d / name, m)
        entries.append({"file": name, "sha256": file_sha256(d / name), "provenance": prov.to_dict()})
    doc = {"format_version": FORMAT_VERSION, "config_digest": config_digest, "members": entries}
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"manifest is not valid JSON ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(path, f"format version {doc.get('format_version')!r}, "
                                         f"this reader handles {FORMAT_VERSION}")
    return doc


def validate_manifest(path, config_digest: str | None = None) -> list[str]:
    """List every invariant violation (empty when the manifest is sound)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    doc = read_manifest(path)
    problems = []
    if config_digest is not None and doc.get("config_digest") != config_digest:
        problems.append(f"config digest {doc.get('config_digest')} != {config_digest}")
    for e in doc["members"]:
        f = root / e["file"]
        if not f.exists():
            problems.append(f"missing file {e['file']}")
            continue
        try:
            read_labelmap(f)
        except FormatError as exc:
            problems.append(str(exc))
            continue
        if e.get("sha256") and file_sha256(f) != e["sha256"]:
            problems.append(f"checksum mismatch for {e['file']}")
    return problems


def read_cohort(directory, config_digest: str | None = None) -> Cohort:
    d = Path(directory)
    problems = validate_manifest(d, config_digest)
    if problems:
        raise ManifestError(d / MANIFEST_NAME, "; ".join(problems))
    doc = read_manifest(d)
    members = [read_labelmap(d / e["file"]) for e in doc["members"]]
    prov = [Provenance.from_dict(e["provenance"]) for e in doc["members"]]
    return Cohort(members, prov)


# --------------------------------------------------------------------------- reports


def _clean(v: Any) -> Any:
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_report(directory, stem: str, report) -> tuple[Path, Path]:
    """``<stem>.csv`` (one row per member) and ``<stem>.json`` (summary plus raw arrays)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = report.rows()
    csv_path, json_path = d / f"{stem}.csv", d / f"{stem}.json"
    fields = ["member", *MORPH_NAMES, *CHECK_NAMES, "violations"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    doc = {"summary": {k: _clean(v) for k, v in report.summary().items()},
           "morph_names": list(MORPH_NAMES), "check_names": list(CHECK_NAMES),
           "features": np.asarray(report.features).tolist(),
           "checks": np.asarray(report.checks).astype(int).tolist()}
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return csv_path, json_path


def read_report(path):
    from .pipelines import CohortReport

    doc = json.loads(Path(path).read_text())
    s = doc["summary"]
    feats = np.asarray(doc["features"], float).reshape(-1, len(MORPH_NAMES))
    checks = np.asarray(doc["checks"], int).reshape(-1, len(CHECK_NAMES))
    return CohortReport(s["n"], s["violation_rate"], s["violation_rate_maps"], s["precision"],
                        s["recall"], s["fd"], feats, checks)


def write_table(path, rows: list[dict]) -> Path:
    """Plain CSV of homogeneous dict rows (column order from the first row)."""
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: _clean(v) for k, v in r.items()} for r in rows)
    return path
