"""On-disk scenario datasets.

A dataset directory holds ``manifest.txt`` and ``records.bin``.

``manifest.txt`` is ``key: value`` text::

    format_version: 1
    generator_version: 1
    count: <n>
    records: records.bin
    seeds: <space separated seeds in record order>
    generator_config: <json>

``records.bin`` is a sequence of frames ``<u32 length><u32 crc32><payload>``
(little endian). Each payload encodes one scenario in this field order:

    u16   format version
    str   scenario_id
    str   template
    i64   rng_seed
    f64x3 ego status (velocity, acceleration, yaw_rate)
    arr   expert            (T x 3)
    u32   polygon count, then one arr (n x 2) per drivable polygon
    arr   route             (n x 2)
    u32   agent count, then per agent:
          i64 agent_id, f64 length, f64 width, str behavior, arr poses (n x 3)

``str`` is ``<u32 byte length><utf-8>``; ``arr`` is ``<u32 rows><u32 cols>``
followed by row-major f64 values.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .generate import GENERATOR_VERSION
from .types import AgentTrack, EgoStatus, Scenario

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
RECORDS = "records.bin"


class DatasetError(RuntimeError):
    pass


def _w_str(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _w_arr(buf, a: np.ndarray):
    a = np.ascontiguousarray(a, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("only 2-d arrays are serialised")
    buf.write(struct.pack("<II", *a.shape))
    buf.write(a.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DatasetError("truncated payload")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def str(self) -> str:
        (n,) = self.take("<I")
        raw = self.data[self.pos:self.pos + n]
        if len(raw) != n:
            raise DatasetError("truncated string")
        self.pos += n
        return raw.decode("utf-8")

    def arr(self) -> np.ndarray:
        rows, cols = self.take("<II")
        n = rows * cols * 8
        raw = self.data[self.pos:self.pos + n]
        if len(raw) != n:
            raise DatasetError("truncated array")
        self.pos += n
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(float)


def encode_scenario(sc: Scenario) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<H", FORMAT_VERSION))
    _w_str(buf, sc.scenario_id)
    _w_str(buf, sc.template)
    buf.write(struct.pack("<q", sc.rng_seed))
    buf.write(struct.pack("<3d", *sc.ego_status.as_array()))
    _w_arr(buf, sc.expert)
    buf.write(struct.pack("<I", len(sc.drivable)))
    for poly in sc.drivable:
        _w_arr(buf, poly)
    _w_arr(buf, sc.route)
    buf.write(struct.pack("<I", len(sc.agents)))
    for a in sc.agents:
        buf.write(struct.pack("<qdd", a.agent_id, a.length, a.width))
        _w_str(buf, a.behavior)
        _w_arr(buf, a.poses)
    return buf.getvalue()


def decode_scenario(payload: bytes) -> Scenario:
    r = _Reader(payload)
    (version,) = r.take("<H")
    if version != FORMAT_VERSION:
        raise DatasetError(f"record format version {version} != {FORMAT_VERSION}")
    sid = r.str()
    template = r.str()
    (seed,) = r.take("<q")
    status = EgoStatus(*r.take("<3d"))
    expert = r.arr()
    (n_poly,) = r.take("<I")
    drivable = [r.arr() for _ in range(n_poly)]
    route = r.arr()
    (n_agents,) = r.take("<I")
    agents = []
    for _ in range(n_agents):
        aid, length, width = r.take("<qdd")
        behavior = r.str()
        agents.append(AgentTrack(aid, length, width, r.arr(), behavior))
    if r.pos != len(payload):
        raise DatasetError("trailing bytes in record")
    return Scenario(sid, drivable, route, agents, status, expert, seed, template)


def write_dataset(scenarios, path, generator_config: dict | None = None) -> dict:
    """Write ``scenarios`` to directory ``path``; returns the manifest as a dict."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    scenarios = list(scenarios)
    with open(path / RECORDS, "wb") as f:
        for sc in scenarios:
            payload = encode_scenario(sc)
            f.write(struct.pack("<II", len(payload), zlib.crc32(payload)))
            f.write(payload)
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator_version": GENERATOR_VERSION,
        "count": len(scenarios),
        "records": RECORDS,
        "seeds": [sc.rng_seed for sc in scenarios],
        "generator_config": generator_config or {},
    }
    lines = [
        f"format_version: {manifest['format_version']}",
        f"generator_version: {manifest['generator_version']}",
        f"count: {manifest['count']}",
        f"records: {RECORDS}",
        "seeds: " + " ".join(str(s) for s in manifest["seeds"]),
        "generator_config: " + json.dumps(manifest["generator_config"], sort_keys=True),
    ]
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.exists():
        raise DatasetError(f"{path}: missing {MANIFEST}")
    raw = {}
    for line in mf.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        raw[key.strip()] = value.strip()
    try:
        manifest = {
            "format_version": int(raw["format_version"]),
            "generator_version": raw["generator_version"],
            "count": int(raw["count"]),
            "records": raw.get("records", RECORDS),
            "seeds": [int(s) for s in raw.get("seeds", "").split()],
            "generator_config": json.loads(raw.get("generator_config") or "{}"),
        }
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{mf}: malformed manifest ({exc})") from exc
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetError(f"{mf}: format version {manifest['format_version']} != {FORMAT_VERSION}")
    if manifest["generator_version"] != GENERATOR_VERSION:
        raise DatasetError(f"{mf}: generator version {manifest['generator_version']} != {GENERATOR_VERSION}")
    return manifest


def iter_records(path):
    """Yield raw ``(index, payload)`` frames, checking length and checksum."""
    data = (Path(path) / RECORDS).read_bytes()
    pos, i = 0, 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise DatasetError(f"record {i}: truncated header")
        length, crc = struct.unpack_from("<II", data, pos)
        payload = data[pos + 8:pos + 8 + length]
        if len(payload) != length:
            raise DatasetError(f"record {i}: truncated payload")
        if zlib.crc32(payload) != crc:
            raise DatasetError(f"record {i}: checksum mismatch")
        yield i, payload
        pos += 8 + length
        i += 1


def read_dataset(path) -> list:
    manifest = read_manifest(path)
    scenarios = []
    for i, payload in iter_records(path):
        try:
            scenarios.append(decode_scenario(payload))
        except (DatasetError, ValueError, UnicodeDecodeError) as exc:
            raise DatasetError(f"record {i}: {exc}") from exc
    if len(scenarios) != manifest["count"]:
        raise DatasetError(f"{path}: manifest count {manifest['count']} != {len(scenarios)} records")
    seeds = [sc.rng_seed for sc in scenarios]
    if manifest["seeds"] and manifest["seeds"] != seeds:
        raise DatasetError(f"{path}: manifest seeds do not match records")
    return scenarios
