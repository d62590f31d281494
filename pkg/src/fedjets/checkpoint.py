"""Binary checkpoint formats.

Single-network checkpoint (`.ckpt`):

    magic    4 bytes  b"FJET"
    version  u16 LE   (currently 1)
    hdr_len  u32 LE
    header   hdr_len bytes of canonical JSON:
             {"meta": {...}, "net": {"activations": [...], "head": ..., "layer_dims": [...]}}
    values   remaining bytes, little-endian float32

The header JSON is serialized with sorted keys and compact separators, so
parsing a file and re-serializing it reproduces the bytes exactly.

Multi-network server-state container (`state.ckpt`) reuses the same layout
under magic b"FJST", with one length-prefixed float32 block per network.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ConfigError
from .nn import NetSpec, ParamVector, spec_hash

MAGIC_NET = b"FJET"
MAGIC_STATE = b"FJST"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_header(magic: bytes, header: dict) -> bytes:
    blob = _canonical_json(header)
    return magic + struct.pack("<H", FORMAT_VERSION) + struct.pack("<I", len(blob)) + blob


def _read_header(raw: bytes, magic: bytes, path) -> tuple[dict, int]:
    if len(raw) < 10 or raw[:4] != magic:
        raise ArtifactError(f"{path}: not a {magic.decode()} file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {version}")
    (hdr_len,) = struct.unpack_from("<I", raw, 6)
    end = 10 + hdr_len
    if end > len(raw):
        raise ArtifactError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: malformed header JSON ({exc})") from exc
    return header, end


def save_net(path, spec: NetSpec, params: ParamVector, meta: dict | None = None) -> None:
    """Write one network to a FJET checkpoint (values stored as float32)."""
    if params.values.shape[0] != spec.param_count():
        raise ConfigError("parameter length does not match spec")
    header = {"meta": meta or {}, "net": spec.to_dict()}
    data = _pack_header(MAGIC_NET, header) + params.values.astype("<f4").tobytes()
    Path(path).write_bytes(data)


def load_net(path) -> tuple[NetSpec, ParamVector, dict]:
    """Read a FJET checkpoint; returns (spec, params, meta)."""
    raw = Path(path).read_bytes()
    header, off = _read_header(raw, MAGIC_NET, path)
    if "net" not in header:
        raise ArtifactError(f"{path}: header missing net spec")
    spec = NetSpec.from_dict(header["net"])
    values = np.frombuffer(raw[off:], dtype="<f4").astype(np.float64)
    if values.shape[0] != spec.param_count():
        raise ArtifactError(
            f"{path}: {values.shape[0]} stored values, spec implies {spec.param_count()}"
        )
    return spec, ParamVector(values, spec_hash(spec)), header.get("meta", {})


def save_state(path, named_nets: list[tuple[str, NetSpec, ParamVector]], meta: dict | None = None) -> None:
    """Write several networks (server state) to one FJST container."""
    entries = []
    blocks = []
    for name, spec, params in named_nets:
        if params.values.shape[0] != spec.param_count():
            raise ConfigError(f"parameter length does not match spec for {name!r}")
        entries.append({"name": name, "net": spec.to_dict()})
        block = params.values.astype("<f4").tobytes()
        blocks.append(struct.pack("<I", params.values.shape[0]) + block)
    header = {"meta": meta or {}, "nets": entries}
    Path(path).write_bytes(_pack_header(MAGIC_STATE, header) + b"".join(blocks))


def load_state(path) -> tuple[list[tuple[str, NetSpec, ParamVector]], dict]:
    """Read a FJST container; returns ([(name, spec, params), ...], meta)."""
    raw = Path(path).read_bytes()
    header, off = _read_header(raw, MAGIC_STATE, path)
    out = []
    for entry in header.get("nets", []):
        spec = NetSpec.from_dict(entry["net"])
        if off + 4 > len(raw):
            raise ArtifactError(f"{path}: truncated block table")
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        end = off + 4 * count
        if end > len(raw):
            raise ArtifactError(f"{path}: truncated parameter block for {entry['name']!r}")
        values = np.frombuffer(raw[off:end], dtype="<f4").astype(np.float64)
        off = end
        if values.shape[0] != spec.param_count():
            raise ArtifactError(f"{path}: block size mismatch for {entry['name']!r}")
        out.append((entry["name"], spec, ParamVector(values, spec_hash(spec))))
    return out, header.get("meta", {})
