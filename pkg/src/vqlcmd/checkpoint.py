"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VQLCMD1\\0"                     magic / version tag
    u32 manifest length, manifest    UTF-8 JSON: configs, config echo, and per
                                     array (name, dtype, shape, offset, crc32)
    raw array bytes                  offsets are relative to the end of the manifest
    u64 step counter
    u32 rng blob length, rng blob    JSON of the numpy bit-generator state

Serialisation is canonical (sorted names and keys), so save -> load -> save
reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .autodiff import Tensor
from .codebook import Codebook
from .denoiser import DenoiserConfig, param_shapes
from .errors import ChecksumError, CheckpointError, ShapeMismatchError, TruncationError, VersionError
from .schedule import Schedule
from .trainer import AdamState, TrainConfig, TrainState

MAGIC = b"VQLCMD1\0"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def _arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for k, v in state.params.items():
        out[f"theta/{k}"] = v.data
        out[f"ema_theta/{k}"] = state.ema_params[k]
    out["phi/table"] = state.codebook.table.data
    out["ema_phi/table"] = state.codebook.ema_table
    for k, v in state.adam.m.items():
        out[f"adam_m/{k}"] = v
        out[f"adam_v/{k}"] = state.adam.v[k]
    return out


def dumps(state: TrainState, config_text: str | None = None) -> bytes:
    arrays = _arrays(state)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name, "dtype": _NAMES[arr.dtype], "shape": list(arr.shape),
            "offset": offset, "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": 1,
        "model": asdict(state.model_cfg),
        "schedule": {"shift": state.schedule.shift, "t_min": state.schedule.t_min, "t_max": state.schedule.t_max},
        "train": asdict(state.cfg),
        "adam": {"t": state.adam.t, "b1": state.adam.b1, "b2": state.adam.b2, "eps": state.adam.eps},
        "config_text": config_text if config_text is not None else state.config_text,
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    rng_blob = json.dumps(state.rng.bit_generator.state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        MAGIC, struct.pack("<I", len(mbytes)), mbytes, *chunks,
        struct.pack("<Q", state.step), struct.pack("<I", len(rng_blob)), rng_blob,
    ])


def save_checkpoint(state: TrainState, path, config_text: str | None = None) -> None:
    blob = dumps(state, config_text)
    with open(path, "wb") as fh:
        fh.write(blob)


def _take(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise TruncationError(f"checkpoint truncated while reading {what}")
    return buf[pos : pos + n]


def loads(buf: bytes) -> TrainState:
    if buf[: len(MAGIC)] != MAGIC:
        raise VersionError(f"bad magic/version tag {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    (mlen,) = struct.unpack("<I", _take(buf, pos, 4, "manifest length"))
    pos += 4
    try:
        manifest = json.loads(_take(buf, pos, mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    pos += mlen
    if manifest.get("version") != 1:
        raise VersionError(f"unsupported checkpoint version {manifest.get('version')!r}")

    model_cfg = DenoiserConfig(**manifest["model"])
    expected = {f"theta/{k}": s for k, s in param_shapes(model_cfg).items()}
    expected.update({f"ema_{k}": s for k, s in expected.items()})
    expected["phi/table"] = expected["ema_phi/table"] = (model_cfg.K + 1, model_cfg.D)

    arrays, data_end = {}, pos
    for e in manifest["arrays"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = _take(buf, pos + e["offset"], n, e["name"])
        if zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"CRC mismatch for {e['name']}")
        name = e["name"]
        if name.startswith(("adam_m/", "adam_v/")):
            want = expected.get(name.split("/", 1)[1])
        else:
            want = expected.get(name)
            if want is None:
                raise ShapeMismatchError(f"unexpected array {name}")
        if want is not None and want != shape:
            raise ShapeMismatchError(f"{name}: stored shape {shape}, model expects {want}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        data_end = max(data_end, pos + e["offset"] + n)
    missing = set(expected) - set(arrays)
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks arrays: {sorted(missing)[:5]}")

    pos = data_end
    (step,) = struct.unpack("<Q", _take(buf, pos, 8, "step counter"))
    (rlen,) = struct.unpack("<I", _take(buf, pos + 8, 4, "rng length"))
    rng_state = json.loads(_take(buf, pos + 12, rlen, "rng state").decode("utf-8"))
    if pos + 12 + rlen != len(buf):
        raise CheckpointError("trailing bytes after rng state")

    bitgen = getattr(np.random, rng_state["bit_generator"])()
    bitgen.state = rng_state
    params = {k[len("theta/"):]: Tensor(v, requires_grad=True, dtype=v.dtype)
              for k, v in arrays.items() if k.startswith("theta/")}
    ema = {k[len("ema_theta/"):]: v for k, v in arrays.items() if k.startswith("ema_theta/")}
    cb = Codebook(model_cfg.K, model_cfg.D, Tensor(arrays["phi/table"], requires_grad=True,
                  dtype=arrays["phi/table"].dtype), arrays["ema_phi/table"])
    a = manifest["adam"]
    adam = AdamState(
        m={k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        t=a["t"], b1=a["b1"], b2=a["b2"], eps=a["eps"],
    )
    return TrainState(
        model_cfg, Schedule(**manifest["schedule"]), TrainConfig(**manifest["train"]),
        params, ema, cb, adam, np.random.Generator(bitgen), int(step), manifest.get("config_text", ""),
    )


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return loads(fh.read())


def manifest_of(buf: bytes) -> dict:
    """Decode only the manifest (for inspection and checksum audits)."""
    if buf[: len(MAGIC)] != MAGIC:
        raise VersionError("bad magic/version tag")
    (mlen,) = struct.unpack("<I", _take(buf, len(MAGIC), 4, "manifest length"))
    return json.loads(_take(buf, len(MAGIC) + 4, mlen, "manifest").decode("utf-8"))
