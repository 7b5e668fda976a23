"""Bit-exact binary persistence for datasets and checkpoints, plus JSONL interop.

ILQD layout (all integers little-endian):

    magic      4 bytes  b"ILQD"
    version    u32      currently 1
    header_len u32
    header     UTF-8 JSON: {obs_dim, act_dim, n, env_tag, source_tag, seed}
    payload    float32 LE arrays, in order:
                 observations[n*obs_dim], actions[n*act_dim], rewards[n],
                 next_observations[n*obs_dim]; then terminals as one byte per row

Checkpoints share the container style under magic b"ILQC": the JSON header lists
named tensors with shapes/dtypes plus a free-form meta dict, and the payload is
their raw bytes concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .envs import TransitionDataset

DATASET_MAGIC = b"ILQD"
CHECKPOINT_MAGIC = b"ILQC"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Bad magic bytes: not a file of the expected kind."""


class UnsupportedVersionError(ValueError):
    pass


class CorruptFileError(ValueError):
    """Payload shorter than the header declares; names the missing section."""


class JsonlImportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared container plumbing
# ---------------------------------------------------------------------------


def _write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _read_container(path, magic: bytes):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != magic:
        raise DataFormatError(f"{path}: bad magic bytes (expected {magic!r})")
    if len(raw) < 12:
        raise CorruptFileError(f"{path}: truncated before header length")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + header_len:
        raise CorruptFileError(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from exc
    return header, raw[12 + header_len :]


def _take(payload: bytes, offset: int, nbytes: int, section: str, path) -> bytes:
    if offset + nbytes > len(payload):
        raise CorruptFileError(f"{path}: payload truncated in section '{section}'")
    return payload[offset : offset + nbytes]


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def write_dataset(dataset: TransitionDataset, path) -> None:
    dataset.validate()
    obs = np.ascontiguousarray(dataset.observations, dtype=np.float32)
    act = np.ascontiguousarray(dataset.actions, dtype=np.float32)
    rew = np.ascontiguousarray(dataset.rewards, dtype=np.float32)
    nxt = np.ascontiguousarray(dataset.next_observations, dtype=np.float32)
    term = np.ascontiguousarray(dataset.terminals, dtype=np.uint8)
    header = {
        "obs_dim": int(obs.shape[1]),
        "act_dim": int(act.shape[1]),
        "n": int(obs.shape[0]),
        "env_tag": str(dataset.metadata.get("env_tag", "")),
        "source_tag": str(dataset.metadata.get("source_tag", "")),
        "seed": int(dataset.metadata.get("seed", 0)),
    }
    payload = b"".join(
        a.astype("<f4", copy=False).tobytes() for a in (obs, act, rew, nxt)
    ) + term.tobytes()
    _write_container(path, DATASET_MAGIC, header, payload)


def read_dataset(path) -> TransitionDataset:
    header, payload = _read_container(path, DATASET_MAGIC)
    try:
        n = int(header["n"])
        obs_dim = int(header["obs_dim"])
        act_dim = int(header["act_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: header missing dims ({exc})") from exc

    offset = 0
    sections = []
    for name, count in (
        ("observations", n * obs_dim),
        ("actions", n * act_dim),
        ("rewards", n),
        ("next_observations", n * obs_dim),
    ):
        chunk = _take(payload, offset, count * 4, name, path)
        sections.append(np.frombuffer(chunk, dtype="<f4").copy())
        offset += count * 4
    term_bytes = _take(payload, offset, n, "terminals", path)
    offset += n
    if offset != len(payload):
        raise CorruptFileError(f"{path}: {len(payload) - offset} trailing payload bytes")

    dataset = TransitionDataset(
        observations=sections[0].reshape(n, obs_dim),
        actions=sections[1].reshape(n, act_dim),
        rewards=sections[2],
        next_observations=sections[3].reshape(n, obs_dim),
        terminals=np.frombuffer(term_bytes, dtype=np.uint8).astype(bool),
        metadata={
            "env_tag": header.get("env_tag", ""),
            "source_tag": header.get("source_tag", ""),
            "seed": header.get("seed", 0),
        },
    )
    if n > 0:
        dataset.validate()
    return dataset


def import_jsonl(path) -> TransitionDataset:
    """Read {observation, action, reward, next_observation, terminal} lines."""
    obs, act, rew, nxt, term = [], [], [], [], []
    dims = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                o = np.asarray(row["observation"], dtype=np.float32).reshape(-1)
                a = np.asarray(row["action"], dtype=np.float32).reshape(-1)
                r = float(row["reward"])
                no = np.asarray(row["next_observation"], dtype=np.float32).reshape(-1)
                t = bool(row["terminal"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise JsonlImportError(f"{path}: line {lineno}: {exc}") from exc
            if dims is None:
                dims = (o.size, a.size)
            elif (o.size, a.size) != dims or no.size != dims[0]:
                raise JsonlImportError(
                    f"{path}: line {lineno}: dims {(o.size, a.size)} differ from first line {dims}"
                )
            obs.append(o)
            act.append(a)
            rew.append(r)
            nxt.append(no)
            term.append(t)
    if dims is None:
        dims = (0, 0)  # dims undefined; consuming this dataset will fail validation
    return TransitionDataset(
        observations=np.asarray(obs, dtype=np.float32).reshape(len(obs), dims[0]),
        actions=np.asarray(act, dtype=np.float32).reshape(len(act), dims[1]),
        rewards=np.asarray(rew, dtype=np.float32),
        next_observations=np.asarray(nxt, dtype=np.float32).reshape(len(nxt), dims[0]),
        terminals=np.asarray(term, dtype=bool),
        metadata={"env_tag": "", "source_tag": "jsonl", "seed": 0},
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        chunks.append(arr.astype(dtype, copy=False).tobytes())
    header = {"tensors": entries, "meta": meta or {}}
    _write_container(path, CHECKPOINT_MAGIC, header, b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _read_container(path, CHECKPOINT_MAGIC)
    tensors = {}
    offset = 0
    for entry in header.get("tensors", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        chunk = _take(payload, offset, nbytes, name, path)
        tensors[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CorruptFileError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return tensors, header.get("meta", {})
