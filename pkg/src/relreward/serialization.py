"""Binary artifact formats.

Both formats share one envelope::

    magic (4 bytes) | version (u32 LE) | header length (u32 LE) | JSON header | payload

Datasets (magic ``RRF1``) carry a float32 little-endian payload laid out
trajectory-major, step-major, state-then-action.  Checkpoints (magic
``RRFC``) carry float64 little-endian weights, layer by layer, weights then
bias, followed by any extra arrays the header lists.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import Denoiser, GaussianSkip, schedule_from_betas
from .errors import FormatError
from .gradcore import MLPParams
from .maze import NormStats, TrajectoryDataset
from .reward import RewardNet

DATASET_MAGIC = b"RRF1"
CHECKPOINT_MAGIC = b"RRFC"
FORMAT_VERSION = 1
_PREFIX = 12

DATASET_KEYS = ("n_traj", "horizon", "state_dim", "action_dim", "norm_min", "norm_max")


def pack_envelope(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<II", FORMAT_VERSION, len(head)) + head + payload


def unpack_envelope(blob: bytes, magic: bytes) -> tuple[dict, memoryview, int]:
    """Validate the envelope; return ``(header, payload, payload_offset)``."""
    if len(blob) < 4 or blob[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", offset=0)
    if len(blob) < _PREFIX:
        raise FormatError("truncated envelope prefix", offset=len(blob))
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}", offset=4)
    if _PREFIX + hlen > len(blob):
        raise FormatError(f"header length {hlen} runs past the end of the file", offset=8)
    try:
        header = json.loads(bytes(blob[_PREFIX:_PREFIX + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", offset=_PREFIX) from None
    if not isinstance(header, dict):
        raise FormatError("JSON header is not an object", offset=_PREFIX)
    return header, memoryview(blob)[_PREFIX + hlen:], _PREFIX + hlen


def _require(header: dict, keys, offset: int):
    missing = [k for k in keys if k not in header]
    if missing:
        raise FormatError(f"header lacks {', '.join(missing)}", offset=offset)


def _check_payload(payload, expected: int, offset: int):
    if len(payload) != expected:
        raise FormatError(f"payload holds {len(payload)} bytes but the header implies {expected}",
                          offset=offset + min(len(payload), expected))


# ------------------------------------------------------------------ datasets

def dataset_bytes(ds: TrajectoryDataset) -> bytes:
    n, h, d = ds.trajectories.shape
    header = {
        "n_traj": n, "horizon": h, "state_dim": ds.state_dim, "action_dim": ds.action_dim,
        "norm_min": [float(v) for v in ds.stats.min], "norm_max": [float(v) for v in ds.stats.max],
        "episode": ds.episode.tolist(), "start": ds.start.tolist(), "meta": ds.meta,
    }
    payload = np.ascontiguousarray(ds.trajectories, dtype="<f4").tobytes()
    return pack_envelope(DATASET_MAGIC, header, payload)


def dataset_from_bytes(blob: bytes) -> TrajectoryDataset:
    header, payload, off = unpack_envelope(blob, DATASET_MAGIC)
    _require(header, DATASET_KEYS, _PREFIX)
    n, h = int(header["n_traj"]), int(header["horizon"])
    d = int(header["state_dim"]) + int(header["action_dim"])
    _check_payload(payload, 4 * n * h * d, off)
    traj = np.frombuffer(payload, dtype="<f4").reshape(n, h, d).astype(np.float32)
    stats = NormStats(header["norm_min"], header["norm_max"])
    episode = header.get("episode", [0] * n)
    start = header.get("start", [0] * n)
    return TrajectoryDataset(traj, stats, episode, start, header.get("meta", {}))


def serialize_dataset(ds: TrajectoryDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def deserialize_dataset(path) -> TrajectoryDataset:
    return dataset_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------- checkpoints

def _pack_arrays(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def _unpack_arrays(payload, shapes, offset: int) -> list[np.ndarray]:
    sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
    _check_payload(payload, 8 * sum(sizes), offset)
    flat = np.frombuffer(payload, dtype="<f8")
    out, pos = [], 0
    for s, k in zip(shapes, sizes):
        out.append(flat[pos:pos + k].reshape(s).astype(np.float64))
        pos += k
    return out


def _net_header(net: MLPParams) -> dict:
    return {"activation": net.activation,
            "layers": [[list(w.shape), list(b.shape)] for w, b in zip(net.weights, net.biases)]}


def _net_shapes(header: dict) -> list:
    shapes = []
    for w, b in header["layers"]:
        shapes.extend((tuple(w), tuple(b)))
    return shapes


def checkpoint_bytes(model) -> bytes:
    """Serialize a :class:`Denoiser` or :class:`RewardNet`."""
    header = _net_header(model.net)
    arrays = list(model.net.arrays())
    header["extras"] = []
    if isinstance(model, Denoiser):
        header.update(kind="denoiser", horizon=model.horizon, state_dim=model.state_dim,
                      action_dim=model.action_dim)
        extras = {"beta": model.schedule.beta}
        if model.skip is not None:
            extras.update(skip_mean=model.skip.mean, skip_basis=model.skip.basis,
                          skip_eigs=model.skip.eigs)
        if model.norm is not None:
            extras.update(norm_min=model.norm.min, norm_max=model.norm.max)
    elif isinstance(model, RewardNet):
        header.update(kind="reward", horizon=model.horizon, state_dim=model.state_dim,
                      action_dim=model.action_dim, window=model.window,
                      diffusion_steps=model.diffusion_steps, target_mode=model.target_mode)
        extras = {}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    for name, arr in extras.items():
        header["extras"].append([name, list(np.shape(arr))])
        arrays.append(arr)
    return pack_envelope(CHECKPOINT_MAGIC, header, _pack_arrays(arrays))


def checkpoint_from_bytes(blob: bytes):
    header, payload, off = unpack_envelope(blob, CHECKPOINT_MAGIC)
    _require(header, ("kind", "layers", "activation", "extras"), _PREFIX)
    net_shapes = _net_shapes(header)
    extra_shapes = [tuple(s) for _, s in header["extras"]]
    arrays = _unpack_arrays(payload, net_shapes + extra_shapes, off)
    k = len(net_shapes)
    net = MLPParams(arrays[0:k:2], arrays[1:k:2], header["activation"])
    extras = {name: a for (name, _), a in zip(header["extras"], arrays[k:])}
    if header["kind"] == "denoiser":
        skip = None
        if "skip_mean" in extras:
            skip = GaussianSkip(extras["skip_mean"], extras["skip_basis"], extras["skip_eigs"])
        norm = NormStats(extras["norm_min"], extras["norm_max"]) if "norm_min" in extras else None
        return Denoiser(net, schedule_from_betas(extras["beta"]), norm, header["horizon"],
                        header["state_dim"], header["action_dim"], skip)
    if header["kind"] == "reward":
        return RewardNet(net, header["horizon"], header["state_dim"], header["action_dim"],
                         header["window"], header["diffusion_steps"], header["target_mode"])
    raise FormatError(f"unknown checkpoint kind {header['kind']!r}", offset=_PREFIX)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
