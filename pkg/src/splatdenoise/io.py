"""File formats: splat PLY scenes, PPM images, camera lists, optimizer sidecars."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gaussian import Camera, Scene
from .optimizer import OptimizerState

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

SPLAT_FIELDS = (["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)] + ["opacity"]
                + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])


class FormatError(ValueError):
    pass


def save_ply(path, scene: Scene, precision: str = "double") -> None:
    """Write the splat vertex layout; ``double`` precision round-trips exactly."""
    if precision not in ("double", "float"):
        raise ValueError("precision must be 'double' or 'float'")
    dt = np.dtype([(name, "<f8" if precision == "double" else "<f4") for name in SPLAT_FIELDS])
    data = np.empty(len(scene), dtype=dt)
    cols = np.concatenate([scene.means, scene.sh_dc, scene.raw_opacities[:, None],
                           scene.log_scales, scene.rotations], axis=1)
    for j, name in enumerate(SPLAT_FIELDS):
        data[name] = cols[:, j]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property {precision} {name}" for name in SPLAT_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_ply(path, rng_seed: int = 0) -> Scene:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    count, fields, in_vertex = 0, [], False
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"{path}: list properties are not supported on vertices")
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type {parts[1]!r}")
            fields.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    dt = np.dtype(fields)
    if len(body) < count * dt.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    data = np.frombuffer(body, dtype=dt, count=count)
    missing = [f for f in SPLAT_FIELDS if f not in dt.names]
    if missing:
        raise FormatError(f"{path}: missing vertex properties {missing}")
    col = lambda names: np.stack([data[n].astype(np.float64) for n in names], axis=1)
    return Scene(
        means=col(["x", "y", "z"]),
        log_scales=col([f"scale_{i}" for i in range(3)]),
        rotations=col([f"rot_{i}" for i in range(4)]),
        raw_opacities=data["opacity"].astype(np.float64),
        sh_dc=col([f"f_dc_{i}" for i in range(3)]),
        rng_seed=rng_seed,
    )


def save_ppm(path, image: np.ndarray, bits: int = 8) -> None:
    """Binary PPM (P6); ``bits=16`` writes big-endian 16-bit samples."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an HxWx3 image")
    h, w, _ = img.shape
    maxval = 255 if bits == 8 else 65535
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    q = np.rint(img * maxval).astype(">u1" if bits == 8 else ">u2")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(q.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dt = ">u1" if maxval < 256 else ">u2"
    data = np.frombuffer(raw, dtype=dt, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_state(path, state: OptimizerState, scene: Scene) -> None:
    """Optimizer moments, momentum and stream bookkeeping as JSON (exact floats)."""
    doc = {
        "step_count": state.step_count,
        "betas": list(state.betas),
        "eps": state.eps,
        "adam_m": {k: v.tolist() for k, v in state.adam_m.items()},
        "adam_v": {k: v.tolist() for k, v in state.adam_v.items()},
        "explore_momentum": state.explore_momentum.tolist(),
        "prev_mean_grad": state.prev_mean_grad.tolist(),
        "rng_seed": scene.rng_seed,
        "stream_ids": scene.stream_ids.tolist(),
        "next_stream_id": scene.next_stream_id,
    }
    Path(path).write_text(json.dumps(doc))


def load_state(path, scene: Scene) -> OptimizerState:
    """Read a sidecar and restore the scene's stream bookkeeping from it."""
    doc = json.loads(Path(path).read_text())
    scene.rng_seed = doc["rng_seed"]
    scene.stream_ids = np.array(doc["stream_ids"], dtype=np.int64).reshape(len(scene))
    scene.next_stream_id = doc["next_stream_id"]
    n = len(scene)
    arr = lambda v, like: np.array(v, dtype=np.float64).reshape(getattr(scene, like).shape)
    return OptimizerState(
        adam_m={k: arr(v, k) for k, v in doc["adam_m"].items()},
        adam_v={k: arr(v, k) for k, v in doc["adam_v"].items()},
        explore_momentum=np.array(doc["explore_momentum"], dtype=np.float64).reshape(n, 3),
        prev_mean_grad=np.array(doc["prev_mean_grad"], dtype=np.float64).reshape(n, 3),
        step_count=doc["step_count"],
        betas=tuple(doc["betas"]),
        eps=doc["eps"],
    )
