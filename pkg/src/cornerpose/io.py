"""On-disk formats.

Tensor file (``.btns``), all little-endian::

    b"BTNS" | version u8 | dtype u8 (0 f32, 1 f64, 2 u8) | ndim u8 | ndim x u64 dims | payload

Checkpoint: ``b"BCKP" | version u8 | u32 config length | config JSON |
u32 entry count | entries``, each entry being ``u16 name length | name |
tensor record``.

Scene directory: ``meta.txt`` (see :func:`format_meta`), ``query.btns``,
``query_mask.btns``, ``ref_XX.btns``, ``ref_XX_mask.btns`` and ``cloud.btns``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .geom3d import BoundingBox3D, DetectionMask, Intrinsics, Pose
from .scene import Scene, View

MAGIC = b"BTNS"
CKPT_MAGIC = b"BCKP"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
META_VERSION = "scene-meta 1"


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}")
    return buf


def write_tensor_to(f: BinaryIO, array) -> None:
    a = np.asarray(array)
    code = CODES.get(np.dtype(a.dtype.name)) if a.dtype.kind in "fu" else None
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    f.write(MAGIC + struct.pack("<BBB", VERSION, code, a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes())


def read_tensor_from(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4, "magic") != MAGIC:
        raise FormatError("bad tensor magic")
    version, code, ndim = struct.unpack("<BBB", _read_exact(f, 3, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, "dims"))
    dt = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = _read_exact(f, count * dt.itemsize, "payload")
    return np.frombuffer(payload, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(dims)


def encode_tensor(array) -> bytes:
    buf = io.BytesIO()
    write_tensor_to(buf, array)
    return buf.getvalue()


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    out = read_tensor_from(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor")
    return out


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_tensor(path.read_bytes())
    except FormatError as err:
        raise FormatError(f"{path}: {err}") from None


# ---- checkpoints ----

def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<BI", VERSION, len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        write_tensor_to(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    f = io.BytesIO(path.read_bytes())
    try:
        if _read_exact(f, 4, "magic") != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, n = struct.unpack("<BI", _read_exact(f, 5, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = json.loads(_read_exact(f, n, "config"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, ln, "name").decode()
            tensors[name] = read_tensor_from(f)
        if f.read(1):
            raise FormatError("trailing bytes")
    except (FormatError, json.JSONDecodeError, UnicodeDecodeError) as err:
        raise FormatError(f"{path}: {err}") from None
    return config, tensors


def save_model(path, model, extra: dict | None = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    config = {"model": model.config.to_dict(), **(extra or {})}
    write_checkpoint(path, config, tensors)


def load_model(path):
    import torch

    from .nn import CornerNet, ModelConfig

    config, tensors = read_checkpoint(path)
    try:
        model = CornerNet(ModelConfig.from_dict(config["model"]))
        dtype = next(iter(tensors.values())).dtype if tensors else np.float32
        model = model.to(torch.float64 if dtype == np.float64 else torch.float32)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    except (KeyError, RuntimeError, TypeError) as err:
        raise FormatError(f"{path}: checkpoint does not match the model: {err}") from None
    model.eval()
    return model, config


# ---- scene metadata ----

def _nums(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def format_meta(scene: Scene) -> str:
    k = scene.intrinsics
    lines = [
        f"# {META_VERSION}",
        f"intrinsics {_nums(k.flat())}",
        f"symmetric {int(scene.symmetric)}",
        f"diameter {_nums([scene.diameter])}",
        f"box {_nums(scene.box.corners.ravel())}",
    ]
    if scene.extents is not None:
        lines.append(f"extents {_nums(scene.extents)}")
    for name, v in [("query", scene.query)] + [(f"ref_{i:02d}", v) for i, v in enumerate(scene.references)]:
        lines.append(f"pose {name} {_nums(v.pose.flat())}")
        lines.append(f"mask {name} {_nums(v.mask.rect)}")
    return "\n".join(lines) + "\n"


def parse_meta(text: str, where: str = "meta") -> dict:
    out: dict = {"poses": {}, "masks": {}, "order": []}
    try:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *rest = line.split()
            if key in ("pose", "mask"):
                name, vals = rest[0], [float(v) for v in rest[1:]]
                if key == "pose":
                    if len(vals) != 12:
                        raise FormatError(f"line {lineno}: pose needs 12 numbers")
                    out["poses"][name] = Pose(np.reshape(vals[:9], (3, 3)), vals[9:])
                    out["order"].append(name)
                else:
                    if len(vals) != 4:
                        raise FormatError(f"line {lineno}: mask needs 4 numbers")
                    out["masks"][name] = tuple(vals)
            elif key == "intrinsics":
                fx, fy, cx, cy, w, h = (float(v) for v in rest)
                out["intrinsics"] = Intrinsics(fx, fy, cx, cy, int(w), int(h))
            elif key == "symmetric":
                out["symmetric"] = bool(int(rest[0]))
            elif key == "diameter":
                out["diameter"] = float(rest[0])
            elif key == "box":
                if len(rest) != 24:
                    raise FormatError(f"line {lineno}: box needs 24 numbers (8 corners)")
                out["box"] = BoundingBox3D(np.reshape([float(v) for v in rest], (8, 3)))
            elif key == "extents":
                out["extents"] = np.array([float(v) for v in rest])
            else:
                raise FormatError(f"line {lineno}: unknown key {key!r}")
    except (ValueError, IndexError) as err:
        raise FormatError(f"{where}: {err}") from None
    for req in ("intrinsics", "symmetric", "diameter", "box"):
        if req not in out:
            raise FormatError(f"{where}: missing {req!r}")
    if "query" not in out["poses"]:
        raise FormatError(f"{where}: missing query pose")
    return out


def write_scene(scene_dir, scene: Scene) -> None:
    d = Path(scene_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.txt").write_text(format_meta(scene))
    write_tensor(d / "query.btns", scene.query.image)
    write_tensor(d / "query_mask.btns", scene.query.silhouette.astype(np.uint8))
    for i, v in enumerate(scene.references):
        write_tensor(d / f"ref_{i:02d}.btns", v.image)
        write_tensor(d / f"ref_{i:02d}_mask.btns", v.silhouette.astype(np.uint8))
    write_tensor(d / "cloud.btns", np.asarray(scene.cloud, dtype=np.float64))


def read_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    meta = parse_meta((d / "meta.txt").read_text(), str(d / "meta.txt"))
    k = meta["intrinsics"]

    def view(name: str) -> View:
        if name not in meta["masks"]:
            raise FormatError(f"{d}: missing mask for {name}")
        image = read_tensor(d / f"{name}.btns")
        sil = read_tensor(d / f"{name}_mask.btns").astype(bool)
        return View(image, meta["poses"][name], DetectionMask.from_rect(meta["masks"][name], k.height, k.width), sil)

    refs = [n for n in meta["order"] if n != "query"]
    scene = Scene(
        intrinsics=k,
        query=view("query"),
        references=[view(n) for n in refs],
        cloud=read_tensor(d / "cloud.btns"),
        box=meta["box"],
        diameter=meta["diameter"],
        symmetric=meta["symmetric"],
        extents=meta.get("extents"),
    )
    try:
        scene.validate()
    except ValueError as err:
        raise FormatError(f"{d}: {err}") from None
    return scene


MANIFEST = "manifest.json"


def write_manifest(root, info: dict) -> None:
    Path(root, MANIFEST).write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")


def read_dataset(root) -> tuple[dict, list[tuple[str, Scene]]]:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise FormatError(f"{root}: no {MANIFEST}")
    info = json.loads(mpath.read_text())
    scenes = [(name, read_scene(root / name)) for name in info.get("scenes", [])]
    return info, scenes
