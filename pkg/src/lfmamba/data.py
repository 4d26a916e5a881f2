"""Scene ingestion, the benchmark degradation protocol, and scene containers.

A scene arrives as a grid of per-view images (``view_{row:02d}_{col:02d}.png``
by default), is angularly cropped to the central A x A views, converted to
luma, and bicubic-downscaled with antialias to produce the LR views.  HR
spatial extents are center-cropped to multiples of the scale first so the
LR/HR alignment is exact.

Container format (magic ``LFSC``): u16 version, u32 header length, JSON
header (name, extents, scale, dtype, tensor index), raw little-endian
tensors, 32-byte sha256 of everything preceding.  Writes are atomic
(temp file + rename) and round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .imageops import bicubic_resize, rgb_to_y
from .layouts import Layout, LightFieldTensor


@dataclass
class SceneRecord:
    name: str
    views_hr: LightFieldTensor
    views_lr: LightFieldTensor | None = None
    scale: int | None = None
    source: str = ""


@dataclass
class DatasetManifest:
    dataset: str
    scenes: list[dict] = field(default_factory=list)  # {"name", "path", "role"}
    angular: int | None = None

    def __post_init__(self):
        names = [s["name"] for s in self.scenes]
        if len(names) != len(set(names)):
            raise ValueError("duplicate scene names in manifest")

    def paths(self, role: str | None = None) -> list[tuple[str, str]]:
        return [(s["name"], s["path"]) for s in self.scenes if role is None or s.get("role") == role]


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        raw = json.load(fh)
    man = DatasetManifest(dataset=raw["dataset"], scenes=raw["scenes"], angular=raw.get("angular"))
    base = os.path.dirname(os.path.abspath(path))
    for s in man.scenes:
        if not os.path.isabs(s["path"]):
            s["path"] = os.path.join(base, s["path"])
        if not os.path.exists(s["path"]):
            raise FileNotFoundError(f"manifest entry {s['name']!r}: no such file {s['path']}")
    return man


def _read_image(path) -> np.ndarray:
    """PNG -> float32 (C, H, W) in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise IOError(f"unreadable image {path}: {exc}") from exc
    if img.mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
    else:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def load_scene_from_view_grid(directory, pattern: str = "view_{row:02d}_{col:02d}.png", name: str | None = None) -> SceneRecord:
    """Assemble a scene from per-view image files indexed by (row, col).

    The grid extent is discovered from the file names; every view inside
    the discovered U x V grid must exist and have identical size.
    """
    rx = re.escape(pattern)
    rx = rx.replace(re.escape("{row:02d}"), r"(?P<row>\d+)").replace(re.escape("{col:02d}"), r"(?P<col>\d+)")
    rx = rx.replace(re.escape("{row}"), r"(?P<row>\d+)").replace(re.escape("{col}"), r"(?P<col>\d+)")
    found = {}
    for fname in os.listdir(directory):
        m = re.fullmatch(rx, fname)
        if m:
            found[(int(m.group("row")), int(m.group("col")))] = fname
    if not found:
        raise FileNotFoundError(f"no files matching {pattern!r} in {directory}")
    u = max(r for r, _ in found) + 1
    v = max(c for _, c in found) + 1
    views = []
    shape = None
    for r in range(u):
        for c in range(v):
            if (r, c) not in found:
                raise FileNotFoundError(f"missing view ({r}, {c}) for pattern {pattern!r}")
            arr = _read_image(os.path.join(directory, found[(r, c)]))
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"view ({r}, {c}) has size {arr.shape}, expected {shape}")
            views.append(arr)
    data = np.stack(views)  # (U*V, C, H, W)
    ch, hh, ww = shape
    lf = LightFieldTensor(u, v, ch, hh, ww, Layout.SAI_STACK, data)
    return SceneRecord(name=name or os.path.basename(os.path.normpath(directory)), views_hr=lf, source=str(directory))


def central_crop_views(scene: SceneRecord, a: int) -> SceneRecord:
    """Keep the central a x a views (floor-centered when the margin is odd)."""
    lf = scene.views_hr
    if a > lf.u or a > lf.v:
        raise ValueError(f"cannot crop to {a}x{a} views from {lf.u}x{lf.v}")
    u0 = (lf.u - a) // 2
    v0 = (lf.v - a) // 2
    grid = lf.view_grid()[u0 : u0 + a, v0 : v0 + a]
    out = LightFieldTensor(a, a, lf.c, lf.h, lf.w, Layout.SAI_STACK, np.ascontiguousarray(grid.reshape(a * a, lf.c, lf.h, lf.w)))
    return SceneRecord(scene.name, out, scene.views_lr, scene.scale, scene.source)


def make_lr(scene: SceneRecord, scale: int) -> SceneRecord:
    """Benchmark degradation: center-crop HR to multiples of ``scale``,
    extract the luma plane, bicubic-downscale with antialias."""
    lf = scene.views_hr
    hh = (lf.h // scale) * scale
    ww = (lf.w // scale) * scale
    if hh < scale or ww < scale:
        raise ValueError(f"degenerate extents {lf.h}x{lf.w} for scale {scale}")
    h0 = (lf.h - hh) // 2
    w0 = (lf.w - ww) // 2
    cropped = lf.data[:, :, h0 : h0 + hh, w0 : w0 + ww]
    hr = LightFieldTensor(lf.u, lf.v, lf.c, hh, ww, Layout.SAI_STACK, np.ascontiguousarray(cropped))
    luma = np.stack([rgb_to_y(view) for view in hr.data])  # (U*V, 1, hh, ww)
    lr_data = bicubic_resize(luma, 1.0 / scale, antialias=True).astype(np.float32)
    lr = LightFieldTensor(lf.u, lf.v, 1, hh // scale, ww // scale, Layout.SAI_STACK, lr_data)
    return SceneRecord(scene.name, hr, lr, scale, scene.source)


def luma_views(lf: LightFieldTensor) -> np.ndarray:
    """(U*V, 1, H, W) luma stack from a 1- or 3-channel view stack."""
    if lf.c == 1:
        return lf.data
    return np.stack([rgb_to_y(view) for view in lf.data])


# ---------------------------------------------------------------------------
# container

SCENE_MAGIC = b"LFSC"
SCENE_VERSION = 1


class ContainerError(Exception):
    pass


class ContainerFormatError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerDigestError(ContainerError):
    pass


def write_container(scene: SceneRecord, path) -> None:
    tensors = [("views_hr", scene.views_hr)]
    if scene.views_lr is not None:
        tensors.append(("views_lr", scene.views_lr))
    index = []
    blobs = []
    for key, lf in tensors:
        raw = np.ascontiguousarray(lf.data, dtype="<f4").tobytes()
        index.append(
            {
                "key": key,
                "u": lf.u, "v": lf.v, "c": lf.c, "h": lf.h, "w": lf.w,
                "layout": lf.layout.value,
                "dtype": "float32",
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
    header = json.dumps(
        {"name": scene.name, "scale": scene.scale, "source": scene.source, "tensors": index},
        sort_keys=True,
    ).encode()
    body = SCENE_MAGIC + struct.pack("<HI", SCENE_VERSION, len(header)) + header + b"".join(blobs)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read_container(path) -> SceneRecord:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 42 or raw[:4] != SCENE_MAGIC:
        raise ContainerFormatError(f"{path}: not a scene container (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerDigestError(f"{path}: content digest mismatch (truncated or corrupted)")
    version, hlen = struct.unpack("<HI", body[4:10])
    if version != SCENE_VERSION:
        raise ContainerVersionError(f"{path}: unsupported container version {version}")
    header = json.loads(body[10 : 10 + hlen].decode())

    def build(entry, blob):
        u, v, c, h, w = entry["u"], entry["v"], entry["c"], entry["h"], entry["w"]
        layout = Layout(entry["layout"])
        shape = {
            Layout.SAI_STACK: (u * v, c, h, w),
            Layout.SAIS_MOSAIC: (c, u * h, v * w),
            Layout.MACPI: (c, h * u, w * v),
        }[layout]
        arr = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)
        return LightFieldTensor(u, v, c, h, w, layout, arr)

    offset = 10 + hlen
    fields = {}
    for entry in header["tensors"]:
        n = entry["nbytes"]
        fields[entry["key"]] = build(entry, body[offset : offset + n])
        offset += n
    return SceneRecord(
        header["name"], fields["views_hr"], fields.get("views_lr"),
        header.get("scale"), header.get("source", ""),
    )
