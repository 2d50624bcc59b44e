"""Frame ingestion, event overlays, and the binary weight/config containers.

Weight container layout (all integers little-endian)::

    magic      8 bytes   b"EVMLPWT1"
    version    u32       1
    count      u32       number of tensors
    per tensor:
      name_len u16, name (utf-8)
      dtype    u8        1 = float32
      rank     u8
      dims     u32 * rank
      nbytes   u64       payload length, must equal prod(dims) * 4
      payload  row-major little-endian float32
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from evmlp.errors import ConfigError, FrameError, ShapeError, WeightFormatError
from evmlp.model import Network, NetworkConfig, expected_shapes, network_from_params

MAGIC = b"EVMLPWT1"
FORMAT_VERSION = 1
DTYPE_F32 = 1
IMAGE_SUFFIXES = (".png", ".ppm")
DARKEN = 0.3


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Edge-aligned bilinear resize of an ``(H, W, C)`` array.

    Destination index ``i`` samples source coordinate ``i * (src - 1) / (dst - 1)``,
    so corners map onto corners and an identity resize returns the input.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]

    def axis(src: int, dst: int):
        if dst == 1 or src == 1:
            pos = np.zeros(dst)
        else:
            pos = np.arange(dst) * ((src - 1) / (dst - 1))
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, src - 1)
        i1 = np.minimum(i0 + 1, src - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    rows = img[r0] * (1 - fr) + img[r1] * fr
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def decode_image(data: bytes, label: str = "<bytes>") -> np.ndarray:
    """Decode PNG or binary PPM bytes to an ``(H, W, 3)`` float array in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                raw = np.asarray(im, dtype=np.float64)
                scale = 65535.0 if raw.max(initial=0) > 255 or im.mode.startswith("I;16") else 255.0
                gray = raw / scale
                return np.repeat(gray[:, :, None], 3, axis=2)
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FrameError(f"{label}: cannot decode image ({exc})") from exc


def to_network_frame(rgb: np.ndarray, side: int, channels: int = 3) -> np.ndarray:
    """Resize a [0, 1] RGB array to ``side x side`` and match the channel count."""
    if rgb.shape[0] != side or rgb.shape[1] != side:
        rgb = resize_bilinear(rgb, side, side)
    if channels == 1:
        rgb = rgb.mean(axis=2, keepdims=True)
    elif channels != 3:
        raise FrameError(f"unsupported channel count {channels}")
    return rgb.astype(np.float32)


class FrameSource:
    """Common interface: ``len(source)`` frames, each loadable by index."""

    def __init__(self, side: int, channels: int = 3):
        self.side = side
        self.channels = channels

    def __len__(self) -> int:
        raise NotImplementedError

    def raw(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def __getitem__(self, index: int) -> np.ndarray:
        return load_frame(self, index)

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(len(self)):
            yield self[i]


class DirectorySource(FrameSource):
    """PNG/PPM files in a directory, ordered bytewise by filename."""

    def __init__(self, directory: str | Path, side: int, channels: int = 3):
        super().__init__(side, channels)
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FrameError(f"{self.directory}: not a directory")
        self.paths = sorted(
            (p for p in self.directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()),
            key=lambda p: p.name.encode("utf-8", "surrogateescape"),
        )

    def __len__(self) -> int:
        return len(self.paths)

    def raw(self, index: int) -> np.ndarray:
        path = self.paths[index]
        return decode_image(path.read_bytes(), str(path))


class RawStreamSource(FrameSource):
    """Headerless interleaved 8-bit RGB frames of a declared geometry."""

    def __init__(self, path: str | Path, width: int, height: int, side: int, channels: int = 3):
        super().__init__(side, channels)
        self.path = Path(path)
        if width < 1 or height < 1:
            raise FrameError("raw stream geometry must be positive")
        self.width, self.height = width, height
        self.frame_bytes = width * height * 3
        size = self.path.stat().st_size
        if size % self.frame_bytes:
            raise FrameError(
                f"{self.path}: {size} bytes is not a whole number of {width}x{height} RGB frames"
            )
        self.count = size // self.frame_bytes

    def __len__(self) -> int:
        return self.count

    def raw(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise IndexError(index)
        with self.path.open("rb") as fh:
            fh.seek(index * self.frame_bytes)
            buf = fh.read(self.frame_bytes)
        if len(buf) != self.frame_bytes:
            raise FrameError(f"{self.path}: frame {index} is truncated")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(self.height, self.width, 3)
        return arr.astype(np.float64) / 255.0


class ArraySource(FrameSource):
    """In-memory frames, already at network geometry."""

    def __init__(self, frames: list[np.ndarray]):
        first = np.asarray(frames[0]) if frames else np.zeros((1, 1, 3))
        super().__init__(first.shape[0], first.shape[2])
        self.frames = frames

    def __len__(self) -> int:
        return len(self.frames)

    def raw(self, index: int) -> np.ndarray:
        return np.asarray(self.frames[index])

    def __getitem__(self, index: int) -> np.ndarray:
        return np.asarray(self.frames[index], dtype=np.float32)


def load_frame(source: FrameSource, index: int) -> np.ndarray:
    """Decode frame ``index``, scale to [0, 1] and resize to the network side."""
    return to_network_frame(source.raw(index), source.side, source.channels)


# --------------------------------------------------------------------------
# overlays
# --------------------------------------------------------------------------


def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def overlay_image(frame: np.ndarray, event_map: np.ndarray) -> np.ndarray:
    """8-bit RGB array: event patches at full brightness, others scaled by 0.3."""
    frame = np.asarray(frame, dtype=np.float64)
    n = event_map.shape[0]
    h = frame.shape[0]
    if event_map.ndim != 2 or event_map.shape[0] != event_map.shape[1] or n == 0 or h % n:
        raise ShapeError(f"event map {event_map.shape} does not tile a {h}x{frame.shape[1]} frame")
    p = h // n
    bright = np.kron(event_map != 0, np.ones((p, p), dtype=bool))
    scale = np.where(bright, 1.0, DARKEN)[:, :, None]
    return _to_uint8(frame * scale)


def encode_png(rgb8: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb8, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def render_event_overlay(frame: np.ndarray, event_map: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    data = encode_png(overlay_image(frame, event_map))
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise FrameError(f"{path}: cannot write overlay ({exc})") from exc
    return path


def save_png(img: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(_to_uint8(img)))


# --------------------------------------------------------------------------
# weights and configs
# --------------------------------------------------------------------------


def encode_weights(params: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", DTYPE_F32, data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(struct.pack("<Q", data.nbytes))
        out.append(data.tobytes())
    return b"".join(out)


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"truncated container while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8, "magic")) != MAGIC:
        raise WeightFormatError("bad magic: not an EVMLPWT1 container")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if dtype != DTYPE_F32:
            raise WeightFormatError(f"tensor {name}: unknown dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        (nbytes,) = struct.unpack("<Q", take(8, f"{name} payload length"))
        if nbytes != math.prod(dims) * 4:
            raise WeightFormatError(
                f"tensor {name}: payload of {nbytes} bytes does not match dims {list(dims)}"
            )
        if name in tensors:
            raise WeightFormatError(f"duplicate tensor {name}")
        payload = take(nbytes, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after the tensor table")
    return tensors


def save_weights(net: Network, path: str | Path) -> None:
    """Write all parameters as 32-bit floats; 64-bit networks are down-converted."""
    Path(path).write_bytes(encode_weights(net.named_parameters()))


def load_weights(path: str | Path, config: NetworkConfig) -> Network:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"{path}: cannot read ({exc})") from exc
    tensors = decode_weights(blob)
    want = expected_shapes(config)
    for name, shape in want.items():
        if name not in tensors:
            raise WeightFormatError(f"missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise WeightFormatError(
                f"tensor {name} has shape {tuple(tensors[name].shape)}, config expects {shape}"
            )
    extra = sorted(set(tensors) - set(want))
    if extra:
        raise WeightFormatError(f"unexpected tensor {extra[0]}")
    return network_from_params(config, {n: tensors[n] for n in want})


def load_config(path: str | Path) -> NetworkConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return NetworkConfig.from_dict(doc)


def save_config(config: NetworkConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def shipped_config_path(name: str = "evmlp-t1") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.json"

