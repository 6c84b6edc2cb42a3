"""Synthetic multi-focus pairs, binary PGM files and the model checkpoint format."""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass
class FusionPair:
    ground_truth: np.ndarray
    source_a: np.ndarray
    source_b: np.ndarray
    mask: np.ndarray  # 1 where source_a is in focus


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian truncated at 3 sigma, renormalized, reflected borders."""
    k = gaussian_kernel1d(sigma)
    out = ndimage.convolve1d(img.astype(np.float64), k, axis=0, mode="reflect")
    return ndimage.convolve1d(out, k, axis=1, mode="reflect")


def _coverage(sd):
    # signed distance in pixels (negative inside) -> anti-aliased coverage
    return np.clip(0.5 - sd, 0.0, 1.0)


def _draw_shapes(rng, size, n_shapes):
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), rng.uniform(0.1, 0.9))
    for _ in range(n_shapes):
        kind = rng.integers(3)
        ci, cj = rng.uniform(0, size, 2)
        value = rng.uniform(0.0, 1.0)
        if kind == 0:
            r = rng.uniform(size / 12, size / 4)
            sd = np.hypot(ii - ci, jj - cj) - r
        elif kind == 1:
            half = rng.uniform(size / 12, size / 5)
            ang = rng.uniform(0, np.pi / 2)
            u = (ii - ci) * np.cos(ang) + (jj - cj) * np.sin(ang)
            v = -(ii - ci) * np.sin(ang) + (jj - cj) * np.cos(ang)
            sd = np.maximum(np.abs(u), np.abs(v)) - half
        else:
            width = rng.uniform(1.0, 3.0)
            ang = rng.uniform(0, np.pi)
            d = (ii - ci) * np.sin(ang) - (jj - cj) * np.cos(ang)
            sd = np.abs(d) - width / 2
        a = _coverage(sd)
        img = img * (1 - a) + value * a
    return img


def _draw_gradient(rng, size):
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64) / size
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(ang) * ii + np.sin(ang) * jj
    freq = rng.uniform(1.0, 3.0)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * ramp + rng.uniform(0, 2 * np.pi))
    return 0.15 + 0.7 * wave


def _random_mask(rng, size):
    noise = rng.standard_normal((size, size))
    smooth = ndimage.gaussian_filter(noise, sigma=size / 6, mode="wrap")
    return (smooth > np.median(smooth)).astype(np.float64)


def gen_pair(seed: int, size: int = 32, texture: str = "shapes", blur_sigma: float = 2.0,
             mask: np.ndarray | None = None) -> FusionPair:
    """Ground truth plus two complementary partially defocused sources.

    ``source_a`` equals the ground truth where ``mask`` is 1 and its blur
    elsewhere; ``source_b`` the other way round.  Images are ``(size, size)``
    float64 in [0, 1].
    """
    if size % 2:
        raise ValueError(f"size must be even, got {size}")
    if blur_sigma <= 0:
        raise ValueError("blur_sigma must be positive")
    if texture not in ("shapes", "gradients", "mixed"):
        raise ValueError(f"unknown texture {texture!r}")
    rng = np.random.default_rng(seed)
    if texture == "shapes":
        gt = _draw_shapes(rng, size, int(rng.integers(4, 9)))
    elif texture == "gradients":
        gt = _draw_gradient(rng, size)
    else:
        g = _draw_gradient(rng, size)
        s = _draw_shapes(rng, size, int(rng.integers(3, 7)))
        gt = 0.5 * g + 0.5 * s
    gt = np.clip(gt, 0.0, 1.0)
    m = _random_mask(rng, size) if mask is None else np.asarray(mask, dtype=np.float64)
    blurred = gaussian_blur(gt, blur_sigma)
    a = np.where(m > 0.5, gt, blurred)
    b = np.where(m > 0.5, blurred, gt)
    return FusionPair(gt, a, b, m)


def stack_pairs(pairs: list[FusionPair], dtype=np.float32):
    """Batched ``(N, H, W, 1)`` arrays (gt, a, b) from a list of pairs."""
    gt = np.stack([p.ground_truth for p in pairs])[..., None].astype(dtype)
    a = np.stack([p.source_a for p in pairs])[..., None].astype(dtype)
    b = np.stack([p.source_b for p in pairs])[..., None].astype(dtype)
    return gt, a, b


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PGM

class PGMError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _header_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError("truncated header", pos)
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PGMError("unterminated comment in header", pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    return tokens, pos


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM to a float64 ``(H, W)`` array in [0, 1]."""
    tokens, pos = _header_tokens(data, 4)
    (magic, _), (w_tok, w_off), (h_tok, h_off), (mv_tok, mv_off) = tokens
    if magic != b"P5":
        raise PGMError(f"expected magic P5, found {magic[:8]!r}", 0)
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(mv_tok)
    except ValueError:
        raise PGMError("non-numeric header field", min(w_off, h_off, mv_off)) from None
    if width <= 0 or height <= 0:
        raise PGMError(f"bad dimensions {width}x{height}", w_off)
    if not 0 < maxval < 65536:
        raise PGMError(f"maxval {maxval} outside 1..65535", mv_off)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMError("missing whitespace after maxval", pos)
    pos += 1
    depth = 1 if maxval < 256 else 2
    need = width * height * depth
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PGMError(f"truncated payload: need {need} bytes, have {len(payload)}", pos + len(payload))
    dt = np.uint8 if depth == 1 else np.dtype(">u2")
    raw = np.frombuffer(payload, dtype=dt).reshape(height, width)
    return raw.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(img: np.ndarray, maxval: int = 65535, comments: list[str] | tuple = ()) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"PGM holds a single grayscale plane, got shape {img.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    raw = q.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    h, w = img.shape
    head = "P5\n"
    for line in comments:
        if "\n" in line or "\r" in line:
            raise ValueError("PGM comment lines cannot contain newlines")
        head += f"# {line}\n"
    return f"{head}{w} {h}\n{maxval}\n".encode("utf-8") + raw


def write_pgm(path, img: np.ndarray, maxval: int = 65535, comments=()):
    atomic_write_bytes(path, encode_pgm(img, maxval, comments))


def pgm_comments(data: bytes) -> list[str]:
    """Comment lines of a PGM header, without the leading ``#``."""
    _, pos = _header_tokens(data, 4)
    return [line[1:].strip().decode("utf-8", "replace")
            for line in data[:pos].split(b"\n") if line.startswith(b"#")]


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"RDCK" | u32 version | u32 header_len | header (UTF-8 JSON) | u32 n_tensors
#   then per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data

CKPT_MAGIC = b"RDCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape))
            if pos + 4 * n > len(data):
                raise CheckpointError(f"tensor {name!r} truncated")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return header, tensors


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]):
    atomic_write_bytes(path, encode_checkpoint(header, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
