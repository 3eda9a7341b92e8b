"""Readers and writers for the on-disk raster formats.

PFM ("Pf" grayscale, "PF" RGB) stores 32-bit floats with rows ordered
bottom-to-top; a negative scale marks little-endian data. Binary PGM/PPM
(P5/P6, maxval 255) hold 8-bit guidance images and visualizations.
"""

from pathlib import Path

import numpy as np

from .errors import DataError


def _read_token(f):
    token = b""
    while True:
        c = f.read(1)
        if not c:
            if token:
                return token
            raise DataError("unexpected end of file in header")
        if c == b"#" and not token:
            f.readline()
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def _write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def read_pfm(path):
    """Read a PFM file. Returns (H, W) float32 for "Pf" and (H, W, 3) for "PF"."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise DataError(f"{path}: not a PFM file (magic {magic!r})")
        dims = f.readline().split()
        while len(dims) < 2:
            more = f.readline()
            if not more:
                raise DataError(f"{path}: truncated PFM header")
            dims += more.split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(f.read(4 * count), dtype=dtype)
    if data.size != count:
        raise DataError(f"{path}: expected {count} floats, found {data.size}")
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(path, image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[2] != 3:
        image = np.moveaxis(image, 0, -1)
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataError(f"cannot store array of shape {image.shape} as PFM")
    height, width = image.shape[:2]
    header = magic + b"\n" + f"{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(np.flipud(image)).astype("<f4").tobytes()
    _write(path, header + body)


def read_pnm(path):
    """Read binary PGM (P5) or PPM (P6). Returns uint8 (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic not in (b"P5", b"P6"):
            raise DataError(f"{path}: unsupported PNM magic {magic!r}")
        width = int(_read_token(f))
        height = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval > 255:
            raise DataError(f"{path}: 16-bit PNM is not supported")
        channels = 3 if magic == b"P6" else 1
        data = np.frombuffer(f.read(width * height * channels), dtype=np.uint8)
    if data.size != width * height * channels:
        raise DataError(f"{path}: truncated PNM data")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).copy()


def write_pnm(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot store array of shape {image.shape} as PNM")
    height, width = image.shape[:2]
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    _write(path, header + np.ascontiguousarray(image).tobytes())


def read_image(path):
    """Read any supported raster as float32. 8-bit images are scaled to [0, 1]."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path).astype(np.float32) / 255.0
    raise DataError(f"{path}: unknown raster extension {suffix!r}")


def to_chw(image):
    """(H, W) -> (1, H, W); (H, W, 3) -> (3, H, W)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return image[None]
    return np.ascontiguousarray(np.moveaxis(image, -1, 0))
