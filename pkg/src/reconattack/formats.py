"""On-disk formats: ``.rff`` RF frames, binary PGM images, atomic writes."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .rfcore import BModeImage, ConvexGeometry, RfFrame

RFF_KEYS = ("n_lines", "n_samples", "fs_hz", "f0_mhz", "c_mps", "radius_m",
            "angular_span_rad", "depth_offset_m", "label")


def atomic_write_bytes(path, data: bytes):
    """Write ``data`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def rff_bytes(frame: RfFrame) -> bytes:
    g = frame.geometry
    header = {
        "n_lines": frame.n_lines,
        "n_samples": frame.n_samples,
        "fs_hz": float(frame.fs),
        "f0_mhz": float(frame.f0),
        "c_mps": float(frame.c),
        "radius_m": float(g.radius),
        "angular_span_rad": float(g.angular_span),
        "depth_offset_m": float(g.depth_offset),
        "label": frame.label,
    }
    body = np.ascontiguousarray(frame.samples, dtype="<f4").tobytes()
    return json.dumps(header).encode("ascii") + b"\n" + body


def write_rff(path, frame: RfFrame):
    atomic_write_bytes(path, rff_bytes(frame))


def parse_rff(data: bytes) -> RfFrame:
    nl = data.find(b"\n")
    if nl < 0:
        raise InvalidInputError("rff: missing header terminator")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"rff: malformed header ({e})") from None
    if not isinstance(header, dict):
        raise InvalidInputError("rff: header is not a JSON object")
    missing = [k for k in RFF_KEYS if k not in header]
    if missing:
        raise InvalidInputError(f"rff: header missing keys {missing}")
    try:
        n_lines, n_samples = int(header["n_lines"]), int(header["n_samples"])
    except (TypeError, ValueError):
        raise InvalidInputError("rff: n_lines/n_samples must be integers") from None
    if n_lines <= 0 or n_samples <= 0:
        raise InvalidInputError("rff: n_lines/n_samples must be positive")
    body = data[nl + 1:]
    expected = n_lines * n_samples * 4
    if len(body) != expected:
        raise InvalidInputError(f"rff: expected {expected} payload bytes, got {len(body)}")
    samples = np.frombuffer(body, dtype="<f4").reshape(n_lines, n_samples)
    try:
        geometry = ConvexGeometry(float(header["radius_m"]),
                                  float(header["angular_span_rad"]),
                                  float(header["depth_offset_m"]))
        return RfFrame(samples.astype(np.float64), float(header["fs_hz"]),
                       float(header["f0_mhz"]), float(header["c_mps"]),
                       geometry, header["label"])
    except (TypeError, ValueError) as e:
        raise InvalidInputError(f"rff: invalid header values ({e})") from None


def read_rff(path) -> RfFrame:
    return parse_rff(Path(path).read_bytes())


def pgm_bytes(pixels) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise InvalidInputError("PGM needs a 2-D image")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def write_pgm(path, img):
    pixels = img.pixels if isinstance(img, BModeImage) else img
    atomic_write_bytes(path, pgm_bytes(pixels))


def parse_pgm(data: bytes) -> np.ndarray:
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError("PGM: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise InvalidInputError(f"PGM: unsupported magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidInputError(f"PGM: only maxval 255 supported, got {maxval}")
    pos += 1
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise InvalidInputError("PGM: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def write_png(path, img):
    """Optional PNG export; needs Pillow."""
    from PIL import Image

    pixels = img.pixels if isinstance(img, BModeImage) else np.asarray(img)
    Image.fromarray(pixels.astype(np.uint8), mode="L").save(path)


def abs_diff(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.int16)
    b = np.asarray(b, dtype=np.int16)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return np.clip(np.abs(a - b), 0, 255).astype(np.uint8)


class ManifestEntry(NamedTuple):
    path: Path
    label: int


def write_manifest(path, entries):
    """CSV with header ``path,label``; paths are stored relative to the manifest."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label"])
    for e in entries:
        p = Path(e.path)
        try:
            p = p.resolve().relative_to(path.parent.resolve())
        except ValueError:
            pass
        w.writerow([p.as_posix(), int(e.label)])
    atomic_write_text(path, buf.getvalue())


def read_manifest(path):
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise InvalidInputError(f"{path}: manifest needs a 'path,label' header")
        entries = []
        for row in reader:
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise InvalidInputError(f"{path}: bad label {row['label']!r}") from None
            if label not in (0, 1):
                raise InvalidInputError(f"{path}: label must be 0 or 1, got {label}")
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            entries.append(ManifestEntry(p, label))
    return entries
