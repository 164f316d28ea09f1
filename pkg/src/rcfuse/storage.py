"""Bit-exact readers and writers for the toolkit's on-disk formats.

=========  =====================================================================
format     layout (all integers little-endian unless stated)
=========  =====================================================================
SFGC       cloud: magic, u32 schema id, u32 fields/point, u32 count, then
           float32 row-major records (16-byte header)
calib      text: ``P: fx fy cx cy w h`` then four ``T: r r r t`` rows of the
           4x4 radar-to-camera matrix
PGM        instance masks: binary P5, maxval 65535, big-endian samples as the
           PGM standard requires; value = instance id, 0 = background
SFGB       BEV tensor: magic, u32 C, H, W, six float64 grid ranges, float32
           channel-major payload
SFGD       dense depth: magic, u32 width, height, float64 row-major
SFGP       pillar tensor: magic, u32 D, P, N_r, six float64 grid ranges, two
           float64 cell sizes, int32 coords (P, 2), int32 counts (P),
           float32 features (D, P, N_r)
SFGW       channel map: magic, u32 out, in, float32 weights (out, in), float32
           bias (out)
=========  =====================================================================

Writers go through a temporary file and an atomic rename, so a failed
write never leaves a partial file behind.
"""
from __future__ import annotations

import os
import re
import struct
import tempfile
from contextlib import contextmanager

import numpy as np

from .errors import (BadMagic, NonRigidRotation, ParseError, ShapeMismatch, TruncatedPayload,
                     UnknownSchema, UnsupportedDepth)
from .geometry import InstanceMask, PinholeCamera, RigidTransform, rotation_error
from .pillars import SCHEMAS_BY_ID, BevGridSpec, BevTensor, ChannelMap, PillarTensor, RadarSchema

CLOUD_MAGIC = b"SFGC"
BEV_MAGIC = b"SFGB"
DEPTH_MAGIC = b"SFGD"
PILLAR_MAGIC = b"SFGP"
WEIGHT_MAGIC = b"SFGW"


@contextmanager
def atomic_open(path, mode="wb"):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if len(buf) < 4 and magic.startswith(buf):
        raise TruncatedPayload(f"{path}: file ends inside the {magic!r} magic")
    if buf[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")


# --- clouds -------------------------------------------------------------------

def write_cloud(path, points, schema: RadarSchema) -> None:
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, schema.n_raw))
    with atomic_open(path) as fh:
        fh.write(CLOUD_MAGIC + struct.pack("<III", schema.schema_id, schema.n_raw, len(pts)))
        fh.write(pts.tobytes())


def read_cloud(path):
    """Returns ``(points float32 (N, F), schema)``."""
    buf = _read_bytes(path)
    _check_magic(buf, CLOUD_MAGIC, path)
    if len(buf) < 16:
        raise TruncatedPayload(f"{path}: header is {len(buf)} bytes, expected 16")
    schema_id, n_fields, count = struct.unpack_from("<III", buf, 4)
    schema = SCHEMAS_BY_ID.get(schema_id)
    if schema is None:
        raise UnknownSchema(f"{path}: unknown schema id {schema_id}")
    if n_fields != schema.n_raw:
        raise UnknownSchema(f"{path}: schema {schema.name} has {schema.n_raw} fields, header says {n_fields}")
    need = count * n_fields * 4
    if len(buf) - 16 < need:
        raise TruncatedPayload(f"{path}: payload has {len(buf) - 16} bytes, {need} needed for {count} points")
    if len(buf) - 16 > need:
        raise ParseError(f"{path}: {len(buf) - 16 - need} trailing bytes after payload")
    pts = np.frombuffer(buf, dtype="<f4", count=count * n_fields, offset=16).reshape(count, n_fields)
    return pts.astype(np.float32), schema


# --- calibration ----------------------------------------------------------------

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def write_calibration(path, cam: PinholeCamera, t_radar_to_cam: RigidTransform) -> None:
    lines = ["P: " + " ".join(repr(float(x)) for x in (cam.fx, cam.fy, cam.cx, cam.cy))
             + f" {int(cam.width)} {int(cam.height)}"]
    for row in t_radar_to_cam.matrix:
        lines.append("T: " + " ".join(repr(float(x)) for x in row))
    with atomic_open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_calibration(path):
    """Returns ``(PinholeCamera, RigidTransform radar->camera)``."""
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        text = fh.read()
    p_vals = None
    t_rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        if not sep or key.strip() not in ("P", "T"):
            raise ParseError(f"{path}:{lineno}: expected 'P:' or 'T:' line")
        toks = rest.split()
        if not all(re.fullmatch(_NUM, t) for t in toks):
            raise ParseError(f"{path}:{lineno}: non-numeric value")
        vals = [float(t) for t in toks]
        if key.strip() == "P":
            if p_vals is not None or len(vals) != 6:
                raise ParseError(f"{path}:{lineno}: P line needs exactly six values and may appear once")
            p_vals = vals
        else:
            if len(vals) != 4:
                raise ParseError(f"{path}:{lineno}: T line needs four values")
            t_rows.append(vals)
    if p_vals is None:
        raise ParseError(f"{path}: missing P line")
    if len(t_rows) != 4:
        raise ParseError(f"{path}: expected four T lines, found {len(t_rows)}")
    m = np.array(t_rows)
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ParseError(f"{path}: last matrix row must be 0 0 0 1")
    if not np.all(np.isfinite(m)) or not all(np.isfinite(p_vals)):
        raise ParseError(f"{path}: non-finite calibration value")
    err = rotation_error(m[:3, :3])
    if err > 1e-6:
        raise NonRigidRotation(f"{path}: rotation block is not a proper rotation (error {err:.3g})")
    fx, fy, cx, cy, w, h = p_vals
    if w != int(w) or h != int(h):
        raise ParseError(f"{path}: image size must be integral")
    try:
        cam = PinholeCamera(fx, fy, cx, cy, int(w), int(h))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return cam, RigidTransform.from_matrix(m)


# --- masks ------------------------------------------------------------------------

def write_masks(path, masks, image_size) -> None:
    w, h = image_size
    img = np.zeros((h, w), dtype=">u2")
    for m in masks:
        if tuple(m.image_size) != (w, h):
            raise ShapeMismatch("mask image size differs from the requested image size")
        if m.instance_id > 65535:
            raise ValueError("instance ids must fit in 16 bits")
        img[m.v, m.u] = m.instance_id
    with atomic_open(path) as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img.tobytes())


def write_label_image(path, labels) -> None:
    labels = np.asarray(labels)
    img = labels.astype(">u2")
    with atomic_open(path) as fh:
        fh.write(f"P5\n{labels.shape[1]} {labels.shape[0]}\n65535\n".encode("ascii"))
        fh.write(img.tobytes())


def _pgm_header(buf: bytes, path):
    """Parse the P5 header; returns ``(width, height, maxval, payload offset)``."""
    if buf[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise ParseError(f"{path}: malformed PGM header")
        tokens.append(int(tok))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError(f"{path}: malformed PGM header")
    w, h, maxval = tokens
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError(f"{path}: invalid PGM dimensions or maxval")
    return w, h, maxval, pos + 1


def read_label_image(path) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, maxval, off = _pgm_header(buf, path)
    if maxval < 256:
        raise UnsupportedDepth(f"{path}: 8-bit PGM (maxval {maxval}); 16-bit required")
    need = w * h * 2
    if len(buf) - off != need:
        raise ParseError(f"{path}: payload has {len(buf) - off} bytes, expected {need}")
    return np.frombuffer(buf, dtype=">u2", offset=off).reshape(h, w).astype(np.uint16)


def read_masks(path) -> list:
    """One :class:`InstanceMask` per distinct non-zero id, ordered by id."""
    labels = read_label_image(path)
    h, w = labels.shape
    out = []
    for inst in np.unique(labels):
        if inst == 0:
            continue
        v, u = np.nonzero(labels == inst)
        out.append(InstanceMask(int(inst), np.stack([u, v], axis=1), (w, h)))
    return out


# --- BEV tensors --------------------------------------------------------------------

def write_bev(path, t: BevTensor) -> None:
    data = np.ascontiguousarray(np.asarray(t.data, dtype="<f4"))
    c, h, w = data.shape
    with atomic_open(path) as fh:
        fh.write(BEV_MAGIC + struct.pack("<III", c, h, w) + struct.pack("<6d", *t.grid.ranges))
        fh.write(data.tobytes())


def read_bev(path) -> BevTensor:
    buf = _read_bytes(path)
    _check_magic(buf, BEV_MAGIC, path)
    if len(buf) < 64:
        raise ShapeMismatch(f"{path}: header truncated")
    c, h, w = struct.unpack_from("<III", buf, 4)
    ranges = struct.unpack_from("<6d", buf, 16)
    need = c * h * w * 4
    if len(buf) - 64 != need:
        raise ShapeMismatch(f"{path}: header claims {c}x{h}x{w} ({need} bytes), payload has {len(buf) - 64}")
    if h == 0 or w == 0:
        raise ShapeMismatch(f"{path}: empty grid")
    try:
        grid = BevGridSpec.from_shape(ranges[0:2], ranges[2:4], ranges[4:6], w, h)
    except ValueError as exc:
        raise ShapeMismatch(f"{path}: {exc}") from None
    if (grid.H, grid.W) != (h, w):
        raise ShapeMismatch(f"{path}: grid ranges do not reproduce {h}x{w} cells")
    data = np.frombuffer(buf, dtype="<f4", offset=64).reshape(c, h, w).astype(np.float32)
    return BevTensor(data, grid)


# --- dense depth ----------------------------------------------------------------

def write_depth(path, depth) -> None:
    d = np.ascontiguousarray(np.asarray(depth, dtype="<f8"))
    h, w = d.shape
    with atomic_open(path) as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h))
        fh.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    buf = _read_bytes(path)
    _check_magic(buf, DEPTH_MAGIC, path)
    if len(buf) < 12:
        raise ShapeMismatch(f"{path}: header truncated")
    w, h = struct.unpack_from("<II", buf, 4)
    if len(buf) - 12 != w * h * 8:
        raise ShapeMismatch(f"{path}: header claims {w}x{h}, payload has {len(buf) - 12} bytes")
    return np.frombuffer(buf, dtype="<f8", offset=12).reshape(h, w).astype(np.float64)


# --- pillar tensors ---------------------------------------------------------------

def write_pillars(path, t: PillarTensor, grid: BevGridSpec) -> None:
    d, p, n = t.features.shape
    with atomic_open(path) as fh:
        fh.write(PILLAR_MAGIC + struct.pack("<III", d, p, n))
        fh.write(struct.pack("<6d", *grid.ranges) + struct.pack("<2d", *grid.cell_size))
        fh.write(np.ascontiguousarray(t.coords, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(t.counts, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(t.features, dtype="<f4").tobytes())


def read_pillars(path):
    """Returns ``(PillarTensor, BevGridSpec)``."""
    buf = _read_bytes(path)
    _check_magic(buf, PILLAR_MAGIC, path)
    head = 16 + 64
    if len(buf) < head:
        raise ShapeMismatch(f"{path}: header truncated")
    d, p, n = struct.unpack_from("<III", buf, 4)
    vals = struct.unpack_from("<8d", buf, 16)
    need = p * 2 * 4 + p * 4 + d * p * n * 4
    if len(buf) - head != need:
        raise ShapeMismatch(f"{path}: header claims D={d} P={p} N={n}, payload size differs")
    try:
        grid = BevGridSpec(vals[0:2], vals[2:4], vals[4:6], vals[6:8])
    except ValueError as exc:
        raise ShapeMismatch(f"{path}: {exc}") from None
    off = head
    coords = np.frombuffer(buf, dtype="<i4", count=2 * p, offset=off).reshape(p, 2).astype(np.int32)
    off += 8 * p
    counts = np.frombuffer(buf, dtype="<i4", count=p, offset=off).astype(np.int32)
    off += 4 * p
    feats = np.frombuffer(buf, dtype="<f4", count=d * p * n, offset=off).reshape(d, p, n).astype(np.float32)
    return PillarTensor(feats, counts, coords), grid


# --- channel-map weights ----------------------------------------------------------

def write_channel_map(path, cmap: ChannelMap) -> None:
    with atomic_open(path) as fh:
        fh.write(WEIGHT_MAGIC + struct.pack("<II", cmap.n_out, cmap.n_in))
        fh.write(np.ascontiguousarray(cmap.weight, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cmap.bias, dtype="<f4").tobytes())


def read_channel_map(path) -> ChannelMap:
    buf = _read_bytes(path)
    _check_magic(buf, WEIGHT_MAGIC, path)
    if len(buf) < 12:
        raise TruncatedPayload(f"{path}: header truncated")
    n_out, n_in = struct.unpack_from("<II", buf, 4)
    need = (n_out * n_in + n_out) * 4
    if len(buf) - 12 < need:
        raise TruncatedPayload(f"{path}: weights need {need} bytes, found {len(buf) - 12}")
    if len(buf) - 12 > need:
        raise ParseError(f"{path}: trailing bytes after bias")
    w = np.frombuffer(buf, dtype="<f4", count=n_out * n_in, offset=12).reshape(n_out, n_in)
    b = np.frombuffer(buf, dtype="<f4", count=n_out, offset=12 + 4 * n_out * n_in)
    return ChannelMap(w.astype(np.float32), b.astype(np.float32))
