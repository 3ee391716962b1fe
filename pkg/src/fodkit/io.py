"""Volume files, gradient tables and strict JSON configs.

Native volume layout (all little endian)::

    bytes 0-7    magic b"FODKITV1"
    bytes 8-15   uint64 header length H
    next H       UTF-8 JSON header: dims [X, Y, Z], channels, dtype ("<f4"|"<f8"),
                 voxel_size [dx, dy, dz], affine (4x4 row-major)
    rest         payload, C order (x slowest, channel fastest)

NIfTI-1 support covers single-file ``.nii`` (optionally gzip-compressed)
with float32 or float64 data, up to four dimensions, identity scaling and
the sform affine (falling back to pixdim scaling).
"""
import dataclasses
import gzip
import json
import struct
import typing
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, MalformedHeaderError, ParseError, TruncatedPayloadError,
                     UnsupportedDatatypeError, UnsupportedFeatureError, VolumeFormatError)
from .sphere_sh import B0_THRESHOLD, GradientTable

NATIVE_MAGIC = b"FODKITV1"
_NATIVE_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_NIFTI_DTYPES = {16: np.float32, 64: np.float64}
_NIFTI_HDR = 348


@dataclass
class VolumeFile:
    """Image data ``(X, Y, Z[, C])`` with its spatial metadata."""
    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise VolumeFormatError("volume data must be 3-D or 4-D")
        if self.data.dtype not in (np.float32, np.float64):
            raise UnsupportedDatatypeError(f"unsupported dtype {self.data.dtype}")
        vs = np.broadcast_to(np.asarray(self.voxel_size, float), (3,))
        self.voxel_size = tuple(float(v) for v in vs)
        if self.affine is None:
            self.affine = np.diag([*self.voxel_size, 1.0])
        self.affine = np.asarray(self.affine, float).reshape(4, 4)

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def channels(self):
        return 1 if self.data.ndim == 3 else self.data.shape[3]


# --------------------------------------------------------------------------
# native format


def volume_to_bytes(vol):
    dt = vol.data.dtype.newbyteorder("<")
    header = {
        "dims": list(vol.dims),
        "channels": vol.channels,
        "ndim": vol.data.ndim,
        "dtype": dt.str,
        "voxel_size": list(vol.voxel_size),
        "affine": vol.affine.reshape(-1).tolist(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(vol.data, dtype=dt).tobytes()
    return NATIVE_MAGIC + struct.pack("<Q", len(hb)) + hb + payload


def volume_from_bytes(buf):
    if len(buf) < 16 or buf[:8] != NATIVE_MAGIC:
        raise MalformedHeaderError("missing native volume magic")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise MalformedHeaderError("header length exceeds file size")
    try:
        h = json.loads(buf[16:16 + hlen].decode("utf-8"))
        dims = [int(d) for d in h["dims"]]
        channels = int(h["channels"])
        ndim = int(h.get("ndim", 4))
        dtype = h["dtype"]
        voxel_size = [float(v) for v in h["voxel_size"]]
        affine = np.asarray(h["affine"], float).reshape(4, 4)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"bad native header: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or channels < 1 or ndim not in (3, 4) \
            or (ndim == 3 and channels != 1) or len(voxel_size) != 3:
        raise MalformedHeaderError("inconsistent native header geometry")
    if dtype not in _NATIVE_DTYPES:
        raise UnsupportedDatatypeError(f"unsupported dtype {dtype!r}")
    dt = _NATIVE_DTYPES[dtype]
    n = int(np.prod(dims, dtype=object)) * channels
    payload = buf[16 + hlen:]
    if len(payload) != n * dt.itemsize:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {n * dt.itemsize}")
    data = np.frombuffer(payload, dtype=dt).reshape(dims + ([channels] if ndim == 4 else []))
    return VolumeFile(data.copy(), tuple(voxel_size), affine)


# --------------------------------------------------------------------------
# NIfTI-1 subset


def nifti_to_bytes(vol):
    data = vol.data
    dt_code = 16 if data.dtype == np.float32 else 64
    hdr = bytearray(_NIFTI_HDR)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR)
    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, dt_code, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.voxel_size, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2 | 8  # xyzt_units: mm, s
    struct.pack_into("<hh", hdr, 252, 0, 1)
    for r in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * r, *vol.affine[r])
    hdr[344:348] = b"n+1\0"
    # NIfTI stores x fastest
    payload = data.astype(data.dtype.newbyteorder("<"), copy=False)
    return bytes(hdr) + b"\0\0\0\0" + payload.tobytes(order="F")


def nifti_from_bytes(buf):
    if buf[:2] == b"\x1f\x8b":
        try:
            buf = gzip.decompress(buf)
        except (OSError, EOFError) as exc:
            raise MalformedHeaderError(f"corrupt gzip stream: {exc}") from exc
    if len(buf) < _NIFTI_HDR:
        raise MalformedHeaderError("file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", buf, 0)[0] == _NIFTI_HDR:
        e = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == _NIFTI_HDR:
        e = ">"
    else:
        raise MalformedHeaderError("sizeof_hdr is not 348")
    magic = bytes(buf[344:348])
    if magic == b"ni1\0":
        raise UnsupportedFeatureError("two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\0":
        raise MalformedHeaderError(f"bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(e + "8h", buf, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise MalformedHeaderError(f"dim[0]={ndim} out of range")
    shape = list(dim[1:1 + ndim])
    if min(shape) < 1:
        raise MalformedHeaderError(f"non-positive dimension in {shape}")
    if ndim > 4:
        raise UnsupportedFeatureError(f"{ndim}-D images are not supported")
    shape += [1] * (3 - len(shape))
    dt_code, bitpix = struct.unpack_from(e + "hh", buf, 70)
    if dt_code not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype {dt_code} is not supported")
    dt = np.dtype(_NIFTI_DTYPES[dt_code]).newbyteorder(e)
    if bitpix != dt.itemsize * 8:
        raise MalformedHeaderError(f"bitpix {bitpix} does not match datatype {dt_code}")
    pixdim = struct.unpack_from(e + "8f", buf, 76)
    (vox_offset,) = struct.unpack_from(e + "f", buf, 108)
    if not np.isfinite(vox_offset) or vox_offset < 352 or vox_offset != int(vox_offset):
        raise MalformedHeaderError(f"invalid vox_offset {vox_offset}")
    slope, inter = struct.unpack_from(e + "ff", buf, 112)
    if not ((slope in (0.0, 1.0)) and inter == 0.0):
        raise UnsupportedFeatureError("intensity scaling is not supported")
    qform_code, sform_code = struct.unpack_from(e + "hh", buf, 252)
    vs = [abs(float(p)) for p in pixdim[1:4]]
    if not all(np.isfinite(vs)):
        raise MalformedHeaderError("non-finite pixdim")
    vs = [v if v > 0 else 1.0 for v in vs]
    if sform_code > 0:
        rows = [struct.unpack_from(e + "4f", buf, 280 + 16 * r) for r in range(3)]
        affine = np.vstack([np.asarray(rows, float), [0, 0, 0, 1]])
        if not np.all(np.isfinite(affine)):
            raise MalformedHeaderError("non-finite sform")
    else:
        affine = np.diag([*vs, 1.0])
    n = int(np.prod(shape, dtype=object))
    start = int(vox_offset)
    need = n * dt.itemsize
    if len(buf) - start < need:
        raise TruncatedPayloadError(f"payload has {max(len(buf) - start, 0)} bytes, expected {need}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(shape, order="F")
    data = arr.astype(dt.newbyteorder("="))
    return VolumeFile(data, tuple(vs), affine)


# --------------------------------------------------------------------------
# path dispatch


def _is_nifti(path):
    p = str(path).lower()
    return p.endswith(".nii") or p.endswith(".nii.gz")


def write_volume(path, vol):
    if not isinstance(vol, VolumeFile):
        vol = VolumeFile(vol)
    if _is_nifti(path):
        buf = nifti_to_bytes(vol)
        if str(path).lower().endswith(".gz"):
            buf = gzip.compress(buf, mtime=0)
    else:
        buf = volume_to_bytes(vol)
    with open(path, "wb") as fh:
        fh.write(buf)


def read_volume(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if _is_nifti(path):
        return nifti_from_bytes(buf)
    return volume_from_bytes(buf)


# --------------------------------------------------------------------------
# gradient tables (FSL bvals / bvecs)


def _parse_matrix(text, name):
    rows = []
    for li, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        row = []
        col = 0
        for tok in line.split():
            col = line.index(tok, col) + 1
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"{name}: non-numeric token {tok!r} at line {li}, column {col}")
            if not np.isfinite(v):
                raise ParseError(f"{name}: non-finite value at line {li}, column {col}")
            row.append(v)
            col += len(tok) - 1
        rows.append((li, row))
    return rows


def parse_gradients(bvals_text, bvecs_text):
    """Build a table from FSL-style text (one bvals row, three bvecs rows)."""
    bv_rows = _parse_matrix(bvals_text, "bvals")
    if not bv_rows:
        raise ParseError("bvals: file is empty")
    bvals = [v for _, row in bv_rows for v in row]
    vec_rows = _parse_matrix(bvecs_text, "bvecs")
    if len(vec_rows) == 3:
        for li, row in vec_rows:
            if len(row) != len(bvals):
                raise ParseError(f"bvecs: line {li} has {len(row)} columns, bvals has {len(bvals)}")
        vecs = np.array([row for _, row in vec_rows]).T
    elif len(vec_rows) == len(bvals) and all(len(r) == 3 for _, r in vec_rows):
        vecs = np.array([row for _, row in vec_rows])
    else:
        raise ParseError(f"bvecs: expected 3 rows of {len(bvals)} columns")
    bvals = np.array(bvals)
    if np.any(bvals < 0):
        raise ParseError(f"bvals: negative b-value at column {int(np.argmax(bvals < 0)) + 1}")
    norms = np.linalg.norm(vecs, axis=1)
    dw = bvals >= B0_THRESHOLD
    if np.any(dw & (norms == 0)):
        col = int(np.argmax(dw & (norms == 0))) + 1
        raise ParseError(f"bvecs: zero direction for a diffusion-weighted entry at column {col}")
    off = dw & (np.abs(norms - 1.0) > 1e-3)
    if off.any():
        warnings.warn(f"{int(off.sum())} gradient directions renormalized", stacklevel=2)
    vecs = vecs.copy()
    vecs[dw] /= norms[dw, None]
    return GradientTable(bvals, vecs)


def read_gradients(bvals_path, bvecs_path):
    with open(bvals_path) as fb, open(bvecs_path) as fv:
        return parse_gradients(fb.read(), fv.read())


def write_gradients(bvals_path, bvecs_path, table):
    with open(bvals_path, "w") as fb:
        fb.write(" ".join(f"{b:g}" for b in table.bvals) + "\n")
    with open(bvecs_path, "w") as fv:
        for c in range(3):
            fv.write(" ".join(repr(float(v)) for v in table.bvecs[:, c]) + "\n")


# --------------------------------------------------------------------------
# strict JSON configs


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_config(tp, value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        out = [_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    return value


def from_config(cls, obj, where="config"):
    """Instantiate dataclass ``cls`` from a JSON object; unknown keys are fatal."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {k: _coerce(v, hints.get(k, typing.Any), f"{where}.{k}") for k, v in obj.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc


def dump_json(obj, path=None):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj
