"""Volume and tensor file formats, slice extraction and dataset assembly.

Formats:

* ``.rt`` raw tensors: ``b"RT01"``, u8 dtype code (1=f32, 2=f64), u8 rank,
  rank x u32 little-endian extents, then the row-major little-endian payload.
* NIfTI-1 single-file volumes (348-byte header, payload at ``vox_offset``).
* Binary PGM (P5), 8 or 16 bit, for 2-D fixtures.
* Dataset manifests: one JSON record per line with ``id``, ``fold``,
  ``lr`` and ``hr`` paths relative to the manifest.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .resample import SLICE_FACTOR, degrade
from .tensor import Tensor

# ---------------------------------------------------------------------------
# .rt tensors
# ---------------------------------------------------------------------------

RT_MAGIC = b"RT01"
RT_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
RT_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def encode_rt(t) -> bytes:
    arr = np.asarray(getattr(t, "data", t))
    if arr.ndim == 0:
        raise ContractError("rank-0 tensors cannot be stored as .rt")
    if arr.dtype not in RT_CODES:
        raise ContractError(f"unsupported .rt dtype {arr.dtype}")
    code = RT_CODES[arr.dtype]
    head = RT_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=RT_DTYPES[code]).tobytes()


def decode_rt(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode one tensor; returns ``(array, bytes consumed)``."""
    if len(buf) < 6:
        raise ParseError("truncated", ".rt header")
    if buf[:4] != RT_MAGIC:
        raise ParseError("bad magic", repr(bytes(buf[:4])))
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in RT_DTYPES:
        raise ParseError("unsupported datatype", f"code {code}")
    if rank == 0:
        raise ParseError("bad rank", "rank 0")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise ParseError("truncated", ".rt extents")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dtype = RT_DTYPES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(buf) < end + nbytes:
        raise ParseError("truncated", f".rt payload needs {nbytes} bytes, has {len(buf) - end}")
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=end).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), end + nbytes


def write_rt(path, t) -> None:
    Path(path).write_bytes(encode_rt(t))


def read_rt(path) -> Tensor:
    arr, used = decode_rt(Path(path).read_bytes())
    return Tensor(arr)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "c"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "c"), ("xyzt_units", "c"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_NIFTI_FMT = "".join(f for _, f in _NIFTI_FIELDS)
NIFTI_HEADER_SIZE = 348
NIFTI_DATATYPES = {4: np.dtype("i2"), 16: np.dtype("f4"), 64: np.dtype("f8")}
NIFTI_MAGICS = (b"n+1\0", b"ni1\0")


@dataclass
class Nifti1Header:
    fields: dict
    endian: str = "<"

    def __getattr__(self, name):
        try:
            return self.__dict__["fields"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.fields["dim"][1:1 + self.fields["dim"][0]])

    def to_bytes(self, endian: str | None = None) -> bytes:
        values = []
        for name, fmt in _NIFTI_FIELDS:
            v = self.fields[name]
            if fmt[0].isdigit() and not fmt.endswith("s"):
                values.extend(v)
            else:
                values.append(v)
        return struct.pack((endian or self.endian) + _NIFTI_FMT, *values)


@dataclass
class NiftiPayload:
    offset: int
    dtype: np.dtype
    shape: tuple[int, ...]
    slope: float
    inter: float


def _unpack_header(buf: bytes, endian: str) -> Nifti1Header:
    raw = struct.unpack_from(endian + _NIFTI_FMT, buf, 0)
    fields, i = {}, 0
    for name, fmt in _NIFTI_FIELDS:
        if fmt[0].isdigit() and not fmt.endswith("s"):
            n = int(fmt[:-1])
            fields[name] = tuple(raw[i:i + n])
            i += n
        else:
            fields[name] = raw[i]
            i += 1
    return Nifti1Header(fields, endian)


def parse_nifti1(buf: bytes) -> tuple[Nifti1Header, NiftiPayload]:
    """Decode a single-file NIfTI-1 header and describe its payload.

    Byte order is detected from ``sizeof_hdr``.
    """
    if len(buf) < 352:
        raise ParseError("truncated", f"NIfTI-1 needs at least 352 bytes, got {len(buf)}")
    if struct.unpack_from("<i", buf)[0] == NIFTI_HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", buf)[0] == NIFTI_HEADER_SIZE:
        endian = ">"
    else:
        raise ParseError("bad header size", "sizeof_hdr is not 348 in either byte order")
    hdr = _unpack_header(buf, endian)
    if hdr.magic not in NIFTI_MAGICS:
        raise ParseError("bad magic", repr(hdr.magic))
    if hdr.datatype not in NIFTI_DATATYPES:
        raise ParseError("unsupported datatype", str(hdr.datatype))
    if hdr.dim[0] != 3:
        raise ParseError("unsupported rank", f"dim[0] = {hdr.dim[0]}")
    shape = hdr.shape
    if min(shape) < 1:
        raise ParseError("bad dimensions", str(shape))
    dtype = NIFTI_DATATYPES[hdr.datatype].newbyteorder(endian)
    offset = int(hdr.vox_offset)
    if hdr.magic == b"n+1\0":
        need = offset + int(np.prod(shape)) * dtype.itemsize
        if len(buf) < need:
            raise ParseError("truncated", f"payload needs {need} bytes, file has {len(buf)}")
    slope = float(hdr.scl_slope)
    return hdr, NiftiPayload(offset, dtype, shape, slope, float(hdr.scl_inter))


def decode_nifti1(buf: bytes) -> tuple[Nifti1Header, np.ndarray]:
    hdr, pay = parse_nifti1(buf)
    if hdr.magic != b"n+1\0":
        raise ParseError("unsupported layout", "two-file (ni1) NIfTI is not supported")
    count = int(np.prod(pay.shape))
    data = np.frombuffer(buf, dtype=pay.dtype, count=count, offset=pay.offset)
    data = np.ascontiguousarray(data.reshape(pay.shape, order="F"), dtype=np.float64)
    if pay.slope != 0.0:
        data = data * pay.slope + pay.inter
    return hdr, data


def make_nifti1_header(shape: Sequence[int], spacing: Sequence[float], datatype: int = 16,
                       descrip: bytes = b"") -> Nifti1Header:
    if datatype not in NIFTI_DATATYPES:
        raise ContractError(f"unsupported NIfTI datatype {datatype}")
    fields = {}
    for name, fmt in _NIFTI_FIELDS:
        if fmt.endswith("s"):
            fields[name] = b""
        elif fmt[0].isdigit():
            fields[name] = (0.0,) * int(fmt[:-1]) if fmt.endswith("f") else (0,) * int(fmt[:-1])
        elif fmt == "c":
            fields[name] = b"\0"
        else:
            fields[name] = 0.0 if fmt == "f" else 0
    fields.update(
        sizeof_hdr=NIFTI_HEADER_SIZE,
        dim=(3, *map(int, shape), 1, 1, 1, 1),
        datatype=datatype,
        bitpix=NIFTI_DATATYPES[datatype].itemsize * 8,
        pixdim=(1.0, *map(float, spacing), 0.0, 0.0, 0.0, 0.0),
        vox_offset=352.0,
        scl_slope=1.0,
        xyzt_units=b"\x02",
        descrip=descrip,
        magic=b"n+1\0",
    )
    return Nifti1Header(fields)


def encode_nifti1(data: np.ndarray, spacing: Sequence[float], datatype: int = 16,
                  endian: str = "<", descrip: bytes = b"") -> bytes:
    hdr = make_nifti1_header(data.shape, spacing, datatype, descrip)
    dtype = NIFTI_DATATYPES[datatype].newbyteorder(endian)
    payload = np.asarray(data).astype(dtype).tobytes(order="F")
    return hdr.to_bytes(endian) + b"\0\0\0\0" + payload


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ParseError("truncated", "PGM header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM as floats scaled to ``[0, 1]``."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ParseError("bad magic", "expected binary PGM (P5)")
    (magic, w, h, maxval), start = _pgm_tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(buf) - start < need:
        raise ParseError("truncated", "PGM payload")
    img = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return img.astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray, bits: int = 16) -> None:
    """Write ``img`` (values in ``[0, 1]``) as an 8- or 16-bit binary PGM."""
    if bits not in (8, 16):
        raise ContractError("PGM depth must be 8 or 16 bits")
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * maxval)
    h, w = q.shape
    payload = q.astype("u1" if bits == 8 else ">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------

@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ContractError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ContractError(f"volume {self.source_id!r} has non-finite intensities")


def load_nifti(path) -> Volume:
    hdr, data = decode_nifti1(Path(path).read_bytes())
    spacing = tuple(abs(float(s)) or 1.0 for s in hdr.pixdim[1:4])
    return Volume(data, spacing, Path(path).name.split(".")[0])


def save_nifti(path, v: Volume, datatype: int = 16, endian: str = "<") -> None:
    Path(path).write_bytes(encode_nifti1(v.data, v.spacing, datatype, endian))


def load_volume(path) -> Volume:
    """Load a ``.nii`` volume or a rank-3 ``.rt`` tensor (unit spacing)."""
    path = Path(path)
    if path.suffix == ".rt":
        arr = read_rt(path).data
        if arr.ndim != 3:
            raise ContractError(f"{path}: expected a rank-3 tensor, got {arr.shape}")
        return Volume(arr.astype(np.float64), (1.0, 1.0, 1.0), path.stem)
    return load_nifti(path)


def load_image(path) -> np.ndarray:
    """Load a 2-D image from ``.rt`` or ``.pgm``."""
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path)
    arr = read_rt(path).data.astype(np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def normalize_volume(v: Volume) -> Volume:
    """Min-max scale intensities into ``[0, 1]``; constant volumes become zeros."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        data = np.zeros_like(v.data)
    else:
        data = (v.data - lo) / (hi - lo)
    return Volume(data, v.spacing, v.source_id)


def is_blank(img: np.ndarray, threshold: float) -> bool:
    # zero variance tested as max == min; np.var of a constant can round above 0
    hi = float(img.max())
    return hi < threshold or hi == float(img.min())


def extract_sagittal_slices(v: Volume, blank_threshold: float = 0.01,
                            axis: int = 0) -> list[tuple[int, np.ndarray]]:
    """Slices along ``axis`` as ``(index, image)`` pairs, blank ones dropped."""
    out = []
    stack = np.moveaxis(v.data, axis, 0)
    for i in range(stack.shape[0]):
        img = stack[i]
        if not is_blank(img, blank_threshold):
            out.append((i, np.ascontiguousarray(img)))
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SlicePair:
    id: str
    volume_id: str
    fold: int
    lr: np.ndarray
    hr: np.ndarray


@dataclass
class SliceDataset:
    pairs: list[SlicePair] = field(default_factory=list)
    folds: int = 1

    def __len__(self) -> int:
        return len(self.pairs)

    def fold_of(self) -> dict[str, int]:
        return {p.volume_id: p.fold for p in self.pairs}

    def split(self, holdout: int) -> tuple[SliceDataset, SliceDataset]:
        train = [p for p in self.pairs if p.fold != holdout]
        test = [p for p in self.pairs if p.fold == holdout]
        return SliceDataset(train, self.folds), SliceDataset(test, self.folds)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lr = np.stack([p.lr for p in self.pairs])[:, None]
        hr = np.stack([p.hr for p in self.pairs])[:, None]
        return lr, hr


def assign_folds(n_volumes: int, k: int) -> list[int]:
    """Contiguous, near-equal volume-level folds."""
    if k < 1:
        raise ConfigError("fold count must be >= 1")
    if k > n_volumes:
        raise ConfigError(f"cannot split {n_volumes} volumes into {k} folds")
    folds = [0] * n_volumes
    for f, chunk in enumerate(np.array_split(np.arange(n_volumes), k)):
        for i in chunk:
            folds[int(i)] = f
    return folds


def build_dataset(volumes: Sequence[Volume], folds: int = 5, factor: int = SLICE_FACTOR,
                  blank_threshold: float = 0.01, normalize: bool = True) -> SliceDataset:
    """Normalize, slice and degrade volumes into LR/HR pairs with volume-level folds."""
    assignment = assign_folds(len(volumes), folds)
    pairs = []
    for vi, (vol, fold) in enumerate(zip(volumes, assignment)):
        vol = normalize_volume(vol) if normalize else vol
        vid = vol.source_id or f"vol{vi:03d}"
        for idx, hr in extract_sagittal_slices(vol, blank_threshold):
            pairs.append(SlicePair(f"{vid}_s{idx:03d}", vid, fold, degrade(hr, factor), hr))
    return SliceDataset(pairs, folds)


def write_manifest(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: r[k] for k in ("id", "fold", "lr", "hr")}) + "\n")


def read_manifest(path) -> list[dict]:
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append({"id": rec["id"], "fold": int(rec["fold"]),
                            "lr": base / rec["lr"], "hr": base / rec["hr"]})
            except (KeyError, ValueError) as exc:
                raise ParseError("bad manifest record", f"line {n}: {exc}") from None
    return out


def dataset_from_manifest(path) -> SliceDataset:
    recs = read_manifest(path)
    pairs = [SlicePair(r["id"], r["id"].rsplit("_s", 1)[0], r["fold"],
                       load_image(r["lr"]), load_image(r["hr"])) for r in recs]
    folds = 1 + max((p.fold for p in pairs), default=0)
    return SliceDataset(pairs, folds)


def list_volume_files(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        return []
    return sorted(p for p in path.iterdir()
                  if p.is_file() and (p.name.endswith(".nii") or p.suffix == ".rt"))


def relpath(p, start) -> str:
    return os.path.relpath(p, start)
