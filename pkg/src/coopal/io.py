"""File formats: WAV audio and binary sidecars.

A sidecar is a small self-describing container used to pass statistics,
filters and intermediate signals between pipeline stages::

    magic    8 bytes   b"COOPAL\\x00\\x01"
    hlen     uint32    little-endian length of the JSON header
    header   hlen      UTF-8 JSON: kind, byteorder, arrays[{name, dtype,
                       shape, offset, nbytes}], meta
    padding  to a multiple of 8 bytes
    data     concatenated little-endian array buffers

The byte order and every array shape are stated explicitly in the header so
the file can be read without this package.
"""

import json
import os
import struct
import tempfile

import numpy as np
from scipy.io import wavfile

from .signal import MultichannelSignal

MAGIC = b"COOPAL\x00\x01"


def atomic_write(path, data, mode="wb"):
    """Write ``data`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _le_dtype(arr):
    dt = arr.dtype
    if dt.kind not in "fciub":
        raise TypeError(f"unsupported dtype {dt}")
    return dt.newbyteorder("<")


def write_sidecar(path, kind, arrays, meta=None):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _le_dtype(arr)
        buf = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append(
            {"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
        )
        pad = (-len(buf)) % 8
        blobs.append(buf + b"\x00" * pad)
        offset += len(buf) + pad
    header = {"kind": kind, "byteorder": "little", "arrays": entries, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<I", len(hbytes)) + hbytes
    head += b"\x00" * ((-len(head)) % 8)
    atomic_write(path, head + b"".join(blobs))


def read_sidecar(path, kind=None):
    """Return ``(arrays, meta)`` from a sidecar written by :func:`write_sidecar`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a coopal sidecar")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path}: expected sidecar kind {kind!r}, found {header['kind']!r}")
    start = 12 + hlen
    start += (-start) % 8
    arrays = {}
    for e in header["arrays"]:
        lo = start + e["offset"]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)), offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, header["meta"]


def write_wav(path, signal, fmt="float32"):
    """Write a ``MultichannelSignal`` as PCM16 (``fmt="pcm16"``) or float32 WAV."""
    x = signal.samples.T
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif fmt == "float32":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    directory = os.path.dirname(os.path.abspath(os.fspath(path)))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".wav")
    os.close(fd)
    try:
        wavfile.write(tmp, signal.sample_rate, data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_wav(path):
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    if x.ndim == 1:
        x = x[:, None]
    return MultichannelSignal(x.T, int(sr))
