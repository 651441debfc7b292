"""Checkpoint persistence for trained heads and calibrators.

Layout (little-endian):
    magic      4 bytes "LTFH"
    version    u32 1
    config     u32 depth, u32 heads, f64 mlp_ratio, f64 dropout,
               u32 dim, u32 num_classes
    params     all head parameters, declaration order, f64
    counts     num_classes x u64 training class counts
    cal tag    u8: 0 none, 1 crt, 2 lws, 3 disalign, 4 marc
    cal params f64, field order

Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .calibrators import (Calibrator, CrtCalibrator, DisAlignCalibrator,
                          LwsCalibrator, MarcCalibrator)
from .decoder import DecoderConfig, DecoderHead, init_decoder
from .exceptions import FormatError
from .losses import ClassStats, stats_from_counts
from .numerics import make_rng

MAGIC = b"LTFH"
VERSION = 1
_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<IIddII")

_CAL_TAGS = {None: 0, "crt": 1, "lws": 2, "disalign": 3, "marc": 4}
_TAG_VARIANTS = {v: k for k, v in _CAL_TAGS.items()}


def _cal_param_arrays(cal: Calibrator) -> list[np.ndarray]:
    return list(cal.param_dict().values())


def save_checkpoint(path, head: DecoderHead, class_counts,
                    calibrator: Calibrator | None = None) -> None:
    counts = np.asarray(class_counts, dtype=np.uint64)
    if counts.shape != (head.config.num_classes,):
        raise FormatError("class counts length must equal num_classes")
    cfg = head.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION))
        fh.write(_CONFIG.pack(cfg.depth, cfg.heads, cfg.mlp_ratio, cfg.dropout,
                              cfg.dim, cfg.num_classes))
        for _, arr in head.param_items():
            fh.write(arr.astype("<f8").tobytes())
        fh.write(counts.astype("<u8").tobytes())
        fh.write(struct.pack("<B", _CAL_TAGS[None if calibrator is None
                                             else calibrator.variant]))
        if calibrator is not None:
            for arr in _cal_param_arrays(calibrator):
                fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, nbytes: int, offset: int, what: str) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"truncated checkpoint: expected {nbytes} bytes of "
                          f"{what} at byte {offset}, got {len(buf)}")
    return buf


def _read_floats(fh, count: int, offset: int, what: str) -> tuple[np.ndarray, int]:
    buf = _read_exact(fh, 8 * count, offset, what)
    return np.frombuffer(buf, dtype="<f8").copy(), offset + 8 * count


def load_checkpoint(path) -> tuple[DecoderHead, ClassStats, Calibrator | None]:
    with open(path, "rb") as fh:
        magic, version = _HEADER.unpack(_read_exact(fh, _HEADER.size, 0, "header"))
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at byte 4")
        offset = _HEADER.size
        depth, heads, mlp_ratio, dropout, dim, num_classes = _CONFIG.unpack(
            _read_exact(fh, _CONFIG.size, offset, "config"))
        offset += _CONFIG.size
        config = DecoderConfig(dim=dim, num_classes=num_classes, depth=depth,
                               heads=heads, mlp_ratio=mlp_ratio, dropout=dropout)
        # Template head pins the parameter shapes; contents are overwritten.
        head = init_decoder(config, make_rng(0))
        for name, arr in head.param_items():
            flat, offset = _read_floats(fh, arr.size, offset, name)
            arr[...] = flat.reshape(arr.shape)
        counts_buf = _read_exact(fh, 8 * num_classes, offset, "class counts")
        offset += 8 * num_classes
        counts = np.frombuffer(counts_buf, dtype="<u8").astype(np.int64)
        tag = _read_exact(fh, 1, offset, "calibrator tag")[0]
        offset += 1
        if tag not in _TAG_VARIANTS:
            raise FormatError(f"unknown calibrator tag {tag} at byte {offset - 1}")
        variant = _TAG_VARIANTS[tag]
        calibrator = None
        if variant is not None:
            k, d = num_classes, dim
            if variant == "crt":
                w, offset = _read_floats(fh, k * d, offset, "crt weight")
                b, offset = _read_floats(fh, k, offset, "crt bias")
                calibrator = CrtCalibrator(weight=w.reshape(k, d), bias=b)
            elif variant == "lws":
                s, offset = _read_floats(fh, k, offset, "lws scales")
                calibrator = LwsCalibrator(scales=s)
            elif variant == "disalign":
                alpha, offset = _read_floats(fh, k, offset, "disalign alpha")
                beta, offset = _read_floats(fh, k, offset, "disalign beta")
                cw, offset = _read_floats(fh, d, offset, "disalign conf weight")
                cb, offset = _read_floats(fh, 1, offset, "disalign conf bias")
                calibrator = DisAlignCalibrator(alpha=alpha, beta=beta,
                                                conf_weight=cw, conf_bias=cb)
            else:
                omega, offset = _read_floats(fh, k, offset, "marc omega")
                beta, offset = _read_floats(fh, k, offset, "marc beta")
                calibrator = MarcCalibrator(omega=omega, beta=beta)
        if fh.read(1):
            raise FormatError(f"trailing bytes after byte {offset}")

    return head, stats_from_counts(counts), calibrator
