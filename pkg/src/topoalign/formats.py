"""File formats: emission matrices (text and ``EMAT1`` binary), prior/ILM tables,
``ALIGN1`` alignments, CTM word boundaries and flat key=value configs."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .align_eval import FrameAlignment, word_boundaries
from .dp_kernel import EmissionMatrix
from .errors import FormatError
from .models import IlmTable, PriorTable

BINARY_MAGIC = b"EMAT1"
_BIN_HEADER = struct.Struct("<IIfB")
TABLE_TAGS = ("PRIOR2D", "ILM1D", "ILM2D")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_emissions_text(em: EmissionMatrix, out: TextIO, tag: str | None = None):
    T, L = em.scores.shape
    if tag is not None:
        out.write(tag + "\n")
    out.write(f"{T} {L} {_fmt(em.frame_shift_ms)} {int(em.normalized)}\n")
    for row in em.scores:
        out.write(" ".join(_fmt(v) for v in row) + "\n")


def _read_matrix_text(lines: list, start_line: int):
    if not lines:
        raise FormatError("missing header", start_line)
    head = lines[0].split()
    if len(head) != 4:
        raise FormatError("header must be 'T L frame_shift_ms normalized'", start_line)
    try:
        T, L = int(head[0]), int(head[1])
        shift = float(head[2])
        norm = head[3]
    except ValueError:
        raise FormatError("bad header values", start_line) from None
    if norm not in ("0", "1"):
        raise FormatError("normalized flag must be 0 or 1", start_line)
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != T:
        raise FormatError(f"header declares {T} rows, found {len(rows)}")
    data = np.empty((T, L))
    for t, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != L:
            raise FormatError(f"row {t} has {len(vals)} values, expected {L}", start_line + 1 + t)
        try:
            data[t] = [float(v) for v in vals]
        except ValueError:
            raise FormatError(f"non-numeric value in row {t}", start_line + 1 + t) from None
    return data, shift, norm == "1"


def read_emissions_text(source: TextIO) -> EmissionMatrix:
    lines = [ln for ln in source.read().splitlines() if ln.strip()]
    if lines and lines[0].strip() in TABLE_TAGS:
        raise FormatError(f"{lines[0].strip()} table is not an emission matrix", 1)
    data, shift, norm = _read_matrix_text(lines, 1)
    return EmissionMatrix(data, shift, norm)


def write_emissions_binary(em: EmissionMatrix, out):
    T, L = em.scores.shape
    out.write(BINARY_MAGIC)
    out.write(_BIN_HEADER.pack(T, L, em.frame_shift_ms, int(em.normalized)))
    out.write(np.ascontiguousarray(em.scores, dtype="<f4").tobytes())


def read_emissions_binary(source) -> EmissionMatrix:
    magic = source.read(len(BINARY_MAGIC))
    if magic != BINARY_MAGIC:
        raise FormatError("not an EMAT1 file")
    head = source.read(_BIN_HEADER.size)
    if len(head) != _BIN_HEADER.size:
        raise FormatError("truncated EMAT1 header")
    T, L, shift, norm = _BIN_HEADER.unpack(head)
    payload = source.read(4 * T * L)
    if len(payload) != 4 * T * L:
        raise FormatError("truncated EMAT1 payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, L).astype(np.float64)
    return EmissionMatrix(data, float(shift), bool(norm))


def save_emissions(em: EmissionMatrix, path):
    path = Path(path)
    if path.suffix in (".bin", ".emat"):
        with open(path, "wb") as f:
            write_emissions_binary(em, f)
    else:
        with open(path, "w", encoding="utf-8") as f:
            write_emissions_text(em, f)


def load_emissions(path) -> EmissionMatrix:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        with open(path, "rb") as f:
            return read_emissions_binary(f)
    with open(path, encoding="utf-8") as f:
        return read_emissions_text(f)


def write_table(table, out: TextIO):
    if isinstance(table, PriorTable):
        tag, data = "PRIOR2D", table.diphone_logprior
        norm = 0
    elif isinstance(table, IlmTable) and table.first_order is not None:
        tag, data, norm = "ILM2D", table.first_order, 1
    elif isinstance(table, IlmTable) and table.zero_order is not None:
        tag, data, norm = "ILM1D", table.zero_order[None, :], 1
    else:
        raise TypeError(f"cannot serialize {type(table).__name__}")
    out.write(tag + "\n")
    out.write(f"{data.shape[0]} {data.shape[1]} 0.0 {norm}\n")
    for row in data:
        out.write(" ".join(_fmt(v) for v in row) + "\n")


def read_table(source: TextIO):
    lines = [ln for ln in source.read().splitlines() if ln.strip()]
    if not lines or lines[0].strip() not in TABLE_TAGS:
        raise FormatError(f"expected one of {', '.join(TABLE_TAGS)}", 1)
    tag = lines[0].strip()
    data, _, _ = _read_matrix_text(lines[1:], 2)
    if tag == "PRIOR2D":
        return PriorTable(data)
    if tag == "ILM1D":
        if data.shape[0] != 1:
            raise FormatError("ILM1D must have exactly one row")
        return IlmTable(zero_order=data[0])
    return IlmTable(first_order=data)


def write_alignments(alignments: Iterable[FrameAlignment], out: TextIO):
    for a in alignments:
        out.write(f"ALIGN1 {a.utt_id} {a.num_frames} {_fmt(a.frame_shift_ms)}\n")
        for lab in a.labels.tolist():
            out.write(f"{lab}\n")
        out.write(" ".join(["WORDS", *a.words]) + "\n")


def read_alignments(source: TextIO | Iterable[str], inventory=None) -> list:
    out = []
    lines = list(enumerate(source, start=1))
    i = 0
    while i < len(lines):
        lineno, raw = lines[i]
        fields = raw.split()
        i += 1
        if not fields:
            continue
        if fields[0] != "ALIGN1" or len(fields) != 4:
            raise FormatError("expected 'ALIGN1 <utt-id> <T> <frame_shift_ms>'", lineno)
        utt = fields[1]
        try:
            T, shift = int(fields[2]), float(fields[3])
        except ValueError:
            raise FormatError("bad ALIGN1 header values", lineno) from None
        if i + T >= len(lines) + 1:
            raise FormatError(f"utterance {utt} is truncated", lineno)
        labels = []
        for lineno, raw in lines[i:i + T]:
            try:
                labels.append(int(raw.strip()))
            except ValueError:
                raise FormatError(f"bad label id {raw.strip()!r}", lineno) from None
        i += T
        if i >= len(lines):
            raise FormatError(f"utterance {utt} has no WORDS line")
        lineno, raw = lines[i]
        wf = raw.split()
        if not wf or wf[0] != "WORDS":
            raise FormatError("expected WORDS line", lineno)
        i += 1
        out.append(FrameAlignment(utt, np.array(labels), shift, inventory, tuple(wf[1:])))
    return out


def write_ctm(alignments: Iterable[FrameAlignment], out: TextIO, channel: str = "1",
              ctc_word_end: str = "peak"):
    for a in alignments:
        for b in word_boundaries(a, ctc_word_end):
            dur = (b.end_ms - b.start_ms + a.frame_shift_ms) / 1000.0
            out.write(f"{a.utt_id} {channel} {b.start_ms / 1000.0:.3f} {dur:.3f} {b.word}\n")


def write_key_values(config: dict, out: TextIO):
    for key, value in config.items():
        out.write(f"{key}={value}\n")


def read_key_values(source: TextIO | Iterable[str]) -> dict:
    out = {}
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"expected key=value, got {line!r}", lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def emissions_to_bytes(em: EmissionMatrix) -> bytes:
    buf = io.BytesIO()
    write_emissions_binary(em, buf)
    return buf.getvalue()
