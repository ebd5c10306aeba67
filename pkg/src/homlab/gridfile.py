"""Binary grid-file format plus CSV and SVG artifact writers.

Grid-file layout (little endian throughout):
    magic   4 bytes  b"HGLB"
    version u16
    d       u8
    m       u8
    N       u32 per dimension (d of them)
    name    u16 byte length + UTF-8 payload
    body    row-major IEEE-754 f64 node values, m fastest, then x, then y

CSV artifacts are RFC-4180 with '.' decimal separator and 17 significant
digits so reruns are byte-identical.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"HGLB"
VERSION = 1


class GridFileError(ValueError):
    pass


@dataclass
class GridField:
    dim: int
    ncomp: int
    shape: tuple
    name: str
    values: np.ndarray  # (*shape_reversed..., actually flat row-major) stored flat


def write_field(path, name: str, dim: int, ncomp: int, npts: tuple, values: np.ndarray):
    """Write nodal values (row-major, component index fastest)."""
    vals = np.ascontiguousarray(np.asarray(values, dtype="<f8").ravel())
    expected = ncomp * int(np.prod(npts))
    if vals.size != expected:
        raise GridFileError(f"value count {vals.size} != m*prod(N) = {expected}")
    raw = bytearray()
    raw += MAGIC
    raw += struct.pack("<HBB", VERSION, dim, ncomp)
    for n in npts:
        raw += struct.pack("<I", int(n))
    nm = name.encode("utf-8")
    raw += struct.pack("<H", len(nm)) + nm
    raw += vals.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(raw))


def read_field(path) -> GridField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise GridFileError("bad magic bytes")
    version, dim, ncomp = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise GridFileError(f"unsupported version {version}")
    off = 8
    npts = []
    for _ in range(dim):
        npts.append(struct.unpack_from("<I", raw, off)[0])
        off += 4
    (nlen,) = struct.unpack_from("<H", raw, off)
    off += 2
    name = raw[off:off + nlen].decode("utf-8")
    off += nlen
    vals = np.frombuffer(raw, dtype="<f8", offset=off).copy()
    expected = ncomp * int(np.prod(npts))
    if vals.size != expected:
        raise GridFileError("truncated grid file")
    return GridField(dim=dim, ncomp=ncomp, shape=tuple(npts), name=name, values=vals)


def format_sig(x) -> str:
    """17-significant-digit decimal rendering used in every CSV cell."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path, header: list, rows: list):
    """RFC-4180 CSV with CRLF line endings and deterministic formatting."""
    def cell(v):
        if isinstance(v, str):
            if any(c in v for c in ',"\r\n'):
                return '"' + v.replace('"', '""') + '"'
            return v
        return format_sig(v)

    lines = [",".join(cell(h) for h in header)]
    for row in rows:
        lines.append(",".join(cell(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")


def write_svg_loglog(path, series: dict, title: str = "", width=640, height=480):
    """Minimal log-log line plot; series maps label -> (x array, y array)."""
    pad = 60
    pts_all = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)
               if x > 0 and y > 0]
    if not pts_all:
        raise GridFileError("nothing positive to plot")
    lx = [np.log10(p[0]) for p in pts_all]
    ly = [np.log10(p[1]) for p in pts_all]
    x0, x1 = min(lx), max(lx)
    y0, y1 = min(ly), max(ly)
    x1 += 1e-9
    y1 += 1e-9

    def sx(v):
        return pad + (np.log10(v) - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (np.log10(v) - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1b6ca8", "#a83232", "#3a8f3a", "#8f6a1a", "#6a3a8f"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="24" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{width-2*pad}" height="{height-2*pad}" '
        'fill="none" stroke="black"/>',
    ]
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = colors[k % len(colors)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                       if x > 0 and y > 0)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            if x > 0 and y > 0:
                parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width-pad+4}" y="{pad+16*(k+1)}" font-size="11" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
