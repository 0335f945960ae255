"""Text formats: ESRI ASCII grids and line-oriented ``key = value`` files."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .grid import Grid, LocalFrame

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")


def write_ascii_grid(path, grid: Grid, fmt: str = "%.9g") -> None:
    data = np.asarray(grid.data, dtype=float)
    out = np.where(np.isnan(data), grid.nodata, data)
    buf = io.StringIO()
    buf.write(f"ncols {grid.ncols}\n")
    buf.write(f"nrows {grid.nrows}\n")
    buf.write(f"xllcorner {grid.xll!r}\n")
    buf.write(f"yllcorner {grid.yll!r}\n")
    buf.write(f"cellsize {grid.cellsize!r}\n")
    buf.write(f"NODATA_value {grid.nodata!r}\n")
    np.savetxt(buf, out, fmt=fmt, delimiter=" ")
    Path(path).write_text(buf.getvalue())


def read_ascii_grid(path, frame: LocalFrame | None = None) -> Grid:
    header = {}
    with open(path) as fh:
        for _ in range(len(_HEADER_KEYS)):
            key, value = fh.readline().split()
            header[key.lower()] = float(value)
        data = np.loadtxt(fh, ndmin=2)
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    if data.shape != (nrows, ncols):
        raise ValueError(f"{path}: expected {nrows}x{ncols} values, got {data.shape}")
    nodata = header["nodata_value"]
    data = np.where(data == nodata, np.nan, data)
    return Grid(data, header["xllcorner"], header["yllcorner"], header["cellsize"],
                nodata=nodata, frame=frame)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def write_kv(path, items: dict) -> None:
    """Write a flat ``key = value`` report in insertion order."""
    lines = [f"{k} = {format_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
