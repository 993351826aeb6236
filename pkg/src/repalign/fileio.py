"""File formats: feature matrices, configs, reports, images and SVG."""

from __future__ import annotations

import ast
import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FeatureMatrix, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

NPY_MAGIC = b"\x93NUMPY"
NPY_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


# ------------------------------------------------------------------ features


def read_npy(path) -> np.ndarray:
    """Read a 2-D little-endian float32/float64 C-order NPY file (format 1.0 only)."""
    raw = Path(path).read_bytes()
    if raw[:6] != NPY_MAGIC:
        raise ValidationError(f"{path}: not an NPY file (bad magic)")
    if len(raw) < 10:
        raise ValidationError(f"{path}: truncated NPY header")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise ValidationError(f"{path}: unsupported NPY version {major}.{minor}; only 1.0 is accepted")
    (hlen,) = struct.unpack("<H", raw[8:10])
    try:
        header = ast.literal_eval(raw[10 : 10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise ValidationError(f"{path}: unreadable NPY header dict") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise ValidationError(f"{path}: NPY header must have exactly descr, fortran_order, shape")
    descr = header["descr"]
    if descr not in NPY_DTYPES:
        raise ValidationError(f"{path}: unsupported descr {descr!r}; need '<f4' or '<f8'")
    if header["fortran_order"] is not False:
        raise ValidationError(f"{path}: fortran_order must be False (C order)")
    shape = header["shape"]
    if not (isinstance(shape, tuple) and len(shape) == 2 and all(isinstance(s, int) and s >= 0 for s in shape)):
        raise ValidationError(f"{path}: shape {shape!r} is not 2-D")
    dtype = NPY_DTYPES[descr]
    body = raw[10 + hlen :]
    need = shape[0] * shape[1] * dtype.itemsize
    if len(body) != need:
        raise ValidationError(f"{path}: shape {shape} needs {need} data bytes, file has {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(np.float64)


def read_csv_matrix(path) -> np.ndarray:
    """Numeric CSV, one sample per row; a non-numeric first row is taken as a header."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise ValidationError(f"{path}: non-numeric value on line {lineno}") from None
    if not rows:
        raise ValidationError(f"{path}: no numeric rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValidationError(f"{path}: rows have differing lengths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def read_features(path) -> FeatureMatrix:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{path}: no such file")
    suffix = p.suffix.lower()
    if suffix == ".npy":
        data = read_npy(p)
    elif suffix in (".csv", ".txt"):
        data = read_csv_matrix(p)
    else:
        raise ValidationError(f"{path}: unknown feature format {suffix!r}; use .npy or .csv")
    try:
        return FeatureMatrix(data)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def read_layers(path) -> list[FeatureMatrix]:
    """A feature file, or a ``.layers`` manifest listing one layer file per line."""
    p = Path(path)
    if p.suffix == ".layers":
        entries = [ln.strip() for ln in p.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        if not entries:
            raise ValidationError(f"{path}: layer manifest is empty")
        return [read_features(p.parent / e) for e in entries]
    return [read_features(p)]


# -------------------------------------------------------------------- config


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such config file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def check_section(section: str, values: dict, schema: dict) -> dict:
    """Merge ``values`` over the defaults in ``schema``; unknown keys and wrong types are errors."""
    out = dict(schema)
    for key, val in values.items():
        if key not in schema:
            raise ValidationError(f"unknown config key [{section}].{key}; allowed: {', '.join(sorted(schema))}")
        default = schema[key]
        if default is not None and not _type_ok(val, default):
            raise ValidationError(f"config key [{section}].{key} should be {type(default).__name__}, got {val!r}")
        out[key] = val
    return out


def _type_ok(val, default) -> bool:
    if isinstance(default, bool):
        return isinstance(val, bool)
    if isinstance(default, float):
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    return isinstance(val, type(default)) and not (isinstance(val, bool) and not isinstance(default, bool))


# ------------------------------------------------------------------- reports


@dataclass
class Report:
    """Scalar metadata plus a table; the common shape of every command output."""

    kind: str
    meta: dict = field(default_factory=dict)
    columns: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"kind": self.kind, "meta": self.meta, "columns": self.columns, "rows": self.rows}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        d = json.loads(text)
        return cls(d["kind"], d["meta"], d["columns"], d["rows"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# kind: {json.dumps(self.kind)}\n")
        for k in sorted(self.meta):
            buf.write(f"# {k}: {json.dumps(self.meta[k], sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_cell(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Report":
        lines = text.splitlines()
        meta, kind, i = {}, None, 0
        while i < len(lines) and lines[i].startswith("# "):
            key, _, val = lines[i][2:].partition(": ")
            if key == "kind":
                kind = json.loads(val)
            else:
                meta[key] = json.loads(val)
            i += 1
        body = list(csv.reader(lines[i:]))
        columns = body[0] if body else []
        rows = [[_uncell(c) for c in r] for r in body[1:]]
        return cls(kind, meta, columns, rows)

    def render(self, fmt: str) -> str:
        return self.to_json() if fmt == "json" else self.to_csv()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _uncell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def jsonable(x):
    """Plain-Python copy of nested numpy scalars/arrays; NaN becomes None."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) else x
    return x


def write_text(path, text: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        fh.write(text)
    return p


# -------------------------------------------------------------------- images


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_cifar_batch(path) -> list[np.ndarray]:
    """CIFAR-10 binary batch: 1 label byte then 1024 R, 1024 G, 1024 B bytes per record."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % 3073:
        raise ValidationError(f"{path}: size {raw.size} is not a whole number of 3073-byte CIFAR records")
    px = raw.reshape(-1, 3073)[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return list(np.ascontiguousarray(px))


def read_corpus(path) -> list[np.ndarray]:
    """A PNG, a CIFAR-10 ``.bin`` batch, or a directory holding either (sorted by name)."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{path}: corpus not found")
    files = sorted(p.iterdir()) if p.is_dir() else [p]
    images = []
    for f in files:
        suffix = f.suffix.lower()
        if suffix == ".png":
            images.append(read_png(f))
        elif suffix == ".bin":
            images.extend(read_cifar_batch(f))
    if not images:
        raise ValidationError(f"{path}: no .png or CIFAR .bin images found")
    return images


# ----------------------------------------------------------------------- SVG


def svg_scatter(xy, colors, size: int = 480, radius: float = 4.0, title: str = "") -> str:
    """Scatter plot of 2-D points with per-point RGB fill, plus axes."""
    xy = np.asarray(xy, dtype=np.float64)
    pad = 30.0
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    px = pad + (xy - lo) / span * (size - 2 * pad)
    px[:, 1] = size - px[:, 1]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{size / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    for (x, y), c in zip(px, np.asarray(colors)):
        r, g, b = (int(np.clip(round(v), 0, 255)) for v in c)
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{radius}" fill="#{r:02x}{g:02x}{b:02x}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
