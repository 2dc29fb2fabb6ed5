"""ResNet-50 convolution layer table and the layer CSV format."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .errors import ParseError, ShapeMismatch
from .tensors import DEFAULT_VLEN, ConvLayerSpec

# id, C, K, H, W, R, S, stride
RESNET50 = (
    (1, 3, 64, 224, 224, 7, 7, 2),
    (2, 64, 256, 56, 56, 1, 1, 1),
    (3, 64, 64, 56, 56, 1, 1, 1),
    (4, 64, 64, 56, 56, 3, 3, 1),
    (5, 256, 64, 56, 56, 1, 1, 1),
    (6, 256, 512, 56, 56, 1, 1, 2),
    (7, 256, 128, 56, 56, 1, 1, 2),
    (8, 128, 128, 28, 28, 3, 3, 1),
    (9, 128, 512, 28, 28, 1, 1, 1),
    (10, 512, 128, 28, 28, 1, 1, 1),
    (11, 512, 1024, 28, 28, 1, 1, 2),
    (12, 512, 256, 28, 28, 1, 1, 2),
    (13, 256, 256, 14, 14, 3, 3, 1),
    (14, 256, 1024, 14, 14, 1, 1, 1),
    (15, 1024, 256, 14, 14, 1, 1, 1),
    (16, 1024, 2048, 14, 14, 1, 1, 2),
    (17, 1024, 512, 14, 14, 1, 1, 2),
    (18, 512, 512, 7, 7, 3, 3, 1),
    (19, 512, 2048, 7, 7, 1, 1, 1),
    (20, 2048, 512, 7, 7, 1, 1, 1),
)

REQUIRED_COLUMNS = ("id", "C", "K", "H", "W", "R", "S", "stride")


def resnet50_layer(layer_id: int, N: int = 1, vlen: int = DEFAULT_VLEN) -> ConvLayerSpec:
    row = RESNET50[layer_id - 1]
    _, C, K, H, W, R, S, stride = row
    return ConvLayerSpec(N=N, C=C, K=K, H=H, W=W, R=R, S=S, stride=stride, vlen=vlen, layer_id=layer_id)


def resnet50_layers(N: int = 1, vlen: int = DEFAULT_VLEN) -> list[ConvLayerSpec]:
    return [resnet50_layer(i, N, vlen) for i in range(1, len(RESNET50) + 1)]


def parse_layer_text(text: str, N: int = 1, vlen: int = DEFAULT_VLEN) -> list[ConvLayerSpec]:
    lines = [ln for ln in text.splitlines()]
    if not any(ln.strip() for ln in lines):
        raise ParseError(1, "empty layer file")
    reader = csv.reader(io.StringIO(text))
    header = None
    specs = []
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row) or row[0].lstrip().startswith("#"):
            continue
        cells = [cell.strip() for cell in row]
        if header is None:
            header = cells
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise ParseError(lineno, f"header missing columns {missing}")
            continue
        if len(cells) != len(header):
            raise ParseError(lineno, f"expected {len(header)} fields, got {len(cells)}")
        rec = dict(zip(header, cells))
        try:
            values = {k: int(v) for k, v in rec.items() if v != ""}
        except ValueError as exc:
            raise ParseError(lineno, f"non-integer field: {exc}") from None
        try:
            specs.append(ConvLayerSpec(
                N=N, C=values["C"], K=values["K"], H=values["H"], W=values["W"],
                R=values["R"], S=values["S"], stride=values["stride"],
                pad_h=values.get("pad_h"), pad_w=values.get("pad_w"),
                vlen=vlen, layer_id=values["id"],
            ))
        except (ShapeMismatch, KeyError) as exc:
            raise ParseError(lineno, str(exc)) from None
    if not specs:
        raise ParseError(1, "no layer rows")
    return specs


def parse_layer_file(path: str | Path, N: int = 1, vlen: int = DEFAULT_VLEN) -> list[ConvLayerSpec]:
    """Read a layer CSV (``id,C,K,H,W,R,S,stride[,pad_h,pad_w]``).

    The literal name ``resnet50`` selects the builtin table.
    """
    if str(path) == "resnet50":
        return resnet50_layers(N, vlen)
    return parse_layer_text(Path(path).read_text(), N, vlen)


def layers_to_csv(specs: list[ConvLayerSpec]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([*REQUIRED_COLUMNS, "pad_h", "pad_w"])
    for i, s in enumerate(specs, start=1):
        w.writerow([s.layer_id or i, s.C, s.K, s.H, s.W, s.R, s.S, s.stride, s.pad_h, s.pad_w])
    return out.getvalue()
