"""Accuracy tables with best / second-best marks per dataset row."""
import csv
import io
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import logger
from errors import FormatError, ShapeError
from evalgrid import QUANTILE_METHOD, RunRecord, check_axes, group_axes, group_key
from storage import atomic_write


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    values: Dict[str, Optional[float]]
    best: FrozenSet[str]
    second: FrozenSet[str]


@dataclass(frozen=True)
class ReportTable:
    methods: Tuple[str, ...]
    rows: Tuple[ReportRow, ...]


def mark_row(values: Mapping[str, Optional[float]]) -> Tuple[FrozenSet[str], FrozenSet[str]]:
    """Methods holding the highest and second-highest value; ties share the higher mark."""
    present = {m: v for m, v in values.items() if v is not None}
    if not present:
        return frozenset(), frozenset()
    top = max(present.values())
    best = frozenset(m for m, v in present.items() if v == top)
    rest = [v for v in present.values() if v < top]
    if not rest:
        return best, frozenset()
    runner_up = max(rest)
    return best, frozenset(m for m, v in present.items() if v == runner_up)


def build_table(rows: Mapping[str, Mapping[str, Optional[float]]],
                methods: Optional[Sequence[str]] = None) -> ReportTable:
    """Rows keyed by dataset; every row must list every method (None for an absent value)."""
    if not rows:
        return ReportTable(tuple(methods or ()), ())
    if methods is None:
        methods = list(next(iter(rows.values())))
    methods = tuple(methods)
    out: List[ReportRow] = []
    for dataset, values in rows.items():
        if set(values) != set(methods):
            raise ShapeError(f"Row '{dataset}' has methods {sorted(values)}, expected {sorted(methods)}")
        ordered = {m: (None if values[m] is None else float(values[m])) for m in methods}
        best, second = mark_row(ordered)
        out.append(ReportRow(dataset, ordered, best, second))
    return ReportTable(methods, tuple(out))


def table_from_records(records: Sequence[RunRecord], scale: float = 100.0,
                       column_by: Union[str, Sequence[str]] = "method") -> ReportTable:
    """Median accuracy (x scale) per dataset and column group; all-diverged cells are absent.

    Columns are methods by default; ``column_by`` takes the same axis names as ``aggregate``.
    """
    axes = group_axes(column_by)
    check_axes(records, axes)
    cells: Dict[str, Dict[str, List[float]]] = {}
    columns = sorted({group_key(r, axes) for r in records})
    for r in records:
        row = cells.setdefault(r.dataset, {c: [] for c in columns})
        if not r.diverged:
            row[group_key(r, axes)].append(r.accuracy)
    rows = {
        dataset: {c: (float(np.quantile(v, 0.5, method=QUANTILE_METHOD)) * scale if v else None)
                  for c, v in values.items()}
        for dataset, values in cells.items()
    }
    logger.info(f"[Report] {len(rows)} datasets x {len(columns)} columns from {len(records)} runs")
    return build_table(rows, columns)


def read_table(path, delimiter: str = ",") -> ReportTable:
    """Delimited file: header 'dataset,<method>...', empty cells are absent values."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [row for row in csv.reader(fh, delimiter=delimiter) if any(cell.strip() for cell in row)]
    if not lines:
        raise ShapeError(f"Empty table '{path}'")
    header, body = lines[0], lines[1:]
    methods = header[1:]
    rows: Dict[str, Dict[str, Optional[float]]] = {}
    for line in body:
        if len(line) != len(header):
            raise ShapeError(f"Row '{line[0]}' has {len(line) - 1} values, expected {len(methods)}")
        try:
            rows[line[0]] = {m: (float(v) if v.strip() else None) for m, v in zip(methods, line[1:])}
        except ValueError as e:
            raise FormatError(f"Row '{line[0]}' in '{path}': {e}") from None
    return build_table(rows, methods)


def _cell(value: Optional[float], precision: int) -> str:
    return "" if value is None else f"{value:.{precision}f}"


def to_delimited(table: ReportTable, delimiter: str = ",", precision: int = 2) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(("dataset",) + table.methods)
    for row in table.rows:
        writer.writerow([row.dataset] + [_cell(row.values[m], precision) for m in table.methods])
    return buf.getvalue()


def to_markdown(table: ReportTable, precision: int = 2) -> str:
    """Best values in bold, second-best in italics, absent values as '-'."""
    lines = [
        "| dataset | " + " | ".join(table.methods) + " |",
        "|---" * (len(table.methods) + 1) + "|",
    ]
    for row in table.rows:
        cells = []
        for m in table.methods:
            text = _cell(row.values[m], precision) or "-"
            if m in row.best:
                text = f"**{text}**"
            elif m in row.second:
                text = f"_{text}_"
            cells.append(text)
        lines.append(f"| {row.dataset} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_report(table: ReportTable, path, delimiter: str = ",", markdown_path=None) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(to_delimited(table, delimiter))
    if markdown_path is not None:
        with atomic_write(markdown_path, "w") as fh:
            fh.write(to_markdown(table))
    logger.info(f"[Report] Wrote {len(table.rows)}-row table to '{path}'")
