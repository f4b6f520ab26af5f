"""Typed metric rows with a fixed schema, emitted as CSV."""

from __future__ import annotations

from .errors import ConfigError


class MetricsRecord:
    """Ordered rows of named real-valued columns.

    The first column (step or epoch) must be non-decreasing and no cell
    may be missing; both are enforced on append.
    """

    def __init__(self, columns: tuple[str, ...]):
        if not columns:
            raise ConfigError("metrics schema needs at least one column")
        self.columns = tuple(columns)
        self.rows: list[tuple[float, ...]] = []

    def append(self, **cells: float) -> None:
        if set(cells) != set(self.columns):
            missing = set(self.columns) - set(cells)
            extra = set(cells) - set(self.columns)
            raise ConfigError(f"schema mismatch: missing={missing} extra={extra}")
        row = tuple(float(cells[c]) for c in self.columns)
        if self.rows and row[0] < self.rows[-1][0]:
            raise ConfigError(f"{self.columns[0]} column must be non-decreasing")
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.columns) + "\r\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\r\n")


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))
