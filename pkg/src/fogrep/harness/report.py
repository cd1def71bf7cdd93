"""Deterministic rendering of statistics tables and scenario reports."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import IoFailure
from .measure import ROWS, Stats, StatsTable


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def render_markdown(table: StatsTable) -> str:
    if not table.columns:
        raise IoFailure(f"table {table.title!r} has no columns")
    names = list(table.columns)
    lines = [
        f"### {table.title} (ms)",
        "",
        "| | " + " | ".join(names) + " |",
        "|---|" + "---:|" * len(names),
    ]
    for row in ROWS:
        lines.append(f"| {row} | " + " | ".join(_fmt(table.columns[n].row(row)) for n in names) + " |")
    return "\n".join(lines) + "\n"


def render_tsv(table: StatsTable) -> str:
    if not table.columns:
        raise IoFailure(f"table {table.title!r} has no columns")
    names = list(table.columns)
    lines = [f"# {table.title}", "\t".join(["stat", *names])]
    for row in ROWS:
        lines.append("\t".join([row, *(repr(table.columns[n].row(row)) for n in names)]))
    lines.append("\t".join(["n", *(str(table.columns[n].n) for n in names)]))
    return "\n".join(lines) + "\n"


def parse_tsv(text: str) -> list[StatsTable]:
    tables = []
    blocks = [b for b in text.strip().split("\n\n") if b.strip()]
    for block in blocks:
        lines = block.splitlines()
        title = lines[0][2:]
        names = lines[1].split("\t")[1:]
        values = {ln.split("\t")[0]: ln.split("\t")[1:] for ln in lines[2:]}
        cols = {}
        for i, name in enumerate(names):
            v = {row: float(values[row][i]) for row in ROWS}
            cols[name] = Stats(v["Min"], v["Max"], v["Avg"], v["Std Dev"], v["Q0.95"], v["Q0.99"],
                               int(values["n"][i]))
        tables.append(StatsTable(title, cols))
    return tables


@dataclass
class ScenarioReport:
    name: str
    seed: int
    checks: list[tuple[str, bool]] = field(default_factory=list)
    tables: list[StatsTable] = field(default_factory=list)
    loss: list[tuple] = field(default_factory=list)
    facts: dict[str, object] = field(default_factory=dict)
    trace_digest: str = ""

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks)

    def render(self) -> str:
        out = [f"# Scenario {self.name}", "", f"- seed: {self.seed}",
               f"- result: {'PASS' if self.passed else 'FAIL'}",
               f"- trace digest: {self.trace_digest}", ""]
        if self.facts:
            out += ["## Facts", ""]
            out += [f"- {k}: {v}" for k, v in sorted(self.facts.items())]
            out.append("")
        out += ["## Postconditions", ""]
        out += [f"- [{'x' if ok else ' '}] {text}" for text, ok in self.checks]
        out += ["", "## Loss accounting", "",
                "| receiver | sender | keygroup | applied | pending | lost |",
                "|---|---|---|---:|---:|---:|"]
        out += ["| " + " | ".join(str(c) for c in row) + " |" for row in self.loss]
        out.append("")
        for t in self.tables:
            out.append(render_markdown(t))
        return "\n".join(out)


def emit_report(tables: list[StatsTable] | ScenarioReport, path: str | os.PathLike,
                fmt: str = "markdown") -> Path:
    """Write tables (or a scenario report) to ``path``; never writes an
    empty file."""
    if isinstance(tables, ScenarioReport):
        text = tables.render()
    else:
        if not tables:
            raise IoFailure("refusing to write an empty report")
        if fmt == "markdown":
            text = "\n".join(render_markdown(t) for t in tables)
        elif fmt == "tsv":
            text = "\n".join(render_tsv(t) for t in tables)
        else:
            raise IoFailure(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path
