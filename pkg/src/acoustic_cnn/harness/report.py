"""Comparison tables and plot-data files for groups of runs."""

import os

import numpy as np

TABLE_COLUMNS = ("config", "frame_error", "cross_entropy", "num_params", "iterations", "config_hash")


class IncomparableReports(ValueError):
    """Reports from different corpora cannot share a table."""


def comparison_table(reports):
    if not reports:
        raise ValueError("emit_report needs at least one report")
    corpora = sorted({r.corpus_hash for r in reports})
    if len(corpora) > 1:
        raise IncomparableReports(f"reports come from different corpora: {corpora}")
    rows = sorted(reports, key=lambda r: r.name)
    cells = [TABLE_COLUMNS]
    for r in rows:
        cells.append((r.name, f"{r.frame_error:.4f}", f"{r.cross_entropy:.4f}", str(r.num_params),
                      str(len(r.series)), r.config_hash))
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = [f"# corpus {corpora[0]}"]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_plot_data(path, series):
    """``series`` maps a series name to ``(x, y)`` pairs; floats keep full precision."""
    with open(path, "w") as fh:
        fh.write("series,x,y\n")
        for name in series:
            for x, y in series[name]:
                fh.write(f"{name},{_plain(x)!r},{float(y)!r}\n")


def _plain(x):
    return int(x) if isinstance(x, (int, np.integer)) else float(x)


def read_plot_data(path):
    series = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "series,x,y":
            raise ValueError(f"{path}: not a plot-data file")
        for line in fh:
            name, x, y = line.rstrip("\n").rsplit(",", 2)
            series.setdefault(name, []).append((_number(x), float(y)))
    return series


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def emit_report(reports, directory=None, figures=None, title="comparison"):
    """Write ``<title>.txt`` (the table) and one ``<figure>.csv`` per figure.

    ``figures`` maps a figure name to its series dict. Returns the table text.
    """
    table = comparison_table(reports)
    if directory is not None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{title}.txt"), "w") as fh:
            fh.write(table)
        for name, series in (figures or {}).items():
            write_plot_data(os.path.join(directory, f"{name}.csv"), series)
    return table
