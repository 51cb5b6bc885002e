"""
Turn a run directory into plot-ready whitespace-separated data files.
"""
from pathlib import Path

from fire import Fire


def _columns(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def _write_dat(path: Path, rows: list[tuple[str, ...]]) -> Path:
    path.write_text("".join(" ".join(row) + "\n" for row in rows), encoding="utf-8")
    return path


def emit_plot_data(history_dir: str | Path) -> list[Path]:
    """
    Write `train_loss.dat` and `test_loss.dat` (round, value) from history.csv, and
    `bound.dat` (t, bound, empirical_gap) when the run produced bound.csv. Values are
    copied verbatim from the CSV files.

    Raises:
        FileNotFoundError: if the directory has no history.csv
    """
    history_dir = Path(history_dir)
    history = history_dir / "history.csv"
    if not history.is_file():
        raise FileNotFoundError(f"no history.csv in {history_dir}")
    header, rows = _columns(history)
    index = {name: header.index(name) for name in ("round", "train_loss", "test_loss")}

    written = [
        _write_dat(history_dir / "train_loss.dat", [(r[index["round"]], r[index["train_loss"]]) for r in rows]),
        _write_dat(history_dir / "test_loss.dat", [(r[index["round"]], r[index["test_loss"]]) for r in rows]),
    ]
    bound = history_dir / "bound.csv"
    if bound.is_file():
        _, bound_rows = _columns(bound)
        written.append(_write_dat(history_dir / "bound.dat", [tuple(r) for r in bound_rows]))
    return written


def main(history_dir: str):
    for path in emit_plot_data(history_dir):
        print(f"wrote {path}")


if __name__ == "__main__":
    Fire(main)
