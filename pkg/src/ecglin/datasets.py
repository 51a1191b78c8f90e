"""Record lists for the supported public databases.

Data are never downloaded; these lists let a user check that a local copy is
complete before a run.
"""
from __future__ import annotations

from pathlib import Path

MITBIH_RECORDS = tuple(
    str(r) for r in (
        100, 101, 102, 103, 104, 105, 106, 107, 108, 109, 111, 112, 113, 114, 115, 116, 117, 118, 119,
        121, 122, 123, 124, 200, 201, 202, 203, 205, 207, 208, 209, 210, 212, 213, 214, 215, 217, 219,
        220, 221, 222, 223, 228, 230, 231, 232, 233, 234,
    )
)
INCART_RECORDS = tuple(f"I{i:02d}" for i in range(1, 76))

REQUIRED = {"mitbih": MITBIH_RECORDS, "incart": INCART_RECORDS}
EXTENSIONS = ("hea", "dat", "atr")


def required_records(dataset: str) -> tuple[str, ...]:
    if dataset not in REQUIRED:
        raise ValueError(f"no fixed record list for dataset {dataset!r}")
    return REQUIRED[dataset]


def missing_files(data_dir: str | Path, dataset: str) -> list[str]:
    """Files from the dataset's record list that are absent in ``data_dir``."""
    d = Path(data_dir)
    return [f"{r}.{e}" for r in required_records(dataset) for e in EXTENSIONS if not (d / f"{r}.{e}").exists()]
