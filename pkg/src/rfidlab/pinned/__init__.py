"""Checkpoints shipped with the package, reproducible from their recorded seeds."""

from pathlib import Path

DIR = Path(__file__).resolve().parent
NAMES = ("nominal", "robust-k64", "robust-k128", "generator")


def path(name: str) -> Path:
    if name not in NAMES:
        raise KeyError(f"unknown pinned checkpoint {name!r}; expected one of {NAMES}")
    return DIR / f"{name}.ckpt"
