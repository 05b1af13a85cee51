# Copyright (c) 2026, saml-pipeline contributors.

import csv
import hashlib
import os
import typing
from contextlib import contextmanager

import numpy as np
import tomlkit
from PIL import Image

# Label map palette: background black, podocyte red, mesangial blue. Pixel values are
# palette indices, so the PNG stays an 8-bit indexed image whichever viewer opens it.
_LABEL_PALETTE = [0, 0, 0, 220, 40, 40, 40, 80, 220]


def _get_config_document(path: typing.Union[str, os.PathLike]) -> tomlkit.TOMLDocument:
    """Parse and return a TOML configuration file."""
    with open(path) as f:
        return tomlkit.load(f)


def _derive_seed(*parts: typing.Union[str, int]) -> int:
    """Derive a 63-bit seed from an ordered tuple of seeds and identifiers.

    The result depends only on the parts, never on call order, which is what keeps
    per-instance random streams independent of scheduling.
    """
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@contextmanager
def _atomic_write(path: typing.Union[str, os.PathLike], mode: str = "w"):
    """Write to a sibling temporary file and move it into place on success."""
    tmp_path = f"{os.fspath(path)}.tmp"
    newline = "" if "b" not in mode else None
    try:
        with open(tmp_path, mode, newline=newline) as f:
            yield f
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)


def _write_csv(
    path: typing.Union[str, os.PathLike],
    header: typing.Sequence[str],
    rows: typing.Iterable[typing.Sequence[typing.Any]],
    comments: typing.Sequence[str] = (),
) -> None:
    """Write a header and rows, preceded by optional ``#`` comment lines."""
    with _atomic_write(path) as f:
        for comment in comments:
            f.write(f"# {comment}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: typing.Union[str, os.PathLike]) -> list[dict[str, str]]:
    """Read a CSV file into a list of dicts, skipping ``#`` comment lines."""
    with open(path, newline="") as f:
        return list(
            csv.DictReader(line for line in f if not line.startswith("#"))
        )


def _read_rgb(path: typing.Union[str, os.PathLike]) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def _write_rgb(path: typing.Union[str, os.PathLike], image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(
        path, format="PNG"
    )


def _read_binary(path: typing.Union[str, os.PathLike]) -> np.ndarray:
    """Read an 8-bit 0/255 mask PNG as a boolean grid (any nonzero is foreground)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


def _write_binary(path: typing.Union[str, os.PathLike], mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(
        path, format="PNG"
    )


def _read_indexed(path: typing.Union[str, os.PathLike]) -> np.ndarray:
    """Read an indexed (or plain 8-bit grey) PNG as its raw index values."""
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise ValueError(
                f"{path} must be an 8-bit indexed or greyscale PNG, not mode {img.mode}"
            )
        return np.asarray(img, dtype=np.uint8).copy()


def _write_indexed(path: typing.Union[str, os.PathLike], classes: np.ndarray) -> None:
    img = Image.fromarray(np.ascontiguousarray(classes, dtype=np.uint8), mode="P")
    img.putpalette(_LABEL_PALETTE)
    img.save(path, format="PNG")
