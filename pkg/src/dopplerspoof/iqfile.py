"""Raw ``.iq`` files: little-endian float64 I/Q pairs with a key-value sidecar."""
from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ofdm_phy import BasebandSignal


def read_keyvalue(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed key-value text: {exc}") from exc
    return dict(parser["root"])


def write_keyvalue(path, values: dict) -> None:
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_iq(path, sig: BasebandSignal, f_c: float) -> None:
    path = Path(path)
    sig.samples.astype("<c16").tofile(path)
    write_keyvalue(sidecar_path(path), {"f_s": float(sig.f_s), "f_c": float(f_c)})


def read_iq(path):
    """Return ``(signal, f_c)``."""
    path = Path(path)
    meta = read_keyvalue(sidecar_path(path).read_text())
    try:
        f_s, f_c = float(meta["f_s"]), float(meta["f_c"])
    except KeyError as exc:
        raise ConfigError(f"sidecar for {path.name} lacks {exc}") from exc
    samples = np.fromfile(path, dtype="<c16")
    return BasebandSignal(samples.astype(np.complex128), f_s), f_c
