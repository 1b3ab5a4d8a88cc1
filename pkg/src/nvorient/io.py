"""File formats, atomic persistence and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from .errors import ConfigError
from .physics import FieldVector, as_vector
from .reconstruction import CoilModel
from .spectra import OdmrSpectrum, PeakSet, SplittingTable

SPECTRUM_META_KEYS = ("bias_id", "linewidth_mhz", "seed")


# ---------------------------------------------------------------------------
# low-level writing


def write_atomic(path, data) -> Path:
    """Write ``data`` (str or bytes) to a temp file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def _plain(obj: Any) -> Any:
    """JSON-ready copy: numpy types to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, FieldVector):
        return list(obj)
    return obj


def dumps_json(obj: Any) -> str:
    # repr-based float formatting in the json module is shortest round-trip
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    return write_atomic(path, dumps_json(obj))


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc


def csv_text(rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# spectra


def spectrum_to_csv(spectrum: OdmrSpectrum) -> str:
    lines = []
    for key in sorted(spectrum.meta):
        value = spectrum.meta[key]
        lines.append(f"# {key}={'' if value is None else value}")
    lines.append("frequency_mhz,contrast")
    for f, c in zip(spectrum.frequencies, spectrum.contrast):
        lines.append(f"{float(f)!r},{float(c)!r}")
    return "\n".join(lines) + "\n"


def _meta_value(text: str):
    if text == "":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def spectrum_from_csv(text: str, source: str = "<spectrum>") -> OdmrSpectrum:
    meta, freqs, contrast = {}, [], []
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                meta[key.strip()] = _meta_value(value.strip())
            continue
        if not header_seen and not line[0].isdigit() and line[0] not in "+-.":
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{source}:{lineno}: expected 'frequency,contrast', got {line!r}")
        try:
            freqs.append(float(parts[0]))
            contrast.append(float(parts[1]))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    try:
        return OdmrSpectrum(np.array(freqs), np.array(contrast), meta)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def write_spectrum(path, spectrum: OdmrSpectrum) -> Path:
    return write_atomic(path, spectrum_to_csv(spectrum))


def read_spectrum(path) -> OdmrSpectrum:
    return spectrum_from_csv(Path(path).read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# tables and fields


def write_table(path, table: SplittingTable, extra: Optional[dict] = None) -> Path:
    return write_json(path, {**table.to_dict(), **(extra or {})})


def read_table(path) -> SplittingTable:
    data = read_json(path)
    try:
        return SplittingTable.from_dict(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: not a splitting table ({exc})") from exc


def read_peaks(path) -> PeakSet:
    return PeakSet.from_dict(read_json(path))


@dataclass
class BiasInput:
    """Parsed bias-field file: explicit fields, or currents plus coil model."""

    fields: Optional[np.ndarray] = None
    currents: Optional[np.ndarray] = None
    coil_model: Optional[CoilModel] = None

    def resolved_fields(self) -> np.ndarray:
        if self.fields is not None:
            return self.fields
        if self.currents is not None and self.coil_model is not None:
            return self.coil_model.fields(self.currents)
        raise ConfigError("bias file gives currents but no coil_model to convert them")

    def to_dict(self) -> dict:
        out: dict = {}
        if self.fields is not None:
            out["fields"] = [{"bx_mt": b[0], "by_mt": b[1], "bz_mt": b[2]} for b in self.fields.tolist()]
        if self.currents is not None:
            out["fields"] = [{"currents_a": c} for c in self.currents.tolist()]
        if self.coil_model is not None:
            out["coil_model"] = self.coil_model.to_dict()
        return out


def parse_bias(data, source: str = "<bias>") -> BiasInput:
    """Accepts a list of entries or ``{"fields": [...], "coil_model": {...}}``.

    Each entry is ``{bx_mt, by_mt, bz_mt}`` or ``{currents_a: [i1, i2, i3]}``.
    """
    coil = None
    if isinstance(data, dict):
        if "coil_model" in data and data["coil_model"] is not None:
            try:
                coil = CoilModel.from_dict(data["coil_model"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{source}: bad coil_model ({exc})") from exc
        data = data.get("fields")
    if not isinstance(data, list) or not data:
        raise ConfigError(f"{source}: expected a non-empty list of bias entries")
    fields, currents = [], []
    for k, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise ConfigError(f"{source}: entry {k} is not an object")
        if "currents_a" in entry:
            cur = entry["currents_a"]
            if not (isinstance(cur, list) and len(cur) == 3):
                raise ConfigError(f"{source}: entry {k}: currents_a needs three values")
            currents.append([float(v) for v in cur])
        else:
            missing = [key for key in ("bx_mt", "by_mt", "bz_mt") if key not in entry]
            if missing:
                raise ConfigError(f"{source}: entry {k}: missing {', '.join(missing)}")
            fields.append([float(entry["bx_mt"]), float(entry["by_mt"]), float(entry["bz_mt"])])
    if fields and currents:
        raise ConfigError(f"{source}: mixes explicit fields and coil currents")
    if fields:
        return BiasInput(fields=np.array(fields), coil_model=coil)
    return BiasInput(currents=np.array(currents), coil_model=coil)


def read_bias(path) -> BiasInput:
    return parse_bias(read_json(path), str(path))


def bias_to_dict(fields) -> list:
    return [{"bx_mt": float(b[0]), "by_mt": float(b[1]), "bz_mt": float(b[2])} for b in np.asarray(fields)]


# ---------------------------------------------------------------------------
# configuration files


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments, values in JSON
    or comma-separated lists)."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")
        return data
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def read_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    version: str
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0

    @classmethod
    def start(cls, command: str, config: dict, seed: Optional[int], inputs: Iterable = ()) -> "RunManifest":
        from . import __version__

        m = cls(command, config, seed, __version__)
        for p in inputs:
            m.inputs[str(p)] = file_digest(p)
        m._t0 = time.perf_counter()
        return m

    def add_output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def verify_inputs(self) -> dict:
        """Map of input path -> whether its current digest still matches."""
        return {p: Path(p).exists() and file_digest(p) == d for p, d in self.inputs.items()}

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_s": self.duration_s,
        }

    def write(self, directory) -> Path:
        if hasattr(self, "_t0"):
            self.duration_s = time.perf_counter() - self._t0
        return write_json(Path(directory) / "manifest.json", self.to_dict())

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = read_json(path)
        return cls(d["command"], d["config"], d["seed"], d["version"], d["inputs"], d["outputs"], d["duration_s"])
