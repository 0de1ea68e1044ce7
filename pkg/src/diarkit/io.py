"""File formats: RTTM, binary feature matrices, model checkpoints.

All writes are atomic (temp file in the target directory, then rename), so
an interrupted run never leaves a half-written artifact and reruns with the
same inputs produce byte-identical files.

FeatureFile layout (little endian):
    bytes 0-3   magic "DKFT"
    u32         version (1)
    u32         rows T
    u32         cols F
    f64         frame period in seconds
    T*F*f32     row-major payload

Checkpoint layout (little endian):
    bytes 0-3   magic "DKCK"
    u32         version (1)
    u32         config byte length, then that many UTF-8 bytes of
                "key=value" lines describing the model configuration
    u32         blob count, then per blob:
                u32 name length, name, u32 ndim, u32 dims..., f32 data
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .annotation import Annotation
from .errors import ConfigError, FormatError, RttmParseError
from .nn import DiarizationModel, ModelConfig

FEATURE_MAGIC = b"DKFT"
CHECKPOINT_MAGIC = b"DKCK"
FORMAT_VERSION = 1


@dataclass
class FeatureMatrix:
    """T x F feature sequence with its frame period in seconds."""

    values: np.ndarray
    frame_period: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def atomic_write(path: Union[str, Path], data: Union[bytes, str]) -> None:
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# RTTM


def rttm_parse(text: str) -> list[Annotation]:
    """Annotations grouped by file id, in order of first appearance.

    Only SPEAKER records are read; other record types and blank lines are
    ignored. Extra whitespace is tolerated.
    """
    grouped: dict[str, Annotation] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";;"):
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmParseError(f"expected >= 8 fields, got {len(fields)}", line_no)
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise RttmParseError(f"malformed numeric field: {exc}", line_no) from exc
        if duration <= 0 or onset < 0:
            raise RttmParseError(
                f"onset {onset} / duration {duration} out of range", line_no
            )
        file_id, speaker = fields[1], fields[7]
        grouped.setdefault(file_id, Annotation(file_id)).add(
            speaker, onset, onset + duration
        )
    return list(grouped.values())


def rttm_emit(annotations: Union[Annotation, Iterable[Annotation]]) -> str:
    """SPEAKER records sorted by (file id, onset), three-decimal times."""
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    lines = []
    for ann in sorted(annotations, key=lambda a: a.file_id):
        for seg in sorted(ann.segments, key=lambda s: (s.start, s.end, s.speaker)):
            lines.append(
                f"SPEAKER {ann.file_id} 1 {seg.start:.3f} {seg.duration:.3f} "
                f"<NA> <NA> {seg.speaker} <NA> <NA>"
            )
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# feature files


def write_features(path: Union[str, Path], features: FeatureMatrix) -> None:
    values = np.ascontiguousarray(features.values, dtype="<f4")
    t, f = values.shape
    header = FEATURE_MAGIC + struct.pack(
        "<IIId", FORMAT_VERSION, t, f, features.frame_period
    )
    atomic_write(path, header + values.tobytes())


def read_features(path: Union[str, Path]) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    version, t, f, period = struct.unpack_from("<IIId", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[4 + struct.calcsize("<IIId"):]
    if len(payload) != t * f * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {t * f * 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, f).astype(np.float64)
    return FeatureMatrix(values, period)


def stack_and_subsample(features: FeatureMatrix, context: int = 7,
                        factor: int = 10) -> FeatureMatrix:
    """Concatenate 2*context+1 neighbouring frames, then keep every factor-th.

    Edges are padded by replication; 23 columns with context 7 become 345.
    """
    if factor < 1:
        raise ConfigError("subsampling factor must be >= 1")
    values = features.values
    if context > 0:
        top = np.repeat(values[:1], context, axis=0)
        bottom = np.repeat(values[-1:], context, axis=0)
        padded = np.concatenate([top, values, bottom], axis=0)
    else:
        padded = values
    t = values.shape[0]
    stacked = np.concatenate(
        [padded[off : off + t] for off in range(2 * context + 1)], axis=1
    )
    return FeatureMatrix(stacked[::factor].copy(), features.frame_period * factor)


# ---------------------------------------------------------------------------
# checkpoints


def _config_block(cfg: ModelConfig) -> str:
    lines = []
    for field in dataclasses.fields(cfg):
        value = getattr(cfg, field.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{field.name}={value}")
    return "\n".join(lines) + "\n"


def _parse_config_block(text: str) -> ModelConfig:
    raw = parse_kv_text(text)
    kwargs = {}
    for field in dataclasses.fields(ModelConfig):
        if field.name not in raw:
            continue
        value = raw[field.name]
        ftype = field.type if isinstance(field.type, str) else field.type.__name__
        if ftype == "bool":
            kwargs[field.name] = value.lower() == "true"
        elif ftype == "int":
            kwargs[field.name] = int(value)
        elif ftype == "float":
            kwargs[field.name] = float(value)
        else:
            kwargs[field.name] = value
    return ModelConfig(**kwargs)


def save_checkpoint(path: Union[str, Path], model: DiarizationModel) -> None:
    config = _config_block(model.cfg).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(config)), config]
    named = model.named_parameters()
    parts.append(struct.pack("<I", len(named)))
    for name, param in named:
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(param.tensor.data, dtype="<f4")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    atomic_write(path, b"".join(parts))


def load_checkpoint(path: Union[str, Path], seed: int = 0) -> DiarizationModel:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    offset = 4
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (config_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    cfg = _parse_config_block(blob[offset : offset + config_len].decode("utf-8"))
    offset += config_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    model = DiarizationModel(cfg, seed=seed)
    expected = dict(model.named_parameters())
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += size * 4
        if name not in expected:
            raise FormatError(f"{path}: unexpected parameter {name!r}")
        param = expected[name]
        if tuple(shape) != param.tensor.shape:
            raise FormatError(
                f"{path}: {name!r} has shape {tuple(shape)}, model wants {param.tensor.shape}"
            )
        param.tensor.data = values.reshape(shape).astype(np.float64)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise FormatError(f"{path}: checkpoint misses parameters {sorted(missing)}")
    return model


# ---------------------------------------------------------------------------
# flat key=value configs and manifests


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv_config(path: Union[str, Path]) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text(encoding="utf-8"))


def write_manifest(path: Union[str, Path], entries: list[dict]) -> None:
    atomic_write(path, "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))


def read_manifest(path: Union[str, Path]) -> list[dict]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(json.loads(line))
    return entries
