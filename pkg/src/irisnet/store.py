"""Bit-exact model serialization and the freeze / transfer workflow.

Weight-file layout (all integers little-endian):

    magic       8 bytes  b"IRISNET1"
    version     u32      currently 1
    spec_len    u32      byte length of the spec blob
    spec blob   UTF-8    model spec in the config grammar
    records     until 4 bytes remain; each record is
                  name_len u32, name UTF-8,
                  rank u32, dims u64 * rank,
                  payload: raw IEEE-754 float32, little-endian
    crc32       u32      of every preceding byte

Records are sorted by name (bytewise), so identical models always produce
identical files and save -> load -> save is a bytewise fixpoint. Optimizer
state is not serialized; fine-tuning restarts it.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import (BadMagic, CorruptPayload, InvalidSpec, IoFailure,
                     SpecMismatch, UnknownPrefix, VersionUnsupported)
from .model import (Model, format_spec, is_trainable_name, parse_spec,
                    replace_head, spec_param_shapes)

MAGIC = b"IRISNET1"
VERSION = 1

FREEZE_MODES = ("feature_extractor", "full_finetune")


def _encode(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    spec_blob = format_spec(model.spec).encode("utf-8")
    parts.append(struct.pack("<I", len(spec_blob)))
    parts.append(spec_blob)
    for name in sorted(model.parameters, key=lambda n: n.encode("utf-8")):
        t = model.parameters[name]
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(model: Model, path) -> None:
    """Write the canonical weight file atomically (temp file + rename)."""
    blob = _encode(model)
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write weight file {path}: {exc}") from exc


def load(path) -> Model:
    """Read a weight file back into a model, verifying CRC, layout and the
    stored spec against the tensor records."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read weight file {path}: {exc}") from exc
    if len(buf) < len(MAGIC) + 8 or not buf.startswith(MAGIC):
        raise BadMagic(f"{path} is not a weight file (bad magic)")
    if zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise CorruptPayload(f"{path}: CRC mismatch")
    end = len(buf) - 4
    off = len(MAGIC)

    def take(n, what):
        nonlocal off
        if off + n > end:
            raise CorruptPayload(f"{path}: truncated while reading {what}")
        out = buf[off:off + n]
        off += n
        return out

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise VersionUnsupported(f"{path}: version {version}, reader supports {VERSION}")
    spec_len = struct.unpack("<I", take(4, "spec length"))[0]
    try:
        spec = parse_spec(take(spec_len, "spec blob").decode("utf-8"))
    except (UnicodeDecodeError, InvalidSpec) as exc:
        raise SpecMismatch(f"{path}: stored spec is invalid: {exc}") from exc

    records = {}
    while off < end:
        name_len = struct.unpack("<I", take(4, "record name length"))[0]
        name = take(name_len, "record name").decode("utf-8", errors="replace")
        rank = struct.unpack("<I", take(4, "record rank"))[0]
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "record dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count, f"payload of {name}")
        if name in records:
            raise SpecMismatch(f"{path}: duplicate tensor record {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)

    expected = spec_param_shapes(spec)
    expected_map = {n: tuple(s) for n, s in expected}
    got_map = {n: a.shape for n, a in records.items()}
    if expected_map != got_map:
        missing = sorted(set(expected_map) - set(got_map))
        extra = sorted(set(got_map) - set(expected_map))
        raise SpecMismatch(f"{path}: tensor records disagree with spec "
                           f"(missing {missing[:4]}, extra {extra[:4]})")
    params = {name: Tensor(records[name], requires_grad=is_trainable_name(name))
              for name, _ in expected}
    return Model(spec, params)


def freeze(model: Model, prefixes) -> Model:
    """Resolve prefixes to concrete parameter names and add them to the
    frozen set; the forward pass is unaffected, optimizers skip them, and
    frozen batchnorms keep their running stats."""
    for prefix in prefixes:
        matched = [n for n in model.parameters if n.startswith(prefix)]
        if not matched:
            raise UnknownPrefix(f"freeze prefix {prefix!r} matches no parameter")
        model.frozen.update(matched)
    return model


def transfer(pretrained_path, new_classes: int, freeze_mode: str, seed: int = 0) -> Model:
    """Load pretrained weights, swap the head for the target class count and
    apply the requested freeze mode.

    ``feature_extractor`` freezes everything except the new head;
    ``full_finetune`` freezes nothing.
    """
    if freeze_mode not in FREEZE_MODES:
        raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}, got {freeze_mode!r}")
    model = replace_head(load(pretrained_path), new_classes, seed)
    if freeze_mode == "feature_extractor":
        model.frozen = {n for n in model.parameters if not n.startswith("head.")}
    else:
        model.frozen = set()
    return model
