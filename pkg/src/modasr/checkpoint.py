"""Model checkpoints: a text manifest plus one little-endian float64 payload.

A checkpoint is a directory holding ``manifest.txt`` and ``payload.bin``.
Saving the same model twice produces identical bytes, and loading then
saving again reproduces them.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, _format_value, _parse_value
from .model import GROUPS, EncoderConfig, EncoderModel
from .numcore import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
PAYLOAD = "payload.bin"
_DTYPE = "<f8"


class CheckpointError(ValueError):
    """A checkpoint on disk violates one of its invariants."""


def _manifest_text(model: EncoderModel, cfg: ExperimentConfig | None, payload_sha: str, rows: list[str]) -> str:
    lines = [f"format_version = {FORMAT_VERSION}", "blank = last", f"payload_sha256 = {payload_sha}", "", "[model]"]
    lines += [f"{f.name} = {_format_value(getattr(model.config, f.name))}" for f in fields(model.config)]
    lines += ["", "[config]"]
    if cfg is not None:
        from .config import dump_config

        lines += dump_config(cfg).splitlines()
    lines += ["", "[languages]"]
    lines += [f"{i} = {tag} head={model.lang_head[i]}" for i, tag in enumerate(model.languages)]
    lines += ["", "[heads]"]
    lines += [f"{h} = {' '.join(str(v) for v in head.vocab)}" for h, head in enumerate(model.heads)]
    lines += ["", "[frozen_rows]"]
    lines += [f"{prefix}.mapping = {layer.frozen_rows}" for prefix, layer in model.artisan_layers()]
    lines += ["", "[params]", "# name shape dtype offset frozen group"]
    lines += rows
    return "\n".join(lines) + "\n"


def save_checkpoint(model: EncoderModel, path: str | Path, cfg: ExperimentConfig | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks, rows, offset = [], [], 0
    for name, p, group in model.named_parameters():
        data = np.ascontiguousarray(p.data, dtype=_DTYPE)
        shape = "x".join(str(s) for s in data.shape) or "scalar"
        frozen = int(name in model.frozen or not p.requires_grad)
        rows.append(f"{name} {shape} f8 {offset} {frozen} {group}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    payload = b"".join(chunks)
    (path / PAYLOAD).write_bytes(payload)
    (path / MANIFEST).write_text(_manifest_text(model, cfg, hashlib.sha256(payload).hexdigest(), rows))
    return path


def _sections(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {"": []}
    current = ""
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            out[current] = []
        else:
            out[current].append(line)
    return out


def _kv(lines: list[str]) -> dict[str, str]:
    out = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"manifest: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


def _parse_shape(s: str) -> tuple[int, ...]:
    return () if s == "scalar" else tuple(int(v) for v in s.split("x"))


def load_checkpoint(path: str | Path) -> tuple[EncoderModel, ExperimentConfig | None]:
    """Rebuild the model stored at ``path``.

    Raises CheckpointError naming the first violated invariant.
    """
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / PAYLOAD).is_file():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (needs {MANIFEST} and {PAYLOAD})")
    sec = _sections((path / MANIFEST).read_text())
    for name in ("model", "languages", "heads", "frozen_rows", "params"):
        if name not in sec:
            raise CheckpointError(f"manifest: missing section [{name}]")
    head = _kv(sec[""])
    if head.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(f"format_version: expected {FORMAT_VERSION}, got {head.get('format_version')!r}")
    payload = (path / PAYLOAD).read_bytes()
    if hashlib.sha256(payload).hexdigest() != head.get("payload_sha256"):
        raise CheckpointError("payload_sha256: payload does not match the manifest digest")

    base = EncoderConfig()
    mkv = _kv(sec["model"])
    unknown = set(mkv) - {f.name for f in fields(base)}
    if unknown:
        raise CheckpointError(f"model: unknown keys {sorted(unknown)}")
    try:
        enc = EncoderConfig(**{k: _parse_value(v, getattr(base, k), k) for k, v in mkv.items()})
    except ValueError as exc:
        raise CheckpointError(f"model: {exc}") from None
    cfg = None
    if sec.get("config"):
        from .config import parse_config

        try:
            cfg = parse_config("\n".join(sec["config"]))
        except ValueError as exc:
            raise CheckpointError(f"config: {exc}") from None

    heads = {}
    for h, vocab in _kv(sec["heads"]).items():
        heads[int(h)] = tuple(int(v) for v in vocab.split())
    if sorted(heads) != list(range(len(heads))) or not heads:
        raise CheckpointError("heads: indices must run 0..n-1")
    langs: list[tuple[str, int]] = []
    for i, (idx, rest) in enumerate(_kv(sec["languages"]).items()):
        tag, _, h = rest.partition(" head=")
        if int(idx) != i:
            raise CheckpointError("languages: indices must run 0..L-1")
        if int(h) not in heads:
            raise CheckpointError(f"languages: {tag} routes to missing head {h}")
        langs.append((tag, int(h)))
    n_base = sum(1 for _, h in langs if h == 0)
    if any(h == 0 for _, h in langs[n_base:]) or n_base == 0:
        raise CheckpointError("languages: stage-A languages (head 0) must come first")

    model = EncoderModel(enc, [t for t, _ in langs[:n_base]], heads[0], seed=0)
    rng = np.random.default_rng(0)
    for tag, h in langs[n_base:]:
        idx = model.add_language(tag, heads[h], rng)
        if model.lang_head[idx] != h:
            raise CheckpointError(f"languages: {tag} expects head {h}, rebuilt as {model.lang_head[idx]}")
    if len(model.heads) != len(heads):
        raise CheckpointError(f"heads: {len(heads)} listed, {len(model.heads)} implied by languages")

    rows = []
    for line in sec["params"]:
        parts = line.split()
        if len(parts) != 6:
            raise CheckpointError(f"params: malformed row {line!r}")
        name, shape, dtype, offset, frozen, group = parts
        rows.append((name, _parse_shape(shape), dtype, int(offset), frozen == "1", group))
    # dedicated score tensors are created on demand from their names
    layers = dict(model.artisan_layers())
    for name, shape, *_ in rows:
        if name.startswith("lang.") and name.endswith(".dedicated"):
            tag, _, prefix = name[len("lang.") : -len(".dedicated")].partition(".")
            if prefix not in layers or tag not in model.languages:
                raise CheckpointError(f"params: {name} refers to an unknown layer or language")
            layers[prefix].dedicated[model.language_index(tag)] = Tensor(np.zeros(shape), requires_grad=True)

    expected = list(model.named_parameters())
    if [r[0] for r in rows] != [n for n, _, _ in expected]:
        have, want = [r[0] for r in rows], [n for n, _, _ in expected]
        first = next((i for i, (a, b) in enumerate(zip(have, want)) if a != b), min(len(have), len(want)))
        got = have[first] if first < len(have) else "<end>"
        exp = want[first] if first < len(want) else "<end>"
        raise CheckpointError(f"params: row {first} is {got!r}, expected {exp!r}")
    offset = 0
    for (name, shape, dtype, off, frozen, group), (_, p, g) in zip(rows, expected):
        if dtype != "f8":
            raise CheckpointError(f"{name}: dtype {dtype!r} unsupported")
        if group != g or group not in GROUPS:
            raise CheckpointError(f"{name}: group {group!r}, expected {g!r}")
        if shape != p.shape:
            raise CheckpointError(f"{name}: shape {shape}, expected {p.shape}")
        if off != offset:
            raise CheckpointError(f"{name}: offset {off}, expected {offset} (payload must be contiguous)")
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > len(payload):
            raise CheckpointError(f"{name}: extends past the end of the payload")
        data = np.frombuffer(payload, dtype=_DTYPE, count=n // 8, offset=off).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"{name}: non-finite values")
        p.data = data
        if frozen and p.requires_grad:
            model.frozen.add(name)
        offset += n
    if offset != len(payload):
        raise CheckpointError(f"payload: {len(payload) - offset} trailing bytes")

    fr = _kv(sec["frozen_rows"])
    if set(fr) != {f"{prefix}.mapping" for prefix in layers}:
        raise CheckpointError("frozen_rows: must list every mapping matrix exactly once")
    for prefix, layer in layers.items():
        rows_frozen = int(fr[f"{prefix}.mapping"])
        if not 0 <= rows_frozen <= layer.n_languages:
            raise CheckpointError(f"frozen_rows: {prefix}.mapping has {rows_frozen} of {layer.n_languages} rows")
        layer.frozen_rows = rows_frozen
        if layer.mapping.shape != (len(langs), layer.K):
            raise CheckpointError(f"{prefix}.mapping: {layer.mapping.shape[0]} rows for {len(langs)} languages")
    return model, cfg
