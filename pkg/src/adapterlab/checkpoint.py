"""Single-file checkpoints: a JSON manifest followed by raw float64 arrays.

Layout:

    adapterlab-checkpoint <version>\n
    <manifest byte length>\n
    <manifest JSON, UTF-8>
    <binary payload: little-endian IEEE-754 float64, manifest order>

The manifest records, per tensor: name, shape, payload offset, byte length,
and a CRC-32 checksum, plus the model config and (for task artifacts) the
strategy and training metadata. Tensors are stored sorted by name, so a
round trip is bit-identical and deterministic.

A registry directory holds ``base.ckpt`` plus ``tasks/<id>.ckpt`` and a
human-readable ``tasks/<id>.meta`` JSON summary per task.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import BaseParameters, ModelConfig, parameter_shapes
from .registry import (
    Registry,
    TaskArtifact,
    TuningStrategy,
    model_layout,
    strategy_from_dict,
    strategy_to_dict,
    trainable_partition,
)
from .tensor import Tensor

MAGIC = "adapterlab-checkpoint"
FORMAT_VERSION = 1


def _write_file(path: Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    entries = []
    payload = bytearray()
    for name in names:
        raw = np.ascontiguousarray(tensors[name], dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(tensors[name].shape),
                "offset": len(payload),
                "length": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        payload.extend(raw)
    manifest = dict(header)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n".encode("ascii"))
        fh.write(f"{len(body)}\n".encode("ascii"))
        fh.write(body)
        fh.write(payload)


def _read_file(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", errors="replace").strip()
        parts = first.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"{path}: not an adapterlab checkpoint")
        if parts[1] != str(FORMAT_VERSION):
            raise CheckpointError(
                f"{path}: format_version {parts[1]} unsupported (expected {FORMAT_VERSION})"
            )
        try:
            body_len = int(fh.readline().strip())
            manifest = json.loads(fh.read(body_len).decode("utf-8"))
        except (ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
        payload = fh.read()
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: manifest field format_version mismatch")
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        raw = payload[entry["offset"] : entry["offset"] + entry["length"]]
        if len(raw) != entry["length"]:
            raise CheckpointError(f"{path}: tensor {name!r} payload truncated")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: tensor {name!r} failed its checksum")
        shape = tuple(entry["shape"])
        expected_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if expected_bytes != entry["length"]:
            raise CheckpointError(f"{path}: tensor {name!r} length does not match its shape")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return manifest, tensors


def _check_shapes(path, tensors: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]]) -> None:
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            raise CheckpointError(f"{path}: tensor {name!r} missing from checkpoint")
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r} in checkpoint")
        if tensors[name].shape != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {expected[name]} for the declared config"
            )


def save_base(base: BaseParameters, path) -> None:
    header = {"kind": "base", "config": base.config.to_dict()}
    _write_file(Path(path), header, {n: t.data for n, t in base.params.items()})


def load_base(path, expected_config: ModelConfig | None = None) -> BaseParameters:
    manifest, tensors = _read_file(Path(path))
    if manifest.get("kind") != "base":
        raise CheckpointError(f"{path}: kind {manifest.get('kind')!r} is not a base checkpoint")
    config = ModelConfig(**manifest["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: stored config {config.to_dict()} does not match expected "
            f"{expected_config.to_dict()}"
        )
    _check_shapes(path, tensors, parameter_shapes(config))
    base = BaseParameters(config, {n: Tensor(v) for n, v in tensors.items()})
    return base


def save_artifact(artifact: TaskArtifact, config: ModelConfig, path) -> None:
    header = {
        "kind": "task",
        "config": config.to_dict(),
        "task_id": artifact.task_id,
        "strategy": strategy_to_dict(artifact.strategy),
        "num_classes": artifact.num_classes,
        "metadata": artifact.metadata,
    }
    _write_file(Path(path), header, {n: t.data for n, t in artifact.params.items()})


def load_artifact(path, expected_config: ModelConfig | None = None) -> TaskArtifact:
    manifest, tensors = _read_file(Path(path))
    if manifest.get("kind") != "task":
        raise CheckpointError(f"{path}: kind {manifest.get('kind')!r} is not a task checkpoint")
    config = ModelConfig(**manifest["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: stored config {config.to_dict()} does not match expected "
            f"{expected_config.to_dict()}"
        )
    strategy: TuningStrategy = strategy_from_dict(manifest["strategy"])
    num_classes = int(manifest["num_classes"])
    layout = model_layout(strategy, config, num_classes)
    partition = trainable_partition(strategy, config, num_classes)
    expected = {name: layout[name] for name in partition.trainable}
    _check_shapes(path, tensors, expected)
    params = {n: Tensor(v, requires_grad=True) for n, v in tensors.items()}
    return TaskArtifact(
        task_id=manifest["task_id"],
        strategy=strategy,
        num_classes=num_classes,
        params=params,
        metadata=dict(manifest.get("metadata", {})),
    )


def save_registry(registry: Registry, root) -> None:
    root = Path(root)
    save_base(registry.base, root / "base.ckpt")
    for task_id, artifact in registry.tasks.items():
        save_artifact(artifact, registry.base.config, root / "tasks" / f"{task_id}.ckpt")
        meta = {
            "task_id": task_id,
            "strategy": strategy_to_dict(artifact.strategy),
            "num_classes": artifact.num_classes,
            **artifact.metadata,
        }
        meta_path = root / "tasks" / f"{task_id}.meta"
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_registry(root) -> Registry:
    root = Path(root)
    base_path = root / "base.ckpt"
    if not base_path.exists():
        raise CheckpointError(f"{root}: no base.ckpt found")
    base = load_base(base_path)
    base.freeze()
    registry = Registry(base)
    tasks_dir = root / "tasks"
    if tasks_dir.is_dir():
        for ckpt in sorted(tasks_dir.glob("*.ckpt")):
            registry.adopt_task(load_artifact(ckpt, expected_config=base.config))
    return registry
