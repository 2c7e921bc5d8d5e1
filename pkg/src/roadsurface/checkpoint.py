"""Binary checkpoint format with integrity checking.

Layout: an 8-byte magic, an 8-byte little-endian header length, a UTF-8
JSON header, then the payload of all float64 arrays concatenated in
manifest order (little-endian byte order).  The header records the model
configuration, optional foreground-background and class-map metadata,
the array manifest (name and shape per array), and a SHA-256 digest of
the payload so corruption is detected before any array is trusted.

Round trips are bit-identical: arrays are written raw, never re-encoded.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import ClassMap
from .errors import IntegrityError
from .fbm import FbmConfig, StageClassifier, build_classifiers, classifier_params
from .model import Model, ModelConfig, StackSpec, StageSpec, build_model
from .optim import AdamW

MAGIC = b"RSURFCK1"
FORMAT_VERSION = 1


def _model_doc(config: ModelConfig) -> dict:
    return {
        "stages": [
            {"kind": s.kind, "blocks": "".join(s.blocks), "channels": s.channels}
            for s in config.stack.stages
        ],
        "num_classes": config.num_classes,
        "input_resolution": config.input_resolution,
        "head_dim": config.head_dim,
        "mlp_ratio": config.mlp_ratio,
        "output_channel": config.output_channel,
    }


def _model_from_doc(doc: dict) -> ModelConfig:
    stages = tuple(
        StageSpec(s["kind"], tuple(s["blocks"]), int(s["channels"]))
        for s in doc["stages"]
    )
    return ModelConfig(
        stack=StackSpec(stages),
        num_classes=int(doc["num_classes"]),
        input_resolution=int(doc["input_resolution"]),
        head_dim=int(doc["head_dim"]),
        mlp_ratio=float(doc["mlp_ratio"]),
        output_channel=int(doc["output_channel"]),
    )


def _fbm_doc(config: FbmConfig) -> dict:
    return {
        "k_schedule": list(config.k_schedule),
        "num_classes": config.num_classes,
        "loss_weight": config.loss_weight,
        "reference_tokens": list(config.reference_tokens),
    }


def _fbm_from_doc(doc: dict) -> FbmConfig:
    return FbmConfig(
        k_schedule=tuple(doc["k_schedule"]),
        num_classes=int(doc["num_classes"]),
        loss_weight=float(doc["loss_weight"]),
        reference_tokens=tuple(doc["reference_tokens"]),
    )


@dataclass
class CheckpointBundle:
    """Everything a checkpoint restores."""

    model: Model
    classifiers: list[StageClassifier] | None
    fbm_config: FbmConfig | None
    class_map: ClassMap | None
    step: int
    optimizer_t: int
    metrics: dict | None
    optimizer_arrays: dict[str, np.ndarray]


def save_checkpoint(path, model: Model, optimizer: AdamW | None = None,
                    classifiers=None, fbm_config: FbmConfig | None = None,
                    class_map: ClassMap | None = None, step: int = 0,
                    metrics: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {
        name: p.data for name, p in model.params.items()
    }
    if classifiers is not None:
        for name, p in classifier_params(classifiers).items():
            arrays[name] = p.data
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())

    chunks = []
    manifest = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape)})
        chunks.append(raw.tobytes())
    payload = b"".join(chunks)

    header = {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "model": _model_doc(model.config),
        "fbm": _fbm_doc(fbm_config) if fbm_config is not None else None,
        "class_map": (json.loads(class_map.to_json())
                      if class_map is not None else None),
        "step": int(step),
        "optimizer_t": int(optimizer.t) if optimizer is not None else 0,
        "metrics": metrics,
        "arrays": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _read_header(blob: bytes):
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a recognizable checkpoint file")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + header_len > len(blob):
        raise IntegrityError("checkpoint header is truncated")
    try:
        header = json.loads(blob[start: start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint header is not valid JSON: {exc}")
    return header, blob[start + header_len:]


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _read_header(blob)

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise IntegrityError(
            f"unsupported checkpoint format version {version!r}, "
            f"expected {FORMAT_VERSION}"
        )
    if header.get("byte_order") != "little":
        raise IntegrityError(
            f"unsupported byte order {header.get('byte_order')!r}"
        )

    manifest = header["arrays"]
    expected_size = sum(
        8 * int(np.prod(entry["shape"], dtype=np.int64))
        for entry in manifest
    )
    if len(payload) != expected_size:
        raise IntegrityError(
            f"payload is {len(payload)} bytes but the manifest describes "
            f"{expected_size}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch, checkpoint corrupted")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=offset
        ).astype(np.float64).reshape(shape)
        arrays[entry["name"]] = arr
        offset += count * 8

    config = _model_from_doc(header["model"])
    model = build_model(config, seed=0)
    model_names = [n for n in arrays
                   if not n.startswith(("fbm.", "opt."))]
    if model_names != list(model.params.keys()):
        missing = sorted(set(model.params) - set(model_names))
        extra = sorted(set(model_names) - set(model.params))
        raise IntegrityError(
            "checkpoint arrays do not match the model parameter registry "
            f"(missing {missing}, unexpected {extra})"
        )
    for name in model_names:
        stored = arrays[name]
        param = model.params[name]
        if stored.shape != param.data.shape:
            raise IntegrityError(
                f"array {name} has shape {stored.shape}, registry expects "
                f"{param.data.shape}"
            )
        param.data = stored.copy()

    fbm_config = (_fbm_from_doc(header["fbm"])
                  if header.get("fbm") is not None else None)
    classifiers = None
    if fbm_config is not None:
        channels = [s.channels for s in config.stack.stages]
        classifiers = build_classifiers(channels, fbm_config.num_classes)
        for name, param in classifier_params(classifiers).items():
            if name not in arrays:
                raise IntegrityError(f"checkpoint is missing array {name}")
            stored = arrays[name]
            if stored.shape != param.data.shape:
                raise IntegrityError(
                    f"array {name} has shape {stored.shape}, registry "
                    f"expects {param.data.shape}"
                )
            param.data = stored.copy()

    class_map = None
    if header.get("class_map") is not None:
        class_map = ClassMap.from_json(json.dumps(header["class_map"]))

    optimizer_arrays = {
        name: arr.copy() for name, arr in arrays.items()
        if name.startswith("opt.")
    }
    return CheckpointBundle(
        model=model,
        classifiers=classifiers,
        fbm_config=fbm_config,
        class_map=class_map,
        step=int(header["step"]),
        optimizer_t=int(header.get("optimizer_t", 0)),
        metrics=header.get("metrics"),
        optimizer_arrays=optimizer_arrays,
    )


def restore_optimizer(optimizer: AdamW, bundle: CheckpointBundle) -> None:
    """Load saved first/second moments and step count into an optimizer."""
    for name in optimizer.params:
        m_name, v_name = f"opt.m.{name}", f"opt.v.{name}"
        if m_name not in bundle.optimizer_arrays:
            raise IntegrityError(f"checkpoint has no optimizer state for {name}")
        m = bundle.optimizer_arrays[m_name]
        v = bundle.optimizer_arrays[v_name]
        if m.shape != optimizer.m[name].shape:
            raise IntegrityError(
                f"optimizer state {name} has shape {m.shape}, expected "
                f"{optimizer.m[name].shape}"
            )
        optimizer.m[name] = m.copy()
        optimizer.v[name] = v.copy()
    optimizer.t = bundle.optimizer_t
