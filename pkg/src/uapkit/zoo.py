"""Portable perturbation registry.

An artifact is a JSON metadata file plus one binary payload file per
tensor: 8-byte magic, rank and dims as little-endian uint64, then
row-major little-endian float32 values. The metadata records a sha256
digest over the concatenated payload bytes (in tensor-manifest order),
so artifacts can be relocated or fetched over HTTP and still verified.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (
    Perturbation,
    PerturbationMeta,
    ThreatModel,
    UapkitError,
    ValidationError,
)

FORMAT_VERSION = 1
INDEX_SCHEMA = "uapkit/zoo-index@1"
_MAGIC = b"UAPTNSR1"


class UnknownAttackerError(UapkitError):
    """Requested (threat model, id) pair is not in the index."""


class DigestMismatchError(UapkitError):
    """Payload bytes do not hash to the digest recorded in the metadata."""


class InvariantViolationError(ValidationError):
    """Decoded artifact violates its own declared threat model."""


class ArtifactFormatError(UapkitError):
    """Metadata or payload bytes are not a valid artifact."""


def threat_key(p: Perturbation) -> str:
    mode = "targeted" if p.targeted else "non_targeted"
    return f"{p.threat_model.kind.value}_{mode}"


def encode_tensor(t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    header = _MAGIC + struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(blob: bytes) -> torch.Tensor:
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise ArtifactFormatError("bad tensor payload magic")
    off = len(_MAGIC)
    (rank,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if rank > 8:
        raise ArtifactFormatError(f"implausible tensor rank {rank}")
    if len(blob) < off + 8 * rank:
        raise ArtifactFormatError("truncated shape header")
    shape = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    count = math.prod(shape) if rank else 1
    expected = off + 4 * count
    if len(blob) != expected:
        raise ArtifactFormatError(f"payload length {len(blob)} != expected {expected}")
    arr = np.frombuffer(blob, dtype="<f4", offset=off, count=count).reshape(shape)
    return torch.from_numpy(arr.copy())


def _payload_digest(blobs) -> str:
    h = hashlib.sha256()
    for blob in blobs:
        h.update(blob)
    return h.hexdigest()


def perturbation_digest(p: Perturbation) -> str:
    """Digest of the canonical payload encoding; save-independent."""
    tensors = p.tensors()
    return _payload_digest(encode_tensor(tensors[name]) for name in sorted(tensors))


def save_perturbation(p: Perturbation, path: str | Path) -> dict:
    """Write metadata + payload files; returns the artifact descriptor."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem

    tensors = p.tensors()
    names = sorted(tensors)
    blobs = {name: encode_tensor(tensors[name]) for name in names}
    digest = _payload_digest(blobs[name] for name in names)

    manifest = []
    for name in names:
        fname = f"{stem}__{name}.bin"
        (path.parent / fname).write_bytes(blobs[name])
        manifest.append({"name": name, "file": fname, "shape": list(tensors[name].shape)})

    metadata = {
        "format_version": FORMAT_VERSION,
        "threat_model": p.threat_model.to_dict(),
        "resolution": list(p.resolution),
        "targeted": p.targeted,
        "target_text": p.target_text,
        "meta": p.meta.to_dict(),
        "tensors": manifest,
        "digest": {"algorithm": "sha256", "value": digest},
    }
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return {
        "path": str(path),
        "format_version": FORMAT_VERSION,
        "digest": digest,
        "summary": artifact_summary(metadata),
    }


def artifact_summary(metadata: dict) -> dict:
    summary = {
        "kind": metadata["threat_model"]["kind"],
        "targeted": metadata["targeted"],
        "resolution": list(metadata["resolution"]),
        "generator_version": metadata.get("meta", {}).get("generator_version"),
    }
    if metadata.get("target_text"):
        summary["target_text"] = metadata["target_text"]
    return summary


def _is_url(ref: str) -> bool:
    return ref.startswith(("http://", "https://"))


def _read_ref(base: str | Path, ref: str) -> bytes:
    if _is_url(ref):
        with urllib.request.urlopen(ref) as resp:
            return resp.read()
    if isinstance(base, str) and _is_url(base):
        with urllib.request.urlopen(urllib.parse.urljoin(base, ref)) as resp:
            return resp.read()
    return (Path(base) / ref).read_bytes()


def load_artifact(source: str | Path) -> Perturbation:
    """Load one artifact from a metadata path or URL. Digest is verified
    over the raw payload bytes before any tensor is decoded."""
    if isinstance(source, Path) or not _is_url(str(source)):
        path = Path(source)
        base: str | Path = path.parent
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ArtifactFormatError(f"cannot read artifact metadata: {exc}") from exc
    else:
        base = str(source)
        raw = _read_ref("", str(source))
    try:
        metadata = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ArtifactFormatError(f"metadata is not valid JSON: {exc}") from exc
    if metadata.get("format_version") != FORMAT_VERSION:
        raise ArtifactFormatError(
            f"artifact format version {metadata.get('format_version')} != {FORMAT_VERSION}"
        )

    blobs = []
    for entry in metadata["tensors"]:
        blobs.append((entry["name"], _read_ref(base, entry["file"])))
    digest = _payload_digest(blob for _, blob in blobs)
    recorded = metadata.get("digest", {})
    if recorded.get("algorithm") != "sha256":
        raise ArtifactFormatError(f"unsupported digest algorithm {recorded.get('algorithm')!r}")
    if digest != recorded.get("value"):
        raise DigestMismatchError(
            f"payload digest {digest} != recorded {recorded.get('value')}"
        )

    tensors = {name: decode_tensor(blob) for name, blob in blobs}
    try:
        return Perturbation(
            threat_model=ThreatModel.from_dict(metadata["threat_model"]),
            resolution=tuple(metadata["resolution"]),
            targeted=bool(metadata["targeted"]),
            target_text=metadata.get("target_text"),
            meta=PerturbationMeta.from_dict(metadata.get("meta", {})),
            **tensors,
        )
    except ValidationError as exc:
        raise InvariantViolationError(f"artifact violates its threat model: {exc}") from exc


@dataclass
class ZooIndex:
    """threat-model key -> attacker id -> descriptor. Relative descriptor
    paths resolve against the index file's directory."""

    entries: dict = field(default_factory=dict)
    base: str | Path = "."

    def __post_init__(self) -> None:
        for key, attackers in self.entries.items():
            if len(attackers) != len(set(attackers)):
                raise ValidationError(f"duplicate attacker ids under {key!r}")

    def add(self, key: str, attacker_id: str, descriptor: dict) -> None:
        bucket = self.entries.setdefault(key, {})
        if attacker_id in bucket:
            raise ValidationError(f"attacker id {attacker_id!r} already present under {key!r}")
        bucket[attacker_id] = dict(descriptor)

    def to_dict(self) -> dict:
        return {"schema": INDEX_SCHEMA, "entries": self.entries}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = {}
        for key, attackers in self.entries.items():
            entries[key] = {}
            for aid, desc in attackers.items():
                desc = dict(desc)
                ref = desc.get("path", "")
                if not _is_url(ref):
                    p = Path(ref)
                    if p.is_absolute():
                        try:
                            desc["path"] = str(p.relative_to(path.parent.resolve()))
                        except ValueError:
                            desc["path"] = str(p)
                entries[key][aid] = desc
        payload = {"schema": INDEX_SCHEMA, "entries": entries}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def load(path: str | Path) -> "ZooIndex":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactFormatError(f"cannot read zoo index {path}: {exc}") from exc
        if payload.get("schema") != INDEX_SCHEMA:
            raise ArtifactFormatError(f"unknown zoo index schema {payload.get('schema')!r}")
        return ZooIndex(entries=payload.get("entries", {}), base=path.parent)


def register_artifact(index: ZooIndex, artifact_path: str | Path, attacker_id: str) -> dict:
    """Add an already-saved artifact to the index under its threat key."""
    path = Path(artifact_path)
    metadata = json.loads(path.read_text())
    p = load_artifact(path)
    descriptor = {
        "path": str(path.resolve()),
        "format_version": metadata["format_version"],
        "digest": metadata["digest"]["value"],
        "summary": artifact_summary(metadata),
    }
    index.add(threat_key(p), attacker_id, descriptor)
    return descriptor


def list_threat_models(index: ZooIndex) -> list[str]:
    return sorted(index.entries)


def list_attackers(index: ZooIndex, threat_model: str) -> list[str]:
    if threat_model not in index.entries:
        raise UnknownAttackerError(f"unknown threat model key {threat_model!r}")
    return sorted(index.entries[threat_model])


def _resolve_ref(index: ZooIndex, ref: str) -> str | Path:
    if _is_url(ref):
        return ref
    p = Path(ref)
    if p.is_absolute():
        return p
    return Path(index.base) / p


def load_attacker(index: ZooIndex, threat_model: str, attacker_id: str) -> Perturbation:
    """Fetch, digest-verify, and validate one registered perturbation."""
    bucket = index.entries.get(threat_model)
    if bucket is None or attacker_id not in bucket:
        raise UnknownAttackerError(f"no attacker {attacker_id!r} under {threat_model!r}")
    descriptor = bucket[attacker_id]
    p = load_artifact(_resolve_ref(index, descriptor["path"]))
    recorded = descriptor.get("digest")
    if recorded is not None and recorded != perturbation_digest(p):
        raise DigestMismatchError("index digest does not match artifact digest")
    actual_key = threat_key(p)
    if actual_key != threat_model:
        raise InvariantViolationError(
            f"artifact is {actual_key!r} but indexed under {threat_model!r}"
        )
    return p


def ingest_external(
    threat_model: ThreatModel,
    resolution: tuple[int, int],
    delta: "np.ndarray | torch.Tensor | None" = None,
    mask: "np.ndarray | torch.Tensor | None" = None,
    pattern: "np.ndarray | torch.Tensor | None" = None,
    targeted: bool = False,
    target_text: str | None = None,
    source: str = "external",
) -> Perturbation:
    """Convert a third-party perturbation into this format. delta for LINF
    and L2; mask/pattern probabilities in (0,1) for PATCH (mapped to logits)."""

    def as_f32(x):
        t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
        return t

    meta = PerturbationMeta(config_digest=f"ingested:{source}")
    kwargs: dict = {}
    if threat_model.kind.value == "patch":
        if mask is None or pattern is None:
            raise ValidationError("patch ingestion requires mask and pattern")
        m = as_f32(mask).clamp(1e-6, 1.0 - 1e-6)
        d = as_f32(pattern).clamp(1e-6, 1.0 - 1e-6)
        kwargs["mask_logits"] = torch.log(m / (1.0 - m))
        kwargs["pattern_logits"] = torch.log(d / (1.0 - d))
    else:
        if delta is None:
            raise ValidationError("delta is required for LINF/L2 ingestion")
        kwargs["delta"] = as_f32(delta)
    return Perturbation(
        threat_model=threat_model,
        resolution=tuple(resolution),
        targeted=targeted,
        target_text=target_text,
        meta=meta,
        **kwargs,
    )
