"""Single-file checkpoints: a safetensors parameter map, a JSON header and a content hash.

Every stage writes its trainable state through ``save_checkpoint``. Stage-2
checkpoints also record the content hashes of the frozen checkpoints they
were trained on, so that loading them against other weights is refused.
"""
import hashlib
import json
import logging
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from errors import CheckpointError, CheckpointMismatch

logger = logging.getLogger(__name__)


def state_hash(tensors):
    """sha256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        if tensor.numel():
            digest.update(tensor.reshape(-1).view(torch.uint8).numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path, tensors, header):
    """
    Write a checkpoint.
    Parameters:
        path: destination file (.safetensors)
        tensors: dict name -> tensor
        header: JSON-serialisable dict (kind, config, parent hashes, ...)
    Returns:
        the content hash
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.detach().cpu().contiguous() for name, t in tensors.items()}
    content_hash = state_hash(tensors)
    metadata = {"header": json.dumps(header, sort_keys=True), "content_hash": content_hash}
    save_file(tensors, str(path), metadata=metadata)
    logger.info("Checkpoint saved : %s (%s, hash %s)", path, header.get("kind"), content_hash[:12])
    return content_hash


def load_checkpoint(path, kind=None):
    """Returns (tensors, header, content_hash); the hash is re-verified on load."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            tensors = {name: f.get_tensor(name) for name in f.keys()}
    except Exception as e:  # safetensors raises its own error types
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if "header" not in metadata or "content_hash" not in metadata:
        raise CheckpointError(f"checkpoint {path} has no header")
    header = json.loads(metadata["header"])
    content_hash = state_hash(tensors)
    if content_hash != metadata["content_hash"]:
        raise CheckpointError(f"checkpoint {path} is corrupted (content hash mismatch)")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"checkpoint {path} is a '{header.get('kind')}', expected '{kind}'")
    return tensors, header, content_hash


def require_parent(header, key, actual_hash, what):
    expected = header.get("parents", {}).get(key)
    if expected is None or actual_hash is None or expected != actual_hash:
        raise CheckpointMismatch(
            f"{what} hash {str(actual_hash)[:12]} does not match the one this checkpoint was trained on "
            f"({str(expected)[:12]})"
        )


def split_prefix(tensors, prefix):
    """Sub-dict of ``tensors`` under ``prefix.``, with the prefix removed."""
    start = prefix + "."
    return {name[len(start):]: t for name, t in tensors.items() if name.startswith(start)}


def with_prefix(state, prefix):
    return {f"{prefix}.{name}": t for name, t in state.items()}
