"""Model checkpoints: a text manifest plus one raw little-endian float64 file per tensor.

Layout of a checkpoint directory::

    manifest.txt        key=value: format, seed, vocab hash, model config,
                        and per tensor its shape and sha256
    vocab.txt           one token per line, id order
    params/<name>.f64   row-major '<f8' bytes

Nothing time- or host-dependent is written, so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Vocabulary
from .kv import dataclass_from_strings, dataclass_pairs, read_kv_file, write_kv_file
from .model import ModelConfig, ModelParams, check_params

FORMAT = "gedaes-checkpoint-1"


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    seed: int


def save_checkpoint(directory, params: ModelParams, config: ModelConfig, vocab: Vocabulary, seed: int) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    check_params(params, config)
    pairs = [("format", FORMAT), ("seed", seed), ("vocab_hash", vocab.hash())]
    pairs += dataclass_pairs(config, prefix="config.")
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        (directory / "params" / f"{name}.f64").write_bytes(data)
        pairs.append((f"param.{name}.shape", ",".join(str(d) for d in value.shape)))
        pairs.append((f"param.{name}.sha256", hashlib.sha256(data).hexdigest()))
    vocab.save(directory / "vocab.txt")
    write_kv_file(directory / "manifest.txt", pairs)
    return directory


def load_checkpoint(directory) -> Checkpoint:
    """Read and verify a checkpoint; any integrity problem raises CheckpointError."""
    directory = Path(directory)
    try:
        manifest = read_kv_file(directory / "manifest.txt")
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{directory}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    try:
        config = dataclass_from_strings(ModelConfig, manifest, prefix="config.")
        seed = int(manifest["seed"])
        vocab = Vocabulary.load(directory / "vocab.txt")
    except (KeyError, ValueError, TypeError, OSError) as exc:
        raise CheckpointError(f"{directory}: invalid manifest or vocabulary ({exc})") from exc
    if vocab.hash() != manifest.get("vocab_hash"):
        raise CheckpointError(f"{directory}: vocabulary hash mismatch")
    values = {}
    for name in ModelParams.names():
        try:
            shape = tuple(int(d) for d in manifest[f"param.{name}.shape"].split(","))
            data = (directory / "params" / f"{name}.f64").read_bytes()
        except (KeyError, ValueError, OSError) as exc:
            raise CheckpointError(f"{directory}: tensor {name!r} missing ({exc})") from exc
        if hashlib.sha256(data).hexdigest() != manifest.get(f"param.{name}.sha256"):
            raise CheckpointError(f"{directory}: tensor {name!r} fails its checksum")
        if len(data) != 8 * int(np.prod(shape)):
            raise CheckpointError(f"{directory}: tensor {name!r} has wrong byte length")
        values[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    params = ModelParams(**values)
    try:
        check_params(params, config)
    except ValueError as exc:
        raise CheckpointError(f"{directory}: {exc}") from exc
    if len(vocab) != config.vocab_size:
        raise CheckpointError(f"{directory}: vocabulary size does not match config")
    return Checkpoint(params, config, vocab, seed)
