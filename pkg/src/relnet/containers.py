"""Versioned binary containers for encoded datasets and checkpoints.

One shared block layout keeps both files portable and byte-reproducible:

    offset  size  field
    0       8     magic ``RELNETBC``
    8       8     kind, ASCII padded with NUL (``dataset`` or ``ckpt``)
    16      4     format version, little-endian uint32
    20      8     header length H, little-endian uint64
    28      H     header, canonical JSON (sorted keys, no whitespace)
    28+H    ...   block payloads, back to back in header order

The header's ``blocks`` list holds ``[name, dtype, shape]`` per block;
dtypes are ``<f8`` (little-endian float64) or ``<i4`` (little-endian
int32). Writing the same content always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from relnet.autodiff import ParameterStore
from relnet.babi import EncodedSample, Vocabulary

MAGIC = b"RELNETBC"
FORMAT_VERSION = 1
_DTYPES = {"<f8", "<i4"}


class ContainerError(ValueError):
    """File is not a readable container of the expected kind/version."""


def write_container(path, kind: str, header: dict,
                    blocks: list[tuple[str, np.ndarray]]) -> None:
    payloads = []
    index = []
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        dtype = "<i4" if arr.dtype.kind in "iu" else "<f8"
        arr = arr.astype(dtype)
        index.append([name, dtype, list(arr.shape)])
        payloads.append(arr.tobytes())
    full_header = dict(header)
    full_header["blocks"] = index
    encoded = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(kind.encode().ljust(8, b"\0")[:8])
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for payload in payloads:
            fh.write(payload)


def read_container(path, expect_kind: str | None = None) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a container file")
    kind = raw[8:16].rstrip(b"\0").decode()
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: kind {kind!r}, expected {expect_kind!r}")
    (version,) = struct.unpack("<I", raw[16:20])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", raw[20:28])
    header = json.loads(raw[28:28 + hlen].decode())
    offset = 28 + hlen
    arrays = {}
    for name, dtype, shape in header["blocks"]:
        if dtype not in _DTYPES:
            raise ContainerError(f"{path}: unknown block dtype {dtype!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        arrays[name] = np.frombuffer(
            raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


# ---------------------------------------------------------------------------
# encoded datasets


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: dict[str, list[EncodedSample]]
    context_size: int
    meta: dict

    def split(self, name: str) -> list[EncodedSample]:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}")
        return self.splits[name]

    @property
    def tasks(self) -> list[int]:
        seen = {s.task for samples in self.splits.values() for s in samples}
        return sorted(seen)


def _pack_ragged(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    bounds = np.zeros(len(seqs) + 1, dtype=np.int32)
    for i, s in enumerate(seqs):
        bounds[i + 1] = bounds[i] + len(s)
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int32, count=int(bounds[-1]))
    return flat, bounds


def _unpack_ragged(flat: np.ndarray, bounds: np.ndarray) -> list[list[int]]:
    return [flat[bounds[i]:bounds[i + 1]].tolist() for i in range(len(bounds) - 1)]


def save_dataset(path, dataset: Dataset) -> None:
    header = {
        "context_size": dataset.context_size,
        "meta": dataset.meta,
        "vocab_words": dataset.vocab.id_to_word,
        "vocab_answers": dataset.vocab.id_to_answer,
        "vocab_hash": dataset.vocab.content_hash(),
        "split_sizes": {k: len(v) for k, v in sorted(dataset.splits.items())},
    }
    blocks = []
    for split in sorted(dataset.splits):
        samples = dataset.splits[split]
        sent_flat, sent_bounds = _pack_ragged(
            [sent for s in samples for sent in s.sentences])
        q_flat, q_bounds = _pack_ragged([s.question for s in samples])
        sup_flat, sup_bounds = _pack_ragged([s.supports for s in samples])
        blocks += [
            (f"{split}/sent_tokens", sent_flat),
            (f"{split}/sent_bounds", sent_bounds),
            (f"{split}/q_tokens", q_flat),
            (f"{split}/q_bounds", q_bounds),
            (f"{split}/labels", np.array([s.label for s in samples], dtype=np.int32)),
            (f"{split}/tasks", np.array([s.task for s in samples], dtype=np.int32)),
            (f"{split}/sup_tokens", sup_flat),
            (f"{split}/sup_bounds", sup_bounds),
        ]
    write_container(path, "dataset", header, blocks)


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path, expect_kind="dataset")
    vocab = Vocabulary(id_to_word=header["vocab_words"],
                       id_to_answer=header["vocab_answers"])
    n_ctx = header["context_size"]
    splits: dict[str, list[EncodedSample]] = {}
    for split, size in header["split_sizes"].items():
        sentences = _unpack_ragged(arrays[f"{split}/sent_tokens"],
                                   arrays[f"{split}/sent_bounds"])
        questions = _unpack_ragged(arrays[f"{split}/q_tokens"],
                                   arrays[f"{split}/q_bounds"])
        supports = _unpack_ragged(arrays[f"{split}/sup_tokens"],
                                  arrays[f"{split}/sup_bounds"])
        labels = arrays[f"{split}/labels"]
        tasks = arrays[f"{split}/tasks"]
        samples = []
        for i in range(size):
            samples.append(EncodedSample(
                task=int(tasks[i]),
                sentences=sentences[i * n_ctx:(i + 1) * n_ctx],
                question=questions[i],
                label=int(labels[i]),
                supports=supports[i],
            ))
        splits[split] = samples
    return Dataset(vocab=vocab, splits=splits, context_size=n_ctx,
                   meta=header.get("meta", {}))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, store: ParameterStore, step: int, extra: dict) -> None:
    """Parameters plus optimizer slots; ``extra`` carries config/vocab hashes."""
    params_meta = {}
    blocks = []
    for name, p in store.items():
        params_meta[name] = {"shape": list(p.value.shape), "regularize": p.regularize}
        blocks.append((f"param/{name}", p.value.data))
    for name, p in store.items():
        for slot in sorted(p.state):
            blocks.append((f"slot/{slot}/{name}", p.state[slot]))
    header = {"params": params_meta, "step": step, "extra": extra}
    write_container(path, "ckpt", header, blocks)


def load_checkpoint(path) -> tuple[ParameterStore, int, dict]:
    header, arrays = read_container(path, expect_kind="ckpt")
    store = ParameterStore()
    for name, meta in sorted(header["params"].items()):
        store.add(name, arrays[f"param/{name}"], regularize=meta["regularize"])
    for key, arr in arrays.items():
        if key.startswith("slot/"):
            _, slot, name = key.split("/", 2)
            store[name].state[slot] = arr.astype(np.float64)
    return store, header["step"], header["extra"]
