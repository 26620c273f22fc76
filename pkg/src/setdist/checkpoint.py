"""Binary checkpoints for a trained embedding and classifier.

Layout (all integers u32 little-endian, all reals float64 little-endian)::

    b"SETDIST-CKPT"            12-byte magic
    version                    currently 1
    activation                 0 = identity, 1 = relu
    in_dim, out_dim, num_identities
    embedding weight           out_dim x in_dim, row-major
    embedding bias             out_dim
    classifier weight          num_identities x out_dim, row-major
    classifier bias            num_identities
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from setdist.learn import ACTIVATIONS, Classifier, EmbeddingModel

MAGIC = b"SETDIST-CKPT"
VERSION = 1
_HEADER = struct.Struct("<5I")


def to_bytes(model: EmbeddingModel, classifier: Classifier) -> bytes:
    if classifier.weight.shape[1] != model.out_dim:
        raise ValueError("classifier input size must equal the embedding out_dim")
    header = _HEADER.pack(VERSION, ACTIVATIONS.index(model.activation), model.in_dim,
                          model.out_dim, classifier.num_identities)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (model.weight, model.bias, classifier.weight, classifier.bias)
    )
    return MAGIC + header + body


def from_bytes(raw: bytes) -> tuple[EmbeddingModel, Classifier]:
    if not raw.startswith(MAGIC):
        raise ValueError("not a checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(raw) < offset + _HEADER.size:
        raise ValueError("truncated checkpoint header")
    version, act, in_dim, out_dim, n_ids = _HEADER.unpack_from(raw, offset)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if act >= len(ACTIVATIONS):
        raise ValueError(f"unknown activation code {act}")
    offset += _HEADER.size
    shapes = [(out_dim, in_dim), (out_dim,), (n_ids, out_dim), (n_ids,)]
    expected = offset + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise ValueError(f"checkpoint size mismatch: expected {expected} bytes, got {len(raw)}")
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
                      .reshape(shape).astype(np.float64))
        offset += 8 * count
    model = EmbeddingModel(arrays[0], arrays[1], ACTIVATIONS[act])
    return model, Classifier(arrays[2], arrays[3])


def save(path, model: EmbeddingModel, classifier: Classifier) -> None:
    Path(path).write_bytes(to_bytes(model, classifier))


def load(path) -> tuple[EmbeddingModel, Classifier]:
    return from_bytes(Path(path).read_bytes())
