"""Canonical parameter serialization and checksums.

The freeze contract is verified by hashing serialized parameters before and
after training, so the byte encoding must be canonical: sorted names, raw
little-endian buffers, shapes and dtypes included.
"""

import hashlib

import numpy as np
import torch


def tensor_bytes(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().numpy()
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return np.ascontiguousarray(a).tobytes()


def state_dict_digest(state: dict) -> str:
    """SHA-256 over a module state dict in sorted-key order."""
    h = hashlib.sha256()
    for name in sorted(state.keys()):
        t = state[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(tensor_bytes(t))
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return state_dict_digest(module.state_dict())
