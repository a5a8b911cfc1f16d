import hashlib
import io
import json
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ChecksumError, FrozenModuleError


def param_checksum(module_or_params) -> str:
    """sha256 over parameter bytes, in a stable order."""
    h = hashlib.sha256()
    if isinstance(module_or_params, nn.Module):
        items = sorted(module_or_params.state_dict().items())
        tensors = [t for _, t in items]
        for name, _ in items:
            h.update(name.encode())
    else:
        tensors = list(module_or_params)
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FreezableMixin:
    """Once ``freeze()`` is called the module refuses to become trainable again."""

    frozen = False

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        nn.Module.train(self, False)
        self.frozen = True
        return self

    def _refuse(self, what):
        raise FrozenModuleError(f"{type(self).__name__} is frozen; refusing to {what}")

    def train(self, mode: bool = True):
        if mode and self.frozen:
            self._refuse("enter training mode")
        return nn.Module.train(self, mode)

    def requires_grad_(self, requires_grad: bool = True):
        if requires_grad and self.frozen:
            self._refuse("enable gradients")
        return nn.Module.requires_grad_(self, requires_grad)

    def load_state_dict(self, state_dict, strict: bool = True, assign: bool = False):
        if self.frozen:
            self._refuse("load new parameters")
        return nn.Module.load_state_dict(self, state_dict, strict=strict, assign=assign)


def write_blob(obj, path, sidecar: dict) -> dict:
    """torch-serialise ``obj`` to ``path`` and write a JSON sidecar with its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(obj, buf)
    data = buf.getvalue()
    meta = dict(sidecar)
    meta["sha256"] = hashlib.sha256(data).hexdigest()
    path.write_bytes(data)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_blob(path):
    """Inverse of ``write_blob``; raises ChecksumError before deserialising anything on mismatch."""
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != meta.get("sha256"):
        raise ChecksumError(f"{path}: sha256 {digest[:12]}... does not match sidecar")
    obj = torch.load(io.BytesIO(data), map_location="cpu", weights_only=False)
    return obj, meta


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
