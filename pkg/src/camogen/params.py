"""Named parameter storage with deterministic iteration order."""

from __future__ import annotations

import zlib

import numpy as np

from .autograd import Tensor
from .errors import InvariantError
from .rng import Rng


class ParamStore:
    """Map from string path to trainable Tensor, iterated lexicographically."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise InvariantError(f"duplicate parameter name: {name}")
        if not tensor.requires_grad:
            raise InvariantError(f"parameter {name} must require grad")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def checksum(self) -> int:
        """CRC-32 over names and raw values; detects any parameter change."""
        crc = 0
        for name, t in self.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), crc)
        return crc


def glorot(rng: Rng, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    """Uniform init in +-sqrt(6/(fan_in+fan_out))."""
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, shape, dtype=dtype)


def add_linear(store: ParamStore, prefix: str, rng: Rng, n_in: int, n_out: int,
               dtype=np.float32, bias: bool = True):
    """Register a weight (and optional zero bias) for a dense projection."""
    w = store.add(prefix + "/w",
                  Tensor(glorot(rng, (n_in, n_out), n_in, n_out, dtype), requires_grad=True))
    if not bias:
        return w, None
    b = store.add(prefix + "/b",
                  Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True))
    return w, b


def add_conv(store: ParamStore, prefix: str, rng: Rng, kh: int, kw: int,
             cin: int, cout: int, dtype=np.float32):
    """Register a conv kernel with fan counted over the receptive field."""
    fan_in = kh * kw * cin
    fan_out = kh * kw * cout
    w = store.add(prefix + "/w",
                  Tensor(glorot(rng, (kh, kw, cin, cout), fan_in, fan_out, dtype),
                         requires_grad=True))
    b = store.add(prefix + "/b",
                  Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
    return w, b
