"""Simulated per-tensor linear weight quantization and accuracy-vs-bits sweeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dan import DanNetwork
from .tensor import Tensor
from .train import evaluate

VALID_BITS = (4, 6, 8, 16, 32)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    scope: str = "per-tensor"
    exclude_bn: bool = True

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise ValueError(f"bits must be one of {VALID_BITS}, got {self.bits}")
        if self.scope != "per-tensor":
            raise ValueError("only per-tensor grids are supported")


def quantize_indices(x: np.ndarray, bits: int) -> tuple[np.ndarray, float, float]:
    """Grid index of every element on the ``2**bits``-level grid over ``[min, max]``.

    Values exactly halfway between two levels go to the lower one.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    steps = 2 ** bits - 1
    if hi == lo:
        return np.zeros(x.shape, dtype=np.int64), lo, hi
    u = (x - lo) * steps / (hi - lo)
    idx = np.clip(np.ceil(u - 0.5), 0, steps).astype(np.int64)
    return idx, lo, hi


def dequantize(idx: np.ndarray, lo: float, hi: float, bits: int) -> np.ndarray:
    steps = 2 ** bits - 1
    if hi == lo:
        return np.full(idx.shape, lo)
    q = lo + idx * ((hi - lo) / steps)
    return np.where(idx == steps, hi, q)


def quantize_linear(t, bits: int):
    """Snap ``t`` to its per-tensor linear grid; returns dequantized floats of the same type.

    ``bits=32`` is the identity.
    """
    is_tensor = isinstance(t, Tensor)
    x = t.data if is_tensor else np.asarray(t, dtype=np.float64)
    if bits >= 32 or x.size == 0:
        q = x.copy()
    else:
        q = dequantize(*quantize_indices(x, bits), bits)
    return Tensor(q) if is_tensor else q


def error_bound(x, bits: int) -> float:
    """Largest possible ``|q - x|`` for the grid of ``x``: half a grid step."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if bits >= 32:
        return 0.0
    return (float(x.max()) - float(x.min())) / (2 * (2 ** bits - 1))


def _quantizable(net: DanNetwork, exclude_bn: bool):
    """(name, array, n_params, diagonal) for every learned tensor; BN entries flagged."""
    diag = set()
    for t, tk in enumerate(net.tasks):
        for l, tl in enumerate(tk.layers):
            if tl.controller is not None and tl.controller.mode == "diagonal":
                diag.add(f"task{t}.conv{l}.W")
    for name, arr in net.named_tensors().items():
        if "running_" in name:
            continue
        is_bn = name.startswith("bn")
        n = arr.shape[0] if name in diag else arr.size
        yield name, arr, n, name in diag, is_bn and exclude_bn


def quantize_model(net: DanNetwork, spec: QuantSpec) -> DanNetwork:
    """Quantized copy of ``net``: conv, head and controller tensors; BN left alone if excluded."""
    out = net.clone()
    if spec.bits == 32:
        return out
    for name, arr, _, diagonal, skip in _quantizable(out, spec.exclude_bn):
        if skip:
            continue
        if diagonal:
            d = quantize_linear(np.diag(arr).copy(), spec.bits)
            arr[np.diag_indices_from(arr)] = d
        else:
            arr[...] = quantize_linear(arr, spec.bits)
    return out


def param_bits(net: DanNetwork, spec: QuantSpec) -> int:
    """Storage bits: quantized parameters at ``spec.bits``, excluded ones at 32."""
    total = 0
    for _, _, n, _, skip in _quantizable(net, spec.exclude_bn):
        total += n * (32 if skip else spec.bits)
    return total


SWEEP_FIELDS = ["bits", "accuracy", "total_param_bits"]


def accuracy_vs_bits(net: DanNetwork, data, bits_list=VALID_BITS, task=0, exclude_bn: bool = True) -> list[dict]:
    rows = []
    for bits in bits_list:
        spec = QuantSpec(bits, exclude_bn=exclude_bn)
        qnet = quantize_model(net, spec)
        rows.append({"bits": bits, "accuracy": evaluate(qnet, data, task), "total_param_bits": param_bits(net, spec)})
    return rows
