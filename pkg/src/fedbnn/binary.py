"""Bit-packed inference: XNOR + popcount kernels and the runtime cost model.

A +-1 tensor packs one element per bit into little-endian 64-bit words
(bit 0 of word 0 = flat index 0; 1 bit encodes +1, 0 encodes -1). For
+-1 vectors a, b of length n the dot product is

    sum(a_i * b_i) = 2 * popcount(XNOR(a, b)) - n

over the n valid bits. Binarized convolution pads with -1 (a packed map
cannot represent 0); the float reference path uses the same convention
so results agree as exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import im2col, out_dim, sign

_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint64)


@dataclass(frozen=True)
class PackedTensor:
    """Bit-packed +-1 tensor: logical shape plus words and valid length."""

    shape: tuple[int, ...]
    words: np.ndarray  # 1-D uint64

    @property
    def n(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def _pack_bits(rows: np.ndarray) -> np.ndarray:
    """Pack a (m, n) +-1 (or sign-able) array into (m, ceil(n/64)) uint64."""
    bits = (rows >= 0).astype(np.uint8)
    packed8 = np.packbits(bits, axis=-1, bitorder="little")
    pad = (-packed8.shape[-1]) % 8
    if pad:
        packed8 = np.pad(packed8, [(0, 0)] * (packed8.ndim - 1) + [(0, pad)])
    return packed8.view(np.uint64)


def _popcount(words: np.ndarray) -> np.ndarray:
    """Per-word set-bit counts, any shape."""
    by = words[..., None].view(np.uint8)  # (..., 8)
    return _POPCOUNT8[by].sum(axis=-1)


def pack(x: np.ndarray) -> PackedTensor:
    """Pack sign(x) losslessly; unpack(pack(x)) == sign(x)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(1, -1)
    return PackedTensor(tuple(x.shape), _pack_bits(flat)[0])


def unpack(p: PackedTensor) -> np.ndarray:
    by = p.words.view(np.uint8)
    bits = np.unpackbits(by, bitorder="little")[: p.n]
    return np.where(bits == 1, 1.0, -1.0).reshape(p.shape)


def _valid_mask(n: int, n_words: int) -> np.ndarray:
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n % 64
    if rem:
        mask[n // 64] = np.uint64((1 << rem) - 1)
    mask[(n + 63) // 64:] = np.uint64(0)
    return mask


def binary_dot(a: PackedTensor, b: PackedTensor) -> int:
    """Integer dot product of two packed +-1 vectors via XNOR + popcount."""
    if a.n != b.n:
        raise ValueError(f"length mismatch: {a.n} vs {b.n}")
    mask = _valid_mask(a.n, len(a.words))
    xnor = ~(a.words ^ b.words) & mask
    return int(2 * int(_popcount(xnor).sum()) - a.n)


def _xnor_accumulate(patch_words: np.ndarray, filt_words: np.ndarray,
                     n_bits: int) -> np.ndarray:
    """All-pairs +-1 dot products: (P, W) x (F, W) words -> (P, F) ints."""
    mask = _valid_mask(n_bits, patch_words.shape[1])
    xnor = ~(patch_words[:, None, :] ^ filt_words[None, :, :]) & mask
    pop = _popcount(xnor).sum(axis=-1)
    return (2 * pop.astype(np.int64)) - n_bits


def binary_conv2d(inp: PackedTensor, weight: PackedTensor, stride: int = 1,
                  pad: int = 0) -> np.ndarray:
    """XNOR-popcount convolution of packed +-1 maps; padding contributes -1.

    inp has logical shape (c_in, h, w) or (n, c_in, h, w); weight has
    (c_out, c_in, k, k). Returns exact int64 accumulations equal to
    conv2d_forward(sign(inp), sign(weight), pad_value=-1).
    """
    x = unpack(inp)
    w = unpack(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"binary_conv2d expects 3/4-D input and 4-D weight, "
                         f"got {x.ndim}-D and {w.ndim}-D")
    n, c, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    if c != c_in:
        raise ValueError(f"input has {c} channels, weight expects {c_in}")
    oh, ow = out_dim(h, k, stride, pad), out_dim(wd, k, stride, pad)
    cols = im2col(x, k, stride, pad, pad_value=-1.0).reshape(n * oh * ow, -1)
    patch_words = _pack_bits(cols)
    filt_words = _pack_bits(w.reshape(c_out, -1))
    acc = _xnor_accumulate(patch_words, filt_words, c_in * k * k)
    acc = acc.reshape(n, oh * ow, c_out).transpose(0, 2, 1).reshape(n, c_out, oh, ow)
    return acc[0] if squeeze else acc


def binarize_weights(w: np.ndarray, scaling: str = "l2") -> tuple[np.ndarray, float]:
    """Split a weight tensor into (sign(w), scale).

    "l2" preserves the layer L2 norm: scale = ||w||_2 / sqrt(n), so
    ||scale * sign(w)||_2 == ||w||_2. "l1" is the mean-absolute
    alternative: scale = ||w||_1 / n.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    if scaling == "l2":
        scale = float(np.linalg.norm(w.reshape(-1)) / np.sqrt(n))
    elif scaling == "l1":
        scale = float(np.sum(np.abs(w)) / n)
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    return sign(w), scale


def post_training_binarize(model, layers: str = "middle", scaling: str = "l2"):
    """Convert a trained float model into a sign-weight model.

    Each targeted layer's weight becomes sign(w) with a layer-wise scale
    folded into the layer output (i.e. into the following normalization),
    so inference stays pure +-1 with integer accumulation. "middle"
    targets every conv except the first weighted layer; "all" targets
    every weighted layer.
    """
    import copy
    from dataclasses import replace

    from .model import ConvSpec, Model

    if layers not in ("middle", "all"):
        raise ValueError(f"unknown layer selection {layers!r}")
    out_layers = []
    new_specs = []
    seen_first = False
    for lspec, lp in zip(model.spec.layers, model.layers):
        if lp is None:
            new_specs.append(lspec)
            out_layers.append(None)
            continue
        is_conv = isinstance(lspec, ConvSpec)
        first = is_conv and not seen_first
        if is_conv:
            seen_first = True
        target = layers == "all" or (is_conv and not first)
        lp2 = copy.deepcopy(lp)
        if target:
            wb, scale = binarize_weights(lp.w, scaling)
            lp2.w = wb
            lp2.w_scale = scale
            lp2.binarize = True
            new_specs.append(replace(lspec, binarize=True))
        else:
            new_specs.append(lspec)
        out_layers.append(lp2)
    spec = replace(model.spec, layers=tuple(new_specs), binary_activations=True)
    return Model(spec, out_layers)


def packed_forward(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Binary inference with the conv accumulations done by XNOR + popcount.

    Mirrors forward(mode="eval_binary") exactly: real layers run in
    float, binarized convs run packed. Used as the bit-exactness oracle
    and as the deployable runtime reference.
    """
    from .model import ConvSpec, PoolSpec, _bn_forward
    from . import tensor as T

    outs = []
    for s in range(0, x.shape[0], batch):
        xb = np.asarray(x[s:s + batch], dtype=np.float64)
        for lspec, lp in zip(model.spec.layers, model.layers):
            if isinstance(lspec, PoolSpec):
                xb, _ = T.maxpool2d_forward(xb, lspec.size)
                continue
            if isinstance(lspec, ConvSpec):
                if lp.binarize:
                    acc = binary_conv2d(pack(xb), pack(lp.w),
                                        lspec.stride, lspec.pad).astype(np.float64)
                else:
                    acc = T.conv2d_forward(xb, lp.w, lspec.stride, lspec.pad)
                if lp.w_scale != 1.0:
                    acc = acc * lp.w_scale
                out, _ = _bn_forward(acc, lp, train=False)
                xb = T.sign(out) if model.spec.binary_activations else T.relu(out)
                continue
            flat = xb.reshape(xb.shape[0], -1)
            if lp.binarize:
                flat = T.sign(flat)
                w_eff = T.sign(lp.w)
            else:
                w_eff = lp.w
            xb = flat @ w_eff.T
            if lp.w_scale != 1.0:
                xb = xb * lp.w_scale
        outs.append(xb)
    return np.concatenate(outs)


# --- packed model export ------------------------------------------------
# Layout: 8-byte magic "FBNNPK01", then a 4-byte big-endian header length
# and a JSON header (shape table, scales, bit order note), then each
# binarized layer's sign bits as little-endian 64-bit words with the LSB
# of word 0 holding flat index 0.

_PACK_MAGIC = b"FBNNPK01"


def export_packed_model(model, path: str) -> None:
    import json

    entries = []
    blobs = []
    for i, lp in enumerate(model.layers):
        if lp is None or not lp.binarize:
            continue
        p = pack(lp.w)
        entries.append({"layer": i, "shape": list(lp.w.shape),
                        "w_scale": lp.w_scale, "n_words": len(p.words)})
        blobs.append(p.words.astype("<u8").tobytes())
    header = json.dumps({"bit_order": "lsb-first", "layers": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_PACK_MAGIC)
        f.write(len(header).to_bytes(4, "big"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_packed_weights(path: str) -> dict[int, tuple[np.ndarray, float]]:
    """Read an exported packed model: layer index -> (+-1 weights, scale)."""
    import json

    with open(path, "rb") as f:
        if f.read(8) != _PACK_MAGIC:
            raise ValueError(f"{path}: not a packed model file")
        hlen = int.from_bytes(f.read(4), "big")
        header = json.loads(f.read(hlen).decode())
        out = {}
        for entry in header["layers"]:
            words = np.frombuffer(f.read(entry["n_words"] * 8), dtype="<u8")
            p = PackedTensor(tuple(entry["shape"]), words.astype(np.uint64))
            out[entry["layer"]] = (unpack(p), float(entry["w_scale"]))
    return out


# --- runtime cost model ------------------------------------------------
# Per conv layer: FLOPs ~= 2 * c_in * k^2 * oh * ow * c_out (mults +
# adds); dense layers cost 2 * d_in * d_out. Parameters occupy 32 bits
# each; binarization divides a layer's FLOPs by 58 and stores its
# parameters at 1 bit. Pooling and normalization are not counted.

FLOPS_REDUCTION = 58
MEMORY_REDUCTION = 32  # bits per real parameter


def _layer_costs(spec, input_shape) -> list[tuple[int, int, bool]]:
    """Per weighted layer: (flops, n_params, binarized) given input (c, h, w)."""
    from .model import ConvSpec, DenseSpec, PoolSpec  # local import to avoid a cycle

    c, h, w = input_shape
    costs = []
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            oh = out_dim(h, layer.k, layer.stride, layer.pad)
            ow = out_dim(w, layer.k, layer.stride, layer.pad)
            flops = 2 * layer.c_in * layer.k ** 2 * oh * ow * layer.c_out
            n_params = layer.c_out * layer.c_in * layer.k ** 2
            costs.append((flops, n_params, layer.binarize))
            c, h, w = layer.c_out, oh, ow
        elif isinstance(layer, PoolSpec):
            h, w = h // layer.size, w // layer.size
        elif isinstance(layer, DenseSpec):
            costs.append((2 * layer.d_in * layer.d_out,
                          layer.d_in * layer.d_out, layer.binarize))
    return costs


def count_flops(spec, input_shape, mode: str) -> float:
    """Total inference FLOPs for "real" or "binary" execution."""
    costs = _layer_costs(spec, input_shape)
    if mode == "real":
        return float(sum(f for f, _, _ in costs))
    if mode == "binary":
        return float(sum(Fraction(f, FLOPS_REDUCTION) if binar else Fraction(f)
                         for f, _, binar in costs))
    raise ValueError(f"unknown mode {mode!r}")


def count_memory_bits(spec, mode: str) -> int:
    """Total parameter storage in bits (32 per real weight, 1 per binary)."""
    costs = _layer_costs(spec, (spec.input_shape))
    if mode == "real":
        return sum(p * MEMORY_REDUCTION for _, p, _ in costs)
    if mode == "binary":
        return sum(p if binar else p * MEMORY_REDUCTION for _, p, binar in costs)
    raise ValueError(f"unknown mode {mode!r}")


def cost_report(spec, input_shape=None) -> dict:
    """Exact-ratio cost summary used by run reports and the acceptance suite."""
    if input_shape is None:
        input_shape = spec.input_shape
    costs = _layer_costs(spec, input_shape)
    flops_real = Fraction(sum(f for f, _, _ in costs))
    flops_bin = sum(Fraction(f, FLOPS_REDUCTION) if binar else Fraction(f)
                    for f, _, binar in costs)
    bits_real = sum(p * MEMORY_REDUCTION for _, p, _ in costs)
    bits_bin = sum(p if binar else p * MEMORY_REDUCTION for _, p, binar in costs)
    return {
        "flops_real": float(flops_real),
        "flops_binary": float(flops_bin),
        "flops_ratio": float(flops_real / flops_bin),
        "memory_bits_real": bits_real,
        "memory_bits_binary": bits_bin,
        "memory_mb_real": bits_real / 8 / 1e6,
        "memory_mb_binary": bits_bin / 8 / 1e6,
        "memory_ratio": bits_real / bits_bin,
    }


def rotation_overhead(spec) -> dict:
    """Extra parameters carried by the rotation pairs of binarized layers."""
    from .model import ConvSpec, DenseSpec

    weight_params = 0
    rot_params = 0
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            weight_params += layer.c_out * layer.c_in * layer.k ** 2
            if layer.binarize:
                rot_params += layer.c_out ** 2 + (layer.c_in * layer.k ** 2) ** 2
        elif isinstance(layer, DenseSpec):
            weight_params += layer.d_in * layer.d_out
            if layer.binarize:
                rot_params += layer.d_out ** 2 + layer.d_in ** 2
    return {
        "weight_params": weight_params,
        "rotation_params": rot_params,
        "percent": 100.0 * rot_params / weight_params if weight_params else 0.0,
    }
