"""Layer assembly, forward/backward passes, and the SGD update.

Three forward modes share one graph:

  real        plain float network (ReLU activations) - the FedAvg baseline
  fedbnn      binarized layers build the adjusted weight (fuse -> rotate ->
              adjust) and take its sign for the forward pass, as do the
              activations; backward shapes both slopes with the annealed
              surrogate derivative and the hand-coded mixing chains in
              surrogate.py (soft_forward swaps sign for the continuous F,
              the differentiable twin used by gradient checks)
  eval_binary sign() weights and activations - the deployable binary net

Convolutions over +-1 maps pad with -1 so the float path and the packed
XNOR path agree bit-exactly. Forward returns (logits, cache); backward
consumes the cache and yields one LayerGrads per parameterized layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import surrogate as sg
from . import tensor as T
from .rotation import RotationPair, matricize, optimize_rotation, rotate


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    pad: int = 1
    binarize: bool = False


@dataclass(frozen=True)
class DenseSpec:
    d_in: int
    d_out: int
    binarize: bool = False


@dataclass(frozen=True)
class PoolSpec:
    size: int = 2


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    n_classes: int
    input_shape: tuple  # (c, h, w)
    binary_activations: bool = True

    def n_rotated_layers(self) -> int:
        return sum(1 for l in self.layers
                   if isinstance(l, (ConvSpec, DenseSpec)) and l.binarize)


def build_cnn4(in_channels: int, n_classes: int, width: int = 32,
               input_hw: int = 28, binarize: str = "middle") -> ModelSpec:
    """Four conv blocks (pool after blocks 2 and 4) plus a dense classifier.

    Channels run width, 2*width, 2*width, 4*width. binarize picks which
    layers carry binary weights: "middle" (convs 2-4, the default),
    "all", or "none" (a plain float network).
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    if binarize not in ("middle", "all", "none"):
        raise ValueError(f"unknown binarize option {binarize!r}")
    b_first = binarize == "all"
    b_mid = binarize in ("middle", "all")
    if input_hw % 4:
        raise ValueError("input height/width must be divisible by 4 (two 2x2 pools)")
    hw_out = input_hw // 4
    layers = (
        ConvSpec(in_channels, width, binarize=b_first),
        ConvSpec(width, 2 * width, binarize=b_mid),
        PoolSpec(),
        ConvSpec(2 * width, 2 * width, binarize=b_mid),
        ConvSpec(2 * width, 4 * width, binarize=b_mid),
        PoolSpec(),
        DenseSpec(4 * width * hw_out * hw_out, n_classes, binarize=b_first),
    )
    return ModelSpec(layers, n_classes, (in_channels, input_hw, input_hw),
                     binary_activations=binarize != "none")


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerParams:
    """Trainable state for one conv or dense layer."""

    w: np.ndarray
    binarize: bool
    mix: sg.MixParams | None = None
    rot: RotationPair | None = None
    w_scale: float = 1.0  # post-training binarization fold, 1 for trained-binary
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    def rotation_dims(self) -> tuple[int, int]:
        """Matricization split: (c_out, c_in*k*k) for conv, (out, in) for dense."""
        if self.w.ndim == 4:
            return self.w.shape[0], self.w.shape[1] * self.w.shape[2] * self.w.shape[3]
        return self.w.shape[0], self.w.shape[1]


@dataclass
class Model:
    spec: ModelSpec
    layers: list  # LayerParams or None (pool slots), aligned with spec.layers


def init_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """He-initialized parameters; binarized weights start inside [-1, 1]."""
    params = []
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            fan_in = layer.c_in * layer.k ** 2
            w = rng.standard_normal((layer.c_out, layer.c_in, layer.k, layer.k))
            w *= math.sqrt(2.0 / fan_in)
            lp = LayerParams(
                w=w, binarize=layer.binarize,
                bn_scale=np.ones(layer.c_out), bn_shift=np.zeros(layer.c_out),
                bn_mean=np.zeros(layer.c_out), bn_var=np.ones(layer.c_out))
        elif isinstance(layer, DenseSpec):
            w = rng.standard_normal((layer.d_out, layer.d_in))
            w *= math.sqrt(2.0 / layer.d_in)
            lp = LayerParams(w=w, binarize=layer.binarize)
        else:
            params.append(None)
            continue
        if lp.binarize:
            np.clip(lp.w, -1.0, 1.0, out=lp.w)
            n1, n2 = lp.rotation_dims()
            lp.rot = RotationPair.identity(n1, n2)
            lp.mix = sg.MixParams()
        params.append(lp)
    return Model(spec, params)


def reset_round_state(model: Model, mix_defaults: sg.MixParams | None = None) -> None:
    """Fresh identity rotations and mixing parameters at the start of a round."""
    for lp in model.layers:
        if lp is not None and lp.binarize:
            n1, n2 = lp.rotation_dims()
            lp.rot = RotationPair.identity(n1, n2)
            d = mix_defaults or sg.MixParams()
            lp.mix = sg.MixParams(d.omega, d.theta, d.gamma,
                                  d.train_omega, d.train_gamma)


# --- flat state for the federation protocol ----------------------------

def state_dict(model: Model) -> dict[str, np.ndarray]:
    """Ordered name -> array map of everything the server aggregates."""
    out: dict[str, np.ndarray] = {}
    for i, lp in enumerate(model.layers):
        if lp is None:
            continue
        out[f"L{i}.w"] = lp.w.copy()
        if lp.bn_scale is not None:
            out[f"L{i}.bn_scale"] = lp.bn_scale.copy()
            out[f"L{i}.bn_shift"] = lp.bn_shift.copy()
            out[f"L{i}.bn_mean"] = lp.bn_mean.copy()
            out[f"L{i}.bn_var"] = lp.bn_var.copy()
    return out


def load_state_dict(model: Model, state: dict[str, np.ndarray]) -> None:
    for i, lp in enumerate(model.layers):
        if lp is None:
            continue
        lp.w = state[f"L{i}.w"].copy()
        if lp.bn_scale is not None:
            lp.bn_scale = state[f"L{i}.bn_scale"].copy()
            lp.bn_shift = state[f"L{i}.bn_shift"].copy()
            lp.bn_mean = state[f"L{i}.bn_mean"].copy()
            lp.bn_var = state[f"L{i}.bn_var"].copy()


def binarized_weight_keys(spec: ModelSpec) -> list[str]:
    return [f"L{i}.w" for i, l in enumerate(spec.layers)
            if isinstance(l, (ConvSpec, DenseSpec)) and l.binarize]


def weight_matricization(spec: ModelSpec, key: str) -> tuple[int, int]:
    idx = int(key[1:].split(".")[0])
    layer = spec.layers[idx]
    if isinstance(layer, ConvSpec):
        return layer.c_out, layer.c_in * layer.k ** 2
    return layer.d_out, layer.d_in


def count_params(model: Model) -> int:
    total = 0
    for lp in model.layers:
        if lp is None:
            continue
        total += lp.w.size
        if lp.bn_scale is not None:
            total += lp.bn_scale.size + lp.bn_shift.size
    return total


def count_rotation_params(model: Model) -> int:
    """Extra scalars carried by the rotation pairs of binarized layers."""
    total = 0
    for lp in model.layers:
        if lp is not None and lp.binarize:
            n1, n2 = lp.rotation_dims()
            total += n1 * n1 + n2 * n2
    return total


# --- batch norm ---------------------------------------------------------

def _bn_forward(x: np.ndarray, lp: LayerParams, train: bool) -> tuple[np.ndarray, dict]:
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        lp.bn_mean = (1 - BN_MOMENTUM) * lp.bn_mean + BN_MOMENTUM * mean
        lp.bn_var = (1 - BN_MOMENTUM) * lp.bn_var + BN_MOMENTUM * var
    else:
        mean, var = lp.bn_mean, lp.bn_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = lp.bn_scale[None, :, None, None] * xhat + lp.bn_shift[None, :, None, None]
    return out, {"xhat": xhat, "inv_std": inv_std}


def _bn_backward(grad: np.ndarray, bn_cache: dict,
                 lp: LayerParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std = bn_cache["xhat"], bn_cache["inv_std"]
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    g_shift = grad.sum(axis=(0, 2, 3))
    g_scale = (grad * xhat).sum(axis=(0, 2, 3))
    gxh = grad * lp.bn_scale[None, :, None, None]
    gx = (inv_std[None, :, None, None] / m) * (
        m * gxh
        - gxh.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxh * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return gx, g_scale, g_shift


# --- forward / backward -------------------------------------------------

@dataclass
class LayerGrads:
    w: np.ndarray
    theta: float = 0.0
    gamma: float = 0.0
    omega: float = 0.0
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None


def _effective_weight(lp: LayerParams, mode: str, w_server: np.ndarray | None,
                      tk: tuple[float, float] | None,
                      soft_forward: bool = False) -> tuple[np.ndarray, dict]:
    """Weight actually convolved, plus intermediates for backward.

    Training forward takes sign(wt) by default; the annealed surrogate
    shapes the backward slope only. soft_forward swaps in F(wt), the
    fully differentiable twin used by end-to-end gradient checks.
    """
    if mode == "real" or not lp.binarize:
        return lp.w, {}
    if mode == "eval_binary":
        return T.sign(lp.w), {}
    if w_server is None or tk is None:
        raise ValueError("fedbnn mode needs w_server and a (t, k) schedule point")
    t, k = tk
    mix = lp.mix
    w_fused = sg.fuse_weights(lp.w, w_server, mix.omega)
    w_rot = rotate(w_fused.reshape(-1), lp.rot)
    wt = sg.adjust_rotated(w_fused.reshape(-1), w_rot, w_server.reshape(-1),
                           mix.theta, mix.gamma)
    if soft_forward:
        w_eff = sg.surrogate_forward(wt, t, k).reshape(lp.w.shape)
    else:
        w_eff = T.sign(wt).reshape(lp.w.shape)
    return w_eff, {"w_fused": w_fused, "w_rot": w_rot, "wt": wt}


def _activation_forward(x: np.ndarray, mode: str, binary_acts: bool,
                        tk, soft_forward: bool) -> np.ndarray:
    if mode == "real" or not binary_acts:
        return T.relu(x)
    if mode == "fedbnn" and soft_forward:
        t, k = tk
        return sg.surrogate_forward(x, t, k)
    return T.sign(x)


def _activation_backward(x: np.ndarray, grad: np.ndarray, mode: str,
                         binary_acts: bool, tk, act: str) -> np.ndarray:
    if mode == "real" or not binary_acts:
        return T.relu_backward(x, grad)
    if act == "ste":
        return sg.ste_backward(x, grad)
    t, k = tk
    return grad * sg.surrogate_backward(x, t, k)


def forward(model: Model, x: np.ndarray, mode: str = "real",
            w_server: dict[str, np.ndarray] | None = None,
            tk: tuple[float, float] | None = None, train: bool = False,
            soft_forward: bool = False) -> tuple[np.ndarray, list | None]:
    """Run the network; returns (logits, cache). cache is None unless train."""
    if mode not in ("real", "fedbnn", "eval_binary"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "fedbnn" and w_server is None:
        raise ValueError("fedbnn mode requires the broadcast server weights")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    cache: list | None = [] if train else None
    bacts = model.spec.binary_activations
    binary_maps = mode == "eval_binary" or (mode == "fedbnn" and not soft_forward)
    for i, (lspec, lp) in enumerate(zip(model.spec.layers, model.layers)):
        if isinstance(lspec, PoolSpec):
            x, arg = T.maxpool2d_forward(x, lspec.size)
            if train:
                cache.append({"kind": "pool", "arg": arg, "size": lspec.size})
            continue
        ws = w_server.get(f"L{i}.w") if w_server else None
        w_eff, winfo = _effective_weight(lp, mode, ws, tk, soft_forward)
        if isinstance(lspec, ConvSpec):
            # +-1 activation maps pad with -1, the packed-path convention
            pad_value = -1.0 if (binary_maps and lp.binarize) else 0.0
            if mode == "eval_binary" and lp.binarize:
                x = T.sign(x)  # idempotent on +-1 maps, binarizes a raw input
            cols_out: list | None = [] if train else None
            out = T.conv2d_forward(x, w_eff, lspec.stride, lspec.pad, pad_value,
                                   cols_out=cols_out)
            if lp.w_scale != 1.0:
                out = out * lp.w_scale
            bn_out, bn_cache = _bn_forward(out, lp, train and mode != "eval_binary")
            act_out = _activation_forward(bn_out, mode, bacts, tk, soft_forward)
            if train:
                cache.append({"kind": "conv", "i": i, "x": x, "w_eff": w_eff,
                              "winfo": winfo, "bn": bn_cache, "pre_act": bn_out,
                              "pad_value": pad_value, "cols": cols_out[0]})
            x = act_out
            continue
        # dense head: flatten then linear
        flat = x.reshape(x.shape[0], -1)
        if mode == "eval_binary" and lp.binarize:
            flat = T.sign(flat)
        logits = flat @ w_eff.T
        if lp.w_scale != 1.0:
            logits = logits * lp.w_scale
        if train:
            cache.append({"kind": "dense", "i": i, "x_shape": x.shape,
                          "flat": flat, "w_eff": w_eff, "winfo": winfo})
        x = logits
    return x, cache


def _binarized_weight_grads(lp: LayerParams, g_weff: np.ndarray, winfo: dict,
                            ws: np.ndarray, tk: tuple[float, float]) -> LayerGrads:
    """Chain a cotangent on F(wt) back through adjust, rotate, and fuse."""
    t, k = tk
    mix = lp.mix
    g_wt = g_weff.reshape(-1) * sg.surrogate_backward(winfo["wt"], t, k)
    g_theta, g_gamma = sg.grad_alpha_beta(
        g_wt, winfo["w_fused"].reshape(-1), winfo["w_rot"],
        ws.reshape(-1), mix.theta, mix.gamma)
    g_wf = sg.grad_mixed_weight(g_wt, lp.rot, mix.theta, mix.gamma)
    g_omega = sg.grad_omega(g_wf, lp.w.reshape(-1), ws.reshape(-1), mix.omega)
    return LayerGrads(w=(mix.lam * g_wf).reshape(lp.w.shape), theta=g_theta,
                      gamma=g_gamma, omega=g_omega)


def backward(model: Model, cache: list, grad_logits: np.ndarray, mode: str,
             tk: tuple[float, float] | None = None,
             w_server: dict[str, np.ndarray] | None = None,
             act: str = "surrogate") -> dict[int, LayerGrads]:
    """Gradients for every trainable parameter given d(loss)/d(logits)."""
    grads: dict[int, LayerGrads] = {}
    grad = np.asarray(grad_logits, dtype=np.float64)
    bacts = model.spec.binary_activations
    for entry in reversed(cache):
        if entry["kind"] == "pool":
            grad = T.maxpool2d_backward(grad, entry["arg"], entry["size"])
            continue
        i = entry["i"]
        lp = model.layers[i]
        mixed = mode == "fedbnn" and lp.binarize
        if entry["kind"] == "dense":
            g_weff = grad.T @ entry["flat"]
            if mixed:
                grads[i] = _binarized_weight_grads(lp, g_weff, entry["winfo"],
                                                   w_server[f"L{i}.w"], tk)
            else:
                grads[i] = LayerGrads(w=g_weff)
            grad = (grad @ entry["w_eff"]).reshape(entry["x_shape"])
        else:  # conv
            lspec = model.spec.layers[i]
            grad = _activation_backward(entry["pre_act"], grad, mode, bacts, tk, act)
            grad, g_scale, g_shift = _bn_backward(grad, entry["bn"], lp)
            if lp.w_scale != 1.0:
                grad = grad * lp.w_scale
            grad, g_weff = T.conv2d_backward(entry["x"], entry["w_eff"], grad,
                                             lspec.stride, lspec.pad,
                                             entry["pad_value"],
                                             cols=entry["cols"])
            if mixed:
                grads[i] = _binarized_weight_grads(lp, g_weff, entry["winfo"],
                                                   w_server[f"L{i}.w"], tk)
            else:
                grads[i] = LayerGrads(w=g_weff)
            grads[i].bn_scale = g_scale
            grads[i].bn_shift = g_shift
    return grads


def sgd_step(model: Model, grads: dict[int, LayerGrads], lr: float) -> None:
    """Vanilla SGD on every trainable parameter; binarized w clipped to [-1, 1]."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for i, g in grads.items():
        lp = model.layers[i]
        lp.w = lp.w - lr * g.w
        if lp.binarize:
            np.clip(lp.w, -1.0, 1.0, out=lp.w)
            mix = lp.mix
            mix.theta -= lr * g.theta
            if mix.train_gamma:
                mix.gamma -= lr * g.gamma
            if mix.train_omega:
                mix.omega -= lr * g.omega
        if g.bn_scale is not None:
            lp.bn_scale = lp.bn_scale - lr * g.bn_scale
            lp.bn_shift = lp.bn_shift - lr * g.bn_shift


def optimize_model_rotations(model: Model, w_server: dict[str, np.ndarray],
                             n_iters: int = 3) -> None:
    """Refresh each binarized layer's rotation pair against its fused weight."""
    for i, lp in enumerate(model.layers):
        if lp is None or not lp.binarize:
            continue
        w_fused = sg.fuse_weights(lp.w, w_server[f"L{i}.w"], lp.mix.omega)
        n1, n2 = lp.rotation_dims()
        wbar = matricize(w_fused.reshape(-1), n1, n2)
        lp.rot, _ = optimize_rotation(wbar, lp.rot, n_iters)


def softmax_cross_entropy(logits: np.ndarray,
                          labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE loss and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def predict(model: Model, x: np.ndarray, mode: str, batch: int = 256) -> np.ndarray:
    """Class predictions in eval (no-cache) batches."""
    out = []
    for s in range(0, x.shape[0], batch):
        logits, _ = forward(model, x[s:s + batch], mode=mode, train=False)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(model: Model, x: np.ndarray, labels: np.ndarray, mode: str,
             batch: int = 256) -> tuple[float, float]:
    """(accuracy, mean loss) over a dataset."""
    correct = 0
    losses = []
    for s in range(0, x.shape[0], batch):
        logits, _ = forward(model, x[s:s + batch], mode=mode, train=False)
        loss, _ = softmax_cross_entropy(logits, labels[s:s + batch])
        losses.append(loss * logits.shape[0])
        correct += int((np.argmax(logits, axis=1) == labels[s:s + batch]).sum())
    n = x.shape[0]
    return correct / n, sum(losses) / n


def learning_rate(base_lr: float, round_idx: int, n_rounds: int,
                  decay_start: int = 200, n_decays: int = 3) -> float:
    """Halve the rate at n_decays evenly spaced milestones from decay_start on."""
    if decay_start >= n_rounds or n_decays <= 0:
        return base_lr
    step = max((n_rounds - decay_start) // n_decays, 1)
    milestones = [decay_start + j * step for j in range(n_decays)]
    halvings = sum(1 for m in milestones if round_idx >= m)
    return base_lr * (0.5 ** halvings)


# --- checkpoint container ----------------------------------------------
# A single .npz holding a JSON header under "spec_json" (layer table,
# version, scales) plus one array per state entry.

CHECKPOINT_VERSION = 1


def _spec_to_jsonable(spec: ModelSpec) -> dict:
    layers = []
    for l in spec.layers:
        if isinstance(l, ConvSpec):
            layers.append({"kind": "conv", "c_in": l.c_in, "c_out": l.c_out,
                           "k": l.k, "stride": l.stride, "pad": l.pad,
                           "binarize": l.binarize})
        elif isinstance(l, PoolSpec):
            layers.append({"kind": "pool", "size": l.size})
        else:
            layers.append({"kind": "dense", "d_in": l.d_in, "d_out": l.d_out,
                           "binarize": l.binarize})
    return {"layers": layers, "n_classes": spec.n_classes,
            "input_shape": list(spec.input_shape),
            "binary_activations": spec.binary_activations}


def spec_from_jsonable(obj: dict) -> ModelSpec:
    layers = []
    for l in obj["layers"]:
        if l["kind"] == "conv":
            layers.append(ConvSpec(l["c_in"], l["c_out"], l["k"], l["stride"],
                                   l["pad"], l["binarize"]))
        elif l["kind"] == "pool":
            layers.append(PoolSpec(l["size"]))
        else:
            layers.append(DenseSpec(l["d_in"], l["d_out"], l["binarize"]))
    return ModelSpec(tuple(layers), obj["n_classes"], tuple(obj["input_shape"]),
                     obj["binary_activations"])


def save_checkpoint(model: Model, path: str) -> None:
    header = {"version": CHECKPOINT_VERSION,
              "spec": _spec_to_jsonable(model.spec),
              "w_scale": {str(i): lp.w_scale for i, lp in enumerate(model.layers)
                          if lp is not None}}
    arrays = {"spec_json": np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update(state_dict(model))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str) -> Model:
    with np.load(path) as data:
        header = json.loads(bytes(data["spec_json"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        spec = spec_from_jsonable(header["spec"])
        model = init_model(spec, np.random.default_rng(0))
        state = {k: data[k] for k in data.files if k != "spec_json"}
        load_state_dict(model, state)
        for i_str, scale in header["w_scale"].items():
            model.layers[int(i_str)].w_scale = float(scale)
    return model
