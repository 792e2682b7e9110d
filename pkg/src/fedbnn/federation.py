"""Federated round loop: client updates, dual aggregation, model selection.

Each round the server samples clients, runs local training, and builds
two aggregates from the returned packets: the plain sample-weighted
average of real weights (the only thing ever broadcast) and a
rotation-aligned average used purely to score and select models. The
auxiliary selection model recombines them with the previous broadcast
through the same adjustable update used client-side. FedAvg is the
degenerate configuration with no rotation, mixing, or binarization.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import model as mdl
from .binary import cost_report, post_training_binarize, rotation_overhead
from .config import ExperimentConfig
from .data import (Dataset, PartitionSpec, fmnist_like_dataset, load_idx,
                   partition, split_val_test, synthetic_dataset, write_idx)
from .rotation import RotationPair, rotate
from .surrogate import MixParams, SurrogateSchedule, schedule_tk


class ProtocolError(RuntimeError):
    """A packet is missing state the aggregation step requires."""


@dataclass
class ClientUpdatePacket:
    client_id: int
    weights: dict[str, np.ndarray]
    rotations: dict[str, RotationPair] | None
    mixes: dict[str, MixParams] | None
    n_samples: int


@dataclass
class ServerState:
    w_broadcast: dict[str, np.ndarray]
    w_prev: dict[str, np.ndarray]
    best_aux_model: dict[str, np.ndarray] | None = None
    best_val_acc: float = -1.0
    best_round: int = -1
    round: int = 0
    server_mix: dict[str, tuple[float, float]] = field(default_factory=dict)


def _client_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_idx, client_id])


def _mix_defaults(method: str) -> MixParams:
    if method == "fedbnn_beta1_lambda1":
        # lambda = sigmoid(inf) = 1 kills the fusion; gamma = pi/2 pins
        # beta = 1; both are frozen so the ablation stays exact.
        return MixParams(omega=math.inf, gamma=math.pi / 2,
                         train_omega=False, train_gamma=False)
    return MixParams()


def client_update(client_id: int, indices: np.ndarray, train_ds: Dataset,
                  w_server: dict[str, np.ndarray], spec: mdl.ModelSpec,
                  cfg: ExperimentConfig, round_idx: int,
                  sched: SurrogateSchedule,
                  mix_init: dict[str, MixParams] | None = None
                  ) -> ClientUpdatePacket | None:
    """One client's local training pass; None signals an empty partition.

    mix_init carries the client's mixing state from its previous
    participation (warm-start flag); clients are stateless by default.
    """
    if len(indices) == 0:
        return None
    fed = cfg.federation
    mode = "real" if cfg.method == "fedavg" else "fedbnn"
    rng = _client_rng(cfg.seed, round_idx, client_id)
    model = mdl.init_model(spec, rng)
    mdl.load_state_dict(model, w_server)
    mdl.reset_round_state(model, _mix_defaults(cfg.method))
    if mix_init:
        for i, lp in enumerate(model.layers):
            if lp is not None and lp.binarize and f"L{i}.w" in mix_init:
                prev = mix_init[f"L{i}.w"]
                lp.mix = MixParams(prev.omega, prev.theta, prev.gamma,
                                   prev.train_omega, prev.train_gamma)
    lr = mdl.learning_rate(fed.lr, round_idx, fed.n_rounds,
                           fed.lr_decay_start, fed.lr_decay_count)
    for epoch in range(fed.n_local_epochs):
        tk = schedule_tk(sched, round_idx, epoch) if mode == "fedbnn" else None
        if mode == "fedbnn":
            mdl.optimize_model_rotations(model, w_server, fed.n_rotation_iters)
        order = rng.permutation(indices)
        for s in range(0, len(order), fed.batch_size):
            batch = order[s:s + fed.batch_size]
            if len(batch) < 2:
                continue  # batch norm needs a batch statistic
            logits, cache = mdl.forward(
                model, train_ds.images[batch], mode=mode, w_server=w_server,
                tk=tk, train=True, soft_forward=fed.soft_forward)
            _, grad = mdl.softmax_cross_entropy(logits, train_ds.labels[batch])
            grads = mdl.backward(model, cache, grad, mode, tk, w_server,
                                 act=fed.activations)
            mdl.sgd_step(model, grads, lr)
    rotations = None
    mixes = None
    if mode == "fedbnn":
        rotations = {}
        mixes = {}
        for i, lp in enumerate(model.layers):
            if lp is not None and lp.binarize:
                rotations[f"L{i}.w"] = lp.rot
                mixes[f"L{i}.w"] = lp.mix
    return ClientUpdatePacket(client_id, mdl.state_dict(model), rotations,
                              mixes, len(indices))


def _weighted_sum(packets: list[ClientUpdatePacket],
                  value) -> dict[str, np.ndarray]:
    total = sum(p.n_samples for p in packets)
    out: dict[str, np.ndarray] = {}
    for p in packets:
        coef = p.n_samples / total
        for key, arr in value(p).items():
            if key in out:
                out[key] = out[key] + coef * arr
            else:
                out[key] = coef * arr
    return out


def aggregate_real(packets: list[ClientUpdatePacket]) -> dict[str, np.ndarray]:
    """Sample-weighted mean of client weights; the next broadcast."""
    if not packets:
        raise ProtocolError("aggregate_real needs at least one packet")
    return _weighted_sum(packets, lambda p: p.weights)


def aggregate_rotated(packets: list[ClientUpdatePacket],
                      spec: mdl.ModelSpec) -> dict[str, np.ndarray]:
    """Sample-weighted mean with each binarized weight rotated first."""
    if not packets:
        raise ProtocolError("aggregate_rotated needs at least one packet")
    bin_keys = set(mdl.binarized_weight_keys(spec))
    for p in packets:
        if p.rotations is None or not bin_keys <= set(p.rotations):
            raise ProtocolError(f"client {p.client_id} packet lacks rotations")

    def rotated(p: ClientUpdatePacket) -> dict[str, np.ndarray]:
        out = {}
        for key, arr in p.weights.items():
            if key in bin_keys:
                out[key] = rotate(arr.reshape(-1), p.rotations[key]).reshape(arr.shape)
            else:
                out[key] = arr
        return out

    return _weighted_sum(packets, rotated)


def aggregate_mixes(packets: list[ClientUpdatePacket],
                    spec: mdl.ModelSpec) -> dict[str, tuple[float, float, float]]:
    """Sample-weighted (lambda, alpha, beta) per binarized layer."""
    total = sum(p.n_samples for p in packets)
    out: dict[str, list[float]] = {}
    for key in mdl.binarized_weight_keys(spec):
        lam = alpha = beta = 0.0
        for p in packets:
            if p.mixes is None or key not in p.mixes:
                raise ProtocolError(f"client {p.client_id} packet lacks mix {key}")
            m = p.mixes[key]
            coef = p.n_samples / total
            lam += coef * m.lam
            alpha += coef * m.alpha
            beta += coef * m.beta
        out[key] = (lam, alpha, beta)
    return out


def server_auxiliary(w_next: dict[str, np.ndarray],
                     w_rot_next: dict[str, np.ndarray],
                     w_prev: dict[str, np.ndarray],
                     server_mix: dict[str, tuple[float, float]]) -> dict[str, np.ndarray]:
    """Rotation-aligned selection model; never broadcast.

    For layers with a mix entry:
        aux = w_next + a*b*(w_rot_next - w_next) + a*(1-b)*(w_prev - w_next)
    Other state passes through w_next unchanged.
    """
    out = {}
    for key, arr in w_next.items():
        if key in server_mix:
            a, b = server_mix[key]
            out[key] = (arr + a * b * (w_rot_next[key] - arr)
                        + a * (1.0 - b) * (w_prev[key] - arr))
        else:
            out[key] = arr.copy()
    return out


def aggregate_client_auxiliary(packets: list[ClientUpdatePacket],
                               w_prev: dict[str, np.ndarray],
                               spec: mdl.ModelSpec) -> dict[str, np.ndarray]:
    """Alternative: build each client's adjusted weights, then average."""
    if not packets:
        raise ProtocolError("aggregate_client_auxiliary needs at least one packet")
    bin_keys = set(mdl.binarized_weight_keys(spec))
    for p in packets:
        if p.rotations is None or p.mixes is None:
            raise ProtocolError(f"client {p.client_id} packet lacks rotation state")

    def adjusted(p: ClientUpdatePacket) -> dict[str, np.ndarray]:
        out = {}
        for key, arr in p.weights.items():
            if key in bin_keys:
                m = p.mixes[key]
                a, b = m.alpha, m.beta
                w_rot = rotate(arr.reshape(-1), p.rotations[key]).reshape(arr.shape)
                out[key] = (arr + a * b * (w_rot - arr)
                            + a * (1.0 - b) * (w_prev[key] - arr))
            else:
                out[key] = arr
        return out

    return _weighted_sum(packets, adjusted)


# --- data preparation ----------------------------------------------------

def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset, list]:
    """(train, val, test, client index lists) per the config."""
    d = cfg.dataset
    if d.kind == "synthetic":
        # one draw shares the class prototypes between train and held-out
        full = synthetic_dataset(d.n_train + d.n_test, d.n_classes, cfg.seed,
                                 image_hw=d.image_hw, noise=d.noise)
        train = full.subset(np.arange(d.n_train))
        held = full.subset(np.arange(d.n_train, d.n_train + d.n_test))
    elif d.kind == "fmnist_like_idx":
        data_dir = os.path.join(cfg.output_dir, "data")
        os.makedirs(data_dir, exist_ok=True)
        paths = {name: os.path.join(data_dir, name) for name in
                 ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                  "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
        if not all(os.path.exists(p) for p in paths.values()):
            gen_train = fmnist_like_dataset(d.n_train, cfg.seed, noise=d.noise)
            gen_test = fmnist_like_dataset(d.n_test, cfg.seed + 1, noise=d.noise)
            write_idx(gen_train, paths["train-images-idx3-ubyte"],
                      paths["train-labels-idx1-ubyte"])
            write_idx(gen_test, paths["t10k-images-idx3-ubyte"],
                      paths["t10k-labels-idx1-ubyte"])
        train = load_idx(paths["train-images-idx3-ubyte"],
                         paths["train-labels-idx1-ubyte"])
        held = load_idx(paths["t10k-images-idx3-ubyte"],
                        paths["t10k-labels-idx1-ubyte"])
        train.n_classes = held.n_classes = d.n_classes
    else:  # fmnist_idx
        train = load_idx(d.images_path, d.labels_path)
        held = load_idx(d.test_images_path, d.test_labels_path)
        train.n_classes = held.n_classes = d.n_classes
        if 0 < d.n_train < len(train):
            train = train.subset(np.arange(d.n_train))
        if 0 < d.n_test < len(held):
            held = held.subset(np.arange(d.n_test))
    val, test = split_val_test(held, cfg.seed)
    pspec = PartitionSpec(cfg.partition.scheme, cfg.federation.n_clients,
                          cfg.partition.dirichlet_alpha,
                          cfg.partition.labels_per_client, cfg.seed)
    parts = partition(train, pspec)
    return train, val, test, parts


# --- the round loop ------------------------------------------------------

def _build_spec(cfg: ExperimentConfig, n_classes: int, image_hw: int,
                in_channels: int) -> mdl.ModelSpec:
    binarize = "none" if cfg.method == "fedavg" else cfg.model.binarize
    return mdl.build_cnn4(in_channels, n_classes, cfg.model.width,
                          input_hw=image_hw, binarize=binarize)


def _states_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


def run_federation(cfg: ExperimentConfig,
                   data: tuple | None = None
                   ) -> tuple[dict, list[M.MetricsRecord], mdl.Model]:
    """Execute the full schedule; returns (report, per-round records, best model)."""
    train, val, test, parts = data if data is not None else prepare_data(cfg)
    fed = cfg.federation
    spec = _build_spec(cfg, train.n_classes, train.images.shape[2],
                       train.images.shape[1])
    sched = SurrogateSchedule(fed.n_rounds, fed.n_local_epochs,
                              cfg.surrogate.t_min, cfg.surrogate.t_max)
    init_rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    model0 = mdl.init_model(spec, init_rng)
    state = ServerState(w_broadcast=mdl.state_dict(model0),
                        w_prev=mdl.state_dict(model0))
    eval_model = mdl.init_model(spec, np.random.default_rng(0))
    records: list[M.MetricsRecord] = []
    broadcast_purity = True
    expected_broadcast = {k: v.copy() for k, v in state.w_broadcast.items()}
    is_fedbnn = cfg.method != "fedavg"
    client_mix_memory: dict[int, dict[str, MixParams]] = {}

    for r in range(fed.n_rounds):
        sample_rng = np.random.default_rng([cfg.seed, 0x5A3B1E, r])
        selected = sorted(sample_rng.choice(fed.n_clients,
                                            size=fed.n_clients_per_round,
                                            replace=False).tolist())
        # purity: what goes out this round is last round's real aggregate
        broadcast = state.w_broadcast
        if not _states_equal(broadcast, expected_broadcast):
            broadcast_purity = False

        def one(k: int) -> ClientUpdatePacket | None:
            mix_init = client_mix_memory.get(k) if fed.client_mix_warm_start else None
            return client_update(k, parts[k], train, broadcast, spec, cfg, r,
                                 sched, mix_init)

        if cfg.jobs > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                results = list(pool.map(one, selected))
        else:
            results = [one(k) for k in selected]
        packets = [p for p in results if p is not None]
        if not packets:
            raise ProtocolError(f"round {r}: every sampled client was empty")
        if fed.client_mix_warm_start:
            for p in packets:
                if p.mixes is not None:
                    client_mix_memory[p.client_id] = p.mixes

        w_next = aggregate_real(packets)
        expected_broadcast = {k: v.copy() for k, v in w_next.items()}
        if is_fedbnn:
            mixes = aggregate_mixes(packets, spec)
            if fed.server_mix == "fixed":
                server_mix = {k: (fed.server_alpha, fed.server_beta) for k in mixes}
            else:
                server_mix = {k: (a, b) for k, (_, a, b) in mixes.items()}
            state.server_mix = server_mix
            if cfg.method == "fedbnn_client_aux":
                aux = aggregate_client_auxiliary(packets, state.w_prev, spec)
            else:
                w_rot_next = aggregate_rotated(packets, spec)
                aux = server_auxiliary(w_next, w_rot_next, state.w_prev, server_mix)
        else:
            mixes = {}
            aux = w_next

        mdl.load_state_dict(eval_model, w_next)
        val_acc_real, val_loss = mdl.evaluate(eval_model, val.images, val.labels,
                                              mode="real")
        if is_fedbnn:
            mdl.load_state_dict(eval_model, aux)
            val_acc_binary, _ = mdl.evaluate(eval_model, val.images, val.labels,
                                             mode="eval_binary")
            selection_acc = val_acc_binary
        else:
            bin_model = post_training_binarize(eval_model)
            val_acc_binary, _ = mdl.evaluate(bin_model, val.images, val.labels,
                                             mode="eval_binary")
            selection_acc = val_acc_real

        best = selection_acc > state.best_val_acc
        if best:
            state.best_val_acc = selection_acc
            state.best_round = r
            state.best_aux_model = {k: v.copy() for k, v in aux.items()}

        mix_by_layer = {int(key.split(".")[0][1:]): vals
                        for key, vals in mixes.items()}
        records.append(M.record_round(r, val_acc_real, val_acc_binary, val_loss,
                                      mix_by_layer, best))
        state.w_prev = state.w_broadcast
        state.w_broadcast = w_next
        state.round = r + 1

    # final scoring of the selected model on the held-out test half
    best_model = mdl.init_model(spec, np.random.default_rng(0))
    mdl.load_state_dict(best_model, state.best_aux_model)
    if is_fedbnn:
        test_acc_binary, _ = mdl.evaluate(best_model, test.images, test.labels,
                                          mode="eval_binary")
        test_acc_clean = test_acc_binary  # the deployed model is the binary one
        cost_spec = spec
    else:
        test_acc_clean, _ = mdl.evaluate(best_model, test.images, test.labels,
                                         mode="real")
        bin_model = post_training_binarize(best_model)
        test_acc_binary, _ = mdl.evaluate(bin_model, test.images, test.labels,
                                          mode="eval_binary")
        cost_spec = bin_model.spec  # cost of the binarized deployment twin
    if records:
        records[-1].test_acc_binary = test_acc_binary

    report = {
        "method": cfg.method,
        "seed": cfg.seed,
        "n_rounds": fed.n_rounds,
        "best_round": state.best_round,
        "best_val_acc": state.best_val_acc,
        "test_acc_clean": test_acc_clean,
        "test_acc_binary": test_acc_binary,
        "broadcast_purity": broadcast_purity,
        "cost": cost_report(cost_spec),
        "rotation_overhead": rotation_overhead(cost_spec),
    }
    return report, records, best_model
