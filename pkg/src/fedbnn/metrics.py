"""Per-round metric capture and CSV persistence.

Each round yields one MetricsRecord carrying the evaluation scores plus
the sample-weighted mixing parameters of the participating clients.
Four derived per-layer quantities are logged: lambda (fusion weight),
1-alpha (kept client direction), alpha*beta (rotated direction), and
alpha*(1-beta) (server alignment); the three mixing coefficients sum to
1 identically. Two CSVs are written: a per-(round, layer) detail file
and a one-row-per-round summary. Floats are formatted at 6 significant
digits and the byte output is deterministic for fixed records.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field


@dataclass
class LayerMix:
    layer: int
    lam: float
    one_minus_alpha: float
    alpha_times_beta: float
    alpha_times_one_minus_beta: float


@dataclass
class MetricsRecord:
    round: int
    val_acc_real: float
    val_acc_binary: float
    val_loss: float
    best_so_far: bool = False
    test_acc_binary: float | None = None
    per_layer: list[LayerMix] = field(default_factory=list)


def layer_mix_from_params(layer: int, lam: float, alpha: float, beta: float) -> LayerMix:
    return LayerMix(layer, lam, 1.0 - alpha, alpha * beta, alpha * (1.0 - beta))


def record_round(round_idx: int, val_acc_real: float, val_acc_binary: float,
                 val_loss: float, mix_by_layer: dict[int, tuple[float, float, float]],
                 best_so_far: bool) -> MetricsRecord:
    """mix_by_layer maps layer index -> sample-weighted (lambda, alpha, beta)."""
    per_layer = [layer_mix_from_params(i, lam, a, b)
                 for i, (lam, a, b) in sorted(mix_by_layer.items())]
    return MetricsRecord(round_idx, val_acc_real, val_acc_binary, val_loss,
                         best_so_far, per_layer=per_layer)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.6g}"
    if x is None:
        return ""
    return str(x)


SUMMARY_COLUMNS = ["round", "val_acc_real", "val_acc_binary", "val_loss",
                   "best_so_far", "test_acc_binary"]
LAYER_COLUMNS = ["round", "layer", "lambda", "one_minus_alpha",
                 "alpha_times_beta", "alpha_times_one_minus_beta"]


def write_csv(records: list[MetricsRecord], summary_path: str,
              layers_path: str) -> None:
    """Write the per-round summary and per-(round, layer) detail files."""
    try:
        with open(summary_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(SUMMARY_COLUMNS)
            for r in records:
                w.writerow([_fmt(v) for v in
                            (r.round, r.val_acc_real, r.val_acc_binary,
                             r.val_loss, r.best_so_far, r.test_acc_binary)])
        with open(layers_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LAYER_COLUMNS)
            for r in records:
                for lm in r.per_layer:
                    w.writerow([_fmt(v) for v in
                                (r.round, lm.layer, lm.lam, lm.one_minus_alpha,
                                 lm.alpha_times_beta,
                                 lm.alpha_times_one_minus_beta)])
    except OSError as e:
        raise OSError(f"writing metrics CSV failed for "
                      f"{summary_path!r}/{layers_path!r}: {e}") from e


def read_csv_rows(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
