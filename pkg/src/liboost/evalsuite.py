"""Attack evaluation: success rates, the local-invariance metric, transfer
matrices across victim models, and the invariance/transferability
correlation study. Reports are plot-ready CSV/JSON.

Local invariance is returned as an exact rational so that value * (2k+1)^2
is integral for every input and means are independent of summation order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .attacks import run_attack_set
from .translate import translate
from .zoo import predict_batch


class EvalInputError(ValueError):
    """Inputs to an evaluation are inconsistent (counts, variance, ...)."""


@dataclass
class TransferMatrix:
    attack_names: list
    victim_names: list
    cells: np.ndarray  # (attacks, victims) ASR in [0, 1]
    surrogate: str
    eval_set: str

    def asr(self, attack, victim):
        return float(self.cells[self.attack_names.index(attack), self.victim_names.index(victim)])


@dataclass
class InvarianceRecord:
    attack: str
    surrogate: str
    k: int
    mean_invariance: float
    mean_victim_asr: float


def _check_counts(examples, perturbations):
    n = len(examples)
    if n != len(perturbations) or n < 1:
        raise EvalInputError(
            f"need matching non-empty examples and perturbations, got {n} and {len(perturbations)}"
        )


def attack_success_rate(model, dataset, perturbations, mode="clean-pred-flip"):
    """Fraction of examples whose prediction the perturbation breaks.

    clean-pred-flip counts f(x) != f(x+delta); ground-truth counts
    f(x+delta) != y.
    """
    _check_counts(dataset, perturbations)
    deltas = np.stack([np.asarray(d, dtype=np.float32) for d in perturbations])
    adv_preds = predict_batch(model, dataset.images + deltas)
    if mode == "clean-pred-flip":
        ref = predict_batch(model, dataset.images)
        return float(np.mean(adv_preds != ref))
    if mode == "ground-truth":
        return float(np.mean(adv_preds != dataset.labels))
    raise EvalInputError(f"unknown asr mode {mode!r}")


def local_invariance(model, x, delta, k):
    """Fraction of the (2k+1)^2 integer translations of delta that flip the
    prediction relative to the clean image; exact rational."""
    x = np.asarray(x, dtype=np.float32)
    delta = np.asarray(delta, dtype=np.float32)
    H, W = x.shape[-2], x.shape[-1]
    if k < 0 or k >= W or k >= H:
        raise EvalInputError(f"k={k} is out of range for a {H}x{W} image")
    offsets = [(i, j) for i in range(-k, k + 1) for j in range(-k, k + 1)]
    batch = np.stack([x + translate(delta, i, j) for i, j in offsets])
    clean = predict_batch(model, x[None])[0]
    preds = predict_batch(model, batch)
    flips = int(np.sum(preds != clean))
    return Fraction(flips, len(offsets))


def mean_local_invariance(model, dataset, perturbations, k):
    """Arithmetic mean of per-example local invariance; exact rational, so
    permutation-invariant over example order."""
    _check_counts(dataset, perturbations)
    total = Fraction(0)
    for idx in range(len(dataset)):
        total += local_invariance(model, dataset.images[idx], perturbations[idx], k)
    return total / len(dataset)


def transfer_matrix(attack_names, surrogate, victims, eval_set, cfg, workers=None):
    """Runs each attack on the surrogate over the eval set and scores every
    victim. victims maps name -> model; the surrogate's own column is the
    white-box one."""
    if not attack_names or not victims:
        raise EvalInputError("need at least one attack and one victim")
    surrogate_name, surrogate_model = surrogate
    victim_names = list(victims)
    cells = np.zeros((len(attack_names), len(victim_names)))
    for row, name in enumerate(attack_names):
        results = run_attack_set(name, surrogate_model, eval_set, cfg, workers=workers)
        deltas = [r.delta for r in results]
        for col, vname in enumerate(victim_names):
            cells[row, col] = attack_success_rate(victims[vname], eval_set, deltas, cfg.asr_mode)
    return TransferMatrix(list(attack_names), victim_names, cells, surrogate_name, eval_set.split)


def invariance_transfer_correlation(records):
    """Pearson correlation between mean local invariance and mean victim ASR.

    Computed as cov / sqrt(var_x * var_y) with a single square root so that
    exactly collinear inputs yield exactly +-1.
    """
    if len(records) < 3:
        raise EvalInputError(f"need at least 3 records, got {len(records)}")
    xs = np.asarray([r.mean_invariance for r in records], dtype=np.float64)
    ys = np.asarray([r.mean_victim_asr for r in records], dtype=np.float64)
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = float(np.sum(dx * dx))
    vy = float(np.sum(dy * dy))
    if vx == 0.0 or vy == 0.0:
        raise EvalInputError("zero variance in invariance or ASR axis")
    r = float(np.sum(dx * dy)) / math.sqrt(vx * vy)
    points = [
        {
            "attack": rec.attack,
            "mean_invariance": rec.mean_invariance,
            "mean_victim_asr": rec.mean_victim_asr,
        }
        for rec in records
    ]
    return r, points


# ---------------------------------------------------------------------------
# report files


def write_transfer_csv(path, matrix):
    """Header: attack,victim,asr_percent,white_box; percentages one decimal."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack", "victim", "asr_percent", "white_box"])
        for row, attack in enumerate(matrix.attack_names):
            for col, victim in enumerate(matrix.victim_names):
                writer.writerow(
                    [
                        attack,
                        victim,
                        f"{100.0 * matrix.cells[row, col]:.1f}",
                        "true" if victim == matrix.surrogate else "false",
                    ]
                )


def write_invariance_csv(path, records):
    """Header: attack,surrogate,k,mean_invariance,mean_victim_asr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack", "surrogate", "k", "mean_invariance", "mean_victim_asr"])
        for rec in records:
            writer.writerow(
                [
                    rec.attack,
                    rec.surrogate,
                    rec.k,
                    f"{rec.mean_invariance:.6f}",
                    f"{rec.mean_victim_asr:.6f}",
                ]
            )


def write_correlation_json(path, records):
    r, points = invariance_transfer_correlation(records)
    doc = {"pearson_r": r, "n": len(records), "points": points}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return r
