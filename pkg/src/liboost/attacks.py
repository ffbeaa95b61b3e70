"""Perturbation generators: sign-gradient backbones, the translated-sample
averaged gradient that boosts their local invariance, the exhaustive max-min
variant, a diversity input transform, and logit-fusion ensembles.

All attacks operate on one (C,H,W) image at a time with an L-inf budget.
Randomness comes from an explicit per-example generator so results are
independent of worker count and scheduling.
"""
from __future__ import annotations

import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as ts
from .sampling import (
    FULL_GRID,
    KINDS,
    OFFSET_MODES,
    derive_rng,
    full_grid,
    make_distribution,
    sample_offset,
)
from .translate import translate, translate_adjoint

ASR_MODES = ("clean-pred-flip", "ground-truth")
BF_GRAD_MODES = ("argmin", "all")
BACKBONES = ("fgsm", "ifgsm", "mi_fgsm", "dim_mi")

_MOMENTUM_FLOOR = 1e-12  # below this the normalized gradient term is 0


class AttackNumericError(ArithmeticError):
    """A loss or gradient went non-finite mid-attack."""


class UnknownAttackError(ValueError):
    """Attack name is not registered; message lists the registry."""


@dataclass(frozen=True)
class AttackConfig:
    """Full hyper-parameter record shared by every attack."""

    eps: float = 0.3
    steps: int = 10
    step_size: float = None  # defaults to eps / steps
    decay: float = 1.0
    samples: int = 30
    shift_bound: int = 6
    dist: str = "logarithmic"
    offset_mode: str = "ring"
    adjoint_grad: bool = True
    pixel_clamp: bool = True
    asr_mode: str = "clean-pred-flip"
    bf_grad_mode: str = "argmin"
    dim_resize_rate: float = 1.1
    dim_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.resolved_step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.decay < 0:
            raise ValueError(f"decay must be >= 0, got {self.decay}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.shift_bound < 0:
            raise ValueError(f"shift_bound must be >= 0, got {self.shift_bound}")
        if self.dist not in KINDS:
            raise ValueError(f"unknown dist {self.dist!r}; expected one of {KINDS}")
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"unknown offset_mode {self.offset_mode!r}")
        if self.asr_mode not in ASR_MODES:
            raise ValueError(f"unknown asr_mode {self.asr_mode!r}; expected one of {ASR_MODES}")
        if self.bf_grad_mode not in BF_GRAD_MODES:
            raise ValueError(f"unknown bf_grad_mode {self.bf_grad_mode!r}")
        if self.dim_resize_rate < 1:
            raise ValueError(f"dim_resize_rate must be >= 1, got {self.dim_resize_rate}")
        if not 0 <= self.dim_prob <= 1:
            raise ValueError(f"dim_prob must be in [0, 1], got {self.dim_prob}")

    @property
    def resolved_step_size(self):
        return self.eps / self.steps if self.step_size is None else self.step_size

    def offset_distribution(self):
        # magnitude kinds are undefined at k = 0; the degenerate bound only
        # ever draws (0, 0), which fullgrid covers
        kind = FULL_GRID if self.shift_bound == 0 else self.dist
        return make_distribution(kind, self.shift_bound, self.offset_mode)


@dataclass
class Counters:
    forwards: int = 0
    backwards: int = 0


@dataclass
class AttackResult:
    delta: np.ndarray  # final perturbation, image-shaped float32
    loss_trace: list
    forwards: int
    backwards: int
    seconds: float
    center_losses: list = field(default=None)


def example_rng(cfg, example_index):
    """The per-example generator stream: derived from (seed, example index)."""
    return derive_rng(cfg.seed, "example", example_index)


def _streams(cfg, rng):
    """Splits one example stream into decoupled offset and transform streams."""
    if rng is None:
        rng = example_rng(cfg, 0)
    offsets, transform = rng.spawn(2)
    return offsets, transform


def _grad_at(model, adv, y, counters, transform_map=None):
    """Input gradient of the loss at one adversarial image."""
    inp = ts.Tensor(adv[None], requires_grad=True)
    fed = ts.gather_pixels(inp, *transform_map) if transform_map is not None else inp
    loss = ts.cross_entropy_loss(model.forward(fed), [y])
    ts.backward(loss)
    counters.forwards += 1
    counters.backwards += 1
    return inp.grad[0], float(loss.data)


def li_boost_gradient(
    model, x, delta, y, cfg, rng, counters=None, transform_hook=None, exhaustive=False
):
    """Mean input gradient over translated copies of the current perturbation.

    Draws cfg.samples offsets from the configured distribution (or, in
    exhaustive mode, walks the whole grid once in row-major order) and
    averages the per-offset gradients in draw order. With adjoint_grad each
    per-offset gradient is translated back first, which is the exact chain
    rule through the translation.
    """
    counters = counters if counters is not None else Counters()
    if exhaustive:
        offsets = full_grid(cfg.shift_bound)
    else:
        dist = cfg.offset_distribution()
        offsets = [sample_offset(dist, rng) for _ in range(cfg.samples)]
    acc = None
    loss_sum = 0.0
    for i, j in offsets:
        adv = x + translate(delta, i, j)
        tmap = transform_hook() if transform_hook is not None else None
        g, loss = _grad_at(model, adv, y, counters, tmap)
        if cfg.adjoint_grad:
            g = translate_adjoint(g, i, j)
        acc = g if acc is None else acc + g
        loss_sum += loss
    n = len(offsets)
    return acc / np.float32(n), loss_sum / n


def _momentum_sign_loop(x, cfg, grad_fn, steps, decay, counters, t0):
    """Shared iteration: momentum accumulation and the clamped sign step."""
    x = np.asarray(x, dtype=np.float32)
    eps = np.float32(cfg.eps)
    alpha = np.float32(cfg.resolved_step_size)
    delta = np.zeros_like(x)
    g_mom = np.zeros_like(x)
    trace = []
    for t in range(1, steps + 1):
        gbar, loss = grad_fn(delta, t)
        if not np.isfinite(loss) or not np.isfinite(gbar).all():
            raise AttackNumericError(f"non-finite loss or gradient at iteration {t}")
        trace.append(loss)
        gmax = float(np.abs(gbar).max())
        if gmax >= _MOMENTUM_FLOOR:
            g_mom = decay * g_mom + gbar / np.float32(gmax)
        else:
            g_mom = decay * g_mom
        delta = np.clip(delta + alpha * np.sign(g_mom), -eps, eps)
        if cfg.pixel_clamp:
            delta = np.clip(delta, -x, np.float32(1.0) - x)
    return AttackResult(delta, trace, counters.forwards, counters.backwards, time.perf_counter() - t0)


def fgsm(model, x, y, eps, pixel_clamp=True):
    """Single sign-gradient step of size eps."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float32)
    counters = Counters()
    g, loss = _grad_at(model, x, y, counters)
    eps32 = np.float32(eps)
    delta = np.clip(eps32 * np.sign(g), -eps32, eps32)
    if pixel_clamp:
        delta = np.clip(delta, -x, np.float32(1.0) - x)
    return AttackResult(delta, [loss], counters.forwards, counters.backwards, time.perf_counter() - t0)


def _plain_grad_fn(model, x, y, counters, transform_hook=None):
    def grad_fn(delta, _t):
        tmap = transform_hook() if transform_hook is not None else None
        return _grad_at(model, x + delta, y, counters, tmap)

    return grad_fn


def ifgsm(model, x, y, cfg, rng=None):
    """Iterative sign steps, no momentum."""
    counters = Counters()
    return _momentum_sign_loop(
        x, cfg, _plain_grad_fn(model, np.asarray(x, dtype=np.float32), y, counters),
        cfg.steps, np.float32(0.0), counters, time.perf_counter()
    )


def mi_fgsm(model, x, y, cfg, rng=None):
    """Momentum-accumulated iterative sign attack."""
    counters = Counters()
    return _momentum_sign_loop(
        x, cfg, _plain_grad_fn(model, np.asarray(x, dtype=np.float32), y, counters),
        cfg.steps, np.float32(cfg.decay), counters, time.perf_counter()
    )


def dim_mi(model, x, y, cfg, rng=None):
    """mi_fgsm with the diversity transform applied per gradient evaluation."""
    _, rng_dim = _streams(cfg, rng)
    counters = Counters()
    C, H, W = np.asarray(x).shape
    hook = lambda: dim_index_map(H, W, cfg.dim_resize_rate, cfg.dim_prob, rng_dim)
    return _momentum_sign_loop(
        x, cfg, _plain_grad_fn(model, np.asarray(x, dtype=np.float32), y, counters, hook),
        cfg.steps, np.float32(cfg.decay), counters, time.perf_counter()
    )


def li_boost(backbone, model, x, y, cfg, rng=None):
    """Runs a backbone with its gradient replaced by the translated-sample mean.

    With samples=1 and shift_bound=0 this reproduces the backbone exactly.
    """
    if backbone not in BACKBONES:
        raise UnknownAttackError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}")
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float32)
    rng_offsets, rng_dim = _streams(cfg, rng)
    counters = Counters()
    hook = None
    if backbone == "dim_mi":
        C, H, W = x.shape
        hook = lambda: dim_index_map(H, W, cfg.dim_resize_rate, cfg.dim_prob, rng_dim)

    def grad_fn(delta, _t):
        return li_boost_gradient(model, x, delta, y, cfg, rng_offsets, counters, hook)

    if backbone == "fgsm":
        gbar, loss = grad_fn(np.zeros_like(x), 1)
        if not np.isfinite(loss) or not np.isfinite(gbar).all():
            raise AttackNumericError("non-finite loss or gradient at iteration 1")
        eps32 = np.float32(cfg.eps)
        delta = np.clip(eps32 * np.sign(gbar), -eps32, eps32)
        if cfg.pixel_clamp:
            delta = np.clip(delta, -x, np.float32(1.0) - x)
        return AttackResult(delta, [loss], counters.forwards, counters.backwards, time.perf_counter() - t0)
    decay = np.float32(0.0) if backbone == "ifgsm" else np.float32(cfg.decay)
    return _momentum_sign_loop(x, cfg, grad_fn, cfg.steps, decay, counters, t0)


def brute_force_minmax(model, x, y, cfg, rng=None):
    """Optimizes the worst case over all (2k+1)^2 translations of delta.

    Every iteration evaluates the loss at every translated perturbation,
    takes the gradient at the argmin offset as the subgradient of the inner
    min (ties break in grid enumeration order), then applies the usual
    momentum sign step. bf_grad_mode="all" additionally runs a backward pass
    at every offset, matching the quadratic cost accounting; the update is
    unchanged.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float32)
    counters = Counters()
    grid = full_grid(cfg.shift_bound)
    center = grid.index((0, 0))
    center_losses = []

    def grad_fn(delta, _t):
        evals = []
        for i, j in grid:
            adv = x + translate(delta, i, j)
            inp = ts.Tensor(adv[None], requires_grad=True)
            loss_t = ts.cross_entropy_loss(model.forward(inp), [y])
            counters.forwards += 1
            evals.append((float(loss_t.data), i, j, inp, loss_t))
        if cfg.bf_grad_mode == "all":
            for _, _, _, _, loss_t in evals:
                ts.backward(loss_t)
                counters.backwards += 1
        best = min(range(len(evals)), key=lambda idx: evals[idx][0])
        loss, i, j, inp, loss_t = evals[best]
        if cfg.bf_grad_mode == "argmin":
            ts.backward(loss_t)
            counters.backwards += 1
        g = inp.grad[0]
        if cfg.adjoint_grad:
            g = translate_adjoint(g, i, j)
        center_losses.append(evals[center][0])
        return g, loss

    result = _momentum_sign_loop(x, cfg, grad_fn, cfg.steps, np.float32(cfg.decay), counters, t0)
    result.center_losses = center_losses
    return result


# ---------------------------------------------------------------------------
# diversity input transform


def dim_index_map(h, w, resize_rate, p, rng):
    """Pixel index map of one diversity draw: random nearest-neighbor resize,
    random zero-pad to the enlarged extent, then resize back. Returns
    (rows, cols, valid) consumable by gather_pixels; identity with
    probability 1 - p."""
    if resize_rate < 1:
        raise ValueError(f"resize_rate must be >= 1, got {resize_rate}")
    if not 0 <= p <= 1:
        raise ValueError(f"p must be in [0, 1], got {p}")
    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(w)[None, :], (h, w))
    if rng.random() >= p:
        return rows.copy(), cols.copy(), np.ones((h, w), dtype=bool)
    ph, pw = int(h * resize_rate), int(w * resize_rate)
    sh = int(rng.integers(h, ph + 1))
    sw = max(1, min(pw, int(round(w * sh / h))))  # proportional; equals sh when square
    top = int(rng.integers(0, ph - sh + 1))
    left = int(rng.integers(0, pw - sw + 1))

    def axis_map(n_out, pad_n, start, s_n, n_src):
        padded = np.minimum(((np.arange(n_out) + 0.5) * pad_n / n_out).astype(np.int64), pad_n - 1)
        inside = (padded >= start) & (padded < start + s_n)
        src = np.minimum(((padded - start + 0.5) * n_src / s_n).astype(np.int64), n_src - 1)
        return np.where(inside, src, 0), inside

    row_src, row_ok = axis_map(h, ph, top, sh, h)
    col_src, col_ok = axis_map(w, pw, left, sw, w)
    return (
        np.broadcast_to(row_src[:, None], (h, w)).copy(),
        np.broadcast_to(col_src[None, :], (h, w)).copy(),
        row_ok[:, None] & col_ok[None, :],
    )


def dim_transform(x, resize_rate=1.1, p=0.5, rng=None):
    """Applies one diversity draw to an image or batch; shape-preserving."""
    if rng is None:
        raise ValueError("dim_transform requires an explicit rng")
    x = np.asarray(x)
    rows, cols, valid = dim_index_map(x.shape[-2], x.shape[-1], resize_rate, p, rng)
    out = x[..., rows, cols].copy()
    out[..., ~valid] = 0
    return out


# ---------------------------------------------------------------------------
# logit-fusion ensembles


def _check_ensemble(models, weights):
    if len(models) < 1 or len(models) != len(weights):
        raise ValueError(f"need matching models and weights, got {len(models)} and {len(weights)}")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(weights)}")
    classes = {m.classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"class-count mismatch across ensemble members: {sorted(classes)}")
    shapes = {tuple(m.input_shape) for m in models}
    if len(shapes) != 1:
        raise ValueError(f"input-shape mismatch across ensemble members: {sorted(shapes)}")


def ensemble_logits(models, weights, x):
    """Weighted sum of per-model logits, recorded on the tape."""
    _check_ensemble(models, weights)
    out = ts.scale(models[0].forward(x), weights[0])
    for model, weight in zip(models[1:], weights[1:]):
        out = ts.add(out, ts.scale(model.forward(x), weight))
    return out


class LogitEnsemble:
    """Fused pseudo-model; any attack runs against it unchanged."""

    def __init__(self, models, weights=None):
        if weights is None:
            weights = [1.0 / len(models)] * len(models) if models else []
        _check_ensemble(models, weights)
        self.models = list(models)
        self.weights = [float(w) for w in weights]

    @property
    def classes(self):
        return self.models[0].classes

    @property
    def input_shape(self):
        return self.models[0].input_shape

    @property
    def spec(self):
        return self.models[0].spec

    def forward(self, x):
        return ensemble_logits(self.models, self.weights, x)


# ---------------------------------------------------------------------------
# registry and per-dataset execution


def _li(backbone):
    return lambda model, x, y, cfg, rng=None: li_boost(backbone, model, x, y, cfg, rng)


ATTACKS = {
    "fgsm": lambda model, x, y, cfg, rng=None: fgsm(model, x, y, cfg.eps, cfg.pixel_clamp),
    "ifgsm": ifgsm,
    "mi-fgsm": mi_fgsm,
    "dim-mi": dim_mi,
    "li-boost-fgsm": _li("fgsm"),
    "li-boost-ifgsm": _li("ifgsm"),
    "li-boost-mi": _li("mi_fgsm"),
    "li-boost-dim": _li("dim_mi"),
    "brute-force-mi": brute_force_minmax,
}


def run_attack(name, model, x, y, cfg, rng=None):
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise UnknownAttackError(
            f"unknown attack {name!r}; registered: {', '.join(sorted(ATTACKS))}"
        ) from None
    return fn(model, x, y, cfg, rng)


def default_workers():
    raw = os.environ.get("LIBOOST_THREADS", "").strip()
    return max(1, int(raw)) if raw else 1


def run_attack_set(name, model, dataset, cfg, workers=None):
    """Attacks every example; per-example rng streams make the output
    independent of worker count."""
    workers = default_workers() if workers is None else max(1, int(workers))
    results = [None] * len(dataset)

    def work(idx):
        results[idx] = run_attack(
            name, model, dataset.images[idx], int(dataset.labels[idx]), cfg,
            rng=example_rng(cfg, idx),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(len(dataset))))
    else:
        for idx in range(len(dataset)):
            work(idx)
    return results


# ---------------------------------------------------------------------------
# perturbation archive (LIPD)

_ARCHIVE_MAGIC = b"LIPD"
_ARCHIVE_VERSION = 1


class ArchiveFormatError(ValueError):
    """Archive bytes do not match the LIPD format."""


@dataclass(frozen=True)
class ArchiveRecord:
    index: int
    eps: float
    delta: np.ndarray


def write_archive(path, records):
    out = bytearray()
    out += _ARCHIVE_MAGIC
    out += struct.pack("<HI", _ARCHIVE_VERSION, len(records))
    for rec in records:
        delta = np.ascontiguousarray(rec.delta, dtype="<f4")
        out += struct.pack("<If", rec.index, rec.eps)
        out += struct.pack("<B", delta.ndim)
        out += struct.pack(f"<{delta.ndim}I", *delta.shape)
        out += delta.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_archive(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise ArchiveFormatError(f"truncated archive: {len(blob)} bytes")
    if blob[:4] != _ARCHIVE_MAGIC:
        raise ArchiveFormatError(f"bad magic {blob[:4]!r}, expected {_ARCHIVE_MAGIC!r}")
    version, count = struct.unpack("<HI", blob[4:10])
    if version != _ARCHIVE_VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    pos = 10
    records = []
    for _ in range(count):
        if pos + 9 > len(blob):
            raise ArchiveFormatError("truncated archive record header")
        index, eps = struct.unpack("<If", blob[pos : pos + 8])
        rank = blob[pos + 8]
        pos += 9
        if pos + 4 * rank > len(blob):
            raise ArchiveFormatError("truncated archive record dims")
        dims = struct.unpack(f"<{rank}I", blob[pos : pos + 4 * rank])
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(blob):
            raise ArchiveFormatError("archive record payload shorter than its dims")
        delta = np.frombuffer(blob[pos : pos + 4 * n], dtype="<f4").reshape(dims).copy()
        pos += 4 * n
        records.append(ArchiveRecord(int(index), float(eps), delta))
    if pos != len(blob):
        raise ArchiveFormatError("trailing bytes after final archive record")
    return records


def verify_archive(records, images=None):
    """Budget verifier: |delta|_inf <= eps + 1 ulp per record, and when the
    matching images are supplied, x + delta in [0, 1] per pixel. Returns a
    list of violation strings (empty means the archive is clean)."""
    problems = []
    for rec in records:
        bound = float(np.nextafter(np.float32(rec.eps), np.float32(np.inf)))
        peak = float(np.abs(rec.delta).max()) if rec.delta.size else 0.0
        if peak > bound:
            problems.append(f"record {rec.index}: |delta|_inf {peak} exceeds eps {rec.eps}")
        if images is not None:
            adv = images[rec.index] + rec.delta
            if adv.min() < 0.0 or adv.max() > 1.0:
                problems.append(
                    f"record {rec.index}: x + delta outside [0, 1] "
                    f"(range {float(adv.min())}..{float(adv.max())})"
                )
    return problems
