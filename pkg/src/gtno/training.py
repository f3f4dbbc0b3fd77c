"""Supervised training for the operator model.

MSE loss by default (relative L2 for datasets whose targets vary strongly in
scale), Adam with one-cycle cosine LR, global-norm gradient clipping, seeded
shuffling. Runs are bit-reproducible: the only randomness is the shuffle
generator, gradients accumulate in a fixed order, and evaluation keeps the
best parameters by eval nRMSE.

nRMSE follows the common benchmark protocol: mean over samples of
||pred - target||_2 / ||target||_2, norms taken over all points, channels and
frames of one sample.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericFaultError, ShapeError, ZeroTargetError
from .graph import PointSet, assemble_node_features
from .model import OperatorModel, rollout_to_array
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "TrainSample",
    "mse_loss",
    "rel_l2_loss",
    "sequence_loss",
    "nrmse",
    "rmse",
    "onecycle_lr",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "train",
    "evaluate",
    "predict",
    "write_history_csv",
    "read_history_csv",
    "constant_baseline_nrmse",
    "nearest_neighbor_baseline_nrmse",
]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    lr_init: float = 2e-3
    div_factor: float = 20.0
    pct_start: float = 0.05
    final_div_factor: float = 1000.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    loss: str = "rel_l2"  # rel_l2 | mse
    seed: int = 0
    eval_every: int = 1


@dataclass
class TrainSample:
    """One supervised pair: theta on points, target on queries.

    target is (L', out) in steady mode, (T, L', out) for rollout.
    """

    points: PointSet
    theta: np.ndarray
    queries: PointSet
    target: np.ndarray


# ---------------------------------------------------------------------------
# losses (tape ops) and metrics (plain numpy)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != t.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {t.shape}")
    diff = T.sub(pred, t)
    return T.mul(diff, diff).mean()


def rel_l2_loss(pred: Tensor, target) -> Tensor:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != arr.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {arr.shape}")
    tn = float(np.sqrt(np.sum(arr * arr)))
    if tn == 0.0:
        raise ZeroTargetError("relative L2 needs a nonzero target")
    diff = T.sub(pred, Tensor(arr))
    return T.mul(T.sqrt(T.mul(diff, diff).sum()), 1.0 / tn)


def sequence_loss(frames: list[Tensor], target: np.ndarray, kind: str = "mse") -> Tensor:
    """Mean of the per-frame loss over a rollout. target is (T, L', out)."""
    tgt = np.asarray(target, dtype=np.float64)
    if len(frames) != tgt.shape[0]:
        raise ShapeError(f"{len(frames)} frames vs target with {tgt.shape[0]}")
    fn = mse_loss if kind == "mse" else rel_l2_loss
    acc = fn(frames[0], tgt[0])
    for t in range(1, len(frames)):
        acc = T.add(acc, fn(frames[t], tgt[t]))
    return T.mul(acc, 1.0 / len(frames))


def _pairs(preds, targets):
    if isinstance(preds, np.ndarray) and isinstance(targets, np.ndarray) and preds.shape == targets.shape and preds.ndim <= 3:
        # single sample
        return [(preds, targets)]
    return list(zip(preds, targets))


def nrmse(preds, targets) -> float:
    """Mean over samples of ||pred - target|| / ||target|| (all entries)."""
    vals = []
    for p, t in _pairs(preds, targets):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        tn = float(np.sqrt(np.sum(t * t)))
        if tn == 0.0:
            raise ZeroTargetError("nrmse needs nonzero targets")
        vals.append(float(np.sqrt(np.sum((p - t) ** 2))) / tn)
    return float(np.mean(vals))


def rmse(preds, targets) -> float:
    vals = []
    for p, t in _pairs(preds, targets):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        vals.append(float(np.sqrt(np.mean((p - t) ** 2))))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# optimization


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine warmup to lr_init, cosine anneal to lr_init/final_div_factor.

    Warmup peaks at step round(pct_start * total_steps); the final step
    (total_steps - 1) lands exactly on the floor LR.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = cfg.lr_init
    start = peak / cfg.div_factor
    end = peak / cfg.final_div_factor
    t_peak = int(round(cfg.pct_start * total_steps))
    if t_peak > 0 and step <= t_peak:
        u = step / t_peak
        return start + (peak - start) * 0.5 * (1.0 - math.cos(math.pi * u))
    denom = max(1, total_steps - 1 - t_peak)
    u = (step - t_peak) / denom
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * u))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g * g))
    total = math.sqrt(total)
    if total > max_norm > 0.0:
        scale = max_norm / total
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                g *= scale
    return total


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One Adam update over the named parameter collection.

    Missing gradients count as zero, so a step with all-zero grads leaves
    fresh parameters unchanged.
    """
    state.t += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(p.data)):
            raise NumericFaultError(f"parameter {name!r} became non-finite")


# ---------------------------------------------------------------------------
# train / eval loops


def _loss_for(model: OperatorModel, graph, sample: TrainSample, kind: str) -> Tensor:
    if model.config.mode == "steady":
        pred = model.forward_on_graph(graph, sample.queries)
        fn = mse_loss if kind == "mse" else rel_l2_loss
        return fn(pred, sample.target)
    frames = model.forward_on_graph(graph, sample.queries)
    return sequence_loss(frames, sample.target, kind)


def _graph_cache(model: OperatorModel, samples: list[TrainSample]) -> dict:
    """One featureless graph per distinct PointSet (grids are shared)."""
    cache: dict[int, object] = {}
    for s in samples:
        key = id(s.points)
        if key not in cache:
            cache[key] = model.build_graph(s.points)
    return cache


def _sample_graph(model: OperatorModel, cache: dict, s: TrainSample):
    base = cache[id(s.points)]
    return assemble_node_features(base, s.theta, with_coords=model.config.pos_enc != "none")


def predict(model: OperatorModel, sample: TrainSample, graph=None) -> np.ndarray:
    """No-grad forward returning a numpy array shaped like the target."""
    with T.no_grad():
        if graph is None:
            graph = model.build_graph(sample.points)
        g = assemble_node_features(graph, sample.theta, with_coords=model.config.pos_enc != "none")
        out = model.forward_on_graph(g, sample.queries)
    if model.config.mode == "steady":
        return out.data
    return rollout_to_array(out)


def evaluate(model: OperatorModel, samples: list[TrainSample]) -> dict:
    """Per-sample and aggregate nRMSE / RMSE on a sample list."""
    cache = _graph_cache(model, samples)
    per_nrmse, per_rmse = [], []
    for s in samples:
        pred = predict(model, s, graph=cache[id(s.points)])
        per_nrmse.append(nrmse(pred, s.target))
        per_rmse.append(rmse(pred, s.target))
    return {
        "nrmse": float(np.mean(per_nrmse)),
        "rmse": float(np.mean(per_rmse)),
        "per_sample_nrmse": per_nrmse,
        "per_sample_rmse": per_rmse,
    }


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, arr in snap.items():
        params[k].data = arr.copy()


def train(
    model: OperatorModel,
    train_samples: list[TrainSample],
    cfg: TrainConfig,
    eval_samples: list[TrainSample] | None = None,
    start_step: int = 0,
    log=None,
) -> list[dict]:
    """Train in place; returns history rows (one per epoch).

    Row keys: epoch, train_loss, eval_nrmse, eval_rmse, lr, seconds (eval
    fields are NaN on epochs without evaluation). The model ends holding the
    best parameters seen (by eval nRMSE when eval_samples is given, else by
    train loss). start_step fast-forwards the LR schedule when resuming; total
    schedule length still covers cfg.epochs worth of steps.

    A numeric fault restores the best parameters and re-raises.
    """
    if not train_samples:
        raise ShapeError("train needs at least one sample")
    n = len(train_samples)
    bs = max(1, min(cfg.batch_size, n))
    batches_per_epoch = (n + bs - 1) // bs
    total_steps = cfg.epochs * batches_per_epoch
    if total_steps <= start_step:
        raise ValueError("resume position is past the end of the schedule")
    params = model.named_parameters()
    cache = _graph_cache(model, train_samples)
    eval_cache = _graph_cache(model, eval_samples) if eval_samples else None
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 1])
    history: list[dict] = []
    # resuming replays the shuffle stream so epoch e sees the same batches it
    # would have seen in an uninterrupted run
    for _ in range(start_step // batches_per_epoch):
        rng.permutation(n)
    best = _snapshot(params)
    best_key = math.inf
    step = start_step
    done_epochs = start_step // batches_per_epoch
    try:
        for epoch in range(done_epochs, cfg.epochs):
            t0 = time.perf_counter()
            perm = rng.permutation(n)
            loss_total = 0.0
            for b0 in range(0, n, bs):
                idx = perm[b0 : b0 + bs]
                lr = onecycle_lr(step, total_steps, cfg)
                model.zero_grads()
                for i in idx:
                    s = train_samples[i]
                    g = _sample_graph(model, cache, s)
                    with T.Tape():
                        loss = _loss_for(model, g, s, cfg.loss)
                        T.backward(loss)
                    loss_total += loss.item()
                inv = 1.0 / len(idx)
                for name in sorted(params):
                    if params[name].grad is not None:
                        params[name].grad *= inv
                clip_global_norm(params, cfg.clip_norm)
                adam_step(params, state, lr, cfg)
                step += 1
            train_loss = loss_total / n
            row = {
                "epoch": epoch,
                "train_loss": train_loss,
                "eval_nrmse": math.nan,
                "eval_rmse": math.nan,
                "lr": onecycle_lr(step - 1, total_steps, cfg),
                "seconds": time.perf_counter() - t0,
            }
            is_last = epoch == cfg.epochs - 1
            if eval_samples and (epoch % cfg.eval_every == 0 or is_last):
                per_n, per_r = [], []
                for s in eval_samples:
                    pred = predict(model, s, graph=eval_cache[id(s.points)])
                    per_n.append(nrmse(pred, s.target))
                    per_r.append(rmse(pred, s.target))
                row["eval_nrmse"] = float(np.mean(per_n))
                row["eval_rmse"] = float(np.mean(per_r))
                key = row["eval_nrmse"]
            elif eval_samples:
                key = math.inf  # only eval epochs can become best
            else:
                key = train_loss
            if key < best_key:
                best_key = key
                best = _snapshot(params)
            history.append(row)
            if log is not None:
                log(row)
    except NumericFaultError:
        _restore(params, best)
        raise
    _restore(params, best)
    return history


# ---------------------------------------------------------------------------
# reference baselines (sanity floor for trained models)


HISTORY_COLUMNS = ("epoch", "train_loss", "eval_nrmse", "eval_rmse", "lr", "seconds")


def write_history_csv(path: str, rows: list[dict]) -> None:
    """Fixed-header training history. Floats use repr-exact formatting so
    identical runs produce identical text (seconds is the only wall-clock
    column)."""
    with open(path, "w") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in rows:
            cells = []
            for c in HISTORY_COLUMNS:
                v = r[c]
                if c == "epoch":
                    cells.append(str(int(v)))
                elif isinstance(v, float) and math.isnan(v):
                    cells.append("")
                else:
                    cells.append(repr(float(v)))
            f.write(",".join(cells) + "\n")


def read_history_csv(path: str) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        if tuple(header) != HISTORY_COLUMNS:
            raise ShapeError(f"unexpected history header {header}")
        for line in f:
            parts = line.rstrip("\n").split(",")
            row = {}
            for c, cell in zip(HISTORY_COLUMNS, parts):
                if c == "epoch":
                    row[c] = int(cell)
                else:
                    row[c] = math.nan if cell == "" else float(cell)
            rows.append(row)
    return rows


def constant_baseline_nrmse(train_targets: list[np.ndarray], test_targets: list[np.ndarray]) -> float:
    """nRMSE of the constant predictor that outputs the train-mean target
    field (the MSE-optimal constant)."""
    mean_field = np.mean(np.stack([np.asarray(t) for t in train_targets]), axis=0)
    return nrmse([mean_field] * len(test_targets), test_targets)


def nearest_neighbor_baseline_nrmse(
    train_thetas: list[np.ndarray],
    train_targets: list[np.ndarray],
    test_thetas: list[np.ndarray],
    test_targets: list[np.ndarray],
) -> float:
    """nRMSE of predicting each test sample by its nearest training input
    (L2 distance between flattened theta fields)."""
    tr = np.stack([np.asarray(t).ravel() for t in train_thetas])
    preds = []
    for th in test_thetas:
        d2 = np.sum((tr - np.asarray(th).ravel()) ** 2, axis=1)
        preds.append(np.asarray(train_targets[int(np.argmin(d2))]))
    return nrmse(preds, test_targets)
