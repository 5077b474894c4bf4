"""Multi-source domain adaptation by gradient cosine similarity.

Each iteration clones the shared parameters into one replica per source
domain, takes the replica a few optimizer steps on a source batch, and
computes the target-shot gradient through every replica. The cosine
between a replica's target gradient and its source gradient (taken at the
shared parameters) weights that replica's target gradient in the update of
the shared parameters. Dissimilar domains get small or negative weights
and stop dragging the model in their direction.

Also provides the plain pretrain-then-finetune baseline on the same
optimizer and schedule machinery so the two methods compare fairly.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError, ValidationError
from .model import ModelConfig, batch_loss, batchify, build_parameters
from .params import ParameterSet
from .rng import substream
from .tensor import ComputationTape, backward


@dataclass
class DomainDataset:
    domain_id: int
    examples: list  # AlignedSequence, all labeled for training domains

    def __len__(self):
        return len(self.examples)


@dataclass
class AdaptConfig:
    k: int | None = None  # source-domain count; inferred from the sources when None
    shots: int = 10
    alpha: float = 0.02
    inner_steps: int = 1
    iterations: int = 60
    optimizer: str = "adamw"  # sgd | adam | adamw
    use_similarity: bool = True
    use_adaptive_lr: bool = True
    batch_size: int = 8
    seed: int = 0
    inner_lr: float | None = None  # source-replica step size; defaults to alpha
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pretrain_iterations: int | None = None  # defaults to ``iterations``
    finetune_iterations: int | None = None
    patience: int = 20  # early-stop patience, in validation evaluations
    min_delta: float = 1e-6  # smallest validation-loss drop that counts as progress

    def __post_init__(self):
        if self.shots < 1 or self.alpha <= 0 or self.batch_size < 1:
            raise ValidationError("AdaptConfig requires shots >= 1, alpha > 0, batch_size >= 1")
        if self.optimizer not in ("sgd", "adam", "adamw"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(params: ParameterSet, grad: np.ndarray, state: OptimizerState, kind: str,
                   lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One update on the flat parameter vector; returns (params, state).

    adam and adamw share one code path; adam is adamw with zero decoupled
    weight decay, so the two are bit-identical at weight_decay == 0.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.total_count,):
        raise ShapeError(f"gradient length {grad.shape} != parameter count {params.total_count}")
    values = params.flatten_values()
    if kind == "sgd":
        return params.replace_values(values - lr * grad), state
    if kind not in ("adam", "adamw"):
        raise ValidationError(f"unknown optimizer {kind!r}")
    wd = weight_decay if kind == "adamw" else 0.0
    m = np.zeros_like(values) if state.m is None else state.m
    v = np.zeros_like(values) if state.v is None else state.v
    step = state.step + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    update = m_hat / (np.sqrt(v_hat) + eps) + wd * values
    return params.replace_values(values - lr * update), OptimizerState(step=step, m=m, v=v)


def _opt_kwargs(cfg: AdaptConfig):
    return dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)


def adaptive_lr(iteration: int, cfg: AdaptConfig, total: int | None = None) -> float:
    """Warmup-then-cosine schedule; constant alpha when disabled.

    Linear ramp to alpha over the first 10% of the run, cosine decay to
    alpha/100 at the final iteration.
    """
    if not cfg.use_adaptive_lr:
        return cfg.alpha
    total = cfg.iterations if total is None else total
    if total <= 0:
        return cfg.alpha
    warmup = max(1, math.ceil(0.1 * total))
    floor = cfg.alpha / 100.0
    if iteration < warmup:
        return cfg.alpha * (iteration + 1) / warmup
    if iteration >= total:
        return floor
    progress = (iteration - warmup) / max(1, total - warmup)
    return floor + (cfg.alpha - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# gradients and similarity


def compute_gradient(params: ParameterSet, model_cfg: ModelConfig, seqs, active=None):
    """Flat MSE gradient over ``seqs``; returns (grad, loss_value)."""
    batch = batchify(seqs, model_cfg)
    params.zero_grad()
    with ComputationTape() as tape:
        loss, _ = batch_loss(params, model_cfg, batch, active)
        backward(tape, loss)
    return params.flatten_gradients(), loss.item()


def evaluate_loss(params: ParameterSet, model_cfg: ModelConfig, seqs, active=None) -> float:
    batch = batchify(seqs, model_cfg)
    loss, _ = batch_loss(params, model_cfg, batch, active)
    return loss.item()


def cosine_similarity(g1: np.ndarray, g2: np.ndarray) -> float:
    """cos(g1, g2) in [-1, 1]; exactly +-1 for (anti)parallel copies.

    Returns 0 when either norm underflows below 1e-12, which neutrally
    removes that domain from the update.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ShapeError(f"similarity of vectors with shapes {g1.shape} and {g2.shape}")
    s1 = float(g1 @ g1)
    s2 = float(g2 @ g2)
    if math.sqrt(s1) < 1e-12 or math.sqrt(s2) < 1e-12:
        return 0.0
    denom = math.sqrt(s1 * s2)
    if not math.isfinite(denom):
        denom = math.sqrt(s1) * math.sqrt(s2)
    return float(np.clip(float(g1 @ g2) / denom, -1.0, 1.0))


def weighted_direction(sims, target_grads, use_similarity=True) -> np.ndarray:
    """Sum of similarity-weighted target gradients, accumulated in source order.

    With use_similarity off, every weight is 1/k (uniform ablation).
    """
    k = len(target_grads)
    if len(sims) != k:
        raise ShapeError(f"{len(sims)} similarities for {k} gradients")
    direction = np.zeros_like(target_grads[0])
    for i in range(k):
        w = float(sims[i]) if use_similarity else 1.0 / k
        direction = direction + w * target_grads[i]
    return direction


def adapt_update(theta: ParameterSet, sims, target_grads, lr: float,
                 use_similarity=True) -> ParameterSet:
    """Plain gradient-form update of the shared parameters (the sgd case)."""
    direction = weighted_direction(sims, target_grads, use_similarity)
    return theta.replace_values(theta.flatten_values() - lr * direction)


# ---------------------------------------------------------------------------
# Algorithm steps


def _sample_batch(domain: DomainDataset, size: int, rng) -> list:
    m = len(domain.examples)
    if m == 0:
        raise ValidationError(f"domain {domain.domain_id} has no examples")
    take = min(size, m)
    idx = rng.choice(m, size=take, replace=False)
    return [domain.examples[int(i)] for i in idx]


def source_step(theta: ParameterSet, domain: DomainDataset, model_cfg: ModelConfig,
                cfg: AdaptConfig, iteration: int, active=None):
    """Train a replica of theta on one source batch.

    Returns (replica, source_gradient). The reported gradient is the first
    step's gradient, evaluated at theta itself; inner_steps == 0 leaves the
    replica equal to theta while still computing that gradient.

    Inner steps are plain gradient descent (replica - lr * grad): the
    replica is a short source-directed displacement of theta, and a
    stateful optimizer's bias-corrected first step would blow that
    displacement up to lr in every coordinate. The configured optimizer
    drives the outer update of the shared parameters instead.
    """
    rng = substream(cfg.seed, "source", domain.domain_id, iteration)
    batch = _sample_batch(domain, cfg.batch_size, rng)
    grad, loss = compute_gradient(theta, model_cfg, batch, active)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite loss on source domain {domain.domain_id}")
    replica = theta.clone()
    state = OptimizerState()
    inner_lr = cfg.alpha if cfg.inner_lr is None else cfg.inner_lr
    for step in range(cfg.inner_steps):
        g = grad if step == 0 else compute_gradient(replica, model_cfg, batch, active)[0]
        replica, state = optimizer_step(replica, g, state, "sgd", inner_lr)
    return replica, grad


def target_gradient(replica: ParameterSet, shots, model_cfg: ModelConfig, active=None) -> np.ndarray:
    """Few-shot MSE gradient evaluated through one updated replica."""
    if not shots:
        raise ValidationError("target_gradient needs a non-empty shot list")
    grad, loss = compute_gradient(replica, model_cfg, shots, active)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite loss on the target shots")
    return grad


def _shot_pool(target: DomainDataset, cfg: AdaptConfig) -> list:
    """Fixed per-run few-shot pool, carved deterministically from the target."""
    m = len(target.examples)
    if m < cfg.shots:
        raise ValidationError(f"target domain has {m} examples, needs >= {cfg.shots}")
    if m == cfg.shots:
        return list(target.examples)
    rng = substream(cfg.seed, "pool", target.domain_id)
    idx = rng.choice(m, size=cfg.shots, replace=False)
    return [target.examples[int(i)] for i in idx]


def _resample_shots(pool, cfg: AdaptConfig, iteration: int) -> list:
    rng = substream(cfg.seed, "shots", iteration)
    order = rng.permutation(len(pool))[: cfg.shots]
    return [pool[int(i)] for i in order]


def run_adaptation(sources, target: DomainDataset, model_cfg: ModelConfig, cfg: AdaptConfig,
                   init_params: ParameterSet | None = None, validation=None, active=None,
                   callback=None):
    """The full adaptation loop; returns (params, history).

    Sources are processed in ascending domain-id order. History rows carry
    (iter, lr, target_loss, val_loss, s_1..s_k). With a validation set the
    loop early-stops on stalled validation loss and returns the best
    parameters seen; otherwise it runs all iterations and returns the last.
    Fully deterministic given cfg.seed.
    """
    sources = sorted(sources, key=lambda d: d.domain_id)
    k = len(sources)
    if k < 1:
        raise ValidationError("run_adaptation needs at least one source domain")
    if cfg.k is not None and cfg.k != k:
        raise ValidationError(f"cfg.k = {cfg.k} but {k} source domains were given")

    params = init_params.clone() if init_params is not None else build_parameters(
        model_cfg, cfg.seed
    )
    pool = _shot_pool(target, cfg)
    outer_state = OptimizerState()
    history = []
    best_val = math.inf
    best_params = params
    stall = 0

    for it in range(cfg.iterations):
        lr = adaptive_lr(it, cfg)
        shots = _resample_shots(pool, cfg, it)
        target_loss = evaluate_loss(params, model_cfg, shots, active)
        sims = np.zeros(k)
        tgrads = []
        for i, dom in enumerate(sources):
            replica, sgrad = source_step(params, dom, model_cfg, cfg, it, active)
            tgrad = target_gradient(replica, shots, model_cfg, active)
            sims[i] = cosine_similarity(tgrad, sgrad)
            tgrads.append(tgrad)
        direction = weighted_direction(sims, tgrads, cfg.use_similarity)
        params, outer_state = optimizer_step(
            params, direction, outer_state, cfg.optimizer, lr, **_opt_kwargs(cfg)
        )

        val_loss = None
        if validation:
            val_loss = evaluate_loss(params, model_cfg, validation, active)
            if val_loss < best_val - cfg.min_delta:
                best_val = val_loss
                best_params = params
                stall = 0
            else:
                stall += 1
        history.append(
            {"iter": it, "lr": lr, "target_loss": target_loss, "val_loss": val_loss,
             "sims": sims.copy()}
        )
        if callback is not None:
            callback(it, params)
        if validation and stall >= cfg.patience:
            break

    return (best_params if validation else params), history


# ---------------------------------------------------------------------------
# fine-tune baseline (shared machinery)


def pretrain_on_sources(sources, model_cfg: ModelConfig, cfg: AdaptConfig,
                        init_params: ParameterSet | None = None, active=None):
    """Train one model on the pooled source data; returns (params, history)."""
    sources = sorted(sources, key=lambda d: d.domain_id)
    pool = [s for dom in sources for s in dom.examples]
    if not pool:
        raise ValidationError("no source examples to pretrain on")
    params = init_params.clone() if init_params is not None else build_parameters(
        model_cfg, cfg.seed
    )
    total = cfg.pretrain_iterations if cfg.pretrain_iterations is not None else cfg.iterations
    state = OptimizerState()
    history = []
    for it in range(total):
        lr = adaptive_lr(it, cfg, total=total)
        rng = substream(cfg.seed, "pretrain", it)
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        batch = [pool[int(i)] for i in idx]
        grad, loss = compute_gradient(params, model_cfg, batch, active)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite loss during source pretraining")
        params, state = optimizer_step(params, grad, state, cfg.optimizer, lr, **_opt_kwargs(cfg))
        history.append({"iter": it, "lr": lr, "target_loss": loss, "val_loss": None, "sims": None})
    return params, history


def few_shot_finetune(params: ParameterSet, target: DomainDataset, model_cfg: ModelConfig,
                      cfg: AdaptConfig, validation=None, active=None, callback=None):
    """Plain few-shot training on the target's shot pool; returns (params, history)."""
    params = params.clone()
    pool = _shot_pool(target, cfg)
    total = cfg.finetune_iterations if cfg.finetune_iterations is not None else cfg.iterations
    state = OptimizerState()
    history = []
    best_val = math.inf
    best_params = params
    stall = 0
    for it in range(total):
        lr = adaptive_lr(it, cfg, total=total)
        shots = _resample_shots(pool, cfg, it)
        grad, loss = compute_gradient(params, model_cfg, shots, active)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite loss during few-shot finetuning")
        params, state = optimizer_step(params, grad, state, cfg.optimizer, lr, **_opt_kwargs(cfg))
        val_loss = None
        if validation:
            val_loss = evaluate_loss(params, model_cfg, validation, active)
            if val_loss < best_val - cfg.min_delta:
                best_val, best_params, stall = val_loss, params, 0
            else:
                stall += 1
        history.append(
            {"iter": it, "lr": lr, "target_loss": loss, "val_loss": val_loss, "sims": None}
        )
        if callback is not None:
            callback(it, params)
        if validation and stall >= cfg.patience:
            break
    return (best_params if validation else params), history


def finetune_baseline(sources, target: DomainDataset, model_cfg: ModelConfig, cfg: AdaptConfig,
                      init_params: ParameterSet | None = None, validation=None, active=None):
    """Pretrain on pooled sources, then finetune on the target shots."""
    params, _ = pretrain_on_sources(sources, model_cfg, cfg, init_params, active)
    params, history = few_shot_finetune(params, target, model_cfg, cfg, validation, active)
    return params, history


# ---------------------------------------------------------------------------
# history serialization


def write_history_csv(path, history, k: int):
    """CSV with columns iter, lr, target_loss, val_loss, s_1..s_k."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "target_loss", "val_loss"] + [f"s_{i + 1}" for i in range(k)])
        for row in history:
            sims = row["sims"]
            sim_cells = [repr(float(s)) for s in sims] if sims is not None else [""] * k
            writer.writerow(
                [
                    row["iter"],
                    repr(float(row["lr"])),
                    repr(float(row["target_loss"])),
                    "" if row["val_loss"] is None else repr(float(row["val_loss"])),
                ]
                + sim_cells
            )


def read_history_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = len(header) - 4
        rows = []
        for cells in reader:
            rows.append(
                {
                    "iter": int(cells[0]),
                    "lr": float(cells[1]),
                    "target_loss": float(cells[2]),
                    "val_loss": None if cells[3] == "" else float(cells[3]),
                    "sims": np.array([float(c) for c in cells[4:]]) if k and cells[4] != "" else None,
                }
            )
    return rows
