"""Finite-difference verification of the end-to-end gradients.

Central differences on the flat parameter vector against the tape
gradient of the batch MSE. Configs are kept tiny (h = 2, n = 4, feature
dims <= 4) so checks stay fast.

Two probe modes share the machinery:

- "full": every scalar parameter component, two evals each. Exhaustive
  and slow; a handful of configs per run is enough to pin the formulas.
- "directional": per parameter tensor, compare the FD derivative along
  seeded random unit directions with the projected tape gradient. A wrong
  gradient component perturbs the projection almost surely, so this
  covers every parameter of every layer at a fraction of the cost.

ReLU kinks break the finite-difference premise, so the evaluation point
and batch are redrawn until every ReLU preactivation at a valid position
sits clearly away from zero. The point itself is a noised initialization:
structured inits (zero biases) sit exactly on kinks and mask sign bugs.
"""

from dataclasses import dataclass

import numpy as np

from .adapt import compute_gradient
from .align import AlignedSequence, PersonalityVector
from .errors import ValidationError
from .model import (
    ModelConfig,
    ModelLayers,
    batch_loss,
    batchify,
    build_parameters,
    forward_batch,
)
from .rng import substream

REL_TOL = 1e-4
ABS_TOL = 1e-6
EPSILON = 1e-5
KINK_MARGIN = 1e-3

LAYER_GROUPS = (("bilstm", "lstm."), ("attention", "attn."), ("bilinear", "fuse."),
                ("head", "head."), ("embedding", "embed."))


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    per_layer: dict
    config: ModelConfig
    mode: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def small_config(rng) -> ModelConfig:
    return ModelConfig(
        d_face=int(rng.integers(1, 5)),
        d_bg=int(rng.integers(1, 5)),
        d_audio=int(rng.integers(1, 5)),
        vocab_size=int(rng.integers(2, 5)),
        d_text=int(rng.integers(1, 5)),
        h=2,
        d_k=int(rng.integers(1, 5)),
        d_z=int(rng.integers(1, 3)),
        mlp_hidden=int(rng.integers(2, 5)),
        n=4,
    )


def random_batch(cfg: ModelConfig, rng, batch_size=2):
    """Random labeled sequences with mixed valid lengths and [-2, 2] features."""
    seqs = []
    for _ in range(batch_size):
        valid = int(rng.integers(1, cfg.n + 1))
        tokens = np.zeros(cfg.n, dtype=np.int64)
        tokens[:valid] = rng.integers(1, cfg.vocab_size, size=valid)

        def chan(d):
            arr = np.zeros((d, cfg.n))
            arr[:, :valid] = rng.uniform(-2.0, 2.0, size=(d, valid))
            return arr

        seqs.append(
            AlignedSequence(
                tokens=tokens,
                face=chan(cfg.d_face),
                background=chan(cfg.d_bg),
                audio=chan(cfg.d_audio),
                valid_len=valid,
                label=PersonalityVector(rng.uniform(0.0, 1.0, size=5)),
            )
        )
    return seqs


def _min_relu_preact(params, cfg, batch) -> float:
    collect = {}
    forward_batch(params, cfg, batch, collect=collect)
    mags = [np.abs(arr).min() for arr in collect.get("relu_preacts", []) if arr.size]
    return float(min(mags)) if mags else np.inf


def rel_error(a, b):
    """Componentwise comparator: relative error, gated by the near-zero tolerance."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(diff <= ABS_TOL, 0.0, diff / np.maximum(scale, 1e-300))


def check_model_gradients(cfg: ModelConfig, seed: int, eps: float = EPSILON,
                          mode: str = "full", directions: int = 2,
                          max_redraws: int = 50) -> GradCheckResult:
    """Compare the tape gradient of the batch MSE with central differences."""
    base = build_parameters(cfg, seed)
    values = base.flatten_values()
    for attempt in range(max_redraws):
        point_rng = substream(seed, "gradcheck-point", attempt)
        params = base.replace_values(values + point_rng.uniform(-0.3, 0.3, size=values.size))
        seqs = random_batch(cfg, substream(seed, "gradcheck-data", attempt))
        batch = batchify(seqs, cfg)
        if _min_relu_preact(params, cfg, batch) > KINK_MARGIN:
            break
    else:
        raise ValidationError("could not sample inputs away from ReLU kinks")

    grad, _ = compute_gradient(params, cfg, seqs)

    # Probe the loss through one flat buffer whose per-parameter views back a
    # shared ParameterSet; coordinates are nudged in place between evals.
    buf = params.flatten_values()
    probe = params.replace_values(buf)
    offset = 0
    slices = {}
    for name, t in probe.items():
        size = t.data.size
        slices[name] = slice(offset, offset + size)
        t.data = buf[offset : offset + size].reshape(t.data.shape)
        offset += size
    probe_layers = ModelLayers.from_params(probe)

    def loss_now() -> float:
        loss, _ = batch_loss(probe, cfg, batch, layers=probe_layers)
        return loss.item()

    per_param_err = {}
    if mode == "full":
        fd = np.empty_like(grad)
        for i in range(buf.size):
            orig = buf[i]
            buf[i] = orig + eps
            up = loss_now()
            buf[i] = orig - eps
            down = loss_now()
            buf[i] = orig
            fd[i] = (up - down) / (2.0 * eps)
        rel = rel_error(grad, fd)
        for name, sl in slices.items():
            per_param_err[name] = float(rel[sl].max())
    elif mode == "directional":
        dir_rng = substream(seed, "gradcheck-dir")
        for name, sl in slices.items():
            worst = 0.0
            for _ in range(directions):
                v = dir_rng.standard_normal(sl.stop - sl.start)
                v /= np.linalg.norm(v)
                saved = buf[sl].copy()
                buf[sl] = saved + eps * v
                up = loss_now()
                buf[sl] = saved - eps * v
                down = loss_now()
                buf[sl] = saved
                fd_proj = (up - down) / (2.0 * eps)
                tape_proj = float(grad[sl] @ v)
                worst = max(worst, float(rel_error(tape_proj, fd_proj)[0]))
            per_param_err[name] = worst
    else:
        raise ValidationError(f"unknown gradcheck mode {mode!r}")

    worst_param = max(per_param_err, key=per_param_err.get)
    per_layer = {}
    for label, prefix in LAYER_GROUPS:
        errs = [e for name, e in per_param_err.items() if name.startswith(prefix)]
        per_layer[label] = max(errs) if errs else 0.0
    return GradCheckResult(
        max_rel_error=per_param_err[worst_param],
        worst_param=worst_param,
        per_layer=per_layer,
        config=cfg,
        mode=mode,
    )


def run_gradcheck(trials: int, seed: int = 0, cfg: ModelConfig | None = None, eps: float = EPSILON,
                  full_trials: int = 15, verbose=False):
    """Many independent checks; returns (all_passed, worst GradCheckResult).

    The first ``full_trials`` configs run the exhaustive per-component
    sweep; the rest run per-parameter directional probes.
    """
    worst = None
    for trial in range(trials):
        trial_cfg = cfg if cfg is not None else small_config(substream(seed, "gradcheck-cfg", trial))
        mode = "full" if trial < full_trials else "directional"
        result = check_model_gradients(trial_cfg, seed=seed + trial, eps=eps, mode=mode)
        if worst is None or result.max_rel_error > worst.max_rel_error:
            worst = result
        if verbose:
            status = "ok" if result.passed else "FAIL"
            print(f"trial {trial:3d} [{result.mode}]: max rel err {result.max_rel_error:.3e} "
                  f"({result.worst_param}) {status}")
        if not result.passed:
            return False, result
    return True, worst
