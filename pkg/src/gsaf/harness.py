"""Experiment orchestration: sweeps, ablations, reports, and plot CSVs.

A sweep takes every domain in the corpus as the target once, uses the
remaining domains as sources, trains with the requested method, and
evaluates on the held-out test split. All artifacts land inside the
configured output directory; a rerun with the same config is
byte-identical.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapt import (
    AdaptConfig,
    DomainDataset,
    few_shot_finetune,
    pretrain_on_sources,
    read_history_csv,
    run_adaptation,
    write_history_csv,
)
from .align import read_dataset
from .datakit import SplitPlan, domains_from_items, make_split
from .errors import GsafError, ValidationError
from .metrics import accuracy, aggregate_reports
from .model import MODALITIES, ModelConfig, predict_batch, save_checkpoint
from .rng import substream

METHODS = ("adapt", "finetune")


@dataclass
class ExperimentConfig:
    dataset: str
    out_dir: str
    method: str = "adapt"
    targets: list | str = "all"
    seeds: list = field(default_factory=lambda: [0])
    model: ModelConfig = field(default_factory=ModelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    drop_modality: str | None = None
    ratio: tuple = (2, 8)
    save_models: bool = True
    metrics: tuple = ("accuracy", "mse")

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.drop_modality is not None and self.drop_modality not in MODALITIES:
            raise ValidationError(
                f"unknown modality {self.drop_modality!r}; choose from {MODALITIES}"
            )
        self.metrics = tuple(self.metrics)
        if "accuracy" not in self.metrics or any(
            m not in ("accuracy", "mse") for m in self.metrics
        ):
            raise ValidationError(
                f"metrics must include 'accuracy' and may add 'mse', got {self.metrics}"
            )

    @property
    def active_modalities(self):
        if self.drop_modality is None:
            return None
        return tuple(m for m in MODALITIES if m != self.drop_modality)

    def to_dict(self):
        d = asdict(self)
        d["model"] = asdict(self.model)
        d["adapt"] = asdict(self.adapt)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "adapt" in d:
            d["adapt"] = AdaptConfig(**d["adapt"])
        if "ratio" in d:
            d["ratio"] = tuple(d["ratio"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply dotted key=value overrides, e.g. adapt.alpha=0.05."""
    d = cfg.to_dict()
    for key, value in overrides:
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ValidationError(f"unknown config section {part!r} in override {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config key {key!r}")
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# single runs


def split_sequences(domain: DomainDataset, plan: SplitPlan):
    shots = [domain.examples[i] for i in plan.shot_ids]
    val = [domain.examples[i] for i in plan.validation_ids]
    test = [domain.examples[i] for i in plan.test_ids]
    return shots, val, test


def run_single(domains, target_id: int, seed: int, method: str, model_cfg: ModelConfig,
               adapt_cfg: AdaptConfig, active=None, ratio=(2, 8), pretrained=None):
    """Train one method on one target; returns (report, history, params, plan, sources)."""
    by_id = {d.domain_id: d for d in domains}
    if target_id not in by_id:
        raise ValidationError(f"no domain {target_id} in the corpus")
    target = by_id[target_id]
    sources = [d for d in domains if d.domain_id != target_id]
    if not sources:
        raise ValidationError("need at least one source domain")
    cfg = replace(adapt_cfg, seed=seed, k=None)

    plan = make_split(target, shots=cfg.shots, ratio=ratio, seed=seed)
    shot_seqs, val_seqs, test_seqs = split_sequences(target, plan)
    shot_pool = DomainDataset(domain_id=target_id, examples=shot_seqs)

    if pretrained is None:
        pretrained, _ = pretrain_on_sources(sources, model_cfg, cfg, active=active)
    if method == "adapt":
        params, history = run_adaptation(
            sources, shot_pool, model_cfg, cfg, init_params=pretrained,
            validation=val_seqs, active=active,
        )
    elif method == "finetune":
        params, history = few_shot_finetune(
            pretrained, shot_pool, model_cfg, cfg, validation=val_seqs, active=active
        )
    else:
        raise ValidationError(f"unknown method {method!r}")

    preds = predict_batch(params, model_cfg, test_seqs, active=active)
    labels = np.stack([s.label.scores for s in test_seqs])
    report = accuracy(preds, labels)
    return report, history, params, plan, sorted(d.domain_id for d in sources)


# ---------------------------------------------------------------------------
# sweeps


def _resolve_targets(cfg: ExperimentConfig, domains):
    if cfg.targets == "all":
        return sorted(d.domain_id for d in domains)
    return list(cfg.targets)


def load_domains(path):
    header, items = read_dataset(path)
    return header, domains_from_items(items)


def run_experiment(cfg: ExperimentConfig):
    """Leave-one-domain-out sweep; writes reports, histories, similarity CSV.

    Per-target failures are logged into the aggregate and the sweep
    continues. Returns the aggregate dict.
    """
    header, domains = load_domains(cfg.dataset)
    targets = _resolve_targets(cfg, domains)
    os.makedirs(cfg.out_dir, exist_ok=True)
    all_ids = sorted(d.domain_id for d in domains)

    per_target = {}
    errors = {}
    sim_rows = {}
    for target_id in targets:
        seed_reports = []
        final_sims = []
        try:
            for seed in cfg.seeds:
                report, history, params, plan, source_ids = run_single(
                    domains, target_id, seed, cfg.method, cfg.model, cfg.adapt,
                    active=cfg.active_modalities, ratio=cfg.ratio,
                )
                run_dir = os.path.join(cfg.out_dir, f"target_{target_id}", f"seed_{seed}")
                os.makedirs(run_dir, exist_ok=True)
                payload = report.to_dict()
                if "mse" not in cfg.metrics:
                    payload.pop("trait_mse")
                payload.update(
                    {"target": target_id, "seed": seed, "method": cfg.method,
                     "sources": source_ids, "split": plan.to_dict()}
                )
                with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
                    json.dump(payload, fh, indent=2)
                    fh.write("\n")
                write_history_csv(
                    os.path.join(run_dir, "history.csv"), history, k=len(source_ids)
                )
                if cfg.save_models:
                    save_checkpoint(os.path.join(run_dir, "model.ckpt"), params, cfg.model)
                seed_reports.append(report)
                if cfg.method == "adapt" and history:
                    final_sims.append((source_ids, history[-1]["sims"]))
        except GsafError as exc:
            errors[target_id] = f"{type(exc).__name__}: {exc}"
            continue
        per_target[target_id] = aggregate_reports(seed_reports, stds_from=seed_reports)
        if final_sims:
            mean_sims = np.mean([s for _, s in final_sims], axis=0)
            sim_rows[target_id] = dict(zip(final_sims[0][0], mean_sims))

    aggregate = {
        "method": cfg.method,
        "targets": {
            str(t): per_target[t].to_dict() for t in sorted(per_target)
        },
        "errors": {str(t): errors[t] for t in sorted(errors)},
    }
    if per_target:
        overall = aggregate_reports(
            list(per_target.values()), stds_from=list(per_target.values())
        )
        aggregate["overall"] = overall.to_dict()
    with open(os.path.join(cfg.out_dir, "aggregate.json"), "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2)
        fh.write("\n")
    if sim_rows:
        write_similarity_matrix(
            os.path.join(cfg.out_dir, "simmatrix.csv"), sim_rows, all_ids
        )
    return aggregate


def write_similarity_matrix(path, sim_rows: dict, domain_ids):
    """k x k CSV of final similarities; row = target, column = source, diag = 1."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target"] + [str(d) for d in domain_ids])
        for t in domain_ids:
            row = [str(t)]
            for s in domain_ids:
                if s == t:
                    row.append(repr(1.0))
                else:
                    value = sim_rows.get(t, {}).get(s)
                    row.append("" if value is None else repr(float(value)))
            writer.writerow(row)


def collect_similarity_matrix(out_dir):
    """Rebuild the similarity matrix from per-run history files on disk."""
    sim_rows = {}
    ids = set()
    for entry in sorted(os.listdir(out_dir)):
        if not entry.startswith("target_"):
            continue
        target_id = int(entry.split("_", 1)[1])
        ids.add(target_id)
        sims = []
        sources = None
        target_dir = os.path.join(out_dir, entry)
        for seed_entry in sorted(os.listdir(target_dir)):
            report_path = os.path.join(target_dir, seed_entry, "report.json")
            history_path = os.path.join(target_dir, seed_entry, "history.csv")
            if not (os.path.exists(report_path) and os.path.exists(history_path)):
                continue
            with open(report_path, "r", encoding="utf-8") as fh:
                report = json.load(fh)
            sources = report["sources"]
            ids.update(sources)
            rows = read_history_csv(history_path)
            if rows and rows[-1]["sims"] is not None:
                sims.append(rows[-1]["sims"])
        if sims and sources:
            sim_rows[target_id] = dict(zip(sources, np.mean(sims, axis=0)))
    return sim_rows, sorted(ids)


# ---------------------------------------------------------------------------
# ablations and sweeps


def modality_ablation(cfg: ExperimentConfig, drop: str):
    """Retrain with one modality channel zeroed and its fusion pairs removed.

    Needs >= 5 seeds for the std estimate; returns mean and std of the
    average accuracy next to the full-modality reference.
    """
    if drop not in MODALITIES:
        raise ValidationError(f"unknown modality {drop!r}; choose from {MODALITIES}")
    if len(cfg.seeds) < 5:
        raise ValidationError("modality ablation needs at least 5 seeds")

    def sweep_stats(sub_cfg):
        header, domains = load_domains(sub_cfg.dataset)
        targets = _resolve_targets(sub_cfg, domains)
        per_seed = []
        for seed in sub_cfg.seeds:
            accs = []
            for target_id in targets:
                report, *_ = run_single(
                    domains, target_id, seed, sub_cfg.method, sub_cfg.model, sub_cfg.adapt,
                    active=sub_cfg.active_modalities, ratio=sub_cfg.ratio,
                )
                accs.append(report.average_accuracy)
            per_seed.append(float(np.mean(accs)))
        return {"mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)),
                "per_seed": per_seed}

    return {
        "full": sweep_stats(replace(cfg, drop_modality=None)),
        "dropped": sweep_stats(replace(cfg, drop_modality=drop)),
        "modality": drop,
    }


def source_count_sweep(cfg: ExperimentConfig, counts):
    """Accuracy as a function of the number of source domains.

    Source subsets of each size are drawn with a seeded substream per
    target. Returns rows plus a Spearman rank correlation of count vs
    accuracy, and writes a plot-ready CSV into the output directory.
    """
    header, domains = load_domains(cfg.dataset)
    targets = _resolve_targets(cfg, domains)
    max_pool = len(domains) - 1
    for c in counts:
        if c < 1 or c > max_pool:
            raise ValidationError(f"source count {c} outside [1, {max_pool}]")

    rows = []
    for target_id in targets:
        others = [d for d in domains if d.domain_id != target_id]
        for count in counts:
            rng = substream(cfg.seeds[0], "sweep", target_id, count)
            chosen_idx = sorted(rng.choice(len(others), size=count, replace=False))
            chosen = [others[int(i)] for i in chosen_idx]
            subset = chosen + [d for d in domains if d.domain_id == target_id]
            report, *_ = run_single(
                subset, target_id, cfg.seeds[0], cfg.method, cfg.model, cfg.adapt,
                active=cfg.active_modalities, ratio=cfg.ratio,
            )
            rows.append({"target": target_id, "count": count,
                         "accuracy": report.average_accuracy})

    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "source_count_sweep.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "count", "accuracy"])
        for row in rows:
            writer.writerow([row["target"], row["count"], repr(row["accuracy"])])
    trend = spearman([r["count"] for r in rows], [r["accuracy"] for r in rows])
    return {"rows": rows, "spearman": trend, "csv": csv_path}


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks on ties."""

    def ranks(values):
        arr = np.asarray(values, dtype=np.float64)
        order = np.argsort(arr, kind="stable")
        r = np.empty(len(arr))
        r[order] = np.arange(1, len(arr) + 1)
        for v in np.unique(arr):
            mask = arr == v
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


# ---------------------------------------------------------------------------
# method comparison (shared pretraining across variants)


def compare_methods(domains, model_cfg: ModelConfig, adapt_cfg: AdaptConfig, seeds,
                    variants=("adapt", "finetune"), ratio=(2, 8)):
    """Run several method variants from identical pretrained weights.

    Variants: adapt, finetune, adapt-nosim, adapt-noadalr. Returns
    {variant: {target_id: [accuracy per seed]}} plus the per-run mean
    similarity history under "sims".
    """
    results = {v: {} for v in variants}
    sims_log = {}
    target_ids = sorted(d.domain_id for d in domains)
    for seed in seeds:
        for target_id in target_ids:
            sources = [d for d in domains if d.domain_id != target_id]
            target = next(d for d in domains if d.domain_id == target_id)
            cfg = replace(adapt_cfg, seed=seed, k=None)
            plan = make_split(target, shots=cfg.shots, ratio=ratio, seed=seed)
            shot_seqs, val_seqs, test_seqs = split_sequences(target, plan)
            shot_pool = DomainDataset(domain_id=target_id, examples=shot_seqs)
            pretrained, _ = pretrain_on_sources(sources, model_cfg, cfg)
            labels = np.stack([s.label.scores for s in test_seqs])

            for variant in variants:
                vcfg = cfg
                if variant == "adapt-nosim":
                    vcfg = replace(cfg, use_similarity=False)
                elif variant == "adapt-noadalr":
                    vcfg = replace(cfg, use_adaptive_lr=False)
                if variant == "finetune":
                    params, history = few_shot_finetune(
                        pretrained, shot_pool, model_cfg, vcfg, validation=val_seqs
                    )
                else:
                    params, history = run_adaptation(
                        sorted(sources, key=lambda d: d.domain_id), shot_pool, model_cfg,
                        vcfg, init_params=pretrained, validation=val_seqs,
                    )
                    if variant == "adapt":
                        mean_sims = np.mean([row["sims"] for row in history], axis=0)
                        sims_log[(seed, target_id)] = dict(
                            zip(sorted(d.domain_id for d in sources), mean_sims)
                        )
                preds = predict_batch(params, model_cfg, test_seqs)
                report = accuracy(preds, labels)
                results[variant].setdefault(target_id, []).append(report.average_accuracy)
    results["sims"] = sims_log
    return results
