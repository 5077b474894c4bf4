"""Command-line experiment runner.

Subcommands: generate, cluster, train-adapt, train-finetune, eval,
gradcheck, simmatrix. Config files are JSON and any field can be
overridden with --set key=value (dotted paths). Exit codes: 0 success,
2 validation error, 3 divergence.
"""

import argparse
import json
import sys

import numpy as np

from .datakit import GeneratorSpec, SplitPlan, flatten_corpus, generate, kmeans_domains
from .errors import DivergenceError, GsafError
from .gradcheck import run_gradcheck
from .harness import (
    ExperimentConfig,
    apply_overrides,
    collect_similarity_matrix,
    run_experiment,
    write_similarity_matrix,
)
from .align import read_dataset, write_dataset
from .datakit import domains_from_items
from .metrics import accuracy
from .model import ModelConfig, load_checkpoint, predict_batch

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_generate(args):
    spec_dict = _load_json(args.spec) if args.spec else {}
    if "trait_maps" in spec_dict and spec_dict["trait_maps"] is not None:
        spec_dict["trait_maps"] = [
            (np.asarray(w), np.asarray(b)) for w, b in spec_dict["trait_maps"]
        ]
    spec = GeneratorSpec(**spec_dict)
    domains = generate(spec)
    write_dataset(flatten_corpus(domains), args.out, vocab_size=spec.vocab_size)
    total = sum(len(d) for d in domains)
    print(f"wrote {total} sequences across {len(domains)} domains to {args.out}")
    return EXIT_OK


def cmd_cluster(args):
    header, items = read_dataset(args.input)
    corpus = [seq for _, seq in items]
    result = kmeans_domains(corpus, k=args.k, seed=args.seed)
    relabeled = [(int(result.labels[i]), seq) for i, seq in enumerate(corpus)]
    out = args.out or args.input
    write_dataset(relabeled, out, header=header)
    sizes = np.bincount(result.labels, minlength=args.k)
    print(f"clustered {len(corpus)} sequences into {args.k} domains "
          f"(sizes {sizes.tolist()}) -> {out}")
    return EXIT_OK


def _train(args, method):
    cfg = ExperimentConfig.from_json(args.config)
    overrides = [s.split("=", 1) for s in args.set or []]
    cfg = apply_overrides(cfg, overrides)
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "method": method})
    aggregate = run_experiment(cfg)
    if aggregate.get("overall"):
        print(f"{method}: mean accuracy "
              f"{aggregate['overall']['average_accuracy']:.3f}% over "
              f"{len(aggregate['targets'])} targets -> {cfg.out_dir}")
    for target, reason in aggregate["errors"].items():
        print(f"target {target} failed: {reason}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    params, cfg = load_checkpoint(args.model)
    _, items = read_dataset(args.data)
    domains = {d.domain_id: d for d in domains_from_items(items)}
    plan = SplitPlan.from_dict(_load_json(args.split))
    if plan.target_domain_id not in domains:
        raise GsafError(f"split targets domain {plan.target_domain_id}, not in {args.data}")
    target = domains[plan.target_domain_id]
    test = [target.examples[i] for i in plan.test_ids]
    preds = predict_batch(params, cfg, test)
    labels = np.stack([s.label.scores for s in test])
    report = accuracy(preds, labels)
    payload = report.to_dict()
    payload["target"] = plan.target_domain_id
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = ModelConfig(**_load_json(args.config)) if args.config else None
    passed, worst = run_gradcheck(args.trials, seed=args.seed, cfg=cfg,
                                  full_trials=args.full_trials, verbose=args.verbose)
    print(f"gradcheck: {args.trials} trials, max rel error {worst.max_rel_error:.3e} "
          f"(worst parameter {worst.worst_param})")
    for layer, err in worst.per_layer.items():
        print(f"  {layer:10s} {err:.3e}")
    if not passed:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_simmatrix(args):
    sim_rows, ids = collect_similarity_matrix(args.history)
    if not sim_rows:
        raise GsafError(f"no adaptation histories found under {args.history}")
    write_similarity_matrix(args.out, sim_rows, ids)
    print(f"wrote {len(ids)}x{len(ids)} similarity matrix to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="gsaf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a synthetic multi-domain dataset")
    p.add_argument("--spec", help="GeneratorSpec JSON file (defaults apply when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("cluster", help="reassign domain ids by k-means over text features")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    for name, method in (("train-adapt", "adapt"), ("train-finetune", "finetune")):
        p = sub.add_parser(name, help=f"run the {method} sweep from an experiment config")
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.set_defaults(func=lambda args, m=method: _train(args, m))

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split's test set")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="ModelConfig JSON; random small configs when omitted")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-trials", type=int, default=15,
                   help="how many trials sweep every parameter component")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("simmatrix", help="assemble the similarity matrix from histories")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simmatrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except GsafError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
