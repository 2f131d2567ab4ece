"""Command-line entry point.

One binary with subcommands covering the whole pipeline: data
generation, two training stages, sampling, retrieval, evaluation,
ablations, sensitivity sweeps, gradient checking, and artifact
inspection.  Configs are JSON files; command-line flags override file
values.  Exit codes: 0 success, 2 usage/input error, 3 numeric failure.

Heavy imports are deferred until after thread-count flags are applied,
so single-thread mode really does pin the numeric libraries.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, InputError, NumericError, UsageError


def _load_json(path):
    if not os.path.exists(path):
        raise UsageError(f"missing config file: {path}")
    with open(path) as f:
        return json.load(f)


def _train_config(args, factory):
    from . import training
    base = _load_json(args.train_config) if args.train_config else {}
    for flag in ("batch_size", "lr", "weight_decay", "warmup_steps",
                 "epochs", "p_cfg", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            base[flag] = v
    return factory(**base)


def _sample_config(args):
    from .sampling import SampleConfig
    base = _load_json(args.sample_config) if args.sample_config else {}
    for flag in ("method", "steps", "gamma", "delta", "hypotheses", "grid"):
        v = getattr(args, flag, None)
        if v is not None:
            base[flag] = v
    if getattr(args, "sample_seed", None) is not None:
        base["seed"] = args.sample_seed
    return SampleConfig.from_json({**SampleConfig().to_json(), **base})


def _schedule(args):
    from .schedule import make_schedule
    return make_schedule(kind=args.schedule_kind, N=args.timesteps,
                         beta_min=args.beta_min, beta_max=args.beta_max,
                         sigma_kind=args.sigma_kind)


def _outdir(args):
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _load_benchmark(path):
    from .world import load_benchmark
    return load_benchmark(path)


def _benchmark_conditions(world, queries, text_source):
    if text_source == "description":
        return [q.c_desc for q in queries]
    return [q.triplet.c_delta for q in queries]


# -- subcommand handlers ------------------------------------------------------

def cmd_gen_world(args):
    from .world import World, WorldConfig, save_pair_corpus, save_triplets, \
        save_benchmark
    out = _outdir(args)
    wc = WorldConfig.from_json(_load_json(args.world_config)) \
        if args.world_config else WorldConfig()
    world = World(wc)
    wc.save(os.path.join(out, "world.json"))
    pairs = world.gen_pair_corpus(args.pairs, seed=args.seed)
    save_pair_corpus(os.path.join(out, "pairs"), world, pairs, args.seed)
    trips = world.gen_triplets(args.triplets, seed=args.seed + 1)
    save_triplets(os.path.join(out, "triplets"), world, trips, args.seed + 1)
    q, g, s = world.gen_benchmark(args.queries, args.gallery, args.subset,
                                  seed=args.seed + 2)
    save_benchmark(os.path.join(out, "benchmark"), world, q, g, s,
                   args.seed + 2)
    print(f"wrote {args.pairs} pairs, {args.triplets} triplets, "
          f"{args.queries}-query benchmark to {out}")
    return 0


def cmd_pretrain(args):
    from . import training
    from .checkpoint import save_checkpoint
    from .denoiser import DitConfig, init_params
    from .world import load_pair_corpus
    out = _outdir(args)
    _, records = load_pair_corpus(args.corpus)
    sched = _schedule(args)
    cfg = DitConfig.from_json(_load_json(args.dit_config)) \
        if args.dit_config else DitConfig()
    tc = _train_config(args, training.stage1_desk)
    params = init_params(cfg, seed=tc.seed)
    losses = training.train_stage1(
        records, params, cfg, sched, tc,
        log_path=os.path.join(out, "stage1_metrics.jsonl"))
    path = save_checkpoint(os.path.join(out, "stage1"), params, cfg, sched,
                           step=len(losses), seed=tc.seed, stage=1,
                           extra={"train_config": tc.to_json(),
                                  "final_loss": losses[-1]})
    print(f"stage-1 checkpoint: {path} (final loss {losses[-1]:.4f})")
    return 0


def cmd_finetune(args):
    from . import training
    from .adapter import attach, backbone_hash, freeze_backbone, init_adapter
    from .checkpoint import load_checkpoint, save_checkpoint
    from .world import load_triplets
    out = _outdir(args)
    ck = load_checkpoint(args.checkpoint)
    _, triplets = load_triplets(args.triplets)
    tc = _train_config(args, training.stage2_desk)
    adapter = ck["adapter"] or init_adapter(ck["params"], ck["cfg"])
    model = attach(ck["params"], adapter, ck["cfg"], delta=args.delta)
    before = backbone_hash(ck["params"])
    freeze_backbone(model)
    losses = training.train_stage2(
        triplets, model, ck["sched"], tc,
        log_path=os.path.join(out, "stage2_metrics.jsonl"))
    after = backbone_hash(ck["params"])
    if after != before:
        raise NumericError("backbone changed during stage-2 fine-tuning")
    path = save_checkpoint(os.path.join(out, "stage2"), ck["params"],
                           ck["cfg"], ck["sched"], step=len(losses),
                           seed=tc.seed, stage=2, adapter=adapter,
                           extra={"train_config": tc.to_json(),
                                  "final_loss": losses[-1]})
    print(f"stage-2 checkpoint: {path} (final loss {losses[-1]:.4f})")
    return 0


def cmd_sample(args):
    import numpy as np
    from .adapter import ComposedModel, attach
    from .blobio import config_hash, write_blob
    from .checkpoint import load_checkpoint
    from .sampling import sample_hypotheses
    ck = load_checkpoint(args.checkpoint)
    for t in ck["params"].values():
        t.requires_grad = False
    world, queries, _, _ = _load_benchmark(args.benchmark)
    sc = _sample_config(args)
    conditions = _benchmark_conditions(world, queries, args.text_source)
    if args.variant == "C":
        if ck["adapter"] is None:
            raise UsageError("variant C needs a stage-2 checkpoint")
        model = attach(ck["params"], ck["adapter"], ck["cfg"],
                       delta=sc.delta)
        zq = np.stack([q.triplet.z_ref_delta for q in queries])
    else:
        model = ComposedModel(params=ck["params"], cfg=ck["cfg"])
        zq = None
    trace = [] if args.trace else None
    _, ensemble = sample_hypotheses(model, ck["sched"], sc,
                                    batch=len(queries),
                                    conditions=conditions, z_query=zq,
                                    trace=trace)
    if args.trace:
        with open(args.trace, "w") as f:
            for rec in trace:
                f.write(json.dumps({k: rec[k] for k in
                                    ("step", "n", "state_norm",
                                     "eps_norm")}) + "\n")
    path = write_blob(args.out, {"embs": ensemble},
                      {"kind": "samples", "seed": sc.seed,
                       "sample_config": sc.to_json(),
                       "config_hash": config_hash(sc.to_json()),
                       "variant": args.variant,
                       "checkpoint": os.path.abspath(args.checkpoint),
                       "benchmark": os.path.abspath(args.benchmark)})
    print(f"wrote {len(queries)} embeddings to {path}")
    return 0


def _load_samples(path):
    from .blobio import read_blob
    meta, tensors = read_blob(path)
    if meta.get("kind") != "samples":
        raise UsageError(f"{path} is not a sample blob")
    return meta, tensors["embs"].astype(float)


def cmd_retrieve(args):
    from .retrieval import rank
    meta, embs = _load_samples(args.embeddings)
    _, queries, gallery, _ = _load_benchmark(args.benchmark)
    if len(embs) != len(queries):
        raise InputError("embedding count does not match benchmark queries")
    results = []
    for qi, emb in enumerate(embs):
        res = rank(emb, gallery, k=args.k, query_id=qi)
        results.append({"query_id": qi,
                        "ranked_ids": [int(i) for i in res.ranked_ids],
                        "scores": [float(s) for s in res.scores]})
    payload = {"seed": meta.get("seed"), "k": args.k, "results": results}
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    print(f"wrote rankings for {len(results)} queries to {args.out}")
    return 0


def cmd_eval(args):
    from .harness import evaluate_queries, write_report
    meta, embs = _load_samples(args.embeddings)
    _, queries, gallery, subsets = _load_benchmark(args.benchmark)
    report = evaluate_queries(queries, gallery, subsets, embs)
    report["seed"] = meta.get("seed")
    write_report(report, args.out)
    for name, value in report["aggregate"].items():
        print(f"{name:>18s}  {value:.4f}")
    return 0


def cmd_ablate(args):
    from .checkpoint import load_checkpoint
    from .harness import ablate, metrics_table, write_report
    from .world import World, WorldConfig
    ck = load_checkpoint(args.checkpoint)
    if ck["adapter"] is None:
        raise UsageError("ablate needs a stage-2 checkpoint (variant C)")
    for t in ck["params"].values():
        t.requires_grad = False
    wc = WorldConfig.from_json(_load_json(args.world_config)) \
        if args.world_config else WorldConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    report = ablate(World(wc), seeds, ck["sched"], ck["params"], ck["cfg"],
                    ck["adapter"], sample_cfg=_sample_config(args),
                    benchmark_spec={"n_queries": args.queries,
                                    "gallery_size": args.gallery,
                                    "subset_size": args.subset})
    write_report(report, args.out)
    print(metrics_table(report))
    return 0


def cmd_sweep(args):
    from .checkpoint import load_checkpoint
    from .harness import sweep, write_sweep_csv
    from .world import World, WorldConfig
    ck = load_checkpoint(args.checkpoint)
    if ck["adapter"] is None:
        raise UsageError("sweep needs a stage-2 checkpoint")
    for t in ck["params"].values():
        t.requires_grad = False
    wc = WorldConfig.from_json(_load_json(args.world_config)) \
        if args.world_config else WorldConfig()
    result = sweep(World(wc), args.seed, ck["sched"], ck["params"],
                   ck["cfg"], ck["adapter"], base=_sample_config(args),
                   metric=args.metric,
                   benchmark_spec={"n_queries": args.queries,
                                   "gallery_size": args.gallery,
                                   "subset_size": args.subset})
    paths = write_sweep_csv(result, args.out)
    with open(args.out + ".json", "w") as f:
        json.dump(result, f, indent=1)
        f.write("\n")
    print("wrote " + ", ".join(paths))
    return 0


def cmd_gradcheck(args):
    import numpy as np
    from . import training
    from .denoiser import DitConfig, init_params
    from .schedule import make_schedule
    from .world import World
    sched = make_schedule(N=args.timesteps, beta_max=args.beta_max)
    world = World()
    cfg = DitConfig()
    params = init_params(cfg, seed=args.seed)
    if args.perturb:
        rng = np.random.default_rng(args.seed)
        for t in params.values():  # break zero-init plateaus
            t.data += 0.01 * rng.standard_normal(t.data.shape)
    records = world.gen_pair_corpus(args.batch, seed=args.seed)
    z0 = np.stack([r.z0 for r in records])
    conds = [r.c_text for r in records]
    rng = np.random.default_rng(args.seed)
    ns = rng.integers(1, sched.N + 1, size=len(records))
    eps = rng.standard_normal(z0.shape)

    def loss_fn():
        return training._group_loss_stage1(params, cfg, sched, z0, conds,
                                           ns, eps)

    worst_name, worst = None, 0.0
    for name in sorted(params):
        err = training.grad_check(loss_fn, params, group=name,
                                  n_directions=args.directions,
                                  fd_step=args.fd_step, seed=args.seed)
        if err > worst:
            worst_name, worst = name, err
    print(f"max relative error {worst:.3e} (group {worst_name})")
    if worst >= args.threshold:
        raise NumericError(f"gradient check failed: {worst:.3e} >= "
                           f"{args.threshold:.1e}")
    return 0


def cmd_inspect(args):
    from .blobio import read_manifest
    manifest = read_manifest(args.path)
    out = {"format": manifest["format"],
           "tool_version": manifest["tool_version"],
           "meta": manifest["meta"],
           "tensors": [{"name": r["name"], "shape": r["shape"]}
                       for r in manifest["tensors"]]}
    print(json.dumps(out, indent=1, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------

def _add_schedule_flags(p):
    p.add_argument("--schedule-kind", default="linear",
                   choices=["linear", "cosine"])
    p.add_argument("--timesteps", type=int, default=100)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.2)
    p.add_argument("--sigma-kind", default="posterior",
                   choices=["posterior", "beta"])


def _add_train_flags(p):
    p.add_argument("--train-config", help="JSON file; flags override it")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--p-cfg", type=float, dest="p_cfg")
    p.add_argument("--seed", type=int)


def _add_sample_flags(p):
    p.add_argument("--sample-config", help="JSON file; flags override it")
    p.add_argument("--method", choices=["ancestral", "solver2m"])
    p.add_argument("--steps", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--hypotheses", type=int)
    p.add_argument("--grid", choices=["lambda", "n"])
    p.add_argument("--sample-seed", type=int)


def _add_benchmark_spec_flags(p):
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--gallery", type=int, default=2048)
    p.add_argument("--subset", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffret",
        description="Diffusion-prior embedding editing and retrieval")
    parser.add_argument("--threads", type=int, default=1,
                        help="numeric library thread count (1 = bitwise "
                             "reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate corpora and benchmark")
    p.add_argument("--world-config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pairs", type=int, default=20000)
    p.add_argument("--triplets", type=int, default=10000)
    _add_benchmark_spec_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("pretrain", help="stage-1 prior training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dit-config")
    _add_schedule_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage-2 adapter training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--delta", type=float, default=1.0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="generate target embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["B", "C"], default="C")
    p.add_argument("--text-source", choices=["description", "edit"],
                   default="description")
    p.add_argument("--trace", help="JSON-lines per-step trace path")
    _add_sample_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("retrieve", help="rank gallery for sampled queries")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="compute benchmark metrics")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run variants A/B/C")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world-config")
    p.add_argument("--seeds", default="101,102,103,104,105")
    p.add_argument("--out", required=True)
    _add_benchmark_spec_flags(p)
    _add_sample_flags(p)
    # desk-scale guidance calibration: moderate gamma and a small
    # hypothesis ensemble give variant C its best operating point
    p.set_defaults(func=cmd_ablate, gamma=1.0, hypotheses=4)

    p = sub.add_parser("sweep", help="guidance/steps sensitivity grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world-config")
    p.add_argument("--seed", type=int, default=101)
    p.add_argument("--metric", default="recall@10")
    p.add_argument("--out", required=True)
    _add_benchmark_spec_flags(p)
    _add_sample_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--directions", type=int, default=2)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--timesteps", type=int, default=100)
    p.add_argument("--beta-max", type=float, default=0.2)
    p.add_argument("--perturb", action="store_true",
                   help="jitter parameters before checking")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump an artifact manifest")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
