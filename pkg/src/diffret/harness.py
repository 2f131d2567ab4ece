"""Benchmark evaluation: variant runners (A/B/C), metric reports, and
sensitivity sweeps over guidance, control scale, and solver steps."""

from __future__ import annotations

import csv
import json

import numpy as np

from .adapter import ComposedModel, attach
from .errors import ConfigError, UsageError
from .retrieval import (GalleryIndex, map_at_k, rank, recall_at_k,
                        recall_subset_at_k)
from .sampling import SampleConfig, sample_hypotheses
from .schedule import DiffusionSchedule

RECALL_KS = (1, 5, 10)
MAP_KS = (5, 10, 25)

DEFAULT_BENCHMARK = {"n_queries": 64, "gallery_size": 2048,
                     "subset_size": 16}


def evaluate_queries(queries: list, gallery: GalleryIndex, subsets: dict,
                     query_embs: np.ndarray,
                     recall_ks=RECALL_KS, map_ks=MAP_KS) -> dict:
    """Metric report for one embedding per benchmark query."""
    if len(query_embs) != len(queries):
        raise ConfigError("one embedding per query required")
    results = [rank(emb, gallery, query_id=qi)
               for qi, emb in enumerate(query_embs)]
    truths = [q.triplet.target.id for q in queries]
    multi = [q.target_ids for q in queries]
    subset_list = [subsets[qi] for qi in range(len(queries))]
    agg = {}
    for k in recall_ks:
        agg[f"recall@{k}"] = recall_at_k(results, truths, k)
        agg[f"recall_subset@{k}"] = recall_subset_at_k(results, subset_list,
                                                       truths, k)
    for k in map_ks:
        agg[f"map@{k}"] = map_at_k(results, multi, k)
    per_query = [{"query": qi, "target": int(truths[qi]),
                  "rank_of_target":
                      int(np.flatnonzero(res.ranked_ids == truths[qi])[0]) + 1,
                  "top5": [int(i) for i in res.ranked_ids[:5]]}
                 for qi, res in enumerate(results)]
    return {"aggregate": agg, "per_query": per_query}


def _sample_embs(model, sched, sample_cfg, conditions, z_query):
    _, ensemble = sample_hypotheses(model, sched, sample_cfg,
                                    batch=len(conditions),
                                    conditions=conditions, z_query=z_query)
    return ensemble


def run_variant(variant: str, queries: list, gallery: GalleryIndex,
                subsets: dict, sched: DiffusionSchedule | None = None,
                params: dict | None = None, cfg=None, adapter: dict | None = None,
                sample_cfg: SampleConfig | None = None,
                text_source: str = "description") -> dict:
    """One ablation arm on a fixed benchmark.

    A ranks by the raw query feature (no diffusion artifacts needed).
    B samples from the stage-1 prior on text alone; C adds the control
    branch driven by the query feature.  ``text_source`` picks the
    description (default) or the bare edit string as the condition.
    """
    if variant not in ("A", "B", "C"):
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "A":
        embs = np.stack([q.triplet.z_ref_delta for q in queries])
    else:
        if params is None or cfg is None or sched is None:
            raise UsageError(f"variant {variant} needs a trained checkpoint")
        if text_source == "description":
            conditions = [q.c_desc for q in queries]
        elif text_source == "edit":
            conditions = [q.triplet.c_delta for q in queries]
        else:
            raise ConfigError(f"unknown text_source {text_source!r}")
        sample_cfg = sample_cfg or SampleConfig()
        if variant == "B":
            model = ComposedModel(params=params, cfg=cfg)
            embs = _sample_embs(model, sched, sample_cfg, conditions, None)
        else:
            if adapter is None:
                raise UsageError("variant C needs a fine-tuned adapter")
            model = attach(params, adapter, cfg, delta=sample_cfg.delta)
            zq = np.stack([q.triplet.z_ref_delta for q in queries])
            embs = _sample_embs(model, sched, sample_cfg, conditions, zq)
    report = evaluate_queries(queries, gallery, subsets, embs)
    report["variant"] = variant
    return report


def ablate(world, seeds: list, sched, params, cfg, adapter,
           sample_cfg: SampleConfig | None = None,
           benchmark_spec: dict | None = None,
           variants=("A", "B", "C")) -> dict:
    """Run the requested variants over several benchmark seeds."""
    spec = dict(DEFAULT_BENCHMARK)
    spec.update(benchmark_spec or {})
    per_seed = []
    for seed in seeds:
        queries, gallery, subsets = world.gen_benchmark(seed=seed, **spec)
        row = {"seed": seed}
        for v in variants:
            rep = run_variant(v, queries, gallery, subsets, sched=sched,
                              params=params, cfg=cfg, adapter=adapter,
                              sample_cfg=sample_cfg)
            row[v] = rep["aggregate"]
        per_seed.append(row)
    means = {v: {m: float(np.mean([r[v][m] for r in per_seed]))
                 for m in per_seed[0][v]} for v in variants}
    return {"benchmark": spec, "seeds": list(seeds),
            "per_seed": per_seed, "mean": means}


def metrics_table(report: dict) -> str:
    """Plain-text table of the mean metrics, variants as rows."""
    means = report["mean"]
    metrics = list(next(iter(means.values())))
    width = max(len(m) for m in metrics) + 2
    lines = ["variant  " + "".join(m.rjust(width) for m in metrics)]
    for v, row in means.items():
        lines.append(f"{v:<9}" + "".join(f"{row[m]:{width}.4f}"
                                         for m in metrics))
    return "\n".join(lines)


GAMMA_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
DELTA_GRID = (0.5, 1.0, 1.5)
STEPS_GRID = (6, 10, 14, 18, 22)


def sweep(world, seed: int, sched, params, cfg, adapter,
          base: SampleConfig | None = None, metric: str = "recall@10",
          gammas=GAMMA_GRID, deltas=DELTA_GRID, steps_grid=STEPS_GRID,
          benchmark_spec: dict | None = None) -> dict:
    """(gamma, delta) and solver-steps sensitivity grids on one benchmark."""
    spec = dict(DEFAULT_BENCHMARK)
    spec.update(benchmark_spec or {})
    queries, gallery, subsets = world.gen_benchmark(seed=seed, **spec)
    base = base or SampleConfig()

    def point(**kw):
        sc = SampleConfig.from_json({**base.to_json(), **kw})
        rep = run_variant("C", queries, gallery, subsets, sched=sched,
                          params=params, cfg=cfg, adapter=adapter,
                          sample_cfg=sc)
        return rep["aggregate"][metric]

    guidance = [{"gamma": g, "delta": d, metric: point(gamma=g, delta=d)}
                for g in gammas for d in deltas]
    steps = [{"steps": s, metric: point(steps=s)} for s in steps_grid]
    return {"metric": metric, "seed": seed, "guidance": guidance,
            "steps": steps}


def write_sweep_csv(result: dict, stem: str) -> list:
    paths = []
    for grid, cols in (("guidance", ["gamma", "delta", result["metric"]]),
                       ("steps", ["steps", result["metric"]])):
        path = f"{stem}.{grid}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            writer.writerows(result[grid])
        paths.append(path)
    return paths


def write_report(report: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
