"""Shared fixtures.

The ``pipeline`` fixture trains the full desk-scale model once per
session (several minutes of CPU); only the acceptance tests request it.
"""

import time

import pytest

from diffret import training
from diffret.adapter import (attach, backbone_hash, freeze_backbone,
                             init_adapter)
from diffret.denoiser import DitConfig, init_params
from diffret.schedule import make_schedule
from diffret.world import World


@pytest.fixture(scope="session")
def pipeline():
    """Full two-stage training run at the tuned desk defaults."""
    t0 = time.monotonic()
    world = World()
    sched = make_schedule("linear", 100, 1e-4, 0.2)
    cfg = DitConfig()

    pairs = world.gen_pair_corpus(20000, seed=0)
    params = init_params(cfg, seed=0)
    stage1_losses = training.train_stage1(pairs, params, cfg, sched,
                                          training.stage1_desk(seed=0))

    triplets = world.gen_triplets(10000, seed=11)
    adapter = init_adapter(params, cfg)
    model = attach(params, adapter, cfg, delta=1.0)
    hash_before = backbone_hash(params)
    freeze_backbone(model)
    stage2_losses = training.train_stage2(triplets, model, sched,
                                          training.stage2_desk(seed=0))
    return {
        "world": world, "sched": sched, "cfg": cfg,
        "params": params, "adapter": adapter,
        "stage1_losses": stage1_losses, "stage2_losses": stage2_losses,
        "backbone_hash_before": hash_before,
        "train_seconds": time.monotonic() - t0,
    }
