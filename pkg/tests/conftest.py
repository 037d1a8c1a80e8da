"""Session-scoped world: one pretrained backbone, fitted maps, and task data.

Building the world takes a couple of minutes, so it is created once and
shared by every test that needs realistic traces. Tests that only need
shapes or algebra build their own tiny states instead.
"""

import json
from dataclasses import dataclass

import numpy as np
import pytest

from bridgetune.backbone import (BackboneState, ModelConfig, PretrainConfig,
                                 freeze, mlm_samples, pretrain_mlm,
                                 save_backbone)
from bridgetune.latent_map import (EndpointTable, FitMapConfig, MapNet,
                                   build_endpoints, fit_map, save_mapnet)
from bridgetune.tasks import (make_pretrain_corpus, make_task_dataset,
                              write_jsonl)

PRETRAIN_STEPS = 2500
PDF_MAP_STEPS = 400
SDE_MAP_STEPS = 200


@dataclass
class World:
    config: ModelConfig
    state: BackboneState
    corpus: list
    fit_samples: list
    endpoints: EndpointTable
    pdf_map: MapNet
    sde_map: MapNet
    pool: list  # downstream task samples, both classes


@pytest.fixture(scope="session")
def world():
    config = ModelConfig()
    rng = np.random.default_rng(0)
    corpus = make_pretrain_corpus(200, 12, rng)
    state = freeze(pretrain_mlm(config, corpus,
                                PretrainConfig(max_steps=PRETRAIN_STEPS, seed=0)))
    endpoints = build_endpoints(state["embed"].data, r=8, eta=1.0)
    fit_samples = mlm_samples(corpus, np.random.default_rng(1))
    pdf_map, _ = fit_map(state, fit_samples,
                         FitMapConfig(method="pdf", max_steps=PDF_MAP_STEPS,
                                      seed=0), endpoints)
    sde_map, _ = fit_map(state, fit_samples,
                         FitMapConfig(method="sde", max_steps=SDE_MAP_STEPS,
                                      batch_size=8, seed=0), endpoints)
    pool = make_task_dataset(150, 12, 0.35, np.random.default_rng(100))
    return World(config=config, state=state, corpus=corpus,
                 fit_samples=fit_samples, endpoints=endpoints,
                 pdf_map=pdf_map, sde_map=sde_map, pool=pool)


@pytest.fixture(scope="session")
def world_dir(world, tmp_path_factory):
    """World artifacts on disk, for CLI-level tests."""
    d = tmp_path_factory.mktemp("world")
    save_backbone(d / "backbone.bin", world.state)
    save_mapnet(d / "map-pdf.bin", world.pdf_map, "pdf", world.endpoints)
    save_mapnet(d / "map-sde.bin", world.sde_map, "sde", world.endpoints)
    write_jsonl(d / "task.jsonl", world.pool)
    with open(d / "corpus.json", "w", encoding="utf-8") as f:
        json.dump(world.corpus, f)
    return d
