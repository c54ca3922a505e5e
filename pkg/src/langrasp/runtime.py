"""Wiring from a resolved config to live simulator / encoder / policy objects."""
from __future__ import annotations

import functools

import numpy as np

from . import grasps, library, world
from .encoder import AlignedEncoder, basis_from_vocabulary
from .policy import FusionPolicy, PolicyConfig


class Setup:
    """Everything a run needs, built once from one resolved config."""

    def __init__(self, config: dict):
        self.config = config
        self.specs = library.load_library(config.get("library"))
        self.table = library.load_keywords(config.get("keywords"))
        self.train_specs = library.split_of(self.specs, "train")
        self.unseen_specs = library.split_of(self.specs, "unseen")
        w = config["world"]
        self.workspace = world.Workspace(side=w["side"], render_px=w["render_px"])
        e = config["encoder"]
        basis = basis_from_vocabulary(self.table, self.specs,
                                      width=config["policy"]["width"],
                                      seed=e["basis_seed"],
                                      general_mix=e["general_mix"])
        self.encoder = AlignedEncoder(basis, sigma_align=e["sigma_align"],
                                      temperature=e["temperature"],
                                      text_jitter=e["text_jitter"])
        p = config["proposals"]
        self.proposer = functools.partial(
            grasps.propose_grasps, k_max=p["k_max"], per_object=p["per_object"],
            position_jitter=p["position_jitter"], quality_jitter=p["quality_jitter"])
        self.map_threshold = p["map_threshold"]

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(**self.config["policy"])

    def new_policy(self, seed: int) -> FusionPolicy:
        return FusionPolicy(self.policy_config(), seed=seed)

    def specs_for_split(self, split: str):
        return self.unseen_specs if split == "unseen_objects" else self.train_specs

    def encoder_at(self, sigma: float) -> AlignedEncoder:
        return AlignedEncoder(self.encoder.basis, sigma_align=sigma,
                              temperature=self.encoder.temperature,
                              text_jitter=self.encoder.text_jitter)


def spawn_rngs(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
