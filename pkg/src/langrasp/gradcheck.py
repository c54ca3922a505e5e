"""Full-model gradient integrity check at micro scale.

Bundles a tiny synthetic observation batch and verifies reverse-mode
gradients of every loss (actor, critic, temperature, guided KL) against
central finite differences, for each fusion mode.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import load_config
from .encoder import ground_probabilities
from .grasps import GraspPose, box_grasp_mapping, grounding_prior
from .policy import FUSION_MODES, FusionPolicy, kl_guided_loss
from .runtime import Setup
from .sac import soft_state_value, target_entropy
from .world import Instruction, Observation, ObjectBox

MICRO_POLICY = dict(width=16, heads=2, layers=1, ff_mult=1, head_hidden=8,
                    posenc_bands=6)

LOSSES = ("actor", "critic", "alpha", "kl")


def micro_setup(fusion_mode: str = "cross_attention", seed: int = 5) -> Setup:
    config = load_config(overrides={
        "policy": {**MICRO_POLICY, "fusion_mode": fusion_mode},
        "encoder": {"sigma_align": 0.2},
        "seed": seed,
    })
    return Setup(config)


def micro_observation(setup: Setup, rng: np.random.Generator,
                      n_boxes: int = 3, n_grasps: int = 4) -> Observation:
    """Hand-built observation over real vocabulary concepts."""
    table = setup.table
    boxes = []
    for i in range(n_boxes):
        label = table.labels[int(rng.integers(len(table.labels)))]
        general = table.general_labels[int(rng.integers(len(table.general_labels)))]
        w = rng.uniform(0.3, 0.7)
        boxes.append(ObjectBox(
            rect=(i * 20, i * 25, i * 20 + 30, i * 25 + 30),
            center_3d=(float(rng.uniform(0.1, 0.7)), float(rng.uniform(0.1, 0.7)),
                       float(rng.uniform(0.02, 0.1))),
            descriptor={label: float(w), general: float(1.0 - w)},
            owner_id=i, dominant_id=i))
    grasps_ = []
    for _ in range(n_grasps):
        box = boxes[int(rng.integers(n_boxes))]
        jitter = rng.normal(scale=0.02, size=2)
        grasps_.append(GraspPose(
            position=(box.center_3d[0] + jitter[0], box.center_3d[1] + jitter[1],
                      box.center_3d[2]),
            yaw=float(rng.uniform(0, math.pi)),
            width=float(rng.uniform(0.05, 0.11)),
            quality=float(rng.uniform(0.6, 1.0))))
    instruction = Instruction(template_text=table.templates[0],
                              keyword=table.labels[0], keyword_type="label",
                              template_id=0)
    return Observation(boxes=boxes, grasps=grasps_, instruction=instruction,
                       noise_seed=int(rng.integers(2 ** 31 - 1)))


def micro_batch(setup: Setup, rng: np.random.Generator, size: int = 2):
    batch = []
    for i in range(size):
        obs = micro_observation(setup, rng)
        nxt = micro_observation(setup, rng)
        action = int(rng.integers(obs.n_grasps))
        reward = float(rng.choice([2.0, -1.0, -0.4]))
        done = i % 2 == 0
        batch.append((obs, action, reward, nxt, done))
    return batch


def _phantom_gradient(t: Tensor) -> Tensor:
    """Zero forward contribution, but backward injects a spurious 0.5 into
    one entry of `t` — the corrupted-gradient negative control."""
    def backward(g):
        full = np.zeros_like(t.data)
        full.reshape(-1)[0] = 0.5 * g
        ad._accum(t, full)
    return ad._make(np.zeros(()), (t,), backward)


def loss_builder(loss: str, model: FusionPolicy, setup: Setup, batch,
                 alpha: float = 0.2, gamma: float = 0.99,
                 log_alpha: Tensor | None = None, inject_fault: bool = False):
    """Deterministic zero-argument loss closure plus the parameters the loss
    genuinely depends on (detached quantities are precomputed outside it)."""
    encoder = setup.encoder

    def maybe_corrupt(scalar: Tensor, params: dict) -> Tensor:
        if not inject_fault:
            return scalar
        victim = next(iter(params.values()))
        return ad.add(scalar, _phantom_gradient(victim))

    if loss == "critic":
        targets = []
        with ad.no_grad():
            for obs, action, reward, nxt, done in batch:
                if done:
                    targets.append(reward)
                else:
                    nstate = model.build_state(nxt, encoder)
                    npi, _ = model.policy_forward(nstate)
                    tq1, tq2 = model.critic_forward(nstate, target=True)
                    v = soft_state_value(npi.data[0], tq1.data[0], tq2.data[0], alpha)
                    targets.append(reward + gamma * v)

        params = {**model.trunk_parameters(),
                  **model.q1.named_parameters("q1."),
                  **model.q2.named_parameters("q2.")}

        def fn():
            terms = []
            for (obs, action, _, _, _), y in zip(batch, targets):
                state = model.build_state(obs, encoder)
                q1, q2 = model.critic_forward(state)
                e1 = ad.add(ad.pick(q1, 0, action), -y)
                e2 = ad.add(ad.pick(q2, 0, action), -y)
                terms.append(ad.add(ad.mul(e1, e1), ad.mul(e2, e2)))
            return maybe_corrupt(ad.mul_scalar(ad.add_n(terms), 0.5 / len(batch)),
                                 params)

        return fn, params

    if loss == "actor":
        min_qs = []
        with ad.no_grad():
            for obs, *_ in batch:
                state = model.build_state(obs, encoder)
                q1, q2 = model.critic_forward(state)
                min_qs.append(np.minimum(q1.data, q2.data))

        params = {**model.trunk_parameters(),
                  **model.policy_head.named_parameters("policy_head.")}

        def fn():
            terms = []
            for (obs, *_), mq in zip(batch, min_qs):
                state = model.build_state(obs, encoder)
                pi, log_pi = model.policy_forward(state)
                inner = ad.add(ad.mul_scalar(Tensor(mq), -1.0),
                               ad.mul_scalar(log_pi, alpha))
                terms.append(ad.tsum(ad.mul(pi, inner)))
            return maybe_corrupt(ad.mul_scalar(ad.add_n(terms), 1.0 / len(batch)),
                                 params)

        return fn, params

    if loss == "kl":
        priors = []
        for obs, *_ in batch:
            feats = encoder.encode_observation(obs)
            lang = encoder.encode_text(obs.instruction, fallback=True)
            probs = ground_probabilities(feats, lang, encoder.temperature)
            mapping = box_grasp_mapping(obs.boxes, obs.grasps, setup.map_threshold)
            priors.append(grounding_prior(probs, mapping))

        params = {**model.trunk_parameters(),
                  **model.policy_head.named_parameters("policy_head.")}

        def fn():
            terms = []
            for (obs, *_), prior in zip(batch, priors):
                state = model.build_state(obs, encoder)
                pi, log_pi = model.policy_forward(state)
                terms.append(kl_guided_loss(pi, prior, log_pi=log_pi))
            return maybe_corrupt(ad.mul_scalar(ad.add_n(terms), 1.0 / len(batch)),
                                 params)

        return fn, params

    if loss == "alpha":
        if log_alpha is None:
            log_alpha = Tensor(np.asarray(math.log(alpha)), requires_grad=True)
        entropies, targets_h = [], []
        with ad.no_grad():
            for obs, *_ in batch:
                state = model.build_state(obs, encoder)
                pi, log_pi = model.policy_forward(state)
                entropies.append(float(-(pi.data * log_pi.data).sum()))
                targets_h.append(target_entropy(obs.n_grasps, 0.5))

        gap = float(np.mean(np.asarray(targets_h) - np.asarray(entropies)))

        params = {"log_alpha": log_alpha}

        def fn():
            return maybe_corrupt(ad.mul_scalar(log_alpha, -gap), params)

        return fn, params

    raise ValueError(f"unknown loss {loss!r}")


def run_gradcheck(modes=FUSION_MODES, losses=LOSSES, seed: int = 5,
                  h: float = 1e-5, inject_fault: bool = False) -> dict:
    """Max relative error per (mode, loss) pair. Non-film modes exclude the
    film parameters, whose gradients are identically zero there."""
    results = {}
    for mode in modes:
        setup = micro_setup(mode, seed=seed)
        rng = np.random.default_rng(seed)
        model = FusionPolicy(setup.policy_config(), seed=seed + 1)
        batch = micro_batch(setup, rng)
        for loss in losses:
            if loss == "alpha" and mode != modes[0]:
                continue  # the temperature loss does not touch the trunk
            fn, params = loss_builder(loss, model, setup, batch,
                                      inject_fault=inject_fault)
            if mode != "film":
                params = {k: v for k, v in params.items()
                          if not k.startswith("film")}
            results[(mode, loss)] = nn.grad_check(fn, params, h=h)
    return results
