"""Discrete soft actor-critic with automatic entropy tuning and the
two-stage curriculum (scattered scenes first, clutter second)."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import config_hash
from .encoder import ground_probabilities
from .grasps import box_grasp_mapping, grounding_prior
from .policy import (FusionPolicy, kl_guided_loss, load_checkpoint,
                     save_checkpoint, select_action)
from .runtime import Setup
from .world import (Episode, Observation, sample_instruction, sample_scene,
                    STAGE_I, STAGE_II)


@dataclass
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform, seeded sampling."""

    def __init__(self, capacity: int = 20000):
        self.capacity = capacity
        self._data: list = []
        self._pos = 0

    def push(self, tr: Transition):
        if not (0 <= tr.action < tr.obs.n_grasps):
            raise ValueError("action index out of range for stored observation")
        if not (-1.0 <= tr.reward <= 2.0):
            raise ValueError(f"reward {tr.reward} outside [-1, 2]")
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._pos] = tr
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, rng: np.random.Generator, batch_size: int) -> list:
        idx = rng.integers(len(self._data), size=batch_size)
        return [self._data[i] for i in idx]

    def __len__(self):
        return len(self._data)


# pure formula cores (shared by the tensor losses and the test oracles) -------

def soft_state_value(pi, q1, q2, alpha: float) -> float:
    """V(s) = pi^T (min(q1, q2) - alpha * log pi)."""
    pi = np.asarray(pi, dtype=np.float64)
    logp = np.log(np.maximum(pi, 1e-300))
    return float(np.sum(pi * (np.minimum(q1, q2) - alpha * logp)))


def critic_target(reward: float, done: bool, gamma: float, v_next: float) -> float:
    return reward + (0.0 if done else gamma * v_next)


def actor_objective(pi, q1, q2, alpha: float) -> float:
    """pi^T (-min(q1, q2) + alpha * log pi) for one state."""
    pi = np.asarray(pi, dtype=np.float64)
    logp = np.log(np.maximum(pi, 1e-300))
    return float(np.sum(pi * (-np.minimum(q1, q2) + alpha * logp)))


def policy_entropy(pi) -> float:
    pi = np.asarray(pi, dtype=np.float64)
    return float(-np.sum(pi * np.log(np.maximum(pi, 1e-300))))


def target_entropy(n_actions: int, ratio: float) -> float:
    return ratio * math.log(n_actions)


def alpha_objective(log_alpha: float, entropies, target_entropies) -> float:
    """Default tuning rule: mean of -log_alpha * (target_H - H)."""
    h = np.asarray(entropies, dtype=np.float64)
    hbar = np.asarray(target_entropies, dtype=np.float64)
    return float(np.mean(-log_alpha * (hbar - h)))


def alpha_objective_literal(alpha: float, entropies, target_entropies) -> float:
    """The tuning rule exactly as printed: pi^T(-alpha log pi + target_H),
    which reduces to alpha*H(pi) + target_H per state."""
    h = np.asarray(entropies, dtype=np.float64)
    hbar = np.asarray(target_entropies, dtype=np.float64)
    return float(np.mean(alpha * h + hbar))


# trainer ----------------------------------------------------------------------

class Trainer:
    """Owns the optimizers, temperature, and replay; performs update steps."""

    def __init__(self, model: FusionPolicy, setup: Setup, config: dict):
        self.model = model
        self.setup = setup
        self.encoder = setup.encoder
        sac = config["sac"]
        self.gamma = sac["gamma"]
        self.tau = sac["tau"]
        self.batch_size = sac["batch_size"]
        self.updates_per_step = sac["updates_per_step"]
        self.entropy_ratio = sac["target_entropy_ratio"]
        self.alpha_literal = sac["alpha_paper_literal"]
        self.kl_direction = config["guided"]["kl_direction"]
        self.log_alpha = Tensor(np.asarray(math.log(sac["alpha_init"])),
                                requires_grad=True)
        self.optimizer = nn.Adam(model.named_parameters(), lr=sac["lr"])
        self.alpha_optimizer = nn.Adam({"log_alpha": self.log_alpha}, lr=sac["lr"])
        self.buffer = ReplayBuffer(sac["replay_capacity"])
        self.updates_done = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def prior_for(self, obs: Observation) -> np.ndarray:
        feats = self.encoder.encode_observation(obs)
        lang = self.encoder.encode_text(obs.instruction, fallback=True)
        probs = ground_probabilities(feats, lang, self.encoder.temperature)
        mapping = box_grasp_mapping(obs.boxes, obs.grasps, self.setup.map_threshold)
        return grounding_prior(probs, mapping)

    def update(self, batch, beta: float = 0.0) -> dict:
        alpha = self.alpha
        critic_terms, actor_terms, kl_terms = [], [], []
        entropies, entropy_targets = [], []
        for tr in batch:
            state = self.model.build_state(tr.obs, self.encoder)
            pi, log_pi = self.model.policy_forward(state)
            q1, q2 = self.model.critic_forward(state)
            if tr.done:
                y = tr.reward
            else:
                with ad.no_grad():
                    nstate = self.model.build_state(tr.next_obs, self.encoder)
                    npi, _ = self.model.policy_forward(nstate)
                    tq1, tq2 = self.model.critic_forward(nstate, target=True)
                v = soft_state_value(npi.data[0], tq1.data[0], tq2.data[0], alpha)
                y = critic_target(tr.reward, False, self.gamma, v)
            e1 = ad.add(ad.pick(q1, 0, tr.action), -y)
            e2 = ad.add(ad.pick(q2, 0, tr.action), -y)
            critic_terms.append(ad.add(ad.mul(e1, e1), ad.mul(e2, e2)))

            min_q = Tensor(np.minimum(q1.data, q2.data))  # critics constant here
            inner = ad.add(ad.mul_scalar(min_q, -1.0), ad.mul_scalar(log_pi, alpha))
            actor_terms.append(ad.tsum(ad.mul(pi, inner)))

            if beta > 0.0:
                prior = self.prior_for(tr.obs)
                kl_terms.append(kl_guided_loss(pi, prior, self.kl_direction,
                                               log_pi=log_pi))
            entropies.append(policy_entropy(pi.data[0]))
            entropy_targets.append(target_entropy(tr.obs.n_grasps, self.entropy_ratio))

        b = float(len(batch))
        critic_loss = ad.mul_scalar(ad.add_n(critic_terms), 0.5 / b)
        actor_loss = ad.mul_scalar(ad.add_n(actor_terms), 1.0 / b)
        total = ad.add(critic_loss, actor_loss)
        kl_value = None
        if kl_terms:
            kl_mean = ad.mul_scalar(ad.add_n(kl_terms), 1.0 / len(kl_terms))
            kl_value = kl_mean.item()
            total = ad.add(total, ad.mul_scalar(kl_mean, beta))
        if not np.isfinite(total.data):
            raise nn.NumericsError("non-finite training loss")

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        alpha_loss = self._alpha_loss(entropies, entropy_targets)
        self.alpha_optimizer.zero_grad()
        alpha_loss.backward()
        self.alpha_optimizer.step()

        self.model.sync_targets(self.tau)
        self.updates_done += 1
        return {
            "critic_loss": critic_loss.item(),
            "actor_loss": actor_loss.item(),
            "alpha_loss": alpha_loss.item(),
            "alpha": self.alpha,
            "entropy": float(np.mean(entropies)),
            "guided_kl": kl_value,
            "beta": beta,
        }

    def _alpha_loss(self, entropies, entropy_targets) -> Tensor:
        h = np.asarray(entropies)
        hbar = np.asarray(entropy_targets)
        if self.alpha_literal:
            # mean(alpha*H + Hbar), alpha = exp(log_alpha)
            return ad.add(ad.mul_scalar(ad.exp(self.log_alpha), float(np.mean(h))),
                          float(np.mean(hbar)))
        return ad.mul_scalar(self.log_alpha, -float(np.mean(hbar - h)))


# curriculum -----------------------------------------------------------------

def guided_beta(config: dict, episode: int) -> float:
    g = config["guided"]
    if not g["enabled"] or g["weight"] <= 0.0 or g["window_episodes"] <= 0:
        return 0.0
    if episode >= g["window_episodes"]:
        return 0.0
    return g["weight"] * (1.0 - episode / g["window_episodes"])


def stage_plan(config: dict) -> list:
    c = config["curriculum"]
    return [(STAGE_I, c["stage1"]), (STAGE_II, c["stage2"])]


def train_curriculum(config: dict, run_dir: str, resume: str | None = None,
                     progress=None) -> dict:
    """Runs Stage I then Stage II; returns paths of the artifacts written.

    The entire run is a pure function of (config, config seed): metrics
    logs from two identical runs are byte-identical.
    """
    os.makedirs(run_dir, exist_ok=True)
    seed = config["seed"]
    chash = config_hash(config)
    setup = Setup(config)
    ss = np.random.SeedSequence(seed).spawn(4)
    init_rng, env_rng, action_rng, replay_rng = (np.random.default_rng(s) for s in ss)

    model = setup.new_policy(seed=int(init_rng.integers(2 ** 31 - 1)))
    trainer = Trainer(model, setup, config)

    episode0 = 0
    if resume is not None:
        model2, meta, extras = load_checkpoint(resume, setup.policy_config())
        model.__dict__.update(model2.__dict__)
        trainer.model = model
        trainer.optimizer = nn.Adam(model.named_parameters(), lr=config["sac"]["lr"])
        _load_trainer_extras(trainer, meta, extras)
        episode0 = int(meta.get("extra_scalars", {}).get("episode", 0))
        for rng, state in zip((env_rng, action_rng, replay_rng),
                              meta.get("rng_state", {}).get("streams", [])):
            rng.bit_generator.state = state

    def rng_states():
        return {"streams": [env_rng.bit_generator.state,
                            action_rng.bit_generator.state,
                            replay_rng.bit_generator.state]}

    def write_checkpoint(path, episode):
        extras = {"log_alpha": trainer.log_alpha.data,
                  "adam_step": np.asarray(float(trainer.optimizer.step_count)),
                  "alpha_adam_step": np.asarray(float(trainer.alpha_optimizer.step_count))}
        for name, arr in trainer.optimizer.m.items():
            extras[f"adam_m/{name}"] = arr
        for name, arr in trainer.optimizer.v.items():
            extras[f"adam_v/{name}"] = arr
        save_checkpoint(path, model, config, rng_state=rng_states(),
                        extras={**extras, "episode": episode,
                                "updates": trainer.updates_done})

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    ckpt_init = os.path.join(run_dir, "ckpt_init.npz")
    if episode0 == 0:
        write_checkpoint(ckpt_init, 0)
        mode = "w"
    else:
        mode = "a"

    plan = stage_plan(config)
    total_episodes = sum(s["episodes"] for _, s in plan)
    every = config["checkpoint_every"]
    episode = 0
    with open(metrics_path, mode) as log:
        for stage_name, stage in plan:
            for _ in range(stage["episodes"]):
                if episode < episode0:
                    episode += 1
                    continue
                record = _run_training_episode(
                    trainer, setup, config, stage_name, stage,
                    env_rng, action_rng, replay_rng, episode)
                log.write(json.dumps(record, sort_keys=True) + "\n")
                episode += 1
                if progress is not None:
                    progress(record)
                if every > 0 and episode % every == 0:
                    write_checkpoint(os.path.join(run_dir, f"ckpt_ep{episode}.npz"),
                                     episode)
    final = os.path.join(run_dir, "ckpt_final.npz")
    write_checkpoint(final, total_episodes)
    return {"metrics": metrics_path, "checkpoint": final, "init_checkpoint": ckpt_init,
            "config_hash": chash, "episodes": total_episodes}


def _load_trainer_extras(trainer: Trainer, meta: dict, extras: dict):
    if "log_alpha" in extras:
        trainer.log_alpha.data = np.asarray(extras["log_alpha"], dtype=np.float64)
        trainer.alpha_optimizer = nn.Adam({"log_alpha": trainer.log_alpha},
                                          lr=trainer.alpha_optimizer.lr)
    for name in trainer.optimizer.m:
        key_m, key_v = f"adam_m/{name}", f"adam_v/{name}"
        if key_m in extras:
            trainer.optimizer.m[name] = np.asarray(extras[key_m], dtype=np.float64)
            trainer.optimizer.v[name] = np.asarray(extras[key_v], dtype=np.float64)
    if "adam_step" in extras:
        trainer.optimizer.step_count = int(float(extras["adam_step"]))
    if "alpha_adam_step" in extras:
        trainer.alpha_optimizer.step_count = int(float(extras["alpha_adam_step"]))
    trainer.updates_done = int(meta.get("extra_scalars", {}).get("updates", 0))


def _run_training_episode(trainer: Trainer, setup: Setup, config: dict,
                          stage_name: str, stage: dict, env_rng, action_rng,
                          replay_rng, episode: int) -> dict:
    instruction = sample_instruction(env_rng, setup.table)
    scene = sample_scene(env_rng, stage["objects"], setup.train_specs,
                         setup.workspace, instruction,
                         max_overlap=stage["max_overlap"],
                         cluster=stage.get("cluster", 0.0),
                         bury_targets=stage.get("bury_targets", False))
    ep = Episode(scene, instruction, stage_name, setup.proposer, env_rng,
                 attempt_limit=stage["attempt_limit"], copy_scene=False)
    beta = guided_beta(config, episode)
    guided_on = config["guided"]["enabled"]

    obs = ep.observe()
    ep_return = 0.0
    reports = []
    aborted = False
    while not ep.done:
        if obs.n_grasps == 0 or obs.n_boxes == 0:
            aborted = True  # nothing to act on: episode fails
            ep.done = True
            break
        action, _ = trainer.model.act(obs, trainer.encoder, action_rng, greedy=False)
        reward, next_obs, done, success = ep.step(obs.grasps[action])
        # a next observation the policy cannot act on ends the episode anyway,
        # so the transition must not bootstrap from it
        usable_next = next_obs.n_grasps > 0 and next_obs.n_boxes > 0
        trainer.buffer.push(Transition(obs, action, reward, next_obs,
                                       done or not usable_next))
        ep_return += reward
        obs = next_obs
        if len(trainer.buffer) >= trainer.batch_size:
            for _ in range(trainer.updates_per_step):
                batch = trainer.buffer.sample(replay_rng, trainer.batch_size)
                reports.append(trainer.update(batch, beta))

    def mean_of(key):
        vals = [r[key] for r in reports if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    kl = mean_of("guided_kl")
    if reports and guided_on and beta <= 0.0:
        kl = 0.0  # guidance configured but outside the window: absent from the loss
    if reports and not guided_on:
        kl = 0.0
    return {
        "episode": episode,
        "stage": stage_name,
        "return": ep_return,
        "success": ep.success,
        "motions": ep.attempts,
        "aborted": aborted,
        "alpha": trainer.alpha,
        "entropy": mean_of("entropy"),
        "critic_loss": mean_of("critic_loss"),
        "actor_loss": mean_of("actor_loss"),
        "alpha_loss": mean_of("alpha_loss"),
        "guided_kl": kl,
        "beta": beta,
        "buffer": len(trainer.buffer),
        "updates": trainer.updates_done,
    }
