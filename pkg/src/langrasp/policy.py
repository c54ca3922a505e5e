"""Vision-language-action joint model.

Grasp features query box features through cross attention; shared per-row
heads emit one logit and twin q-values per grasp, so the action count can
vary freely between observations.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import config_hash
from .encoder import AlignedEncoder, fuse_visual_language, fuse_visual_position
from .grasps import grasp_feature_encode
from .world import Observation

FUSION_MODES = ("cross_attention", "position_as_key", "film")


class NoBoxesError(RuntimeError):
    """Observation carries no detected boxes; the policy cannot act."""


class NoGraspsError(RuntimeError):
    """Observation carries no grasp proposals; the episode has no action."""


@dataclass
class PolicyConfig:
    width: int = 512
    heads: int = 8
    layers: int = 1
    ff_mult: int = 4
    attention_scale: bool = True
    posenc_bands: int = 6
    head_hidden: int = 256
    fusion_mode: str = "cross_attention"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")


class FusionPolicy:
    """Trunk (encoders-to-state) plus policy and twin critic heads."""

    def __init__(self, cfg: PolicyConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, L = cfg.width, cfg.posenc_bands
        self.grasp_mlp = nn.MLP([6 * L + 3, d, d], rng)
        self.pos_mlp = nn.MLP([6 * L, d, d], rng)
        self.attention = nn.CrossAttention(d, cfg.heads, cfg.layers, cfg.ff_mult,
                                           rng, scale=cfg.attention_scale)
        self.film_hidden = nn.Linear(d, d, rng)
        self.film_scale = nn.Linear(d, d, rng)
        self.film_shift = nn.Linear(d, d, rng)
        self.policy_head = nn.MLP([d, cfg.head_hidden, 1], rng)
        self.q1 = nn.MLP([d, cfg.head_hidden, 1], rng)
        self.q2 = nn.MLP([d, cfg.head_hidden, 1], rng)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)

    # parameters ---------------------------------------------------------

    def trunk_parameters(self) -> dict:
        out = {}
        out.update(self.grasp_mlp.named_parameters("grasp_mlp."))
        out.update(self.pos_mlp.named_parameters("pos_mlp."))
        out.update(self.attention.named_parameters("attention."))
        out.update(self.film_hidden.named_parameters("film_hidden."))
        out.update(self.film_scale.named_parameters("film_scale."))
        out.update(self.film_shift.named_parameters("film_shift."))
        return out

    def named_parameters(self) -> dict:
        out = self.trunk_parameters()
        out.update(self.policy_head.named_parameters("policy_head."))
        out.update(self.q1.named_parameters("q1."))
        out.update(self.q2.named_parameters("q2."))
        return out

    def target_parameters(self) -> dict:
        out = {}
        out.update(self.q1_target.named_parameters("q1_target."))
        out.update(self.q2_target.named_parameters("q2_target."))
        return out

    def sync_targets(self, tau: float | None = None):
        """tau=None copies; otherwise Polyak: target <- (1-tau)*target + tau*online."""
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            src = online.named_parameters()
            dst = target.named_parameters()
            for name, p in src.items():
                if tau is None:
                    dst[name].data = p.data.copy()
                else:
                    dst[name].data = (1.0 - tau) * dst[name].data + tau * p.data
    # state construction ---------------------------------------------------

    def build_state(self, obs: Observation, encoder: AlignedEncoder,
                    collect_weights=None) -> Tensor:
        if obs.n_boxes == 0:
            raise NoBoxesError("observation has no boxes")
        if obs.n_grasps == 0:
            raise NoGraspsError("observation has no grasp proposals")
        mode = self.cfg.fusion_mode
        bands = self.cfg.posenc_bands
        box_feats = encoder.encode_observation(obs)
        lang = encoder.encode_text(obs.instruction, fallback=True)
        centers = np.array([b.center_3d for b in obs.boxes], dtype=np.float64)
        queries = grasp_feature_encode(obs.grasps, self.grasp_mlp.layers, bands)

        if mode == "position_as_key":
            keys = nn.mlp_forward(self.pos_mlp.layers,
                                  Tensor(nn.positional_encoding(centers, bands)))
        else:
            keys = fuse_visual_position(box_feats, centers, self.pos_mlp.layers, bands)
        if mode == "film":
            values = Tensor(box_feats)
        else:
            values = Tensor(fuse_visual_language(box_feats, lang))

        state = self.attention.forward(queries, keys, values,
                                       collect_weights=collect_weights)
        if mode == "film":
            h = ad.relu(self.film_hidden(Tensor(lang.reshape(1, -1))))
            scale = ad.add(self.film_scale(h), Tensor(np.ones((1, self.cfg.width))))
            shift = self.film_shift(h)
            state = ad.add(ad.mul(state, scale), shift)
        return state

    # heads -----------------------------------------------------------------

    def policy_forward(self, state: Tensor):
        """Per-row shared MLP -> K logits -> distribution over grasps."""
        logits = ad.transpose(nn.mlp_forward(self.policy_head.layers, state))
        return ad.softmax_rows(logits), ad.log_softmax_rows(logits)

    def critic_forward(self, state: Tensor, target: bool = False):
        a = self.q1_target if target else self.q1
        b = self.q2_target if target else self.q2
        qa = ad.transpose(nn.mlp_forward(a.layers, state))
        qb = ad.transpose(nn.mlp_forward(b.layers, state))
        return qa, qb

    def act(self, obs: Observation, encoder: AlignedEncoder,
            rng: np.random.Generator | None = None, greedy: bool = True):
        """Pick an action without building a gradient tape."""
        with ad.no_grad():
            weights = []
            state = self.build_state(obs, encoder, collect_weights=weights)
            pi, _ = self.policy_forward(state)
            q1, q2 = self.critic_forward(state)
        p = pi.data[0]
        action = select_action(p, "greedy" if greedy else "sample", rng)
        info = {
            "pi": p.copy(),
            "q_min": np.minimum(q1.data[0], q2.data[0]),
            "box_attention": box_attention_profile(weights),
        }
        return action, info


def box_attention_profile(weights) -> np.ndarray:
    """Max attention weight per box over heads and queries (trace overlay)."""
    if not weights:
        return np.zeros(0)
    return np.max(np.stack([w.max(axis=0) for w in weights]), axis=0)


def select_action(pi: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> int:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.size == 0:
        raise ValueError("empty action distribution")
    if mode == "greedy":
        return int(np.argmax(pi))  # argmax takes the lowest index on ties
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling requires an rng")
        return int(rng.choice(pi.size, p=pi / pi.sum()))
    raise ValueError(f"unknown selection mode {mode!r}")


def kl_guided_loss(pi, prior, direction: str = "forward", log_pi=None):
    """KL between the policy and the grounding prior.

    forward: KL(pi || prior) — differentiable through pi;
    reverse: KL(prior || pi). The prior must be strictly positive
    (floored upstream). Returns a scalar Tensor.
    """
    if isinstance(pi, np.ndarray) or isinstance(pi, (list, tuple)):
        pi = Tensor(np.asarray(pi, dtype=np.float64).reshape(1, -1))
    prior = np.asarray(prior, dtype=np.float64).reshape(-1)
    if pi.data.shape[1] != prior.shape[0]:
        raise ValueError("distribution length mismatch")
    if np.any(prior <= 0.0):
        raise ValueError("prior must be strictly positive (apply the floor first)")
    log_prior = Tensor(np.log(prior).reshape(1, -1))
    if log_pi is None:
        log_pi = ad.log(pi)
    if direction == "forward":
        return ad.tsum(ad.mul(pi, ad.add(log_pi, ad.mul_scalar(log_prior, -1.0))))
    if direction == "reverse":
        prior_t = Tensor(prior.reshape(1, -1))
        return ad.tsum(ad.mul(prior_t, ad.add(log_prior, ad.mul_scalar(log_pi, -1.0))))
    raise ValueError(f"unknown KL direction {direction!r}")


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path: str, model: FusionPolicy, config_doc: dict,
                    rng_state: dict | None = None, extras: dict | None = None):
    """Versioned binary record: every parameter tensor + config hash + rng state."""
    arrays = {}
    for name, p in {**model.named_parameters(), **model.target_parameters()}.items():
        arrays[f"param/{name}"] = p.data
    meta = {
        "version": 1,
        "config": config_doc,
        "config_hash": config_hash(config_doc),
        "rng_state": rng_state,
        "extra_keys": [],
    }
    if extras:
        for key, value in extras.items():
            if isinstance(value, np.ndarray):
                arrays[f"extra/{key}"] = value
                meta["extra_keys"].append(key)
            else:
                meta.setdefault("extra_scalars", {})[key] = value
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                   dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)


def load_checkpoint(path: str, policy_config: PolicyConfig | None = None):
    """Returns (model, meta dict, extra arrays dict)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        if policy_config is None:
            policy_config = PolicyConfig(**meta["config"]["policy"])
        model = FusionPolicy(policy_config, seed=0)
        params = {**model.named_parameters(), **model.target_parameters()}
        for name, p in params.items():
            stored = data[f"param/{name}"]
            if stored.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = stored.astype(np.float64)
        extras = {k: data[f"extra/{k}"] for k in meta.get("extra_keys", [])}
    return model, meta, extras
