"""Synthetic stand-in for a frozen image-text encoder pair.

Text and box-crop features live in one shared space built from a seeded
near-orthonormal concept basis; controllable alignment noise emulates
visual grounding error. All outputs are unit-norm; everything is frozen.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .library import KeywordTable
from .world import Instruction, Observation

DEFAULT_TEMPERATURE = 0.07
DEFAULT_TEXT_JITTER = 0.05
DEFAULT_GENERAL_MIX = 0.85


class VocabularyError(KeyError):
    """Instruction keyword not covered by the concept vocabulary."""


def _seed_from(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class ConceptBasis:
    """One unit vector per vocabulary concept.

    Base directions are orthonormal whenever the width allows it; a label's
    composed vector mixes in its general labels so that related concepts
    stay close (cos >= 0.5) while unrelated ones stay near-orthogonal.
    """

    def __init__(self, concepts, related: dict, width: int, seed: int,
                 general_mix: float = DEFAULT_GENERAL_MIX):
        self.concepts = list(concepts)
        self.related = {k: tuple(v) for k, v in related.items()}
        self.width = width
        self.seed = seed
        self.general_mix = general_mix
        n = len(self.concepts)
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(width, max(n, 1)))
        if width >= n:
            q, _ = np.linalg.qr(raw)
            base = q[:, :n].T
        else:
            base = np.array([_unit(raw[:, i]) for i in range(n)])
        self._base = {c: base[i] for i, c in enumerate(self.concepts)}
        self._vec = {}
        for c in self.concepts:
            generals = self.related.get(c, ())
            v = self._base[c].copy()
            for g in generals:
                v = v + general_mix * self._base[g]
            self._vec[c] = _unit(v)

    def vector(self, concept: str) -> np.ndarray:
        try:
            return self._vec[concept]
        except KeyError:
            raise VocabularyError(concept) from None

    def __contains__(self, concept: str) -> bool:
        return concept in self._vec

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "width": self.width,
            "seed": self.seed,
            "general_mix": self.general_mix,
            "related": {k: list(v) for k, v in self.related.items()},
            "vectors": {c: self._vec[c].tolist() for c in self.concepts},
        }


def basis_from_vocabulary(table: KeywordTable, specs, width: int,
                          seed: int, general_mix: float = DEFAULT_GENERAL_MIX
                          ) -> ConceptBasis:
    related: dict = {}
    for s in specs:
        prev = related.setdefault(s.label, tuple(s.general_labels))
        if tuple(s.general_labels) != prev:
            raise ValueError(f"inconsistent general labels for {s.label!r}")
    return ConceptBasis(table.all_keywords(), related, width, seed, general_mix)


class AlignedEncoder:
    """Frozen encoder mapping instructions and crop descriptors to one space."""

    def __init__(self, basis: ConceptBasis, sigma_align: float = 0.0,
                 temperature: float = DEFAULT_TEMPERATURE,
                 text_jitter: float = DEFAULT_TEXT_JITTER):
        self.basis = basis
        self.sigma_align = sigma_align
        self.temperature = temperature
        self.text_jitter = text_jitter

    @property
    def width(self) -> int:
        return self.basis.width

    def encode_text(self, instruction: Instruction, fallback: bool = False
                    ) -> np.ndarray:
        keyword = instruction.keyword
        if keyword not in self.basis:
            if not fallback:
                raise VocabularyError(keyword)
            keyword = self._nearest_keyword(instruction)
        v = self.basis.vector(keyword)
        rng = np.random.default_rng(_seed_from("template", instruction.template_text))
        jitter = _unit(rng.normal(size=self.width))
        return _unit(v + self.text_jitter * jitter)

    def _nearest_keyword(self, instruction: Instruction) -> str:
        text = instruction.text.lower()
        hits = [c for c in self.basis.concepts if c in text]
        if not hits:
            raise VocabularyError(instruction.keyword)
        return max(hits, key=len)

    def encode_box(self, descriptor: dict, rng: np.random.Generator) -> np.ndarray:
        v = np.zeros(self.width)
        for concept, w in descriptor.items():
            v += w * self.basis.vector(concept)
        if self.sigma_align > 0.0:
            v = _unit(v) + rng.normal(scale=self.sigma_align, size=self.width)
        return _unit(v)

    def encode_observation(self, obs: Observation) -> np.ndarray:
        """Box features for one observation; noise is a deterministic function
        of (episode noise seed, crop descriptor)."""
        feats = np.zeros((obs.n_boxes, self.width))
        for i, box in enumerate(obs.boxes):
            rng = np.random.default_rng(
                _seed_from("box-noise", obs.noise_seed, _descriptor_key(box.descriptor)))
            feats[i] = self.encode_box(box.descriptor, rng)
        return feats

    def ground(self, box_feats: np.ndarray, lang: np.ndarray) -> np.ndarray:
        return ground_probabilities(box_feats, lang, self.temperature)


def _descriptor_key(descriptor: dict) -> str:
    return "|".join(f"{c}:{w:.12e}" for c, w in sorted(descriptor.items()))


def fuse_visual_language(box_feats: np.ndarray, lang: np.ndarray) -> np.ndarray:
    """Values of the cross attention: row i = box_feat_i * lang, elementwise."""
    if box_feats.shape[1] != lang.shape[0]:
        raise ValueError("feature width mismatch")
    return box_feats * lang[None, :]


def fuse_visual_position(box_feats, centers, pos_mlp_layers, bands: int = 6) -> Tensor:
    """Keys of the cross attention: box feature + MLP(positional encoding)."""
    enc = nn.positional_encoding(np.asarray(centers, dtype=np.float64), bands)
    lifted = nn.mlp_forward(pos_mlp_layers, Tensor(enc))
    return ad.add(Tensor(box_feats), lifted)


def ground_probabilities(box_feats: np.ndarray, lang: np.ndarray,
                         temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Softmax over cosine similarities between box features and the text."""
    if box_feats.shape[0] == 0:
        raise ValueError("grounding requires at least one box")
    norms = np.linalg.norm(box_feats, axis=1) * np.linalg.norm(lang)
    cos = box_feats @ lang / np.maximum(norms, 1e-12)
    return nn.softmax(cos / temperature)
