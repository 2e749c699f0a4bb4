"""Synthetic factual-recall data: ``(subject_a, subject_b, relation) -> object``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass
class FactDataset:
    subjects: np.ndarray  # [F, 2] entity tokens
    relations: np.ndarray  # [F] relation tokens
    objects: np.ndarray  # [F] entity tokens
    vocab: int
    num_relations: int
    seed: int
    eval_idx: np.ndarray  # subset of training facts

    def __len__(self):
        return len(self.objects)

    @property
    def inputs(self) -> np.ndarray:
        """Token sequences ``[F, 3]``; the model predicts the object after the relation."""
        return np.concatenate([self.subjects, self.relations[:, None]], axis=1)

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes()
                        for a in (self.subjects, self.relations, self.objects, self.eval_idx))

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def render(self, i: int) -> str:
        a, b = self.subjects[i]
        return f"e{a}_{b} r{self.relations[i]} -> e{self.objects[i]}"

    def is_unambiguous(self) -> bool:
        keys = self.subjects[:, 0].astype(np.int64) * self.vocab ** 2 \
            + self.subjects[:, 1].astype(np.int64) * self.vocab + self.relations
        return len(np.unique(keys)) == len(keys)


def gen_facts(num_facts: int, vocab: int, seed: int, num_relations: int = 16,
              eval_size: int = 0, num_subjects: int = 0) -> FactDataset:
    """Sample distinct ``(subject, relation)`` keys, each with one random object.

    Relation tokens are ``[0, num_relations)``; entity tokens fill the rest of
    the vocabulary.  A subject is a pair drawn from the first ``num_subjects``
    entities (all of them when 0), so the key space holds
    ``num_subjects**2 * num_relations`` facts.  A small subject pool makes
    every token take part in many facts, so no single token determines the
    object.  Objects range over all entities.
    """
    entities = vocab - num_relations
    if entities < 2:
        raise ValueError("vocabulary too small for the relation tokens")
    subj = num_subjects or entities
    if not 1 <= subj <= entities:
        raise ValueError(f"num_subjects must be in [1, {entities}]")
    space = subj * subj * num_relations
    if num_facts > space:
        raise ValueError(f"{num_facts} facts exceed the {space} distinct keys")
    rng = np.random.default_rng(seed)
    codes = np.sort(rng.choice(space, size=num_facts, replace=False))
    codes = rng.permutation(codes)
    rel = codes % num_relations
    pair = codes // num_relations
    subjects = np.stack([pair // subj, pair % subj], axis=1) + num_relations
    objects = rng.integers(num_relations, vocab, size=num_facts)
    if eval_size and eval_size < num_facts:
        eval_idx = np.sort(rng.choice(num_facts, size=eval_size, replace=False))
    else:
        eval_idx = np.arange(num_facts)
    return FactDataset(subjects.astype(np.int64), rel.astype(np.int64), objects.astype(np.int64),
                       vocab, num_relations, seed, eval_idx.astype(np.int64))
