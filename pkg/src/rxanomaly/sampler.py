"""Training-sample construction with constrained negative sampling.

Each sample pairs an m-subset of one patient's diagnoses (the context) with
one prescribed drug (the target). Negatives are drawn from the drugs the
patient was NOT prescribed, weighted by how many patients take each drug,
so a sample's negatives can never collide with the patient's own
prescriptions.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .corpus import Corpus, PatientRecord, Vocabulary
from .seeding import rng_for

log = logging.getLogger(__name__)


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    """Knobs for sample construction.

    context_size m and num_negatives r default to the reference settings
    (2 surrounding words, 5 negatives). frequency_exponent shapes the noise
    distribution: 1.0 samples proportionally to raw patient counts, 0.75 is
    the common word-embedding convention, 0 is uniform.
    """

    context_size: int = 2
    num_negatives: int = 5
    max_contexts_per_patient: int | None = None
    frequency_exponent: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.context_size < 1:
            raise SamplerError("context_size must be >= 1")
        if self.num_negatives < 1:
            raise SamplerError("num_negatives must be >= 1")
        if self.frequency_exponent < 0:
            raise SamplerError("frequency_exponent must be >= 0")
        if self.max_contexts_per_patient is not None and self.max_contexts_per_patient < 1:
            raise SamplerError("max_contexts_per_patient must be >= 1 or None")


@dataclass(frozen=True)
class TrainingSample:
    """(context diseases, target drug, negative drugs)."""

    context: tuple[int, ...]
    target: int
    negatives: tuple[int, ...]


def enumerate_contexts(
    patient: PatientRecord,
    m: int,
    max_contexts: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, ...]]:
    """All C(k, m) diagnosis m-subsets in lexicographic id order.

    Patients with fewer than m diagnoses yield no contexts (logged). With
    max_contexts set, a uniform subsample of that size is taken with the
    supplied generator; order stays lexicographic. The full list is
    materialized first, which is fine for the tens of diagnoses seen in
    practice.
    """
    ids = patient.sorted_diagnoses()
    if len(ids) < m:
        log.warning(
            "patient %s has %d diagnoses, fewer than context size %d; skipped",
            patient.patient_id, len(ids), m,
        )
        return []
    combos = list(itertools.combinations(ids, m))
    if max_contexts is not None and len(combos) > max_contexts:
        if rng is None:
            raise SamplerError("max_contexts subsampling needs a generator")
        keep = np.sort(rng.choice(len(combos), size=max_contexts, replace=False))
        combos = [combos[i] for i in keep]
    return combos


def negative_candidates(
    vocab: Vocabulary, excluded: frozenset[int] | set[int], exponent: float
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate drug ids outside `excluded` and their noise probabilities."""
    mask = np.ones(vocab.num_drugs, dtype=bool)
    mask[list(excluded)] = False
    candidates = np.flatnonzero(mask)
    if candidates.size == 0:
        raise SamplerError("no negative candidates: excluded set covers all drugs")
    weights = vocab.drug_patient_counts[candidates].astype(np.float64) ** exponent
    return candidates, weights / weights.sum()


def draw_negatives(
    excluded: frozenset[int] | set[int],
    vocab: Vocabulary,
    r: int,
    exponent: float,
    rng: np.random.Generator,
) -> list[int]:
    """Draw r negatives (with replacement) from outside the excluded set."""
    candidates, probs = negative_candidates(vocab, excluded, exponent)
    return [int(j) for j in rng.choice(candidates, size=r, replace=True, p=probs)]


def _patient_arrays(
    patient: PatientRecord, vocab: Vocabulary, cfg: SamplerConfig, seed_label: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """Context/target/negative index arrays for one patient, or None if skipped.

    One generator per (seed, patient) drives both context subsampling and
    negative draws, so patients can be processed in any order or in parallel
    and the merged stream is unchanged.
    """
    rng = rng_for(cfg.rng_seed, seed_label, patient.patient_id)
    contexts = enumerate_contexts(
        patient, cfg.context_size, cfg.max_contexts_per_patient, rng
    )
    if not contexts:
        return None
    targets = patient.sorted_prescriptions()
    n_samples = len(contexts) * len(targets)
    ctx = np.repeat(np.asarray(contexts, dtype=np.int64), len(targets), axis=0)
    tgt = np.tile(np.asarray(targets, dtype=np.int64), len(contexts))
    candidates, probs = negative_candidates(
        vocab, patient.prescriptions, cfg.frequency_exponent
    )
    neg = rng.choice(
        candidates, size=(n_samples, cfg.num_negatives), replace=True, p=probs
    ).astype(np.int64)
    return ctx, tgt, neg


def sample_arrays(
    corpus: Corpus, cfg: SamplerConfig, seed_label: str = "sampler"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The full training stream as index arrays (contexts, targets, negatives).

    Patients appear in corpus order; within one patient the order is the
    cross product contexts x prescriptions, contexts major.
    """
    ctxs, tgts, negs = [], [], []
    for patient in corpus.patients:
        arrays = _patient_arrays(patient, corpus.vocabulary, cfg, seed_label)
        if arrays is None:
            continue
        ctxs.append(arrays[0])
        tgts.append(arrays[1])
        negs.append(arrays[2])
    m, r = cfg.context_size, cfg.num_negatives
    if not ctxs:
        return (
            np.empty((0, m), dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty((0, r), dtype=np.int64),
        )
    return np.concatenate(ctxs), np.concatenate(tgts), np.concatenate(negs)


def build_training_set(corpus: Corpus, cfg: SamplerConfig) -> Iterator[TrainingSample]:
    """Stream TrainingSamples for the whole corpus, deterministic per seed."""
    ctx, tgt, neg = sample_arrays(corpus, cfg)
    for i in range(tgt.shape[0]):
        yield TrainingSample(
            tuple(int(x) for x in ctx[i]),
            int(tgt[i]),
            tuple(int(x) for x in neg[i]),
        )
