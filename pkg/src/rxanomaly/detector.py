"""Anomaly ranking by accumulated central-word probability.

For every m-subset of a patient's diagnoses, all of the patient's
prescription drugs (plus a few sampled outside drugs as softmax ballast)
compete as candidate central words. Each prescription drug's probability is
added to its running score across contexts; the drug with the smallest
accumulated score is the least explainable by the diagnoses, i.e. the top
anomaly suspect.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .corpus import Corpus, PatientRecord, Vocabulary
from .model import ModelParams, project, score_candidates
from .sampler import enumerate_contexts, negative_candidates
from .seeding import rng_for

log = logging.getLogger(__name__)


class DetectorError(ValueError):
    pass


class PatientSkipped(DetectorError):
    """Per-patient failure (e.g. too few diagnoses); not fatal for a batch."""


@dataclass
class DetectorConfig:
    """context_size matches the sampler's m; num_negatives is the ballast
    count s appended to each candidate set. With use_rank_positions the
    accumulated value is the drug's rank index within the context instead of
    its raw probability (ablation)."""

    context_size: int = 2
    num_negatives: int = 5
    max_contexts: int | None = None
    rng_seed: int = 0
    use_rank_positions: bool = False

    def __post_init__(self):
        if self.context_size < 1:
            raise DetectorError("context_size must be >= 1")
        if self.num_negatives < 0:
            raise DetectorError("num_negatives must be >= 0")


@dataclass
class RankingTable:
    """Accumulated score per prescription drug for one patient.

    Smaller sum_rank = more anomalous. drug_names carries the display names
    so ordering (lexicographic tie-break) needs no vocabulary at hand.
    """

    patient_id: str
    sum_rank: dict[int, float]
    contexts_used: int
    drug_names: dict[int, str] = field(default_factory=dict)
    method: str = "cbow-ra"

    def ordered(self) -> list[tuple[int, float]]:
        """(drug id, score) pairs ascending by score, name-tie-broken."""
        return sorted(
            self.sum_rank.items(),
            key=lambda kv: (kv[1], self.drug_names.get(kv[0], str(kv[0]))),
        )


@dataclass
class SkipRecord:
    patient_id: str
    reason: str


@dataclass
class DetectionResult:
    tables: list[RankingTable]
    skips: list[SkipRecord]


def _draw_ballast(
    vocab: Vocabulary,
    excluded: frozenset[int],
    s: int,
    rng: np.random.Generator,
) -> list[int]:
    """Distinct ballast drugs from outside the patient's prescriptions.

    Frequency-weighted like the training noise distribution. If fewer than s
    candidates exist, all of them are used.
    """
    if s == 0:
        return []
    try:
        candidates, probs = negative_candidates(vocab, excluded, 1.0)
    except Exception:
        log.warning("no ballast candidates outside the prescription set")
        return []
    take = min(s, candidates.size)
    picked = rng.choice(candidates, size=take, replace=False, p=probs)
    return [int(j) for j in picked]


def rank_patient(
    patient: PatientRecord,
    params: ModelParams,
    vocab: Vocabulary,
    cfg: DetectorConfig,
) -> RankingTable:
    """Accumulate per-context candidate probabilities for one patient."""
    if len(patient.prescriptions) < 1:
        raise PatientSkipped(f"{patient.patient_id}: no prescriptions")
    if len(patient.diagnoses) < cfg.context_size:
        raise PatientSkipped(
            f"{patient.patient_id}: {len(patient.diagnoses)} diagnoses, "
            f"need at least {cfg.context_size}"
        )
    rng = rng_for(cfg.rng_seed, "detect", patient.patient_id)
    contexts = enumerate_contexts(patient, cfg.context_size, cfg.max_contexts, rng)
    prescriptions = patient.sorted_prescriptions()
    ballast = _draw_ballast(vocab, patient.prescriptions, cfg.num_negatives, rng)
    candidates = prescriptions + ballast

    sums = {j: 0.0 for j in prescriptions}
    for ctx in contexts:
        h = project(ctx, params)
        probs = score_candidates(h, candidates, params)
        if cfg.use_rank_positions:
            order = sorted(probs, key=lambda j: (probs[j], vocab.drug_name(j)))
            position = {j: i for i, j in enumerate(order)}
            for j in prescriptions:
                sums[j] += position[j]
        else:
            for j in prescriptions:
                sums[j] += probs[j]

    names = {j: vocab.drug_name(j) for j in prescriptions}
    return RankingTable(patient.patient_id, sums, len(contexts), names)


def rank_corpus(
    corpus: Corpus, params: ModelParams, cfg: DetectorConfig
) -> DetectionResult:
    """Rank every patient; per-patient failures become skip records."""
    vocab = corpus.vocabulary
    if params.disease_embeddings.shape[0] != vocab.num_diseases:
        raise DetectorError("model and corpus disagree on the disease vocabulary")
    if params.drug_embeddings.shape[0] != vocab.num_drugs:
        raise DetectorError("model and corpus disagree on the drug vocabulary")
    tables, skips = [], []
    for patient in corpus.patients:
        try:
            tables.append(rank_patient(patient, params, vocab, cfg))
        except PatientSkipped as exc:
            log.warning("skipped: %s", exc)
            skips.append(SkipRecord(patient.patient_id, str(exc)))
    return DetectionResult(tables, skips)


def top_suspects(table: RankingTable, n: int) -> list[tuple[int, float]]:
    """The n smallest-score drugs, ascending. Asking for more drugs than the
    patient has returns them all (flagged in the log)."""
    if n < 1:
        raise DetectorError("n must be >= 1")
    ordered = table.ordered()
    if n > len(ordered):
        log.warning(
            "%s: asked for top %d of %d drugs; returning all",
            table.patient_id, n, len(ordered),
        )
        return ordered
    return ordered[:n]


# ---------------------------------------------------------------------------
# Report files (JSONL, one table per line)
# ---------------------------------------------------------------------------

def write_report(tables: Iterable[RankingTable], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tables:
            obj = {
                "patient_id": t.patient_id,
                "method": t.method,
                "contexts_used": t.contexts_used,
                "ranking": [
                    {"drug": t.drug_names.get(j, str(j)), "sum_rank": score}
                    for j, score in t.ordered()
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def read_report(path) -> list[dict]:
    """Parse a report file back into dicts (ranking stays in file order)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DetectorError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("patient_id", "ranking"):
                if key not in obj:
                    raise DetectorError(f"{path}:{lineno}: missing {key!r}")
            out.append(obj)
    return out
