"""Corpus ingestion and normalization.

Raw (patient, diagnoses, drugs) records are merged per patient, entity names
are unified through alias maps, and the result is indexed with dense ids.
Ids are assigned in lexicographic order of the unified names, so the corpus
a run produces is independent of input record order.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Invalid corpus-level input (empty corpus, bad threshold, ...)."""


class RecordError(CorpusError):
    """A single malformed input record; carries file/line context."""


@dataclass
class RawTriple:
    """One raw input record: a patient with diagnosis and drug name lists."""

    patient_id: str
    diagnosis_names: list[str]
    drug_names: list[str]


class AliasMap:
    """Maps original entity names to unified names in a single pass.

    The map must be flat: a unified name may not map onward to a different
    name, so applying the map twice equals applying it once.
    """

    def __init__(self, entries: Mapping[str, str] | None = None):
        self.entries: dict[str, str] = {}
        for original, unified in (entries or {}).items():
            original = original.strip()
            unified = unified.strip()
            if not original or not unified:
                raise CorpusError("alias entries must have non-empty names")
            self.entries[original] = unified
        for unified in self.entries.values():
            onward = self.entries.get(unified, unified)
            if onward != unified:
                raise CorpusError(
                    f"alias map is not flat: {unified!r} maps onward to {onward!r}"
                )

    def unify(self, name: str) -> str:
        name = name.strip()
        return self.entries.get(name, name)

    @classmethod
    def from_csv(cls, path) -> "AliasMap":
        """Load a two-column UTF-8 CSV of original,unified rows."""
        entries = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) < 2:
                    raise RecordError(f"{path}:{lineno}: expected two columns")
                entries[row[0]] = row[1]
        return cls(entries)


class Vocabulary:
    """Bidirectional name/id maps for diseases and drugs.

    Ids are dense and assigned in lexicographic name order.
    drug_patient_counts[j] is the number of distinct patients prescribed
    drug j.
    """

    def __init__(
        self,
        disease_names: Iterable[str],
        drug_names: Iterable[str],
        drug_patient_counts: Iterable[int],
    ):
        self.diseases: tuple[str, ...] = tuple(disease_names)
        self.drugs: tuple[str, ...] = tuple(drug_names)
        self.drug_patient_counts = np.asarray(list(drug_patient_counts), dtype=np.int64)
        if len(self.drug_patient_counts) != len(self.drugs):
            raise CorpusError("drug count vector does not match drug vocabulary")
        self.disease_id: dict[str, int] = {n: i for i, n in enumerate(self.diseases)}
        self.drug_id: dict[str, int] = {n: i for i, n in enumerate(self.drugs)}

    @property
    def num_diseases(self) -> int:
        return len(self.diseases)

    @property
    def num_drugs(self) -> int:
        return len(self.drugs)

    def disease_name(self, i: int) -> str:
        return self.diseases[i]

    def drug_name(self, j: int) -> str:
        return self.drugs[j]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.diseases == other.diseases
            and self.drugs == other.drugs
            and np.array_equal(self.drug_patient_counts, other.drug_patient_counts)
        )


@dataclass(frozen=True)
class PatientRecord:
    """One patient's merged diagnosis and prescription id sets."""

    patient_id: str
    diagnoses: frozenset[int]
    prescriptions: frozenset[int]

    def sorted_diagnoses(self) -> list[int]:
        return sorted(self.diagnoses)

    def sorted_prescriptions(self) -> list[int]:
        return sorted(self.prescriptions)


class Corpus:
    """An immutable, indexed corpus: vocabulary plus per-patient records."""

    def __init__(self, vocabulary: Vocabulary, patients: Iterable[PatientRecord]):
        self.vocabulary = vocabulary
        self.patients: tuple[PatientRecord, ...] = tuple(patients)
        union: set[int] = set()
        for p in self.patients:
            union |= p.prescriptions
        self.all_drugs: frozenset[int] = frozenset(union)

    @property
    def num_patients(self) -> int:
        return len(self.patients)

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)


def ingest(
    records: Iterable[RawTriple],
    alias_map: AliasMap | None = None,
    drug_alias_map: AliasMap | None = None,
) -> Corpus:
    """Merge raw records per patient and build an indexed corpus.

    Multiple records for one patient_id are unioned. Diagnosis names go
    through alias_map and drug names through drug_alias_map before indexing.
    """
    alias_map = alias_map or AliasMap()
    drug_alias_map = drug_alias_map or AliasMap()

    diagnoses: dict[str, set[str]] = {}
    prescriptions: dict[str, set[str]] = {}
    for rec in records:
        pid = rec.patient_id.strip()
        if not pid:
            raise RecordError("record has empty patient_id")
        dnames = {alias_map.unify(n) for n in rec.diagnosis_names if n.strip()}
        mnames = {drug_alias_map.unify(n) for n in rec.drug_names if n.strip()}
        if not dnames or not mnames:
            raise RecordError(
                f"patient {pid!r}: record needs at least one diagnosis and one drug"
            )
        diagnoses.setdefault(pid, set()).update(dnames)
        prescriptions.setdefault(pid, set()).update(mnames)

    if not diagnoses:
        raise CorpusError("empty corpus")

    disease_names = sorted(set().union(*diagnoses.values()))
    drug_names = sorted(set().union(*prescriptions.values()))
    disease_id = {n: i for i, n in enumerate(disease_names)}
    drug_id = {n: j for j, n in enumerate(drug_names)}

    counts = np.zeros(len(drug_names), dtype=np.int64)
    patients = []
    for pid in sorted(diagnoses):
        dx = frozenset(disease_id[n] for n in diagnoses[pid])
        rx = frozenset(drug_id[n] for n in prescriptions[pid])
        for j in rx:
            counts[j] += 1
        patients.append(PatientRecord(pid, dx, rx))

    vocab = Vocabulary(disease_names, drug_names, counts)
    return Corpus(vocab, patients)


def screen_medications(
    corpus: Corpus,
    ubiquity_threshold: float,
    drug_alias_map: AliasMap | None = None,
) -> Corpus:
    """Remove near-ubiquitous drugs and rebuild the corpus.

    Drug names are first unified through drug_alias_map; then any drug
    prescribed to at least ubiquity_threshold of all patients is dropped
    from every prescription set and from the vocabulary. Patients left with
    no prescriptions are dropped with a warning. Dropping patients can push
    another drug's fraction over the threshold, so screening repeats until
    no drug reaches it.
    """
    if not 0.0 < ubiquity_threshold <= 1.0:
        raise CorpusError(
            f"ubiquity_threshold must be in (0, 1], got {ubiquity_threshold}"
        )
    drug_alias_map = drug_alias_map or AliasMap()

    vocab = corpus.vocabulary
    by_patient: dict[str, tuple[set[str], set[str]]] = {}
    for p in corpus.patients:
        dx = {vocab.disease_name(i) for i in p.diagnoses}
        rx = {drug_alias_map.unify(vocab.drug_name(j)) for j in p.prescriptions}
        by_patient[p.patient_id] = (dx, rx)

    while True:
        total = len(by_patient)
        if total == 0:
            raise CorpusError("screening removed every patient")
        freq: dict[str, int] = {}
        for _, rx in by_patient.values():
            for name in rx:
                freq[name] = freq.get(name, 0) + 1
        ubiquitous = {
            name for name, c in freq.items() if c / total >= ubiquity_threshold
        }
        if not ubiquitous:
            break
        log.info("screening removed %d ubiquitous drug(s): %s",
                 len(ubiquitous), ", ".join(sorted(ubiquitous)))
        dropped = []
        for pid in list(by_patient):
            dx, rx = by_patient[pid]
            rx -= ubiquitous
            if not rx:
                dropped.append(pid)
                del by_patient[pid]
        if dropped:
            log.warning(
                "screening dropped %d patient(s) with no remaining prescriptions: %s",
                len(dropped), ", ".join(sorted(dropped)),
            )

    triples = [
        RawTriple(pid, sorted(dx), sorted(rx))
        for pid, (dx, rx) in by_patient.items()
    ]
    return ingest(triples)


def rare_drugs(corpus: Corpus, min_drug_count: int = 1) -> list[tuple[str, int]]:
    """Drugs prescribed to fewer than min_drug_count patients.

    Rare drugs are retained in the corpus; this is a report, not a filter.
    """
    vocab = corpus.vocabulary
    return [
        (vocab.drug_name(j), int(c))
        for j, c in enumerate(vocab.drug_patient_counts)
        if c < min_drug_count
    ]


def remap_to_vocabulary(corpus: Corpus, vocab: Vocabulary) -> tuple[Corpus, list[str]]:
    """Re-index a corpus against a foreign vocabulary (e.g. a trained model's).

    Names unknown to the target vocabulary are dropped; patients left with an
    empty side are skipped. Returns the remapped corpus and warning strings.
    """
    warnings: list[str] = []
    patients = []
    own = corpus.vocabulary
    for p in corpus.patients:
        dx = set()
        for i in p.diagnoses:
            name = own.disease_name(i)
            if name in vocab.disease_id:
                dx.add(vocab.disease_id[name])
            else:
                warnings.append(f"{p.patient_id}: unknown diagnosis {name!r} ignored")
        rx = set()
        for j in p.prescriptions:
            name = own.drug_name(j)
            if name in vocab.drug_id:
                rx.add(vocab.drug_id[name])
            else:
                warnings.append(f"{p.patient_id}: unknown drug {name!r} ignored")
        if not dx or not rx:
            warnings.append(f"{p.patient_id}: skipped (no known diagnoses or drugs)")
            continue
        patients.append(PatientRecord(p.patient_id, frozenset(dx), frozenset(rx)))
    if not patients:
        raise CorpusError("no patient could be mapped onto the target vocabulary")
    return Corpus(vocab, patients), warnings


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_jsonl(path) -> Iterator[RawTriple]:
    """Read records from JSONL: {"patient_id", "diagnoses", "drugs"} per line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                pid = obj["patient_id"]
                dx = obj["diagnoses"]
                rx = obj["drugs"]
            except (KeyError, TypeError) as exc:
                raise RecordError(
                    f"{path}:{lineno}: record must have patient_id, diagnoses, drugs"
                ) from exc
            if not isinstance(pid, str) or not isinstance(dx, list) or not isinstance(rx, list):
                raise RecordError(f"{path}:{lineno}: malformed record fields")
            yield RawTriple(pid, [str(n) for n in dx], [str(n) for n in rx])


def read_csv(path) -> list[RawTriple]:
    """Read exploded CSV rows (patient_id,diagnosis,drug) into merged triples.

    Either the diagnosis or the drug cell of a row may be empty; the merged
    patient record must still end up with at least one of each.
    """
    diagnoses: dict[str, set[str]] = {}
    prescriptions: dict[str, set[str]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"patient_id", "diagnosis", "drug"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise RecordError(f"{path}:1: header must contain patient_id,diagnosis,drug")
        for lineno, row in enumerate(reader, start=2):
            pid = (row.get("patient_id") or "").strip()
            if not pid:
                raise RecordError(f"{path}:{lineno}: empty patient_id")
            if pid not in diagnoses:
                diagnoses[pid] = set()
                prescriptions[pid] = set()
                order.append(pid)
            dx = (row.get("diagnosis") or "").strip()
            rx = (row.get("drug") or "").strip()
            if dx:
                diagnoses[pid].add(dx)
            if rx:
                prescriptions[pid].add(rx)
    triples = []
    for pid in order:
        if not diagnoses[pid] or not prescriptions[pid]:
            raise RecordError(
                f"{path}: patient {pid!r} needs at least one diagnosis and one drug"
            )
        triples.append(RawTriple(pid, sorted(diagnoses[pid]), sorted(prescriptions[pid])))
    return triples


def write_corpus_jsonl(corpus: Corpus, path) -> None:
    """Write the normalized corpus as one JSONL record per patient."""
    vocab = corpus.vocabulary
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus.patients:
            obj = {
                "patient_id": p.patient_id,
                "diagnoses": [vocab.disease_name(i) for i in p.sorted_diagnoses()],
                "drugs": [vocab.drug_name(j) for j in p.sorted_prescriptions()],
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def write_vocabulary_json(vocab: Vocabulary, path) -> None:
    """Write the vocabulary sidecar (names in id order plus drug counts)."""
    obj = {
        "diseases": list(vocab.diseases),
        "drugs": list(vocab.drugs),
        "drug_patient_counts": [int(c) for c in vocab.drug_patient_counts],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")


def load_corpus(path) -> Corpus:
    """Load a corpus from a (normalized) JSONL file."""
    return ingest(read_jsonl(path))
