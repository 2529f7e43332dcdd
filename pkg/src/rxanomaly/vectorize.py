"""Count vectorizations of a corpus.

Two views over the disease dimension: per-patient multi-hot diagnosis
vectors, and per-drug co-occurrence vectors counting how many distinct
patients share each disease with the drug.
"""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, PatientRecord, Vocabulary


def diagnosis_vector(patient: PatientRecord, vocab: Vocabulary) -> np.ndarray:
    """Multi-hot vector over diseases; entry d is 1 iff the patient has d.

    Kept as an integer count vector so unmerged multi-admission data would
    still produce valid (>1) counts.
    """
    v = np.zeros(vocab.num_diseases, dtype=np.int64)
    v[list(patient.diagnoses)] = 1
    return v


def diagnosis_matrix(corpus: Corpus) -> np.ndarray:
    """Stacked diagnosis vectors, one row per patient in corpus order."""
    mat = np.zeros((corpus.num_patients, corpus.vocabulary.num_diseases), dtype=np.int64)
    for row, p in enumerate(corpus.patients):
        mat[row, list(p.diagnoses)] = 1
    return mat


def prescription_matrix(corpus: Corpus) -> np.ndarray:
    """Multi-hot prescription vectors, one row per patient in corpus order."""
    mat = np.zeros((corpus.num_patients, corpus.vocabulary.num_drugs), dtype=np.int64)
    for row, p in enumerate(corpus.patients):
        mat[row, list(p.prescriptions)] = 1
    return mat


def drug_cooccurrence_matrix(corpus: Corpus) -> np.ndarray:
    """Drugs-by-diseases count matrix.

    Entry (m, d) is the number of distinct patients that have disease d and
    drug m in their prescriptions.
    """
    dx = diagnosis_matrix(corpus)
    rx = prescription_matrix(corpus)
    return rx.T @ dx


def drug_vectors(corpus: Corpus) -> dict[int, np.ndarray]:
    """Per-drug disease co-occurrence vectors keyed by drug id."""
    mat = drug_cooccurrence_matrix(corpus)
    return {j: mat[j] for j in range(mat.shape[0])}


def dump_tsv(matrix: np.ndarray, row_names, col_names, path) -> None:
    """Write a labeled count matrix as TSV for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["name", *col_names]) + "\n")
        for name, row in zip(row_names, matrix):
            fh.write("\t".join([name, *(str(int(x)) for x in row)]) + "\n")
