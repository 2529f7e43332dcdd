"""Context-to-drug embedding model.

A bag-of-diagnoses context is projected to the mean of its disease
embeddings; drugs are scored by the dot product of their output vectors
with that projection. Training maximizes the sigmoid objective over one
target drug and r sampled negatives per sample (the full softmax is never
materialized); scoring softmaxes logits over an explicit candidate set.

Model files are a versioned binary container carrying both vocabularies,
all hyperparameters, and both embedding matrices, with a trailing checksum.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .corpus import Corpus, Vocabulary
from .sampler import SamplerConfig, TrainingSample, sample_arrays
from .seeding import derive_seed
from .vectorize import drug_vectors as _drug_vectors

log = logging.getLogger(__name__)

MAGIC = b"CBRA"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingError(ModelError):
    """Training diverged (non-finite loss)."""


class ModelFormatError(ModelError):
    """Not a model container, or structurally broken."""


class ModelVersionError(ModelFormatError):
    """Container version not supported by this code."""


class ModelChecksumError(ModelFormatError):
    """Checksum mismatch: file is corrupt or truncated."""


@dataclass
class Hyperparams:
    embedding_dim: int = 64
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    epochs: int = 5
    init_mode: str = "random"  # "random" or "cooccurrence"
    rng_seed: int = 0
    freeze_drug_vectors: bool = False  # ablation: leave output vectors at init

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ModelError("embedding_dim must be >= 1")
        if self.learning_rate <= 0 or self.min_learning_rate <= 0:
            raise ModelError("learning rates must be positive")
        if self.epochs < 0:
            raise ModelError("epochs must be >= 0")
        if self.init_mode not in ("random", "cooccurrence"):
            raise ModelError(f"unknown init_mode {self.init_mode!r}")

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "learning_rate": self.learning_rate,
            "min_learning_rate": self.min_learning_rate,
            "epochs": self.epochs,
            "init_mode": self.init_mode,
            "rng_seed": self.rng_seed,
            "freeze_drug_vectors": self.freeze_drug_vectors,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Hyperparams":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class ModelParams:
    """disease_embeddings: context vectors, drug_embeddings: output vectors."""

    disease_embeddings: np.ndarray  # (num_diseases, d) float64
    drug_embeddings: np.ndarray     # (num_drugs, d) float64

    @property
    def dim(self) -> int:
        return self.disease_embeddings.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.disease_embeddings.copy(), self.drug_embeddings.copy()
        )


def init_params(
    vocab: Vocabulary,
    hp: Hyperparams,
    drug_counts: Mapping[int, np.ndarray] | None = None,
) -> ModelParams:
    """Initialize embeddings.

    random: disease rows uniform in [-0.5/d, 0.5/d], drug rows zero.
    cooccurrence: drug rows are the L2-normalized disease co-occurrence
    vectors (requires embedding_dim == number of diseases); disease rows as
    in random mode. All-zero co-occurrence rows stay zero.
    """
    d = hp.embedding_dim
    rng = np.random.default_rng(derive_seed(hp.rng_seed, "init"))
    U = (rng.random((vocab.num_diseases, d)) - 0.5) / d
    if hp.init_mode == "random":
        V = np.zeros((vocab.num_drugs, d), dtype=np.float64)
    else:
        if drug_counts is None:
            raise ModelError("cooccurrence init needs drug co-occurrence vectors")
        if d != vocab.num_diseases:
            raise ModelError(
                f"cooccurrence init requires embedding_dim == num_diseases "
                f"({d} != {vocab.num_diseases})"
            )
        V = np.zeros((vocab.num_drugs, d), dtype=np.float64)
        for j in range(vocab.num_drugs):
            vec = np.asarray(drug_counts[j], dtype=np.float64)
            norm = np.linalg.norm(vec)
            if norm > 0:
                V[j] = vec / norm
    return ModelParams(U, V)


def project(context, params: ModelParams) -> np.ndarray:
    """Mean of the context words' disease embeddings.

    The mean (rather than the sum) keeps score scales independent of the
    context size.
    """
    ctx = list(context)
    if not ctx:
        raise ModelError("context must be non-empty")
    return params.disease_embeddings[ctx].mean(axis=0)


def score_candidates(
    h: np.ndarray, candidates, params: ModelParams
) -> dict[int, float]:
    """Softmax of drug logits restricted to the candidate set.

    Drugs outside the candidate set do not influence the probabilities.
    The max logit is subtracted before exponentiation for stability.
    """
    cand = sorted(candidates)
    if not cand:
        raise ModelError("candidate set must be non-empty")
    logits = params.drug_embeddings[cand] @ h
    z = np.exp(logits - logits.max())
    probs = z / z.sum()
    return {int(c): float(p) for c, p in zip(cand, probs)}


def sample_loss(
    params: ModelParams, context, target: int, negatives
) -> float:
    """Negated sigmoid objective for one sample (lower is better)."""
    h = project(context, params)
    V = params.drug_embeddings
    s_t = float(V[target] @ h)
    s_n = V[list(negatives)] @ h
    return float(np.logaddexp(0.0, -s_t) + np.logaddexp(0.0, s_n).sum())


def sample_gradients(
    params: ModelParams, context, target: int, negatives
) -> tuple[float, dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Loss and analytic gradients for one sample.

    Returns (loss, disease-row gradients, drug-row gradients), with
    gradients accumulated per row id (duplicate negatives add up).
    """
    ctx = list(context)
    h = project(ctx, params)
    V = params.drug_embeddings
    rows = [int(target), *(int(x) for x in negatives)]
    s = V[rows] @ h
    e = expit(s)
    e[0] -= 1.0
    loss = float(np.logaddexp(0.0, -s[0]) + np.logaddexp(0.0, s[1:]).sum())
    grad_h = e @ V[rows]
    grad_u = {int(w): grad_h / len(ctx) for w in ctx}
    grad_v: dict[int, np.ndarray] = {}
    for coeff, row in zip(e, rows):
        if row in grad_v:
            grad_v[row] = grad_v[row] + coeff * h
        else:
            grad_v[row] = coeff * h
    return loss, grad_u, grad_v


def _apply_step(U, V, ctx, rows, lr, update_drugs) -> float:
    """One SGD step; `rows` is [target, *negatives]. Returns the loss.

    Gradients are computed against the pre-update output vectors, then both
    matrices are updated (context subsets never repeat a row; duplicate
    negative rows accumulate).
    """
    h = U[ctx].mean(axis=0)
    Vr = V[rows]
    s = Vr @ h
    e = expit(s)
    e[0] -= 1.0
    loss = float(np.logaddexp(0.0, -s[0]) + np.logaddexp(0.0, s[1:]).sum())
    grad_h = e @ Vr
    if update_drugs:
        update = (-lr * e)[:, None] * h[None, :]
        if len(set(rows.tolist())) == rows.size:
            V[rows] += update
        else:
            np.add.at(V, rows, update)
    U[ctx] += (-lr / len(ctx)) * grad_h
    return loss


def train_step(sample: TrainingSample, params: ModelParams, lr: float) -> float:
    """Apply one sample's SGD update in place and return its loss."""
    ctx = np.asarray(sample.context, dtype=np.int64)
    rows = np.empty(1 + len(sample.negatives), dtype=np.int64)
    rows[0] = sample.target
    rows[1:] = sample.negatives
    loss = _apply_step(
        params.disease_embeddings, params.drug_embeddings, ctx, rows, lr, True
    )
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite loss at lr={lr}; lower the learning rate"
        )
    return loss


def linear_lr(lr0: float, lr_min: float, step: int, total_steps: int) -> float:
    """Learning rate decayed linearly from lr0 to lr_min across training."""
    if total_steps <= 1:
        return lr0
    frac = step / (total_steps - 1)
    return lr0 + (lr_min - lr0) * frac


def train(
    corpus: Corpus,
    scfg: SamplerConfig,
    hp: Hyperparams,
    progress: Callable[[int, float], None] | None = None,
) -> ModelParams:
    """Train on the full sample stream for hp.epochs epochs.

    Contexts and targets repeat each epoch; negatives are re-drawn with a
    per-epoch derived seed. The learning rate decays linearly over all
    steps. progress (if given) receives (epoch index, mean epoch loss).
    """
    drug_counts = _drug_vectors(corpus) if hp.init_mode == "cooccurrence" else None
    params = init_params(corpus.vocabulary, hp, drug_counts)
    if hp.epochs == 0:
        return params

    epoch_cfgs = [
        replace(scfg, rng_seed=derive_seed(scfg.rng_seed, "epoch", e))
        for e in range(hp.epochs)
    ]
    ctx0, tgt0, neg0 = sample_arrays(corpus, epoch_cfgs[0])
    n_samples = tgt0.shape[0]
    if n_samples == 0:
        raise ModelError("no trainable samples (every patient was skipped)")
    total_steps = hp.epochs * n_samples

    U = params.disease_embeddings
    V = params.drug_embeddings
    update_drugs = not hp.freeze_drug_vectors
    lr0, lr_min = hp.learning_rate, hp.min_learning_rate
    rows = np.empty(1 + scfg.num_negatives, dtype=np.int64)
    step = 0
    for epoch in range(hp.epochs):
        if epoch == 0:
            ctx, tgt, neg = ctx0, tgt0, neg0
        else:
            ctx, tgt, neg = sample_arrays(corpus, epoch_cfgs[epoch])
        epoch_loss = 0.0
        for i in range(n_samples):
            rows[0] = tgt[i]
            rows[1:] = neg[i]
            lr = linear_lr(lr0, lr_min, step, total_steps)
            epoch_loss += _apply_step(U, V, ctx[i], rows, lr, update_drugs)
            step += 1
        if not math.isfinite(epoch_loss):
            raise TrainingError(
                f"non-finite loss in epoch {epoch}; lower the learning rate"
            )
        mean_loss = epoch_loss / n_samples
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, hp.epochs, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
    return params


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

def _section(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def save_model(path, params: ModelParams, vocab: Vocabulary, hp: Hyperparams) -> None:
    """Write the versioned binary container (see module docstring)."""
    U = np.ascontiguousarray(params.disease_embeddings, dtype="<f8")
    V = np.ascontiguousarray(params.drug_embeddings, dtype="<f8")
    header = {
        "hyperparams": hp.to_dict(),
        "num_diseases": vocab.num_diseases,
        "num_drugs": vocab.num_drugs,
        "embedding_dim": int(U.shape[1]),
    }
    vocab_obj = {
        "diseases": list(vocab.diseases),
        "drugs": list(vocab.drugs),
        "drug_patient_counts": [int(c) for c in vocab.drug_patient_counts],
    }
    blob = MAGIC + struct.pack("<I", FORMAT_VERSION)
    blob += _section(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8"))
    blob += _section(json.dumps(vocab_obj, sort_keys=True, ensure_ascii=False).encode("utf-8"))
    blob += _section(U.tobytes(order="C"))
    blob += _section(V.tobytes(order="C"))
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(digest)


def load_model(path) -> tuple[ModelParams, Vocabulary, Hyperparams]:
    """Read a model container back; round-trips bit-exactly with save_model."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 32 or data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a model container")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: container version {version}, expected {FORMAT_VERSION}"
        )
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")

    sections = []
    offset = 8
    while offset < len(body):
        if offset + 8 > len(body):
            raise ModelFormatError(f"{path}: truncated section header")
        (length,) = struct.unpack_from("<Q", body, offset)
        offset += 8
        if offset + length > len(body):
            raise ModelFormatError(f"{path}: truncated section payload")
        sections.append(body[offset : offset + length])
        offset += length
    if len(sections) != 4:
        raise ModelFormatError(f"{path}: expected 4 sections, found {len(sections)}")

    header = json.loads(sections[0].decode("utf-8"))
    vocab_obj = json.loads(sections[1].decode("utf-8"))
    hp = Hyperparams.from_dict(header["hyperparams"])
    n, m_drugs, d = header["num_diseases"], header["num_drugs"], header["embedding_dim"]
    U = np.frombuffer(sections[2], dtype="<f8").reshape(n, d).copy()
    V = np.frombuffer(sections[3], dtype="<f8").reshape(m_drugs, d).copy()
    vocab = Vocabulary(
        vocab_obj["diseases"], vocab_obj["drugs"], vocab_obj["drug_patient_counts"]
    )
    return ModelParams(U, V), vocab, hp
