"""Inception Score and Frechet distance on float64 statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .data import ImageBatch
from .models import MiniEmbedder, embed, log_posterior

SYMMETRY_TOL = 1e-8
NEG_EIG_RTOL = 1e-10
FID_NEG_SLACK = 1e-6


class MetricError(Exception):
    """Invalid metric input."""


class NumericError(MetricError, ArithmeticError):
    """A computation left its numerically valid domain."""


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if sigma.shape != (self.mu.size, self.mu.size):
            raise MetricError(f"sigma shape {sigma.shape} does not match mu length {self.mu.size}")
        self.sigma = 0.5 * (sigma + sigma.T)
        if self.n < 2:
            raise MetricError("covariance needs at least 2 samples")

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass
class MetricReport:
    metric: str
    value: float
    n_a: int
    n_b: int = 0
    std: Optional[float] = None
    embedder: dict = field(default_factory=dict)
    config_digest: str = ""
    seed: int = 0
    clamped: bool = False

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"{self.metric} is not finite: {self.value}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# jsonschema document for one MetricReport line
REPORT_SCHEMA = {
    "type": "object",
    "required": ["metric", "value", "n_a", "n_b", "std", "embedder", "config_digest",
                 "seed", "clamped"],
    "properties": {
        "metric": {"enum": ["IS", "FID", "R-IS", "R-FID"]},
        "value": {"type": "number"},
        "n_a": {"type": "integer", "minimum": 0},
        "n_b": {"type": "integer", "minimum": 0},
        "std": {"type": ["number", "null"]},
        "embedder": {
            "type": "object",
            "required": ["training", "kappa"],
            "properties": {
                "training": {"type": "string"},
                "kappa": {"type": "number", "minimum": 0},
                "digest": {"type": "string"},
            },
        },
        "config_digest": {"type": "string"},
        "seed": {"type": "integer"},
        "clamped": {"type": "boolean"},
    },
    "additionalProperties": False,
}


def estimate_stats(embeddings) -> GaussianStats:
    """Column mean and unbiased (N - 1) covariance, upcast to float64."""
    x = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings,
                   dtype=np.float64)
    if x.ndim != 2:
        raise MetricError(f"embeddings must be (N, d), got {x.shape}")
    if x.shape[0] < 2:
        raise MetricError("need at least 2 embeddings to estimate a covariance")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu, sigma, x.shape[0])


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-1e-10 * lambda_max, 0) are treated as rounding noise and
    clamped to zero; anything more negative is an error.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MetricError(f"sqrtm_psd needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise MetricError("sqrtm_psd: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    lam_max = max(float(vals.max(initial=0.0)), 0.0)
    floor = -NEG_EIG_RTOL * lam_max
    if vals.size and vals.min() < floor:
        raise NumericError(
            f"sqrtm_psd: eigenvalue {vals.min():.3e} below tolerance {floor:.3e}")
    root = np.sqrt(np.clip(vals, 0.0, None))
    s = (vecs * root) @ vecs.T
    return 0.5 * (s + s.T)


def frechet_distance(a: GaussianStats, b: GaussianStats, return_flag: bool = False):
    """Squared 2-Wasserstein distance between N(mu_a, S_a) and N(mu_b, S_b).

    The cross term uses tr((S_a^1/2 S_b S_a^1/2)^1/2), which equals
    tr((S_a S_b)^1/2) but only involves symmetric matrices.
    """
    if a.dim != b.dim:
        raise MetricError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    ra = sqrtm_psd(a.sigma)
    m = ra @ b.sigma @ ra
    cross = np.trace(sqrtm_psd(0.5 * (m + m.T)))
    traces = np.trace(a.sigma) + np.trace(b.sigma)
    value = float(diff @ diff + traces - 2.0 * cross)
    clamped = False
    if value < 0:
        # rounding in the cross term scales with the covariance traces
        if value < -FID_NEG_SLACK * max(1.0, traces):
            raise NumericError(f"Frechet distance came out negative: {value:.3e}")
        value, clamped = 0.0, True
    return (value, clamped) if return_flag else value


def embedder_info(model: MiniEmbedder) -> dict:
    prov = model.provenance
    info = {"training": str(prov.get("training", "nominal")),
            "kappa": float(prov.get("kappa", 0.0))}
    if "digest" in prov:
        info["digest"] = prov["digest"]
    return info


def _is_robust(model: MiniEmbedder) -> bool:
    return float(model.provenance.get("kappa", 0.0)) > 0


def _as_batch(x) -> ImageBatch:
    return x if isinstance(x, ImageBatch) else ImageBatch(np.asarray(x))


def fid(embedder: MiniEmbedder, real, gen, config_digest: str = "", seed: int = 0) -> MetricReport:
    """FID between two image sets; R-FID when the embedder is adversarially trained."""
    real, gen = _as_batch(real), _as_batch(gen)
    if len(real) < 2 or len(gen) < 2:
        raise MetricError("both image sets need at least 2 images")
    sa = estimate_stats(embed(embedder, real))
    sb = estimate_stats(embed(embedder, gen))
    value, clamped = frechet_distance(sa, sb, return_flag=True)
    return MetricReport("R-FID" if _is_robust(embedder) else "FID", value, len(real), len(gen),
                        embedder=embedder_info(embedder), config_digest=config_digest,
                        seed=seed, clamped=clamped)


def fid_from_embeddings(ea, eb) -> float:
    return frechet_distance(estimate_stats(ea), estimate_stats(eb))


def inception_score_from_logp(logp: np.ndarray, n_splits: int = 10) -> tuple[float, float]:
    """Mean and std over splits of exp(E_x KL(p(y|x) || p(y))), from log-probabilities."""
    logp = np.asarray(logp, dtype=np.float64)
    n = logp.shape[0]
    if n_splits < 1:
        raise MetricError("n_splits must be >= 1")
    if n < n_splits:
        raise MetricError(f"cannot split {n} samples into {n_splits} non-empty splits")
    scores = []
    for part in np.array_split(logp, n_splits):
        if part.shape[0] == 0:
            raise MetricError("empty split")
        m = part.max(axis=0)
        m = np.where(np.isfinite(m), m, 0.0)
        log_marg = m + np.log(np.exp(part - m).mean(axis=0))
        p = np.exp(part)
        # 0 * log 0 := 0
        with np.errstate(invalid="ignore"):
            terms = np.where(p > 0, p * (part - log_marg), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score_from_probs(probs, n_splits: int = 10) -> tuple[float, float]:
    with np.errstate(divide="ignore"):
        return inception_score_from_logp(np.log(np.asarray(probs, dtype=np.float64)), n_splits)


def inception_score(embedder: MiniEmbedder, batch, n_splits: int = 10,
                    config_digest: str = "", seed: int = 0) -> MetricReport:
    batch = _as_batch(batch)
    value, std = inception_score_from_logp(log_posterior(embedder, batch), n_splits)
    return MetricReport("R-IS" if _is_robust(embedder) else "IS", value, len(batch), 0, std=std,
                        embedder=embedder_info(embedder), config_digest=config_digest, seed=seed)


def entropy(p) -> float:
    """Shannon entropy in nats with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise MetricError("entropy needs a probability vector (non-negative, sums to 1)")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
