"""Quantitative metrics: Fréchet distance between feature sets and rank-1
identity retrieval with per-pose breakdowns."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, DataError, DependencyError, NumericalError
from .models import Checkpoint, load_checkpoint
from .training import freeze

FID_EPS = 1e-6
IMAG_TOL = 1e-3
NEG_TOL = 1e-6


@dataclass(frozen=True)
class FeatureSet:
    """``n x D`` embeddings with optional identity labels and pose-bucket labels."""

    features: np.ndarray
    source: str = "real"  # or "synthesized"
    identities: tuple | None = None
    buckets: tuple | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ContractError(f"features must be n x D, got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ContractError("features contain non-finite values")
        for name in ("identities", "buckets"):
            v = getattr(self, name)
            if v is not None and len(v) != len(f):
                raise ContractError(f"{name} has {len(v)} entries for {len(f)} rows")
            if v is not None:
                object.__setattr__(self, name, tuple(v))
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _as_features(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    """Symmetric square root by eigendecomposition, clamping tiny negative eigenvalues."""
    w, v = np.linalg.eigh((sigma + sigma.T) / 2)
    if w.min() < 0 and np.sqrt(-w.min()) > IMAG_TOL:
        raise NumericalError(f"matrix square root has imaginary residue {np.sqrt(-w.min()):.3g}")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(a, b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ``‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`` with ``Σ ← Σ + 1e-6·I``.
    The trace of the cross term equals the nuclear norm of ``Σa^½ Σb^½``,
    which is computed from singular values so the condition number is never
    squared.
    """
    fa, fb = _as_features(a), _as_features(b)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ContractError(f"feature dimensions differ: {fa.shape} vs {fb.shape}")
    if len(fa) < 2 or len(fb) < 2:
        raise ContractError("each feature set needs at least 2 rows")
    d = fa.shape[1]
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    eye = FID_EPS * np.eye(d)
    sa = np.cov(fa, rowvar=False).reshape(d, d) + eye
    sb = np.cov(fb, rowvar=False).reshape(d, d) + eye
    cross = np.linalg.svd(_psd_sqrt(sa) @ _psd_sqrt(sb), compute_uv=False).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * cross)
    if not np.isfinite(value):
        raise NumericalError("non-finite Fréchet distance")
    if value < -NEG_TOL:
        raise NumericalError(f"Fréchet distance {value:.3g} is negative beyond tolerance")
    return max(value, 0.0)


def pose_bucket(yaw_deg: float, width: float = 15.0) -> str:
    """Label a yaw angle by its nearest multiple of ``width`` degrees, sign folded."""
    k = int(round(abs(float(yaw_deg)) / width) * width)
    return "0" if k == 0 else f"±{k}"


@dataclass(frozen=True)
class Rank1Result:
    value: float  # percentage
    buckets: dict  # label -> percentage
    counts: dict  # label -> number of probes
    n_gallery: int
    n_probe: int


def _unit(f: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(n > 0, n, 1.0)


def rank1_accuracy(gallery: FeatureSet, probes: FeatureSet) -> Rank1Result:
    """Cosine-similarity nearest gallery entry; ties go to the lowest gallery index."""
    if gallery.identities is None or probes.identities is None:
        raise ContractError("rank-1 retrieval needs identity labels on gallery and probes")
    if gallery.dim != probes.dim:
        raise ContractError(f"feature dimensions differ: {gallery.dim} vs {probes.dim}")
    known = set(gallery.identities)
    missing = sorted(set(probes.identities) - known)
    if missing:
        raise DataError(f"probe identities absent from gallery: {missing[:5]}")
    sim = _unit(probes.features) @ _unit(gallery.features).T
    best = sim.argmax(axis=1)  # first maximum = lowest index
    g_ids = np.array(gallery.identities, dtype=object)
    hit = g_ids[best] == np.array(probes.identities, dtype=object)
    labels = probes.buckets if probes.buckets is not None else ("all",) * len(probes)
    buckets, counts = {}, {}
    for lab in sorted(set(labels), key=_bucket_order):
        m = np.array([x == lab for x in labels])
        counts[lab] = int(m.sum())
        buckets[lab] = 100.0 * float(hit[m].mean())
    value = 100.0 * float(hit.mean()) if len(hit) else float("nan")
    return Rank1Result(value, buckets, counts, len(gallery), len(probes))


def _bucket_order(label: str):
    try:
        return (0, float(label.lstrip("±")))
    except ValueError:
        return (1, label)


@torch.no_grad()
def embed_images(proxy_ckpt, images, source: str = "real", identities=None, buckets=None,
                 batch: int = 128) -> FeatureSet:
    """Pooled proxy features for an ``N x 3 x H x W`` image batch in [-1, 1]."""
    ck = proxy_ckpt if isinstance(proxy_ckpt, Checkpoint) else load_checkpoint(proxy_ckpt)
    ck.require_stage("proxy", "synth")
    images = np.asarray(images, dtype=np.float32)
    res = ck.config.resolution
    if images.ndim != 4 or images.shape[1:] != (3, res, res):
        raise DependencyError(f"proxy expects N x 3 x {res} x {res} images, got {images.shape}")
    net = freeze(ck.build("proxy"))
    feats = [net(torch.from_numpy(images[s:s + batch]))[0].double().numpy() for s in range(0, len(images), batch)]
    f = np.concatenate(feats) if feats else np.zeros((0, ck.config.d_id))
    return FeatureSet(f, source, identities, buckets)


# -- reports ---------------------------------------------------------------------------

REPORT_KEYS = {"metric": str, "value": float, "buckets": dict, "n_gallery": int, "n_probe": int, "config_hash": str}


def make_report(metric: str, value: float, buckets: dict, n_gallery: int, n_probe: int, config_hash: str,
                **extra) -> dict:
    rep = {"metric": metric, "value": float(value), "buckets": {str(k): float(v) for k, v in buckets.items()},
           "n_gallery": int(n_gallery), "n_probe": int(n_probe), "config_hash": str(config_hash)}
    rep.update(extra)
    validate_report(rep)
    return rep


def validate_report(rep: dict) -> None:
    for k, typ in REPORT_KEYS.items():
        if k not in rep:
            raise ContractError(f"report lacks key {k!r}")
        ok = isinstance(rep[k], (int, float)) and not isinstance(rep[k], bool) if typ is float else isinstance(rep[k], typ)
        if not ok:
            raise ContractError(f"report key {k!r} has type {type(rep[k]).__name__}")
    if rep["metric"] not in ("fid", "rank1"):
        raise ContractError(f"unknown metric {rep['metric']!r}")
    if not all(isinstance(v, (int, float)) for v in rep["buckets"].values()):
        raise ContractError("bucket values must be numbers")


def write_report(path, rep: dict) -> Path:
    validate_report(rep)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return path
