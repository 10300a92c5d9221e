"""Minimum-distance-to-mean classifier on covariance matrices, with recentering.

A benchmark approximation of the usual Riemannian baseline. Every domain is
recentred (whitened by the inverse square root of its Riemannian reference)
before classification; class prototypes are Karcher means of recentred
covariances and probabilities are ``softmax(-distance / tau)``.

Two recentering variants are provided:

* generic recentering (:func:`gr_start`, :func:`gr_update`): the reference is
  updated online, one window at a time, starting from a source reference that
  carries a configurable prior weight;
* personally adjusted recentering (:func:`par_update`): the reference is refit
  on labeled target calibration windows and the class means are moved along
  geodesics towards the target class means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg
from .adapt import AlignmentReference, align, fit_reference
from .errors import ConfigurationError, ParseError, ShapeError
from .model import read_tensors, write_tensors


@dataclass(frozen=True)
class MdmModel:
    class_means: np.ndarray  # (K, C, C)
    reference: AlignmentReference | None = None
    temperature: float = 1.0

    @property
    def class_count(self) -> int:
        return self.class_means.shape[0]


def mdm_fit_covariances(covs: np.ndarray, labels: np.ndarray, class_count: int | None = None,
                        reference: AlignmentReference | None = None, temperature: float = 1.0) -> MdmModel:
    covs = np.asarray(covs, dtype=np.float64)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if class_count is None else class_count
    means = []
    for c in range(k):
        sel = covs[labels == c]
        if len(sel) == 0:
            raise ConfigurationError(f"no training windows for class {c}")
        means.append(linalg.geometric_mean(sel))
    return MdmModel(np.stack(means), reference, temperature)


def mdm_fit(windows: np.ndarray, labels: np.ndarray, class_count: int | None = None,
            reference: AlignmentReference | None = None, temperature: float = 1.0) -> MdmModel:
    """Class means from windows ``(n, C, S)`` that are already aligned per domain.

    ``reference`` is stored as the default reference for prediction.
    """
    return mdm_fit_covariances(linalg.covariance(windows), labels, class_count, reference, temperature)


def mdm_fit_domains(domains: list[tuple[np.ndarray, np.ndarray]], class_count: int = 2,
                    temperature: float = 1.0) -> MdmModel:
    """Fit on several source domains, each recentred with its own Riemannian reference."""
    covs, labels = [], []
    for windows, y in domains:
        ref = fit_reference(windows, "riemannian")
        covs.append(linalg.covariance(align(windows, ref)))
        labels.append(np.asarray(y))
    return mdm_fit_covariances(np.concatenate(covs), np.concatenate(labels), class_count, None, temperature)


def class_distances(model: MdmModel, covs: np.ndarray) -> np.ndarray:
    covs = np.asarray(covs, dtype=np.float64)
    single = covs.ndim == 2
    if single:
        covs = covs[None]
    if covs.shape[-1] != model.class_means.shape[-1]:
        raise ShapeError(f"covariance is {covs.shape[-1]}x{covs.shape[-1]}, model is "
                         f"{model.class_means.shape[-1]}x{model.class_means.shape[-1]}")
    d = np.stack([linalg.airm_distances(m, covs) for m in model.class_means], axis=-1)
    return d[0] if single else d


def mdm_predict(window: np.ndarray, model: MdmModel, ref: AlignmentReference | None = None) -> np.ndarray:
    """Class probabilities of one window ``(C, S)`` or a stack ``(n, C, S)``.

    The window is aligned with ``ref`` (or the model's stored reference) when
    one is available; with neither it is used as is.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-2] != model.class_means.shape[-1]:
        raise ShapeError(f"window has {window.shape[-2]} channels, model expects {model.class_means.shape[-1]}")
    ref = ref if ref is not None else model.reference
    if ref is not None:
        window = align(window, ref)
    d = class_distances(model, linalg.covariance(window))
    z = -d / model.temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gr_start(source_ref: AlignmentReference, prior_weight: float = 1.0) -> AlignmentReference:
    """Seed a generic-recentering reference with a source reference worth ``prior_weight`` windows."""
    if prior_weight < 0:
        raise ConfigurationError("prior weight must be non-negative")
    return AlignmentReference.from_matrix("riemannian", source_ref.mean, prior_weight)


def gr_update(ref: AlignmentReference, window: np.ndarray) -> AlignmentReference:
    """Move the reference ``1/(n+1)`` along the geodesic towards the new window's covariance."""
    cov = linalg.covariance(window)
    n = ref.sample_count
    if ref.is_empty or n == 0:
        return AlignmentReference.from_matrix("riemannian", cov, 1)
    return AlignmentReference.from_matrix("riemannian", linalg.geodesic_step(ref.mean, cov, 1.0 / (n + 1)), n + 1)


def par_update(model: MdmModel, windows: np.ndarray, labels: np.ndarray, blend: float = 0.5) -> MdmModel:
    """Supervised recentering on labeled target calibration windows.

    The reference is refit on the calibration windows, and each class mean moves
    a fraction ``blend`` along the geodesic from the source mean to the target
    class mean. A class absent from the calibration set keeps its source mean.
    """
    if not 0.0 <= blend <= 1.0:
        raise ConfigurationError(f"blend weight must lie in [0, 1], got {blend}")
    ref = fit_reference(windows, "riemannian")
    covs = linalg.covariance(align(windows, ref))
    labels = np.asarray(labels)
    means = []
    for c, source_mean in enumerate(model.class_means):
        sel = covs[labels == c]
        if len(sel) == 0:
            warnings.warn(f"class {c} missing from calibration data; keeping the source mean", RuntimeWarning,
                          stacklevel=2)
            means.append(source_mean.copy())
            continue
        means.append(linalg.geodesic_step(source_mean, linalg.geometric_mean(sel), blend))
    return MdmModel(np.stack(means), ref, model.temperature)


def mdm_tensors(model: MdmModel) -> dict[str, np.ndarray]:
    """Tensors for the shared checkpoint container, prefixed ``mdm.``."""
    out = {"mdm.class_means": model.class_means}
    if model.reference is not None:
        out["mdm.reference"] = model.reference.mean
    return out


def save_mdm(path, model: MdmModel) -> None:
    write_tensors(path, {"kind": "mdm", "temperature": model.temperature}, mdm_tensors(model))


def load_mdm(path) -> MdmModel:
    manifest, tensors = read_tensors(path)
    if manifest.get("kind") != "mdm":
        raise ParseError(f"not an MDM checkpoint (kind={manifest.get('kind')!r})", str(path), 9)
    ref = None
    if "mdm.reference" in tensors:
        ref = AlignmentReference.from_matrix("riemannian", tensors["mdm.reference"].astype(np.float64))
    return MdmModel(tensors["mdm.class_means"].astype(np.float64), ref, float(manifest.get("temperature", 1.0)))
