"""Weight-similarity analysis between two checkpoints.

Parameters are grouped into four layer classes (pointwise 1x1 convs,
depthwise 3x3 convs, layer norms, channel attention convs) and compared two
ways, always in double precision:

* per-filter Pearson correlation, averaged to a per-layer mean R (constant
  filters are defined as r = 0 and excluded from the mean);
* RBF-kernel CKA over the layer's filters-as-rows matrix, via the empirical
  HSIC estimator with the usual centering matrix.

Layer norm scale/shift vectors are stacked into a 2-filter entry; biases and
everything else tagged "other" are excluded from the analysis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint

__all__ = [
    "LayerEntry",
    "KernelMatrix",
    "LayerReport",
    "SimilarityReport",
    "ArchitectureMismatchError",
    "DegenerateKernelError",
    "extract_groups",
    "pearson_filter_corr",
    "mean_layer_corr",
    "rbf_kernel_matrix",
    "hsic",
    "hsic_reference",
    "cka",
    "similarity_report",
]

ANALYZED = ("conv1x1", "conv3x3", "layernorm", "sca")
HIGH_CORR_THRESHOLD = 0.7


class ArchitectureMismatchError(ValueError):
    pass


class DegenerateKernelError(ValueError):
    pass


@dataclass
class LayerEntry:
    name: str
    taxonomy: str
    filters: np.ndarray  # (num_filters, filter_size), float64


def extract_groups(ckpt: Checkpoint) -> dict[str, list[LayerEntry]]:
    """Group and reshape checkpoint weights filter-major, keyed by taxonomy."""
    groups: dict[str, list[LayerEntry]] = {t: [] for t in ANALYZED}
    norms: dict[str, dict[str, np.ndarray]] = {}
    norm_order: list[str] = []
    for rec in ckpt.records.values():
        if rec.taxonomy == "layernorm":
            layer, _, part = rec.name.rpartition(".")
            if layer not in norms:
                norms[layer] = {}
                norm_order.append(layer)
            norms[layer][part] = rec.data.reshape(-1).astype(np.float64)
        elif rec.taxonomy in ("conv1x1", "conv3x3", "sca") and rec.name.endswith(".w"):
            mat = rec.data.reshape(rec.data.shape[0], -1).astype(np.float64)
            groups[rec.taxonomy].append(LayerEntry(rec.name[: -len(".w")], rec.taxonomy, mat))
    for layer in norm_order:
        parts = norms[layer]
        rows = [parts[p] for p in ("gamma", "beta") if p in parts]
        groups["layernorm"].append(LayerEntry(layer, "layernorm", np.stack(rows)))
    return groups


def pearson_filter_corr(f1, f2) -> float:
    """Product-moment correlation of two filters; constant input defines r = 0."""
    f1 = np.asarray(f1, dtype=np.float64).reshape(-1)
    f2 = np.asarray(f2, dtype=np.float64).reshape(-1)
    if f1.shape != f2.shape:
        raise ValueError(f"filter length mismatch: {f1.shape} vs {f2.shape}")
    if f1.size < 2:
        raise ValueError("filters need at least 2 values")
    d1 = f1 - f1.mean()
    d2 = f2 - f2.mean()
    denom = math.sqrt(float(np.sum(d1 * d1)) * float(np.sum(d2 * d2)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(d1 * d2) / denom)


def _filter_skipped(f1, f2) -> bool:
    return float(np.var(f1)) == 0.0 or float(np.var(f2)) == 0.0


def mean_layer_corr(m1: np.ndarray, m2: np.ndarray):
    """Mean per-filter correlation. Returns ``(R or None, skipped count)``."""
    if m1.shape != m2.shape:
        raise ValueError(f"layer shape mismatch: {m1.shape} vs {m2.shape}")
    rs = []
    skipped = 0
    for f1, f2 in zip(m1, m2):
        if _filter_skipped(f1, f2):
            skipped += 1
            continue
        rs.append(pearson_filter_corr(f1, f2))
    if not rs:
        return None, skipped
    return float(np.mean(rs)), skipped


@dataclass
class KernelMatrix:
    matrix: np.ndarray  # (n, n), symmetric
    bandwidth: float


def rbf_kernel_matrix(x: np.ndarray, bandwidth="median") -> KernelMatrix:
    """K_ij = exp(-||x_i - x_j||^2 / (2 sigma^2)) over the rows of ``x``.

    ``bandwidth`` is either an explicit positive sigma or "median", the
    median of nonzero pairwise distances (1.0 when all rows coincide).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    diff = x[:, None, :] - x[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if bandwidth == "median":
        dists = np.sqrt(sq[np.triu_indices(n, k=1)])
        nonzero = dists[dists > 0]
        sigma = float(np.median(nonzero)) if nonzero.size else 1.0
    else:
        sigma = float(bandwidth)
        if sigma <= 0:
            raise ValueError(f"bandwidth must be positive, got {sigma}")
    return KernelMatrix(np.exp(-sq / (2.0 * sigma * sigma)), sigma)


def _matrix(k) -> np.ndarray:
    return k.matrix if isinstance(k, KernelMatrix) else np.asarray(k, dtype=np.float64)


def hsic(k, l) -> float:
    """Empirical HSIC: trace(K H L H) / (n - 1)^2, without forming H L H via matmuls."""
    km, lm = _matrix(k), _matrix(l)
    if km.shape != lm.shape or km.shape[0] != km.shape[1]:
        raise ValueError(f"kernel shape mismatch: {km.shape} vs {lm.shape}")
    n = km.shape[0]
    if n < 2:
        raise ValueError("HSIC needs n >= 2")
    centered = lm - lm.mean(axis=0, keepdims=True) - lm.mean(axis=1, keepdims=True) + lm.mean()
    return float(np.sum(km * centered.T) / (n - 1) ** 2)


def hsic_reference(k, l) -> float:
    """From-definition HSIC with explicit centering-matrix products."""
    km, lm = _matrix(k), _matrix(l)
    n = km.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    return float(np.trace(km @ h @ lm @ h) / (n - 1) ** 2)


def cka(k, l) -> float:
    """Normalized HSIC similarity in [0, 1]; degenerate kernels are rejected."""
    hxy = hsic(k, l)
    hxx = hsic(k, k)
    hyy = hsic(l, l)
    if hxx <= 0.0 or hyy <= 0.0:
        raise DegenerateKernelError("zero self-HSIC: CKA undefined for this layer")
    return hxy / math.sqrt(hxx * hyy)


# ---------------------------------------------------------------------------
# report


@dataclass
class LayerReport:
    name: str
    taxonomy: str
    filters: int
    mean_corr: Optional[float]
    skipped: int
    cka: Optional[float]
    high_corr: bool

    def to_obj(self) -> dict:
        return {
            "name": self.name,
            "taxonomy": self.taxonomy,
            "filters": self.filters,
            "mean_corr": self.mean_corr,
            "skipped": self.skipped,
            "cka": self.cka,
            "high_corr": self.high_corr,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "LayerReport":
        return cls(
            obj["name"],
            obj["taxonomy"],
            int(obj["filters"]),
            obj["mean_corr"],
            int(obj["skipped"]),
            obj["cka"],
            bool(obj["high_corr"]),
        )


@dataclass
class SimilarityReport:
    layers: list
    threshold: float = HIGH_CORR_THRESHOLD
    bandwidth: str = "median"
    notes: list = field(default_factory=list)

    def by_taxonomy(self, taxonomy: str):
        return [l for l in self.layers if l.taxonomy == taxonomy]

    def to_json(self) -> str:
        obj = {
            "threshold": self.threshold,
            "bandwidth": self.bandwidth,
            "notes": self.notes,
            "layers": [l.to_obj() for l in self.layers],
        }
        return json.dumps(obj, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SimilarityReport":
        obj = json.loads(text)
        return cls(
            [LayerReport.from_obj(o) for o in obj["layers"]],
            threshold=obj["threshold"],
            bandwidth=obj["bandwidth"],
            notes=list(obj.get("notes", [])),
        )

    def to_table(self) -> str:
        header = f"{'layer':<40} {'class':<10} {'filters':>7} {'R':>9} {'CKA':>9} {'flag':>5}"
        lines = [header, "-" * len(header)]
        for l in self.layers:
            r = "undef" if l.mean_corr is None else f"{l.mean_corr:+.4f}"
            c = "undef" if l.cka is None else f"{l.cka:.4f}"
            flag = "HIGH" if l.high_corr else ""
            lines.append(f"{l.name:<40} {l.taxonomy:<10} {l.filters:>7} {r:>9} {c:>9} {flag:>5}")
        return "\n".join(lines) + "\n"


def _aligned_entries(a: Checkpoint, b: Checkpoint):
    ga, gb = extract_groups(a), extract_groups(b)
    for taxonomy in ANALYZED:
        ea, eb = ga[taxonomy], gb[taxonomy]
        if len(ea) != len(eb):
            first = (ea[len(eb):] or eb[len(ea):])[0]
            raise ArchitectureMismatchError(
                f"checkpoints disagree in {taxonomy} layers; first unmatched: {first.name}"
            )
        for la, lb in zip(ea, eb):
            if la.name != lb.name or la.filters.shape != lb.filters.shape:
                raise ArchitectureMismatchError(
                    f"first differing layer: {la.name} vs {lb.name} "
                    f"({la.filters.shape} vs {lb.filters.shape})"
                )
            yield la, lb


def similarity_report(
    a: Checkpoint, b: Checkpoint, bandwidth="median", threshold: float = HIGH_CORR_THRESHOLD
) -> SimilarityReport:
    """Per-layer Pearson means and CKA indices between two matching checkpoints."""
    layers = []
    notes = []
    for la, lb in _aligned_entries(a, b):
        mean_r, skipped = mean_layer_corr(la.filters, lb.filters)
        try:
            if la.filters.shape[0] < 2:
                raise DegenerateKernelError("single-filter layer")
            value = cka(rbf_kernel_matrix(la.filters, bandwidth), rbf_kernel_matrix(lb.filters, bandwidth))
        except DegenerateKernelError as exc:
            value = None
            notes.append(f"{la.name}: {exc}")
        layers.append(
            LayerReport(
                name=la.name,
                taxonomy=la.taxonomy,
                filters=la.filters.shape[0],
                mean_corr=mean_r,
                skipped=skipped,
                cka=value,
                high_corr=(mean_r is not None and mean_r > threshold),
            )
        )
    return SimilarityReport(layers, threshold=threshold, bandwidth=str(bandwidth), notes=notes)
