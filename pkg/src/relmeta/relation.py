"""Task representations and the pairwise task relation matrix.

A task's representation is the mean extractor feature of its meta-data
support points.  Relations are masked cosine similarities averaged over K
learnable mask vectors (all-ones at init, so the layer starts as plain
cosine similarity).  The matrix feeds the consistency regularizer, which
trusts predictions from related tasks more than unrelated ones.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from . import nn

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6


class RelationError(Exception):
    pass


class SimilarityLayer:
    """K mask vectors over the representation width; trained by the outer loop."""

    __slots__ = ("k", "width", "omega")

    def __init__(self, k: int, width: int):
        if k < 1:
            raise RelationError(f"need at least one similarity head, got {k}")
        if width < 1:
            raise RelationError(f"representation width must be positive, got {width}")
        self.k = k
        self.width = width
        self.omega = np.ones((k, width))

    def named_params(self):
        yield "omega", self.omega


def bind_layer(layer: SimilarityLayer, tape: ad.Tape) -> ad.Var:
    return tape.leaf(layer.omega)


def task_representation(mv: nn.ModelVars, metadata) -> ad.Var:
    """Mean extractor feature over the meta-data support points."""
    if metadata.support_x.shape[0] == 0:
        raise RelationError("metadata has no support points")
    x = mv.tape.constant(metadata.support_x)
    return ad.mean(nn.forward_features(mv, x), axis=0)


def _mask_rows(omega: ad.Var) -> list:
    k, width = omega.shape
    return [ad.reshape(ad.slice_axis(omega, 0, h, h + 1), (width,)) for h in range(k)]


def _masked_cosine(masks: list, z_i: ad.Var, z_j: ad.Var) -> ad.Var:
    total = None
    for w_k in masks:
        u = ad.mul(w_k, z_i)
        v = ad.mul(w_k, z_j)
        if np.linalg.norm(u.array) == 0.0 or np.linalg.norm(v.array) == 0.0:
            # Undefined cosine; this head contributes 0 instead of NaN.
            log.warning("zero-norm masked representation, head contributes 0")
            c = z_i.tape.constant(np.array(0.0))
        else:
            c = ad.cosine_similarity(u, v)
        total = c if total is None else ad.add(total, c)
    return ad.smul(total, 1.0 / len(masks))


def compute_relation(omega: ad.Var, z_i: ad.Var, z_j: ad.Var) -> ad.Var:
    """Mean over heads of cos(omega_k * z_i, omega_k * z_j); scalar Var."""
    if z_i.shape != z_j.shape or z_i.array.ndim != 1:
        raise RelationError(f"representations must share a 1-D shape, got {z_i.shape}, {z_j.shape}")
    if omega.array.ndim != 2 or omega.shape[1] != z_i.shape[0]:
        raise RelationError(
            f"mask width {omega.shape} does not match representation width {z_i.shape}"
        )
    return _masked_cosine(_mask_rows(omega), z_i, z_j)


class RelationMatrix:
    """Symmetric pairwise relations; each unordered pair computed once.

    Entries stay on the tape so outer gradients reach the mask vectors
    (and, when enabled, the extractor through the representations).  The
    diagonal is unused and reads as zero in the dense view.
    """

    __slots__ = ("n", "_pairs")

    def __init__(self, n: int, pairs: dict):
        self.n = n
        self._pairs = pairs

    def entry(self, i: int, j: int) -> ad.Var:
        if i == j:
            raise RelationError("diagonal entries are undefined")
        return self._pairs[(min(i, j), max(i, j))]

    def weight_var(self, i: int, j: int) -> ad.Var:
        """Clamped trust weight max(m_ij, 0) + floor, as a tape Var."""
        return ad.sadd(ad.relu(self.entry(i, j)), WEIGHT_FLOOR)

    def values(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        for (i, j), var in self._pairs.items():
            m[i, j] = m[j, i] = float(var.array)
        return m


def build_matrix(omega: ad.Var, representations: list) -> RelationMatrix:
    n = len(representations)
    if n < 2:
        raise RelationError(f"relations need at least 2 tasks, got {n}")
    masks = _mask_rows(omega)
    pairs = {}
    for i in range(n):
        for j in range(i + 1, n):
            pairs[(i, j)] = _masked_cosine(masks, representations[i], representations[j])
    return RelationMatrix(n, pairs)


def nonneg_weights(matrix: RelationMatrix) -> np.ndarray:
    """Dense clamped weights; off-diagonal in [floor, 1 + floor], diagonal 0."""
    w = np.maximum(matrix.values(), 0.0) + WEIGHT_FLOOR
    np.fill_diagonal(w, 0.0)
    return w


def export_normalized(matrix: RelationMatrix) -> np.ndarray:
    """Rows of clamped weights scaled to sum to 1 (diagonal excluded)."""
    w = nonneg_weights(matrix)
    return w / w.sum(axis=1, keepdims=True)
