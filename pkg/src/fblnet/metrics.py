"""Saliency metrics, fixation extraction and the training loss.

The numpy metrics work in float64 on a single H x W map and are what
evaluation reports. The torch functions at the bottom compute the same
KLdiv / NSS / CC terms differentiably for training.

Conventions
-----------
- standard deviations are population (ddof=0) deviations
- ROC areas use the prediction values at fixated pixels as thresholds,
  count pixels equal to a threshold as positive, and integrate with the
  trapezoid rule including the (0, 0) and (1, 1) end points
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.integrate import trapezoid

from .errors import (
    ConstantMapError,
    DomainError,
    EmptyFixationError,
    NotNormalizedError,
    ShapeError,
    ZeroMapError,
)

NORMALIZATION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FixationSet:
    """integer (row, col) gaze points inside a frame of `frame_shape`"""

    points: tuple[tuple[int, int], ...]
    frame_shape: tuple[int, int]

    def __post_init__(self):
        points = tuple((int(r), int(c)) for r, c in self.points)
        object.__setattr__(self, "points", points)
        object.__setattr__(
            self, "frame_shape", tuple(int(s) for s in self.frame_shape)
        )
        height, width = self.frame_shape
        for r, c in points:
            if not (0 <= r < height and 0 <= c < width):
                raise DomainError(
                    "fixation (%d, %d) lies outside a %dx%d frame"
                    % (r, c, height, width)
                )
        if len(set(points)) != len(points):
            raise DomainError("fixation set contains duplicate points")

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "FixationSet":
        mask = np.asarray(mask, dtype=bool)
        return cls(
            points=tuple(map(tuple, np.argwhere(mask).tolist())),
            frame_shape=mask.shape,
        )

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.frame_shape, dtype=bool)
        if self.points:
            rows, cols = zip(*self.points)
            mask[list(rows), list(cols)] = True
        return mask


@dataclass(frozen=True)
class LossWeights:
    mu: float = 1.0
    eta: float = 0.1
    xi: float = 0.1

    def __post_init__(self):
        for name in ("mu", "eta", "xi"):
            if getattr(self, name) < 0:
                raise DomainError(
                    "loss weight %s must be >= 0, got %s"
                    % (name, getattr(self, name))
                )

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(mu=cfg.mu, eta=cfg.eta, xi=cfg.xi)


def _as_map(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError("attention maps must be 2D, got shape %s" % (M.shape,))
    return M


def _same_shape(P: np.ndarray, Q: np.ndarray):
    if P.shape != Q.shape:
        raise ShapeError(
            "maps must share a shape, got %s and %s" % (P.shape, Q.shape)
        )


def _check_normalized(M: np.ndarray, name: str):
    total = M.sum()
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise NotNormalizedError(
            "%s must sum to 1 (within %g), sums to %.9f"
            % (name, NORMALIZATION_TOLERANCE, total)
        )


def _fixation_mask(fix: FixationSet, shape) -> np.ndarray:
    if len(fix) == 0:
        raise EmptyFixationError("metric needs at least one fixation")
    if tuple(fix.frame_shape) != tuple(shape):
        raise ShapeError(
            "fixations belong to a %s frame but the map is %s"
            % (fix.frame_shape, shape)
        )
    return fix.to_mask()


def normalize_dist(M) -> np.ndarray:
    """scales a nonnegative map so that it sums to 1.

    Raises
    ------
    DomainError
        on negative or non-finite entries
    ZeroMapError
        if the map sums to 0
    """
    M = _as_map(M)
    if not np.all(np.isfinite(M)) or np.any(M < 0):
        raise DomainError("maps must be finite and nonnegative to normalize")
    total = M.sum()
    if total == 0:
        raise ZeroMapError("cannot normalize a map that sums to 0")
    return M / total


def cc(P, Q) -> float:
    """Pearson correlation coefficient over all pixels, in [-1, 1].

    Raises
    ------
    ConstantMapError
        if either map is constant
    """
    P, Q = _as_map(P), _as_map(Q)
    _same_shape(P, Q)
    p, q = P - P.mean(), Q - Q.mean()
    sp, sq = np.sqrt((p * p).mean()), np.sqrt((q * q).mean())
    if sp == 0 or sq == 0:
        raise ConstantMapError("cc is undefined for a constant map")
    return float(np.clip((p * q).mean() / (sp * sq), -1.0, 1.0))


def kldiv(P, Q, epsilon: float = 1e-7) -> float:
    """sum_i Q_i log(eps + Q_i / (eps + P_i)) for sum-normalized P and Q.

    Parameters
    ----------
    P : array-like
        predicted distribution
    Q : array-like
        ground truth distribution
    epsilon : float, optional
        regularizer, by default 1e-7

    Returns
    -------
    float
        the regularized divergence of P from Q; values slightly below 0
        are possible where Q is near eps

    Raises
    ------
    ShapeError
        if the shapes differ
    NotNormalizedError
        if either map does not sum to 1
    """
    P, Q = _as_map(P), _as_map(Q)
    _same_shape(P, Q)
    _check_normalized(P, "P")
    _check_normalized(Q, "Q")
    return float(np.sum(Q * np.log(epsilon + Q / (epsilon + P))))


def sim(P, Q) -> float:
    """histogram intersection sum_i min(P_i, Q_i) of two distributions"""
    P, Q = _as_map(P), _as_map(Q)
    _same_shape(P, Q)
    _check_normalized(P, "P")
    _check_normalized(Q, "Q")
    return float(np.minimum(P, Q).sum())


def nss(P, fix: FixationSet) -> float:
    """mean of the z-scored prediction at the fixated pixels.

    Raises
    ------
    ConstantMapError
        if P is constant
    EmptyFixationError
        if there are no fixations
    """
    P = _as_map(P)
    mask = _fixation_mask(fix, P.shape)
    std = P.std()
    if std == 0:
        raise ConstantMapError("nss is undefined for a constant map")
    return float(((P - P.mean()) / std)[mask].mean())


def roc_area(positives: np.ndarray, negatives: np.ndarray) -> float:
    """area under the ROC curve of scores `positives` against `negatives`,
    thresholded at every distinct positive score (ties count as positive)"""
    positives = np.asarray(positives, dtype=np.float64).ravel()
    negatives = np.asarray(negatives, dtype=np.float64).ravel()
    thresholds = np.unique(positives)[::-1]
    pos_sorted = np.sort(positives)
    neg_sorted = np.sort(negatives)
    # number of scores >= t is n - searchsorted(left)
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, thresholds, "left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, thresholds, "left")
    tpr = np.concatenate([[0.0], tp / len(pos_sorted), [1.0]])
    fpr = np.concatenate([[0.0], fp / len(neg_sorted), [1.0]])
    return float(trapezoid(tpr, fpr))


def auc_judd(P, fix: FixationSet) -> float:
    """ROC area of fixated pixels against every non-fixated pixel.

    Raises
    ------
    EmptyFixationError
        if there are no fixations
    DomainError
        if every pixel is fixated
    """
    P = _as_map(P)
    mask = _fixation_mask(fix, P.shape)
    if mask.all():
        raise DomainError("auc_judd needs at least one non-fixated pixel")
    return roc_area(P[mask], P[~mask])


def auc_borji(
    P, fix: FixationSet, n_splits: int = 100, rng_seed: int = 0
) -> float:
    """mean ROC area of fixated pixels against `n_splits` uniform samples of
    |fix| non-fixated pixels, drawn without replacement per split.

    Parameters
    ----------
    P : array-like
        prediction map
    fix : FixationSet
        positives
    n_splits : int, optional
        number of negative samples, by default 100
    rng_seed : int, optional
        seed of the local generator, by default 0; results are deterministic
        given the seed

    Returns
    -------
    float
        area in [0, 1]
    """
    if n_splits < 1:
        raise DomainError("n_splits must be >= 1, got %s" % n_splits)
    P = _as_map(P)
    mask = _fixation_mask(fix, P.shape)
    if mask.all():
        raise DomainError("auc_borji needs at least one non-fixated pixel")
    positives, candidates = P[mask], P[~mask]
    n_neg = min(len(positives), len(candidates))
    rng = np.random.default_rng(rng_seed)
    areas = [
        roc_area(
            positives, candidates[rng.choice(len(candidates), n_neg, False)]
        )
        for _ in range(n_splits)
    ]
    return float(np.mean(areas))


def fixations_from_map(Q, theta_fix: float = 0.75) -> FixationSet:
    """every pixel with Q >= theta_fix * max(Q)

    Raises
    ------
    ZeroMapError
        if max(Q) <= 0
    """
    Q = _as_map(Q)
    peak = Q.max()
    if not peak > 0:
        raise ZeroMapError("cannot extract fixations from an all-zero map")
    return FixationSet.from_mask(Q >= theta_fix * peak)


# differentiable terms, maps shaped (batch, H, W) or (batch, 1, H, W)


def _flatten(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1)


def _zscore(x: torch.Tensor) -> torch.Tensor:
    std = x.std(dim=1, unbiased=False, keepdim=True)
    if torch.any(std == 0):
        raise ConstantMapError("z-scoring a constant map")
    return (x - x.mean(dim=1, keepdim=True)) / std


def kldiv_torch(
    P: torch.Tensor, Q: torch.Tensor, epsilon: float = 1e-7
) -> torch.Tensor:
    """per-sample kldiv after sum-normalizing both maps"""
    P, Q = _flatten(P), _flatten(Q)
    P = P / P.sum(dim=1, keepdim=True)
    Q = Q / Q.sum(dim=1, keepdim=True)
    return (Q * torch.log(epsilon + Q / (epsilon + P))).sum(dim=1)


def cc_torch(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    P, Q = _zscore(_flatten(P)), _zscore(_flatten(Q))
    return (P * Q).mean(dim=1)


def nss_torch(P: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    P, mask = _zscore(_flatten(P)), _flatten(mask).to(P.dtype)
    counts = mask.sum(dim=1)
    if torch.any(counts == 0):
        raise EmptyFixationError("every sample needs at least one fixation")
    return (P * mask).sum(dim=1) / counts


def batch_loss(
    P: torch.Tensor,
    Q: torch.Tensor,
    fix_mask: torch.Tensor,
    weights: LossWeights,
    epsilon: float = 1e-7,
) -> tuple[torch.Tensor, dict[str, float]]:
    """mu * KLdiv - eta * NSS - xi * CC, averaged over the batch.

    Parameters
    ----------
    P : torch.Tensor
        predictions from the head, (batch, 1, H, W) in (0, 1)
    Q : torch.Tensor
        ground truth maps, same shape as P
    fix_mask : torch.Tensor
        boolean fixation masks, same shape as P
    weights : LossWeights
        scalar factors of the three terms
    epsilon : float, optional
        kldiv regularizer, by default 1e-7

    Returns
    -------
    tuple[torch.Tensor, dict[str, float]]
        scalar loss with gradient, and the batch means of its components
    """
    if P.shape != Q.shape or P.shape != fix_mask.shape:
        raise ShapeError(
            "loss inputs disagree: %s, %s, %s"
            % (tuple(P.shape), tuple(Q.shape), tuple(fix_mask.shape))
        )
    kl = kldiv_torch(P, Q, epsilon).mean()
    n = nss_torch(P, fix_mask).mean()
    c = cc_torch(P, Q).mean()
    total = weights.mu * kl - weights.eta * n - weights.xi * c
    parts = {"kldiv": kl.item(), "nss": n.item(), "cc": c.item()}
    return total, parts


def loss(
    P: torch.Tensor,
    Q,
    fix: FixationSet,
    weights: LossWeights = LossWeights(),
    epsilon: float = 1e-7,
) -> torch.Tensor:
    """single-map training loss, differentiable with respect to P (H, W)"""
    Q = torch.as_tensor(np.asarray(Q), dtype=P.dtype, device=P.device)
    mask = torch.as_tensor(
        _fixation_mask(fix, tuple(P.shape)), device=P.device
    )
    total, _ = batch_loss(
        P.unsqueeze(0), Q.unsqueeze(0), mask.unsqueeze(0), weights, epsilon
    )
    return total
