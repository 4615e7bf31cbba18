"""Hungarian matching and the scale-aware localization loss.

Each iteration, ground-truth points are matched one-to-one to point
proposals by minimum total cost (score + weighted distance). Matched
proposals train as positives, everything else as negatives, and proposals
matched to exemplar-representative points get a size-regression term
against the exemplar's box size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .data import AnnotatedImage, ExemplarBox

LOG_EPS = 1e-7


class MatchError(ValueError):
    pass


@dataclass
class MatchResult:
    """Injective assignment of ground-truth index -> proposal index."""

    assignment: np.ndarray  # (M,) proposal index per ground-truth point
    total_cost: float

    def __len__(self) -> int:
        return len(self.assignment)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    loc: torch.Tensor
    size: torch.Tensor
    lambda_loc: float
    lambda_size: float
    gamma: float


def match_cost(gt: torch.Tensor, proposal_xy: torch.Tensor,
               score: torch.Tensor, eta: float) -> torch.Tensor:
    """Cost of pairing one ground-truth point with one proposal:
    -score + eta * euclidean distance."""
    return -score + eta * torch.linalg.vector_norm(gt - proposal_xy)


def cost_matrix(gt_points: torch.Tensor, proposal_xy: torch.Tensor,
                scores: torch.Tensor, eta: float) -> torch.Tensor:
    dists = torch.cdist(gt_points, proposal_xy, p=2)
    return -scores[None, :] + eta * dists


def hungarian_match(gt_points: torch.Tensor, proposal_xy: torch.Tensor,
                    scores: torch.Tensor, eta: float) -> MatchResult:
    """Minimum-cost one-to-one matching of M ground truths to N proposals.

    Ties between equal-cost assignments break toward lower proposal
    indices via an index penalty far below cost resolution, keeping the
    result deterministic.
    """
    m, n = gt_points.shape[0], proposal_xy.shape[0]
    if m > n:
        raise MatchError(f"{m} ground-truth points exceed {n} proposals")
    with torch.no_grad():
        costs = cost_matrix(gt_points, proposal_xy, scores, eta).double().cpu().numpy()
    scale = max(np.abs(costs).max(), 1.0)
    tie_break = scale * 1e-9 * np.arange(n)[None, :]
    rows, cols = linear_sum_assignment(costs + tie_break)
    assignment = np.empty(m, dtype=np.int64)
    assignment[rows] = cols
    total = float(costs[rows, cols].sum())
    return MatchResult(assignment=assignment, total_cost=total)


def classification_loss(scores: torch.Tensor, matched: torch.Tensor,
                        gamma: float) -> torch.Tensor:
    """Cross-entropy over proposal scores; unmatched proposals are
    negatives weighted by gamma. `matched` is a 0/1 indicator per proposal."""
    s = scores.clamp(LOG_EPS, 1.0 - LOG_EPS)
    per = matched * torch.log(s) + gamma * (1.0 - matched) * torch.log(1.0 - s)
    return -per.mean()


def location_loss(gt_points: torch.Tensor, proposal_xy: torch.Tensor,
                  assignment: np.ndarray) -> torch.Tensor:
    """Mean squared coordinate error over matched pairs."""
    matched_xy = proposal_xy[torch.as_tensor(assignment, device=proposal_xy.device)]
    return ((matched_xy - gt_points) ** 2).sum(dim=1).mean()


def associate_exemplars(exemplars: list[ExemplarBox],
                        gt_points: torch.Tensor) -> list[int | None]:
    """Representative ground-truth index per exemplar, or None.

    An exemplar represents the ground-truth point nearest its box center,
    provided that point lies within max(width, height)/2 pixels; otherwise
    the exemplar contributes no size term this iteration.
    """
    out: list[int | None] = []
    pts = gt_points.detach().cpu().numpy()
    for box in exemplars:
        cx, cy = box.center
        d2 = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2
        i = int(np.argmin(d2)) if len(d2) else None
        radius = max(box.width, box.height) / 2.0
        if i is not None and d2[i] <= radius * radius:
            out.append(i)
        else:
            out.append(None)
    return out


def size_loss(exemplars: list[ExemplarBox], associations: list[int | None],
              proposal_sizes: torch.Tensor, assignment: np.ndarray) -> torch.Tensor:
    """Mean Manhattan distance between predicted sizes of the proposals
    matched to exemplar-representative points and the exemplar box sizes.

    Absent associations contribute nothing and shrink the divisor."""
    terms = []
    for box, gt_idx in zip(exemplars, associations):
        if gt_idx is None:
            continue
        pred = proposal_sizes[int(assignment[gt_idx])]
        terms.append(torch.abs(pred[0] - box.width) + torch.abs(pred[1] - box.height))
    if not terms:
        warnings.warn("no exemplar associated with a ground-truth point; "
                      "size loss is 0 this iteration")
        return proposal_sizes.sum() * 0.0
    return torch.stack(terms).mean()


def total_loss(scores: torch.Tensor, proposal_xy: torch.Tensor,
               proposal_sizes: torch.Tensor, gt_points: torch.Tensor,
               exemplars: list[ExemplarBox], match: MatchResult,
               associations: list[int | None] | None = None,
               gamma: float = 0.5, lambda_loc: float = 2e-4,
               lambda_size: float = 5e-5) -> LossBreakdown:
    """Weighted sum of classification, location, and size losses on a fixed
    match. Set lambda_size=0 to disable size supervision (ablation)."""
    n = scores.shape[0]
    matched = torch.zeros(n, dtype=scores.dtype, device=scores.device)
    matched[torch.as_tensor(match.assignment, device=scores.device)] = 1.0
    cls = classification_loss(scores, matched, gamma)
    loc = location_loss(gt_points, proposal_xy, match.assignment)
    if lambda_size != 0.0:
        if associations is None:
            associations = associate_exemplars(exemplars, gt_points)
        size = size_loss(exemplars, associations, proposal_sizes, match.assignment)
    else:
        size = scores.sum() * 0.0
    total = cls + lambda_loc * loc + lambda_size * size
    return LossBreakdown(total=total, cls=cls, loc=loc, size=size,
                         lambda_loc=lambda_loc, lambda_size=lambda_size,
                         gamma=gamma)
