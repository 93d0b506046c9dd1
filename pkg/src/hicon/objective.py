"""BPR ranking loss, cross-order InfoNCE and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Tensor

DEFAULT_TAU = 0.6


def _as_tensor(x, tape: Tape | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return (tape or Tape()).constant(np.asarray(x, dtype=np.float64))


def bpr_loss(pos_scores, neg_scores) -> Tensor:
    """``sum -log sigmoid(pos - neg)`` over aligned score pairs."""
    pos = _as_tensor(pos_scores)
    neg = _as_tensor(neg_scores, pos.tape)
    if pos.value.ndim != 1 or pos.shape != neg.shape:
        raise ContractError(f"bpr_loss: shape mismatch {pos.shape} vs {neg.shape}")
    if pos.shape[0] < 1:
        raise ContractError("bpr_loss: no score pairs")
    return ad.scale(ad.total(ad.log_sigmoid(ad.sub(pos, neg))), -1.0)


def infonce_loss(anchor_rows, positive_rows, tau: float = DEFAULT_TAU) -> Tensor:
    """In-batch InfoNCE: row ``i`` of ``anchor`` should match row ``i`` of ``positive``.

    The denominator runs over every positive row, the own positive included.
    """
    a = _as_tensor(anchor_rows)
    p = _as_tensor(positive_rows, a.tape)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if a.value.ndim != 2 or a.shape != p.shape:
        raise ContractError(f"infonce_loss: shape mismatch {a.shape} vs {p.shape}")
    if a.shape[0] < 2:
        raise ContractError("infonce_loss: need at least 2 rows for in-batch negatives")
    logits = ad.scale(ad.matmul(a, ad.transpose(p)), 1.0 / tau)
    pos = ad.scale(ad.dot_rows(a, p), 1.0 / tau)
    return ad.sub(ad.total(ad.logsumexp_rows(logits)), ad.total(pos))


@dataclass
class LossBreakdown:
    bpr: Tensor
    cl_user: Tensor
    cl_item: Tensor
    total: Tensor
    lam: float
    tau: float

    def values(self) -> dict[str, float]:
        return {"bpr": float(self.bpr.value), "cl_user": float(self.cl_user.value),
                "cl_item": float(self.cl_item.value), "total": float(self.total.value)}


def total_loss(reps, triples: np.ndarray, lam: float = 0.05, tau: float = DEFAULT_TAU,
               mode: str = "full") -> LossBreakdown:
    """``bpr + lam * (cl_user + cl_item)`` for a batch of ``(user, pos, neg)`` rows.

    Contrastive terms use the batch's distinct users and distinct items (positives
    and negatives) and vanish when high-level representations are absent.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    bpr = bpr_loss(reps.score(u, i, mode), reps.score(u, j, mode))
    tape = bpr.tape
    zero = tape.constant(np.array(0.0))
    cl_user = cl_item = zero
    if reps.user_high is not None and lam != 0:
        users = np.unique(u)
        items = np.unique(np.concatenate([i, j]))
        if users.size >= 2:
            cl_user = infonce_loss(ad.row_gather(reps.user_low, users), ad.row_gather(reps.user_high, users), tau)
        if items.size >= 2:
            cl_item = infonce_loss(ad.row_gather(reps.item_low, items), ad.row_gather(reps.item_high, items), tau)
    loss = bpr if lam == 0 else ad.add(bpr, ad.scale(ad.add(cl_user, cl_item), lam))
    return LossBreakdown(bpr, cl_user, cl_item, loss, lam, tau)
