"""The three training losses and their scheduled combination.

All three are cosine-based: a temperature-scaled contrastive term over the
cross-modal embeddings z, a negative-softplus alignment term over aligned
modal feature pairs y, and a within-modality nearest-neighbor cosine term.
The contrastive denominator sums only over the other tuples of the batch
(the positive pair is excluded); a flag exposes the variant that includes it.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.2

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")


@dataclass
class LossBreakdown:
    mim: float
    mde: float
    msp: float
    total: float
    alpha: float
    beta: float
    total_node: T.Tensor = None  # differentiable scalar; None for detached evaluation


def _check_rows_nondegenerate(y, name):
    norms = np.linalg.norm(y.data, axis=1)
    if np.any(norms <= T.NORM_EPS):
        raise DegenerateInputError(f"{name}: zero-norm row in batch")


def _pair_similarity_matrix(z_src, z_tgt):
    """T x T matrix of cosine similarities between rows of the two batches."""
    return T.matmul(T.rows_l2_normalize(z_src), T.transpose(T.rows_l2_normalize(z_tgt)))


def nt_xent_term(i, z_src, z_tgt, tau, include_positive_in_denominator=False):
    """Contrastive term for anchor i of the source batch against the target batch.

    -log( exp(S_ii / tau) / sum_{q != i} exp(S_iq / tau) ), via a stable
    log-sum-exp. With the flag set, q = i is kept in the denominator
    (the standard NT-Xent form).
    """
    z_src = z_src if isinstance(z_src, T.Tensor) else T.Tensor(z_src)
    z_tgt = z_tgt if isinstance(z_tgt, T.Tensor) else T.Tensor(z_tgt)
    n = z_src.data.shape[0]
    if n < 2:
        raise ContractError("nt_xent_term: need batch size >= 2")
    if not 0 <= i < n:
        raise ContractError(f"nt_xent_term: anchor index {i} out of range")
    _check_rows_nondegenerate(z_src, "nt_xent_term")
    _check_rows_nondegenerate(z_tgt, "nt_xent_term")
    sims = T.scale(_pair_similarity_matrix(z_src, z_tgt), 1.0 / tau)
    row = T.gather_rows(sims, [i])
    mask = np.ones((1, n), dtype=bool)
    if not include_positive_in_denominator:
        mask[0, i] = False
    lse = T.masked_row_logsumexp(row, mask)
    pos = T.gather_rows(T.diag_part(sims), [i])
    return T.tsum(T.sub(lse, pos))


def loss_mim(z_j, z_k, tau, include_positive_in_denominator=False):
    """Symmetric contrastive loss over both retrieval directions, averaged over tuples."""
    z_j = z_j if isinstance(z_j, T.Tensor) else T.Tensor(z_j)
    z_k = z_k if isinstance(z_k, T.Tensor) else T.Tensor(z_k)
    if z_j.data.shape != z_k.data.shape:
        raise ContractError("loss_mim: batch shapes differ")
    n = z_j.data.shape[0]
    if n < 2:
        raise ContractError("loss_mim: need batch size >= 2")
    _check_rows_nondegenerate(z_j, "loss_mim")
    _check_rows_nondegenerate(z_k, "loss_mim")
    sims = T.scale(_pair_similarity_matrix(z_j, z_k), 1.0 / tau)
    mask = np.ones((n, n), dtype=bool)
    if not include_positive_in_denominator:
        np.fill_diagonal(mask, False)
    # direction j->k reads rows of sims; k->j reads rows of its transpose
    lse_jk = T.masked_row_logsumexp(sims, mask)
    lse_kj = T.masked_row_logsumexp(T.transpose(sims), mask)
    pos = T.tsum(T.diag_part(sims))
    return T.scale(T.sub(T.add(T.tsum(lse_jk), T.tsum(lse_kj)), T.scale(pos, 2.0)),
                   1.0 / (2 * n))


def loss_mde(y_j, y_k):
    """Negative mean softplus of aligned-pair cosine similarity.

    Bounded in [-ln(1+e), -ln(1+1/e)]; minimized when every aligned pair is
    perfectly aligned (cosine 1).
    """
    y_j = y_j if isinstance(y_j, T.Tensor) else T.Tensor(y_j)
    y_k = y_k if isinstance(y_k, T.Tensor) else T.Tensor(y_k)
    if y_j.data.shape != y_k.data.shape:
        raise ContractError("loss_mde: batch shapes differ")
    _check_rows_nondegenerate(y_j, "loss_mde")
    _check_rows_nondegenerate(y_k, "loss_mde")
    n = y_j.data.shape[0]
    s = T.rowwise_cosine(y_j, y_k)
    return T.scale(T.div_scalar(T.tsum(T.softplus(s)), n), -1.0)


def _nearest_neighbor_indices(y_data):
    """Index of each row's within-batch Euclidean nearest neighbor (self excluded).

    Ties break to the lowest index via argmin. The selection is a constant of
    the batch: no gradient flows through the choice itself.
    """
    sq = np.sum(y_data * y_data, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (y_data @ y_data.T)
    np.fill_diagonal(d2, np.inf)
    return np.argmin(d2, axis=1)


def loss_msp(y_j, y_k):
    """Negative mean cosine similarity of each row to its nearest within-modality neighbor."""
    y_j = y_j if isinstance(y_j, T.Tensor) else T.Tensor(y_j)
    y_k = y_k if isinstance(y_k, T.Tensor) else T.Tensor(y_k)
    if y_j.data.shape != y_k.data.shape:
        raise ContractError("loss_msp: batch shapes differ")
    n = y_j.data.shape[0]
    if n < 2:
        raise ContractError("loss_msp: need batch size >= 2")
    _check_rows_nondegenerate(y_j, "loss_msp")
    _check_rows_nondegenerate(y_k, "loss_msp")
    total = None
    for y in (y_j, y_k):
        idx = _nearest_neighbor_indices(y.data)
        s = T.rowwise_cosine(y, T.gather_rows(y, idx))
        part = T.tsum(s)
        total = part if total is None else T.add(total, part)
    return T.scale(T.div_scalar(total, 2 * n), -1.0)


def msp_neighbor_indices(y_data):
    """Expose the neighbor selection for oracle tests."""
    return _nearest_neighbor_indices(np.asarray(y_data, dtype=np.float64))


def combined_loss(z_j, z_k, y_j, y_k, weights: LossWeights,
                  include_positive_in_denominator=False) -> LossBreakdown:
    """Weighted sum of the three losses, differentiable end to end."""
    sizes = {np.asarray(a.data if isinstance(a, T.Tensor) else a).shape[0]
             for a in (z_j, z_k, y_j, y_k)}
    if len(sizes) != 1:
        raise ContractError(f"combined_loss: inconsistent batch sizes {sorted(sizes)}")
    mim = loss_mim(z_j, z_k, weights.tau,
                   include_positive_in_denominator=include_positive_in_denominator)
    mde = loss_mde(y_j, y_k)
    msp = loss_msp(y_j, y_k)
    total = T.add(mim, T.add(T.scale(mde, weights.alpha), T.scale(msp, weights.beta)))
    return LossBreakdown(mim=mim.item(), mde=mde.item(), msp=msp.item(),
                         total=total.item(), alpha=weights.alpha, beta=weights.beta,
                         total_node=total)


def schedule_weight(epoch, total_epochs, initial):
    """Geometric interpolation from the initial weight at epoch 0 to 1 at the last epoch.

    w(e) = initial^((E-1-e)/(E-1)); exactly `initial` at e=0 and exactly 1 at
    e=E-1. A single-epoch run uses weight 1.
    """
    if total_epochs < 1:
        raise ContractError("schedule_weight: total_epochs must be >= 1")
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"schedule_weight: epoch {epoch} outside [0, {total_epochs})")
    if not 0 < initial <= 1:
        raise ContractError("schedule_weight: initial weight must be in (0, 1]")
    if total_epochs == 1:
        return 1.0
    if epoch == 0:
        return float(initial)
    if epoch == total_epochs - 1:
        return 1.0
    exponent = (total_epochs - 1 - epoch) / (total_epochs - 1)
    return float(initial ** exponent)
