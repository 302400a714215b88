"""Exact linear-chain CRF over emission scores.

All dynamic programs run in log space with max-shifted logsumexp, which
keeps every per-position update renormalized and stable for sequences up
to a few hundred tokens.  Emissions are an (n, C) array z where
z[t, c] scores tag c at token t; a path y has score

    s(z, y) = start[y_0] + sum_t z[t, y_t] + sum_t trans[y_t, y_{t+1}] + end[y_{n-1}]

The module exposes the path score, the log partition, the NLL loss with
exact gradients (expected minus observed feature counts), posterior token
marginals from forward-backward, a VJP through those marginals (used when
a loss consumes the marginals themselves), and Viterbi decoding with a
deterministic lowest-id tie-break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CrfParams",
    "NumericalError",
    "sequence_score",
    "log_partition",
    "forward_backward",
    "token_marginals",
    "nll_loss_and_grad",
    "marginals_vjp",
    "viterbi_decode",
]


class NumericalError(FloatingPointError):
    """A CRF computation produced a non-finite intermediate."""


@dataclass
class CrfParams:
    """Tag projection and chain scores.

    projection maps 2d-dimensional token representations to C tag scores;
    transitions[i, j] scores tag i followed by tag j; start/end score the
    first and last tag of a path.
    """

    projection: np.ndarray  # (C, 2d)
    transitions: np.ndarray  # (C, C)
    start: np.ndarray  # (C,)
    end: np.ndarray  # (C,)

    @property
    def n_tags(self) -> int:
        return self.transitions.shape[0]

    def validate(self) -> None:
        C = self.n_tags
        if self.projection.shape[0] != C or self.start.shape != (C,) or self.end.shape != (C,):
            raise ValueError("CRF parameter shapes disagree on tag count")
        for name in ("projection", "transitions", "start", "end"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"non-finite CRF parameter: {name}")


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def sequence_score(emissions: np.ndarray, tags: np.ndarray, params: CrfParams) -> float:
    """Unnormalized path score s(z, y)."""
    tags = np.asarray(tags)
    n = emissions.shape[0]
    if tags.shape[0] != n:
        raise ValueError(f"tag length {tags.shape[0]} != emission length {n}")
    score = params.start[tags[0]] + params.end[tags[-1]]
    score += emissions[np.arange(n), tags].sum()
    if n > 1:
        score += params.transitions[tags[:-1], tags[1:]].sum()
    return float(score)


def _forward(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    n, C = emissions.shape
    alpha = np.empty((n, C))
    alpha[0] = params.start + emissions[0]
    for t in range(1, n):
        # alpha[t-1][i] + trans[i][j], reduced over source i
        alpha[t] = emissions[t] + _logsumexp(alpha[t - 1][:, None] + params.transitions, axis=0)
    return alpha


def _backward(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    n, C = emissions.shape
    beta = np.empty((n, C))
    beta[n - 1] = params.end
    for t in range(n - 2, -1, -1):
        beta[t] = _logsumexp(params.transitions + (emissions[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def log_partition(emissions: np.ndarray, params: CrfParams) -> float:
    """log sum over all C^n paths of exp(path score), by the forward pass."""
    alpha = _forward(emissions, params)
    return float(_logsumexp(alpha[-1] + params.end, axis=0))


def forward_backward(emissions: np.ndarray, params: CrfParams):
    """Return (alpha, beta, log_z).  alpha[t]+beta[t]-log_z are the log
    posterior marginals."""
    alpha = _forward(emissions, params)
    beta = _backward(emissions, params)
    log_z = float(_logsumexp(alpha[-1] + params.end, axis=0))
    return alpha, beta, log_z


def token_marginals(emissions: np.ndarray, params: CrfParams, fb=None) -> np.ndarray:
    """Posterior P(y_t = c | z) for every token, rows renormalized to kill
    residual float drift."""
    alpha, beta, log_z = fb if fb is not None else forward_backward(emissions, params)
    marginals = np.exp(alpha + beta - log_z)
    marginals /= marginals.sum(axis=1, keepdims=True)
    return marginals


def _pairwise_marginals(emissions, params, alpha, beta, log_z):
    """Expected transition counts: sum_t P(y_t=i, y_{t+1}=j | z)."""
    n, C = emissions.shape
    counts = np.zeros((C, C))
    for t in range(n - 1):
        counts += np.exp(
            alpha[t][:, None]
            + params.transitions
            + (emissions[t + 1] + beta[t + 1])[None, :]
            - log_z
        )
    return counts


def nll_loss_and_grad(emissions: np.ndarray, tags: np.ndarray, params: CrfParams, fb=None):
    """Negative log-likelihood log_partition - s(z, y) and its exact
    gradients (expected feature counts minus observed ones).

    Returns (loss, d_emissions, d_trans, d_start, d_end).  Raises
    NumericalError if any intermediate is non-finite.
    """
    tags = np.asarray(tags)
    n, C = emissions.shape
    alpha, beta, log_z = fb if fb is not None else forward_backward(emissions, params)
    gold = sequence_score(emissions, tags, params)
    loss = log_z - gold
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite CRF loss (log_z={log_z}, gold={gold}, n={n}, C={C})"
        )

    d_emissions = np.exp(alpha + beta - log_z)
    d_emissions[np.arange(n), tags] -= 1.0

    d_trans = _pairwise_marginals(emissions, params, alpha, beta, log_z)
    if n > 1:
        np.subtract.at(d_trans, (tags[:-1], tags[1:]), 1.0)

    d_start = np.exp(alpha[0] + beta[0] - log_z)
    d_start[tags[0]] -= 1.0
    d_end = np.exp(alpha[-1] + beta[-1] - log_z)
    d_end[tags[-1]] -= 1.0
    return loss, d_emissions, d_trans, d_start, d_end


def marginals_vjp(
    emissions: np.ndarray,
    params: CrfParams,
    grad_marginals: np.ndarray,
    fb=None,
):
    """Backpropagate a gradient w.r.t. the token marginals to the emissions
    and chain parameters.

    The marginals are m[t,c] = exp(alpha[t,c] + beta[t,c] - log_z).  Reverse
    accumulation runs the alpha recurrence head-to-tail and the beta
    recurrence tail-to-head, reusing the softmax weights of each logsumexp.
    Returns (d_emissions, d_trans, d_start, d_end).
    """
    n, C = emissions.shape
    alpha, beta, log_z = fb if fb is not None else forward_backward(emissions, params)
    m = np.exp(alpha + beta - log_z)

    g_m = grad_marginals * m  # d/d(alpha+beta-log_z) per cell
    d_alpha = g_m.copy()
    d_beta = g_m.copy()
    d_log_z = -float(g_m.sum())

    d_emissions = np.zeros_like(emissions)
    d_trans = np.zeros_like(params.transitions)
    d_start = np.zeros(C)
    d_end = np.zeros(C)

    # log_z = logsumexp(alpha[-1] + end); its softmax weights are the final
    # marginals m[-1].
    d_alpha[n - 1] += d_log_z * m[n - 1]
    d_end += d_log_z * m[n - 1]

    # Reverse of alpha[t] = z[t] + logsumexp_i(alpha[t-1,i] + trans[i,:]).
    for t in range(n - 1, 0, -1):
        d_emissions[t] += d_alpha[t]
        w = np.exp(alpha[t - 1][:, None] + params.transitions - (alpha[t] - emissions[t])[None, :])
        weighted = w * d_alpha[t][None, :]
        d_trans += weighted
        d_alpha[t - 1] += weighted.sum(axis=1)
    d_emissions[0] += d_alpha[0]
    d_start += d_alpha[0]

    # Reverse of beta[t] = logsumexp_j(trans[:,j] + z[t+1,j] + beta[t+1,j]).
    for t in range(n - 1):
        v = np.exp(
            params.transitions + (emissions[t + 1] + beta[t + 1])[None, :] - beta[t][:, None]
        )
        weighted = v * d_beta[t][:, None]
        d_trans += weighted
        col = weighted.sum(axis=0)
        d_emissions[t + 1] += col
        d_beta[t + 1] += col
    d_end += d_beta[n - 1]

    return d_emissions, d_trans, d_start, d_end


def viterbi_decode(emissions: np.ndarray, params: CrfParams):
    """Highest-scoring path and its score.  Ties break toward the lowest tag
    id at every backtrack step (np.argmax returns the first maximum)."""
    n, C = emissions.shape
    score = params.start + emissions[0]
    backptr = np.zeros((n, C), dtype=np.int64)
    for t in range(1, n):
        candidates = score[:, None] + params.transitions
        backptr[t] = np.argmax(candidates, axis=0)
        score = emissions[t] + np.max(candidates, axis=0)
    score = score + params.end
    best_last = int(np.argmax(score))
    best_score = float(score[best_last])
    path = [best_last]
    for t in range(n - 1, 0, -1):
        path.append(int(backptr[t, path[-1]]))
    path.reverse()
    return path, best_score
