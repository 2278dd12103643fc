"""CTC loss with exact gradients, greedy decoding, and edit-distance WER.

The forward-backward runs over the blank-interleaved label sequence in
log space (log-sum-exp), so no per-frame rescaling is needed. Blank is
reserved as id 0.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NoAlignmentError, UndefinedReferenceError

BLANK = 0

NEG_INF = -np.inf


@dataclass
class CtcResult:
    loss: float
    grad: np.ndarray  # (T, V+1) w.r.t. pre-softmax logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def min_frames(target) -> int:
    """Shortest logit sequence that admits an alignment for target."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(logits: np.ndarray, target) -> CtcResult:
    """Negative log likelihood of target under CTC plus its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    T, n_classes = logits.shape
    target = list(target)
    L = len(target)
    if L == 0:
        raise ConfigError("empty CTC target")
    if any(t < 1 or t >= n_classes for t in target):
        raise ConfigError("target ids must lie in [1, |V|]")
    if T < min_frames(target):
        raise NoAlignmentError(
            f"{T} frames cannot align target of effective length {min_frames(target)}"
        )

    ext = [BLANK]
    for t in target:
        ext.extend([t, BLANK])
    S = len(ext)
    lp = _log_softmax(logits)

    # forward
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, BLANK]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            terms = [alpha[t - 1, s]]
            if s >= 1:
                terms.append(alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2]:
                terms.append(alpha[t - 1, s - 2])
            m = max(terms)
            if m > NEG_INF:
                acc = m + np.log(sum(np.exp(x - m) for x in terms))
                alpha[t, s] = acc + lp[t, ext[s]]

    ends = [alpha[T - 1, S - 1]]
    if S > 1:
        ends.append(alpha[T - 1, S - 2])
    m = max(ends)
    log_p = m + np.log(sum(np.exp(x - m) for x in ends))
    loss = -log_p

    # backward: beta[t, s] = log P(emit ext[s+1:] over frames t+1..T-1)
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            terms = [beta[t + 1, s] + lp[t + 1, ext[s]]]
            if s + 1 < S:
                terms.append(beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != BLANK and ext[s + 2] != ext[s]:
                terms.append(beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
            m = max(terms)
            if m > NEG_INF:
                beta[t, s] = m + np.log(sum(np.exp(x - m) for x in terms))

    # state occupancy gamma and gradient softmax - gamma
    log_gamma = alpha + beta - log_p
    grad = np.exp(lp)
    for s in range(S):
        grad[:, ext[s]] -= np.exp(log_gamma[:, s])
    return CtcResult(loss=float(loss), grad=grad)


def greedy_decode(logits: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    path = np.asarray(logits).argmax(axis=1)
    out = []
    prev = None
    for p in path:
        if p != prev and p != BLANK:
            out.append(int(p))
        prev = p
    return out


@dataclass
class WerResult:
    wer: float
    substitutions: int
    deletions: int
    insertions: int


def edit_distance_wer(ref, hyp) -> WerResult:
    """Levenshtein alignment with unit costs; wer = (S+D+I)/len(ref)."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise UndefinedReferenceError("WER undefined for empty reference")
    n, m = len(ref), len(hyp)
    # cost plus backpointer: 0 match/sub, 1 deletion, 2 insertion
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    # backtrace to count error types
    i, j = n, m
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerResult(
        wer=(subs + dels + ins) / n,
        substitutions=int(subs),
        deletions=int(dels),
        insertions=int(ins),
    )
