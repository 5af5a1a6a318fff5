"""Scoring back-ends and verification metrics.

Cosine similarity, a two-covariance PLDA trained by EM, adaptive
symmetric score normalization with a top-n cohort, and EER / minDCF.

The ROC bookkeeping for the metrics is done in exact integer arithmetic
(error counts, not rates) so the sweep is bit-reproducible and matches
brute-force threshold enumeration exactly.
"""

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import linalg as sla

SIGMA_FLOOR = 1e-8


class PldaError(Exception):
    pass


@dataclass(frozen=True)
class Trial:
    enroll_key: str
    test_key: str
    label: str = "unknown"  # target | nontarget | unknown


@dataclass
class PldaModel:
    """Two-covariance model: x = mu + y + eps with y ~ N(0, sigma_b) per
    speaker and eps ~ N(0, sigma_w) per utterance."""

    mu: np.ndarray
    sigma_b: np.ndarray
    sigma_w: np.ndarray


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    n1 = np.linalg.norm(e1)
    n2 = np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cannot cosine-score a zero vector")
    return float(np.dot(e1, e2) / (n1 * n2))


def length_norm(mat: np.ndarray) -> np.ndarray:
    """Project rows onto the unit sphere."""
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot length-normalize a zero vector")
    return mat / norms


def enroll_average(embeddings) -> np.ndarray:
    """Mean of a speaker's enrollment embeddings, length-normalized."""
    mean = np.mean(np.asarray(embeddings, dtype=np.float64), axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ValueError("enrollment sessions cancel out; zero mean")
    return mean / norm


# ---------------------------------------------------------------------------
# PLDA


def _chol_inverse(mat, what):
    try:
        chol = sla.cho_factor(mat, lower=True)
    except np.linalg.LinAlgError as e:
        raise PldaError(
            f"{what} covariance is singular; reduce embedding dimensionality "
            f"or enable ridge regularization"
        ) from e
    inv = sla.cho_solve(chol, np.eye(mat.shape[0]))
    logdet = 2.0 * np.log(np.diag(chol[0])).sum()
    return inv, logdet


def _log_likelihood(groups, mu, sigma_b, sigma_w):
    """Total marginal log-likelihood of all speakers' utterances."""
    dim = mu.shape[0]
    inv_w, logdet_w = _chol_inverse(sigma_w, "within-speaker")
    cache = {}
    total = 0.0
    for x in groups:
        n = x.shape[0]
        if n not in cache:
            t_n = sigma_w + n * sigma_b
            cache[n] = _chol_inverse(t_n, "speaker-marginal")
        inv_t, logdet_t = cache[n]
        z = x - mu
        zbar = z.mean(axis=0)
        quad = (
            n * zbar @ inv_t @ zbar
            + np.einsum("ij,jk,ik->", z, inv_w, z)
            - n * zbar @ inv_w @ zbar
        )
        total += -0.5 * (
            n * dim * math.log(2.0 * math.pi)
            + logdet_t + (n - 1) * logdet_w + quad
        )
    return float(total)


def _as_groups(embeddings_by_speaker):
    if isinstance(embeddings_by_speaker, dict):
        groups = list(embeddings_by_speaker.values())
    else:
        groups = list(embeddings_by_speaker)
    return [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in groups]


def plda_train(embeddings_by_speaker, iters: int = 10,
               do_length_norm: bool = True, reg: float = 0.0):
    """EM for the two-covariance model.

    ``embeddings_by_speaker`` maps speakers to (n_utts x D) arrays (a dict
    or a plain list of arrays). Returns (PldaModel, log-likelihood trace);
    the trace holds the likelihood before each update plus one final
    value, and is non-decreasing.
    """
    groups = _as_groups(embeddings_by_speaker)
    if len(groups) < 2:
        raise PldaError("need at least two speakers")
    if any(g.shape[0] < 1 for g in groups):
        raise PldaError("every speaker needs at least one utterance")
    dim = groups[0].shape[1]
    total_utts = sum(g.shape[0] for g in groups)
    if dim > total_utts:
        raise PldaError(f"dimension {dim} exceeds utterance count {total_utts}")
    if do_length_norm:
        groups = [length_norm(g) for g in groups]

    all_x = np.concatenate(groups, axis=0)
    mu = all_x.mean(axis=0)
    cov = np.cov(all_x.T, bias=True).reshape(dim, dim)
    # split the total covariance evenly; EM reshuffles mass from here
    sigma_b = cov / 2.0 + 1e-6 * np.eye(dim)
    sigma_w = cov / 2.0 + 1e-6 * np.eye(dim) + reg * np.eye(dim)

    trace = []
    n_speakers = len(groups)
    for _ in range(iters):
        trace.append(_log_likelihood(groups, mu, sigma_b, sigma_w))
        inv_b, _ = _chol_inverse(sigma_b, "between-speaker")
        inv_w, _ = _chol_inverse(sigma_w, "within-speaker")
        post_cov = {}
        mean_acc = np.zeros(dim)
        b_acc = np.zeros((dim, dim))
        w_acc = np.zeros((dim, dim))
        means = []
        for x in groups:
            n = x.shape[0]
            if n not in post_cov:
                post_cov[n] = np.linalg.inv(inv_b + n * inv_w)
            cov_s = post_cov[n]
            m_s = cov_s @ (inv_b @ mu + inv_w @ (n * x.mean(axis=0)))
            means.append((m_s, cov_s, x))
            mean_acc += m_s
        new_mu = mean_acc / n_speakers
        for m_s, cov_s, x in means:
            d = m_s - new_mu
            b_acc += cov_s + np.outer(d, d)
            resid = x - m_s
            w_acc += x.shape[0] * cov_s + resid.T @ resid
        mu = new_mu
        sigma_b = b_acc / n_speakers
        sigma_w = w_acc / total_utts + reg * np.eye(dim)
    trace.append(_log_likelihood(groups, mu, sigma_b, sigma_w))
    return PldaModel(mu=mu, sigma_b=sigma_b, sigma_w=sigma_w), trace


def plda_score_many(model: PldaModel, enroll: np.ndarray, test: np.ndarray,
                    do_length_norm: bool = True) -> np.ndarray:
    """Log-likelihood ratios for aligned rows of enroll/test embeddings.

    Same-speaker and different-speaker hypotheses share the marginal
    N(mu, sigma_b + sigma_w); the same-speaker joint couples the pair
    through sigma_b.
    """
    enroll = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    if do_length_norm:
        enroll = length_norm(enroll)
        test = length_norm(test)
    tot = model.sigma_b + model.sigma_w
    inv_sum, logdet_sum = _chol_inverse(tot + model.sigma_b, "same-speaker sum")
    inv_w, logdet_w = _chol_inverse(model.sigma_w, "within-speaker")
    inv_t, logdet_t = _chol_inverse(tot, "total")
    a = enroll - model.mu
    b = test - model.mu
    s = a + b
    d = a - b
    quad = (
        0.5 * np.einsum("ij,jk,ik->i", s, inv_sum, s)
        + 0.5 * np.einsum("ij,jk,ik->i", d, inv_w, d)
        - np.einsum("ij,jk,ik->i", a, inv_t, a)
        - np.einsum("ij,jk,ik->i", b, inv_t, b)
    )
    logdets = logdet_sum + logdet_w - 2.0 * logdet_t
    return -0.5 * (quad + logdets)


def plda_score(model: PldaModel, enroll: np.ndarray, test: np.ndarray,
               do_length_norm: bool = True) -> float:
    return float(plda_score_many(model, enroll, test, do_length_norm)[0])


# ---------------------------------------------------------------------------
# score normalization


def _cohort_stats(scores: np.ndarray, top_n: int, side: str):
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if top_n > len(scores):
        raise ValueError(
            f"top_n {top_n} exceeds {side} cohort size {len(scores)}"
        )
    top = np.sort(scores)[-top_n:]
    mean = float(top.mean())
    std = float(top.std())
    if std < SIGMA_FLOOR:
        warnings.warn(
            f"degenerate {side} cohort: score std {std:.3g} floored to "
            f"{SIGMA_FLOOR:g}"
        )
        std = SIGMA_FLOOR
    return mean, std


def asnorm(raw, enroll_cohort_scores: dict, test_cohort_scores: dict,
           top_n: int):
    """Adaptive symmetric s-norm.

    Each trial score is standardized against the top-n cohort scores of
    its enroll side and its test side, then the two halves are averaged.
    Cohort scores must come from the same scorer as the raw scores.
    """
    stats_e, stats_t = {}, {}
    out = []
    for trial, score in raw:
        if trial.enroll_key not in stats_e:
            stats_e[trial.enroll_key] = _cohort_stats(
                np.asarray(enroll_cohort_scores[trial.enroll_key], dtype=np.float64),
                top_n, "enroll")
        if trial.test_key not in stats_t:
            stats_t[trial.test_key] = _cohort_stats(
                np.asarray(test_cohort_scores[trial.test_key], dtype=np.float64),
                top_n, "test")
        mu_e, sd_e = stats_e[trial.enroll_key]
        mu_t, sd_t = stats_t[trial.test_key]
        out.append((trial, 0.5 * ((score - mu_e) / sd_e + (score - mu_t) / sd_t)))
    return out


# ---------------------------------------------------------------------------
# metrics


def _split_scores(scored):
    tar, non = [], []
    for trial, score in scored:
        if trial.label == "target":
            tar.append(score)
        elif trial.label == "nontarget":
            non.append(score)
    return np.asarray(tar, dtype=np.float64), np.asarray(non, dtype=np.float64)


def roc_vertices(target_scores, nontarget_scores):
    """All distinct (fa_count, miss_count, threshold) operating points.

    Thresholds are midpoints between adjacent distinct scores plus the
    two infinities; a trial is accepted when its score >= threshold.
    """
    tar = np.asarray(target_scores, dtype=np.float64)
    non = np.asarray(nontarget_scores, dtype=np.float64)
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("need at least one target and one nontarget trial")
    scores = np.concatenate([tar, non])
    is_tar = np.concatenate([np.ones(len(tar), bool), np.zeros(len(non), bool)])
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    t_sorted = is_tar[order]
    cum_tar = np.concatenate([[0], np.cumsum(t_sorted)])
    cum_non = np.concatenate([[0], np.cumsum(~t_sorted)])
    n = len(scores)
    cuts = np.concatenate([[0], np.flatnonzero(np.diff(s_sorted) != 0) + 1, [n]])
    vertices = []
    for k in cuts:
        if k == 0:
            thr = math.inf
        elif k == n:
            thr = -math.inf
        else:
            thr = 0.5 * (s_sorted[k - 1] + s_sorted[k])
        vertices.append((int(cum_non[k]), int(len(tar) - cum_tar[k]), thr))
    return vertices, len(tar), len(non)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def roc_hull(vertices):
    """Lower-left convex hull of the operating points (integer geometry).

    Collinear interior points are dropped, so the hull is the minimal set
    of strictly convex corners of the optimal error frontier.
    """
    by_fa = {}
    for fa, miss, thr in vertices:  # later cuts have smaller miss
        by_fa[fa] = (fa, miss, thr)
    points = [by_fa[fa] for fa in sorted(by_fa)]
    hull = []
    for p in points:
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    return hull


def eer_from_scores(target_scores, nontarget_scores):
    """Equal error rate: the miss = fa crossing of the ROC convex hull,
    linearly interpolated between adjacent hull vertices.

    Computed in exact rational arithmetic from error counts; returns
    (rate, threshold).
    """
    vertices, n_tar, n_non = roc_vertices(target_scores, nontarget_scores)
    hull = roc_hull(vertices)
    diffs = [miss * n_non - fa * n_tar for fa, miss, _ in hull]
    if diffs[0] <= 0:
        fa, miss, thr = hull[0]
        return float(Fraction(miss, n_tar)), thr
    for i in range(len(hull) - 1):
        d1, d2 = diffs[i], diffs[i + 1]
        if d1 > 0 >= d2:
            fa1, m1, t1 = hull[i]
            fa2, m2, t2 = hull[i + 1]
            alpha = Fraction(d1, d1 - d2)
            eer = (Fraction(m1) + alpha * (m2 - m1)) / n_tar
            if math.isinf(t1):
                thr = t2
            elif math.isinf(t2):
                thr = t1
            else:
                thr = t1 + float(alpha) * (t2 - t1)
            return float(eer), thr
    # all hull points sit above the diagonal: cross at the last vertex
    fa, miss, thr = hull[-1]
    return float(Fraction(miss, n_tar)), thr


def eer(scored):
    """EER over a scored trial list; unknown-label trials are ignored."""
    tar, non = _split_scores(scored)
    return eer_from_scores(tar, non)


def min_dcf_from_scores(target_scores, nontarget_scores,
                        p_target: float = 0.01, c_miss: float = 1.0,
                        c_fa: float = 1.0):
    """Minimum normalized detection cost over all candidate thresholds."""
    vertices, n_tar, n_non = roc_vertices(target_scores, nontarget_scores)
    best_cost, best_thr = math.inf, math.inf
    for fa, miss, thr in vertices:
        cost = (c_miss * p_target * miss / n_tar
                + c_fa * (1.0 - p_target) * fa / n_non)
        if cost < best_cost:
            best_cost, best_thr = cost, thr
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return best_cost / norm, best_thr


def min_dcf(scored, p_target: float = 0.01, c_miss: float = 1.0,
            c_fa: float = 1.0):
    tar, non = _split_scores(scored)
    return min_dcf_from_scores(tar, non, p_target, c_miss, c_fa)


# ---------------------------------------------------------------------------
# trials and scores files


def read_trials(path):
    """`enroll test label` lines; label is target/nontarget/unknown."""
    trials = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget", "unknown"):
                raise ValueError(
                    f"{path}:{lineno}: expected 'enroll test "
                    f"target|nontarget|unknown'"
                )
            trials.append(Trial(parts[0], parts[1], parts[2]))
    return trials


def write_scores(scored, fileobj):
    for trial, score in scored:
        fileobj.write(f"{trial.enroll_key} {trial.test_key} {score:.6f}\n")


def read_scores(path):
    """`enroll test score` lines -> list of (enroll, test, score)."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'enroll test score'")
            out.append((parts[0], parts[1], float(parts[2])))
    return out


def group_scores_by_first_key(rows) -> dict:
    """Collect a scores file into first-key -> score vector (cohort use)."""
    grouped: dict = {}
    for first, _, score in rows:
        grouped.setdefault(first, []).append(score)
    return {k: np.asarray(v, dtype=np.float64) for k, v in grouped.items()}
