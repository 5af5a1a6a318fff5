"""Speaker diarization on top of extracted embeddings.

Speech regions are tiled with sliding windows, each window is embedded,
a pruned cosine affinity matrix is clustered spectrally (eigengap picks
the speaker count when unknown), and the labeled windows are merged into
contiguous turns. Scoring implements DER with the standard
miss / false-alarm / speaker-confusion decomposition under an optimal
(Hungarian) speaker mapping.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

_ADJACENCY_EPS = 1e-9


class RttmError(Exception):
    pass


@dataclass(frozen=True)
class SpeechSegment:
    recording_id: str
    start: float
    end: float


@dataclass(frozen=True)
class Turn:
    recording_id: str
    start: float
    end: float
    speaker: str


@dataclass(frozen=True)
class DerReport:
    miss: float
    fa: float
    sc: float
    der: float


# ---------------------------------------------------------------------------
# RTTM and SAD files


def read_rttm(path):
    """Parse SPEAKER lines of an RTTM file into turns."""
    turns = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "SPEAKER":
                continue  # SPKR-INFO and friends carry no time spans
            if len(parts) != 10:
                raise RttmError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            try:
                start = float(parts[3])
                dur = float(parts[4])
            except ValueError as e:
                raise RttmError(f"{path}:{lineno}: bad start/duration") from e
            if dur < 0:
                raise RttmError(f"{path}:{lineno}: negative duration")
            turns.append(Turn(parts[1], start, start + dur, parts[7]))
    return turns


def write_rttm(turns, fileobj):
    for t in turns:
        fileobj.write(
            f"SPEAKER {t.recording_id} 1 {t.start:.3f} {t.end - t.start:.3f} "
            f"<NA> <NA> {t.speaker} <NA> <NA>\n"
        )


def read_sad(path):
    """`recording start end` lines, seconds."""
    segments = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise RttmError(f"{path}:{lineno}: expected 'rec start end'")
            start, end = float(parts[1]), float(parts[2])
            if not 0 <= start < end:
                raise RttmError(f"{path}:{lineno}: need 0 <= start < end")
            segments.append(SpeechSegment(parts[0], start, end))
    return segments


def turns_to_sad(turns):
    """Merge reference turns into speech regions (oracle-SAD mode)."""
    by_rec: dict = {}
    for t in turns:
        by_rec.setdefault(t.recording_id, []).append((t.start, t.end))
    segments = []
    for rec in sorted(by_rec):
        spans = sorted(by_rec[rec])
        cur_s, cur_e = spans[0]
        for s, e in spans[1:]:
            if s <= cur_e + _ADJACENCY_EPS:
                cur_e = max(cur_e, e)
            else:
                segments.append(SpeechSegment(rec, cur_s, cur_e))
                cur_s, cur_e = s, e
        segments.append(SpeechSegment(rec, cur_s, cur_e))
    return segments


# ---------------------------------------------------------------------------
# segmentation and clustering


def subsegment(segments, window: float = 1.5, shift: float = 0.75,
               min_len: float = 0.25):
    """Tile speech segments with sliding windows.

    Windows advance by ``shift`` until one reaches the segment end; that
    final (possibly partial) window is kept only if at least ``min_len``
    long. Any segment at least one window long is fully covered.
    """
    windows = []
    for seg in segments:
        k = 0
        while True:
            start = seg.start + k * shift
            end = start + window
            if end >= seg.end - _ADJACENCY_EPS:
                if seg.end - start >= min_len:
                    windows.append(SpeechSegment(seg.recording_id, start, seg.end))
                break
            windows.append(SpeechSegment(seg.recording_id, start, end))
            k += 1
    return windows


def affinity(embeddings: np.ndarray, prune_fraction: float = 0.3) -> np.ndarray:
    """Pairwise cosine similarity with row-wise top-p pruning, symmetrized
    by the elementwise max, unit diagonal."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = emb.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding in affinity input")
    unit = emb / norms
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    keep = max(1, math.ceil(prune_fraction * n))
    pruned = sim.copy()
    for i in range(n):
        row = sim[i]
        threshold = np.sort(row)[-keep]
        pruned[i] = np.where(row >= threshold, row, 0.0)
    out = np.maximum(pruned, pruned.T)
    np.fill_diagonal(out, 1.0)
    return out


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    dist2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total <= 0.0:
            centers[j] = points[int(rng.integers(n))]
            continue
        probs = dist2 / total
        centers[j] = points[int(rng.choice(n, p=probs))]
        dist2 = np.minimum(dist2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _kmeans(points, k, rng, restarts: int = 10, max_iter: int = 100):
    """Lloyd's k-means with k-means++ seeding and restarts; deterministic
    for a fixed generator state."""
    n = points.shape[0]
    best_labels, best_inertia = None, math.inf
    for _ in range(restarts):
        centers = _kmeans_pp_init(points, k, rng)
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(max_iter):
            dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = dists.argmin(axis=1)
            for j in range(k):
                mask = new_labels == j
                if mask.any():
                    centers[j] = points[mask].mean(axis=0)
                else:  # re-seed an empty cluster at the farthest point
                    far = dists.min(axis=1).argmax()
                    centers[j] = points[far]
                    new_labels[far] = j
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        inertia = float(((points - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def spectral_cluster(aff: np.ndarray, num_speakers: int | None = None,
                     max_speakers: int = 8, seed: int = 0) -> np.ndarray:
    """Cluster via the unnormalized graph Laplacian.

    When the speaker count is unknown, the largest eigengap over
    [1, max_speakers] picks it. Rows projected on the first k eigenvectors
    are k-means clustered (k-means++ seeding, fixed seed, 10 restarts).
    """
    aff = np.asarray(aff, dtype=np.float64)
    n = aff.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if np.allclose(aff, 0.0):
        return np.arange(n, dtype=np.int64) % max(1, min(n, max_speakers))
    laplacian = np.diag(aff.sum(axis=1)) - aff
    eigvals, eigvecs = np.linalg.eigh(laplacian)
    if num_speakers is None:
        top = min(max_speakers, n - 1)
        if top < 1:
            k = 1
        else:
            gaps = eigvals[1:top + 1] - eigvals[:top]
            k = int(np.argmax(gaps)) + 1
    else:
        k = min(num_speakers, n)
    if k <= 1:
        return np.zeros(n, dtype=np.int64)
    points = eigvecs[:, :k]
    rng = np.random.default_rng(seed)
    return _kmeans(points, k, rng)


def merge_segments(windows, labels):
    """Fuse labeled windows into turns.

    Same-label neighbors that touch or overlap are merged; unlike-label
    overlaps are split at the midpoint of the overlap region.
    """
    by_rec: dict = {}
    for win, label in zip(windows, labels):
        by_rec.setdefault(win.recording_id, []).append(
            [win.start, win.end, int(label)])
    turns = []
    for rec in sorted(by_rec):
        spans = sorted(by_rec[rec], key=lambda x: (x[0], x[1]))
        for i in range(len(spans) - 1):
            cur, nxt = spans[i], spans[i + 1]
            if cur[2] != nxt[2] and nxt[0] < cur[1]:
                mid = 0.5 * (nxt[0] + cur[1])
                cur[1] = mid
                nxt[0] = mid
        merged = [spans[0]]
        for start, end, label in spans[1:]:
            last = merged[-1]
            if label == last[2] and start <= last[1] + _ADJACENCY_EPS:
                last[1] = max(last[1], end)
            else:
                merged.append([start, end, label])
        for start, end, label in merged:
            if end > start:
                turns.append(Turn(rec, start, end, f"spk{label:02d}"))
    return turns


# ---------------------------------------------------------------------------
# DER


def _merge_spans(spans):
    if not spans:
        return []
    spans = sorted(spans)
    out = [list(spans[0])]
    for s, e in spans[1:]:
        if s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return out


def _rec_der_times(ref, hyp, collar):
    """(miss, fa, sc, ref) second counts for one recording."""
    exclusion = []
    if collar > 0:
        for _, start, end in ref:
            exclusion.append((start - collar, start + collar))
            exclusion.append((end - collar, end + collar))
    exclusion = _merge_spans(exclusion)

    events = set()
    for _, start, end in ref + hyp:
        events.add(start)
        events.add(end)
    for s, e in exclusion:
        events.add(s)
        events.add(e)
    events = sorted(events)

    ref_speakers = sorted({spk for spk, _, _ in ref})
    hyp_speakers = sorted({spk for spk, _, _ in hyp})
    ref_index = {spk: i for i, spk in enumerate(ref_speakers)}
    hyp_index = {spk: i for i, spk in enumerate(hyp_speakers)}

    def scored_intervals():
        for t1, t2 in zip(events[:-1], events[1:]):
            if t2 - t1 <= 0:
                continue
            mid = 0.5 * (t1 + t2)
            if any(s < mid < e for s, e in exclusion):
                continue
            active_ref = [ref_index[spk] for spk, s, e in ref if s <= mid < e]
            active_hyp = [hyp_index[spk] for spk, s, e in hyp if s <= mid < e]
            yield t2 - t1, active_ref, active_hyp

    overlap = np.zeros((len(ref_speakers), len(hyp_speakers)))
    for dur, active_ref, active_hyp in scored_intervals():
        for i in active_ref:
            for j in active_hyp:
                overlap[i, j] += dur
    mapping = {}
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        mapping = {int(i): int(j) for i, j in zip(rows, cols) if overlap[i, j] > 0}

    miss = fa = sc = ref_time = 0.0
    for dur, active_ref, active_hyp in scored_intervals():
        n_ref, n_hyp = len(active_ref), len(active_hyp)
        hyp_set = set(active_hyp)
        n_correct = sum(1 for i in active_ref if mapping.get(i) in hyp_set)
        miss += max(0, n_ref - n_hyp) * dur
        fa += max(0, n_hyp - n_ref) * dur
        sc += (min(n_ref, n_hyp) - n_correct) * dur
        ref_time += n_ref * dur
    return miss, fa, sc, ref_time


def compute_der(reference, hypothesis, collar: float = 0.25) -> DerReport:
    """Diarization error rate with optimal per-recording speaker mapping.

    A +-collar zone around every reference boundary is excluded from
    scoring. All components are normalized by the total scored reference
    speech time, so miss + fa + sc equals the DER exactly.
    """
    recs = sorted({t.recording_id for t in reference}
                  | {t.recording_id for t in hypothesis})
    miss = fa = sc = ref_time = 0.0
    for rec in recs:
        ref = [(t.speaker, t.start, t.end) for t in reference
               if t.recording_id == rec]
        hyp = [(t.speaker, t.start, t.end) for t in hypothesis
               if t.recording_id == rec]
        m, f, s, r = _rec_der_times(ref, hyp, collar)
        miss, fa, sc, ref_time = miss + m, fa + f, sc + s, ref_time + r
    if ref_time <= 0.0:
        raise ValueError("no scored reference speech; DER undefined")
    miss_rate = miss / ref_time
    fa_rate = fa / ref_time
    sc_rate = sc / ref_time
    return DerReport(miss=miss_rate, fa=fa_rate, sc=sc_rate,
                     der=miss_rate + fa_rate + sc_rate)
