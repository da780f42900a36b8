"""Detection metrics (AP, F1), box statistics and caption metrics (BLEU, ROUGE-L, METEOR)."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .datamodel import BoundingBox
from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

# Reported full-scale numbers, kept for documentation only; not reproducible here.
REFERENCE_AVA_MAP = 92.4
REFERENCE_WASD_SS_MAP = 82.5
REFERENCE_COLUMBIA_F1 = 86.8


@dataclass(frozen=True)
class ScoredFrame:
    key: tuple  # (video_id, entity_id, frame_timestamp)
    score: float
    label: int


@dataclass
class MetricReport:
    metric: str
    value: float
    slice: str = "all"
    count: int = 0

    def as_dict(self):
        return {"metric": self.metric, "value": self.value, "slice": self.slice, "count": self.count}


def _ranked(scored):
    scored = list(scored)
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, scored[i].key))
    return [scored[i] for i in order]


def average_precision(scored) -> float:
    """All-points AP: mean of precision@rank over the ranks of the positives.

    Ties in score are broken by key, so the result is deterministic.
    """
    ranked = _ranked(scored)
    positives = sum(1 for s in ranked if s.label)
    if positives == 0:
        raise ValidationError("undefined AP: no positive labels")
    terms, hits = [], 0
    for rank, s in enumerate(ranked, start=1):
        if s.label:
            hits += 1
            terms.append(hits / rank)
    # fsum is exactly rounded, so the value does not depend on summation order
    return math.fsum(terms) / positives


def f1(scored, threshold: float = 0.5) -> float:
    tp = fp = fn = 0
    for s in scored:
        pred = s.score >= threshold
        if pred and s.label:
            tp += 1
        elif pred:
            fp += 1
        elif s.label:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def hbp(face_box: BoundingBox, body_box: BoundingBox) -> float:
    """Head-body proportion: face box area over body box area."""
    if body_box.area <= 0:
        raise ValidationError("body box has zero area")
    return face_box.area / body_box.area


def area_fraction(box: BoundingBox) -> float:
    """Box area as a percentage of the image."""
    return 100.0 * (box.x2 - box.x1) * (box.y2 - box.y1)


def equidistant_edges(lo: float, hi: float, bins: int = 5) -> np.ndarray:
    if not hi > lo:
        raise ValidationError("need hi > lo for bucket edges")
    return np.linspace(lo, hi, bins + 1)


def bucket_index(value: float, edges) -> int:
    """Half-open buckets ``[e_i, e_{i+1})``; the last one is closed. Outliers clamp to the ends."""
    edges = np.asarray(edges)
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(i, 0), len(edges) - 2)


# --------------------------------------------------------------------------- caption metrics


def tokenize(text: str) -> list:
    return text.lower().replace(".", " ").replace(",", " ").split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tokens(x):
    return tokenize(x) if isinstance(x, str) else list(x)


def bleu_n(candidate, references, n: int = 4) -> float:
    """BLEU with clipped n-gram precisions (orders 1..n, geometric mean) and brevity penalty.

    No smoothing: a zero precision at any order gives 0. The reference
    length is the one closest to the candidate length (shorter wins ties).
    """
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in ([references] if isinstance(references, str) else references)]
    if not cand or not refs:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        counts = _ngrams(cand, order)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for ref in refs:
            for gram, c in _ngrams(ref, order).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def meteor_alignment(cand, ref, budget: int = 200_000):
    """Exact-match unigram alignment with the most matches and, among those, the fewest chunks.

    Candidates are explored leftmost-first, so the first alignment found is
    the greedy one and ties in chunk count keep the leftmost choice. The
    search stops after ``budget`` nodes and returns the best alignment so far.
    """
    need = Counter()
    cand_count, ref_count = Counter(cand), Counter(ref)
    for tok in cand_count:
        need[tok] = min(cand_count[tok], ref_count[tok])
    positions = defaultdict(list)
    for j, tok in enumerate(ref):
        positions[tok].append(j)
    remaining_after = []
    seen = Counter()
    for tok in reversed(cand):
        remaining_after.append(seen[tok])
        seen[tok] += 1
    remaining_after.reverse()

    best = {"pairs": None, "chunks": math.inf}
    used = [False] * len(ref)
    pairs = []
    matched = Counter()
    nodes = [0]

    def search(i, chunks):
        nodes[0] += 1
        if chunks >= best["chunks"] or nodes[0] > budget:
            return
        if i == len(cand):
            best["pairs"], best["chunks"] = list(pairs), chunks
            return
        tok = cand[i]
        if matched[tok] < need[tok]:
            for j in positions[tok]:
                if used[j]:
                    continue
                joins = bool(pairs) and pairs[-1] == (i - 1, j - 1)
                used[j] = True
                pairs.append((i, j))
                matched[tok] += 1
                search(i + 1, chunks + (0 if joins else 1))
                matched[tok] -= 1
                pairs.pop()
                used[j] = False
        # leave this token unaligned only if later occurrences can still fill the quota
        if need[tok] - matched[tok] <= remaining_after[i]:
            search(i + 1, chunks)

    search(0, 0)
    return best["pairs"] or []


def count_chunks(pairs) -> int:
    chunks, prev = 0, None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(candidate, reference, alpha: float = 0.9, gamma: float = 0.5, beta: float = 3.0) -> float:
    """Exact-match METEOR: ``F_mean * (1 - 0.5 * (chunks / matches) ** 3)``."""
    cand, ref = _tokens(candidate), _tokens(reference)
    pairs = meteor_alignment(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return f_mean * (1 - penalty)


def caption_scores(candidates, references) -> dict:
    """Corpus scores: per-caption mean over the candidate list.

    ``references[i]`` is a list of reference captions for ``candidates[i]``;
    ROUGE-L and METEOR take the best reference.
    """
    if len(candidates) != len(references):
        raise ValidationError("need one reference list per candidate")
    out = {}
    for n in range(1, 5):
        out[f"BLEU-{n}"] = float(np.mean([bleu_n(c, r, n) for c, r in zip(candidates, references)]))
    out["METEOR"] = float(np.mean([max(meteor(c, x) for x in r) for c, r in zip(candidates, references)]))
    out["ROUGE-L"] = float(np.mean([max(rouge_l(c, x) for x in r) for c, r in zip(candidates, references)]))
    return out


# --------------------------------------------------------------------------- prediction dumps


PREDICTION_COLUMNS = ["video_id", "entity_id", "frame_timestamp", "score"]


def format_predictions(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for video_id, entity_id, ts, score in rows:
        w.writerow([video_id, entity_id, repr(float(ts)), repr(float(score))])
    return buf.getvalue()


def parse_predictions(text: str) -> dict:
    """Map ``(video_id, entity_id, timestamp)`` to score."""
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader, [])]
    if header != PREDICTION_COLUMNS:
        raise ParseError(f"prediction header must be {','.join(PREDICTION_COLUMNS)}", line=1)
    out = {}
    for lineno, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != 4:
            raise ParseError("expected 4 fields", line=lineno)
        try:
            ts, score = float(cells[2]), float(cells[3])
        except ValueError:
            raise ParseError("non-numeric timestamp or score", line=lineno) from None
        if not math.isfinite(score):
            raise ParseError("score must be finite", line=lineno)
        out[(cells[0], cells[1], round(ts, 6))] = score
    return out


def map_report(predictions: dict, records, slicing: str = "none", hbp_range=None,
               hbp_bins: int = 5) -> list:
    """Global AP over all scored frames, plus AP per category or per HBP bucket.

    ``hbp_range`` defaults to the observed (min, max) head-body proportion.
    """
    if slicing not in ("none", "category", "hbp"):
        raise ValidationError(f"unknown slicing {slicing!r}")
    by_key = {r.key: r for r in records}
    unmatched = [k for k in predictions if k not in by_key]
    if unmatched:
        raise ValidationError(f"{len(unmatched)} predictions not in manifest, e.g. {unmatched[:10]}")
    frames = [(by_key[k], ScoredFrame(k, s, by_key[k].label)) for k, s in predictions.items()]
    if not frames:
        raise ValidationError("no predictions to evaluate")
    reports = [MetricReport("mAP", average_precision([f for _, f in frames]), "all", len(frames))]

    groups = defaultdict(list)
    if slicing == "category":
        for rec, f in frames:
            groups[rec.category or "uncategorized"].append(f)
    elif slicing == "hbp":
        if any(rec.body_box is None for rec, _ in frames):
            raise ValidationError("HBP slicing needs body boxes for every frame")
        values = [hbp(rec.face_box, rec.body_box) for rec, _ in frames]
        lo, hi = hbp_range or (min(values), max(values))
        edges = equidistant_edges(lo, hi, hbp_bins)
        for v, (_, f) in zip(values, frames):
            i = bucket_index(v, edges)
            groups[f"hbp[{edges[i]:.3f},{edges[i + 1]:.3f}{']' if i == hbp_bins - 1 else ')'}"].append(f)
    for name in sorted(groups):
        members = groups[name]
        if not any(f.label for f in members):
            log.warning("slice %s has no positive frames; omitted", name)
            continue
        reports.append(MetricReport("mAP", average_precision(members), name, len(members)))
    return reports
