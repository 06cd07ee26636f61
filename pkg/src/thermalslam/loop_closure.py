"""Loop-closure detection: embeddings, similarity matching and calibration.

Frames become unit-norm feature vectors (a hand-crafted baseline descriptor
by default; externally computed embeddings can be loaded from files and used
interchangeably). Keyframes are taken at a fixed stride, matched against
older keyframes by cosine similarity, and detection is suspended for a
window of frames after each hit. The contrastive distance/loss pair used to
train such embedders is provided as plain evaluable functions.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError

BASELINE_GRID = 16  # baseline descriptor is a 16x16 block-mean thumbnail


@dataclass(frozen=True)
class LoopPolicy:
    keyframe_stride: int = 15
    suppression_window: int = 150
    threshold: float = 0.85

    def __post_init__(self):
        if self.keyframe_stride < 1:
            raise ValueError("keyframe_stride must be >= 1")
        if self.suppression_window < 0:
            raise ValueError("suppression_window must be >= 0")
        if not (-1.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [-1, 1]")


@dataclass(frozen=True)
class Keyframe:
    id: int
    frame_index: int
    feature: np.ndarray


@dataclass(frozen=True)
class LoopCandidate:
    query_frame: int
    match_frame: int
    similarity: float


@dataclass(frozen=True)
class ContrastiveParams:
    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"feature length mismatch {a.shape} vs {b.shape}")
    return float(a @ b)


def embed_baseline(image):
    """Block-mean thumbnail, mean-subtracted and L2-normalized.

    Exactly invariant to positive affine intensity maps. A zero-variance
    input maps to a fixed canonical unit vector.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    if h >= BASELINE_GRID and w >= BASELINE_GRID:
        re = np.linspace(0, h, BASELINE_GRID + 1).astype(int)
        ce = np.linspace(0, w, BASELINE_GRID + 1).astype(int)
        small = np.empty((BASELINE_GRID, BASELINE_GRID))
        for i in range(BASELINE_GRID):
            for j in range(BASELINE_GRID):
                small[i, j] = image[re[i]:re[i + 1], ce[j]:ce[j + 1]].mean()
    else:
        # tiny rasters: nearest-neighbor index sampling
        ri = np.minimum((np.arange(BASELINE_GRID) * h) // BASELINE_GRID, h - 1)
        ci = np.minimum((np.arange(BASELINE_GRID) * w) // BASELINE_GRID, w - 1)
        small = image[np.ix_(ri, ci)]
    f = small.ravel() - small.mean()
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        canonical = np.zeros(BASELINE_GRID * BASELINE_GRID)
        canonical[0] = 1.0
        return canonical
    return f / norm


def contrastive_distance(f1, f2):
    """Euclidean distance between two embeddings."""
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape:
        raise ValueError(f"feature length mismatch {f1.shape} vs {f2.shape}")
    return float(np.linalg.norm(f1 - f2))


def contrastive_loss(distance, label, params=ContrastiveParams()):
    """Margin loss: 0.5*E^2 for same-scene pairs (label 0), hinge otherwise.

    label 1 (different scene) contributes 0.5*max(0, margin - E)^2.
    """
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    if label == 0:
        return 0.5 * distance * distance
    hinge = max(0.0, params.margin - distance)
    return 0.5 * hinge * hinge


def augment_pair(image, negative, seed, brightness=0.1, contrast=0.1,
                 patch_fraction=0.25):
    """Jitter brightness/contrast, then paste a patch copied from `negative`.

    All draws come from a generator seeded with `seed`, so the output is
    deterministic. patch_fraction is the pasted area fraction; 0 disables
    the paste, values >= 1 are rejected.
    """
    image = np.asarray(image, dtype=float)
    negative = np.asarray(negative, dtype=float)
    if image.shape != negative.shape:
        raise ValueError("image and negative sample must share dimensions")
    if patch_fraction >= 1.0 or patch_fraction < 0.0:
        raise ValueError("patch_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    gain = 1.0 + (rng.uniform(-contrast, contrast) if contrast > 0 else 0.0)
    offset = rng.uniform(-brightness, brightness) if brightness > 0 else 0.0
    out = gain * image + offset
    if patch_fraction > 0.0:
        h, w = image.shape
        ph = max(1, round(h * np.sqrt(patch_fraction)))
        pw = max(1, round(w * np.sqrt(patch_fraction)))
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        out[y0:y0 + ph, x0:x0 + pw] = negative[y0:y0 + ph, x0:x0 + pw]
    return np.clip(out, 0.0, 1.0)


def select_keyframes(features, stride):
    return [
        Keyframe(id=k, frame_index=i, feature=np.asarray(features[i], dtype=float))
        for k, i in enumerate(range(0, len(features), stride))
    ]


def detect_loops(features, policy=LoopPolicy()):
    """Scan keyframes for revisits.

    Keyframes sit at frame indices 0, stride, 2*stride, ... For each
    keyframe the best match among keyframes at least suppression_window
    frames older is emitted iff its similarity reaches the threshold; after
    a hit, detection is suspended for the next suppression_window frames.
    Ties resolve to the oldest match.
    """
    keyframes = select_keyframes(features, policy.keyframe_stride)
    candidates = []
    suspended_until = -1
    for kf in keyframes:
        q = kf.frame_index
        if q <= suspended_until:
            continue
        best = None
        for old in keyframes:
            if old.frame_index >= q or old.frame_index > q - policy.suppression_window:
                continue
            sim = cosine_similarity(kf.feature, old.feature)
            if best is None or sim > best[0]:
                best = (sim, old.frame_index)
        if best is not None and best[0] >= policy.threshold:
            candidates.append(
                LoopCandidate(query_frame=q, match_frame=best[1], similarity=best[0])
            )
            suspended_until = q + policy.suppression_window
    return candidates


def calibrate_threshold(scored_pairs):
    """Smallest threshold over the observed similarity grid with zero FPs.

    scored_pairs is a sequence of (similarity, is_true_loop). The returned
    threshold, used as `similarity >= threshold`, admits every pair it can
    without admitting a single negative; positives below the best negative
    are sacrificed.
    """
    pairs = [(float(s), bool(y)) for s, y in scored_pairs]
    if not any(y for _, y in pairs):
        raise InputError("calibrate_threshold: no true loops in the input")
    negatives = [s for s, y in pairs if not y]
    floor = max(negatives) if negatives else -np.inf
    eligible = sorted(s for s, _ in pairs if s > floor)
    if not eligible:
        raise InputError(
            "calibrate_threshold: every similarity is dominated by a negative"
        )
    return eligible[0]
