"""CAV ensembles and influence scoring.

A CAV is the unit normal of a logistic-regression separator between a
concept's patch embeddings and a pool of counterexample embeddings drawn
from other classes. The influence of a concept on one instance is the sign
of the inner product between the class-logit gradient (in the capture
layer's space) and the CAV; the class-level score is the fraction of the
class's probe instances with a positive sign. An ensemble of such scores,
one per counterexample pool, feeds a two-sided one-sample t-test against
the neutral value 0.5.
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .errors import CavTrainingError, ParameterError
from .model import ModelGraph, forward, gradient_from_activation
from .seeding import derived_rng, stable_seed

DEFAULT_N_CAVS = 20
DEFAULT_ALPHA = 0.01

CAV_L2 = 1e-3
CAV_LR = 0.1
CAV_STEPS = 500
CAV_HOLDOUT = 0.2


@dataclass
class Cav:
    weight: np.ndarray  # unit-norm float64 (d,)
    bias: float
    validation_accuracy: float
    counterexample_seed: int


@dataclass
class TcavStats:
    per_cav_scores: list[float]
    mean_score: float
    p_value: float
    significant: bool


@dataclass
class InfluenceSample:
    instance_id: str
    concept_id: str
    cav_index: int
    s_value: float

    @property
    def positive(self) -> bool:
        return self.s_value > 0


def train_cav(
    concept_embeddings: np.ndarray,
    counter_embeddings: np.ndarray,
    seed: int,
    l2: float = CAV_L2,
    lr: float = CAV_LR,
    steps: int = CAV_STEPS,
) -> Cav:
    """Full-batch logistic regression in double precision; the positive side
    of the returned hyperplane is the concept side."""
    pos = np.asarray(concept_embeddings, dtype=np.float64)
    neg = np.asarray(counter_embeddings, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise CavTrainingError("both example sets must be non-empty")
    if pos.shape[1] != neg.shape[1]:
        raise CavTrainingError("example sets must share dimensionality")

    x = np.concatenate([pos, neg], axis=0)
    if np.allclose(x, x[0], atol=0.0):
        raise CavTrainingError("degenerate training set: all points identical")

    rng = derived_rng("train_cav", seed)
    # stratified 80/20 split: shuffle each side, hold out the tail
    pos_order = rng.permutation(len(pos))
    neg_order = rng.permutation(len(neg))
    pos_hold = max(1, int(round(CAV_HOLDOUT * len(pos)))) if len(pos) > 1 else 0
    neg_hold = max(1, int(round(CAV_HOLDOUT * len(neg)))) if len(neg) > 1 else 0
    pos_train = pos[pos_order[: len(pos) - pos_hold]]
    neg_train = neg[neg_order[: len(neg) - neg_hold]]
    pos_val = pos[pos_order[len(pos) - pos_hold :]]
    neg_val = neg[neg_order[len(neg) - neg_hold :]]

    xt = np.concatenate([pos_train, neg_train], axis=0)
    yt = np.concatenate([np.ones(len(pos_train)), np.zeros(len(neg_train))])
    n, d = xt.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(steps):
        z = xt @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - yt
        w -= lr * (xt.T @ err / n + l2 * w)
        b -= lr * float(err.mean())

    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise CavTrainingError("separator collapsed to the zero vector")
    w_unit = w / norm
    b_unit = b / norm

    xv = np.concatenate([pos_val, neg_val], axis=0) if pos_hold + neg_hold else xt
    yv = (
        np.concatenate([np.ones(len(pos_val)), np.zeros(len(neg_val))])
        if pos_hold + neg_hold
        else yt
    )
    acc = float(((xv @ w_unit + b_unit > 0) == (yv > 0.5)).mean())
    return Cav(weight=w_unit, bias=b_unit, validation_accuracy=acc, counterexample_seed=seed)


def build_counterexample_pool(
    embeddings_by_class: dict[int, np.ndarray],
    class_k: int,
    pool_size: int,
    seed: int,
) -> tuple[np.ndarray, bool]:
    """Uniform sample of other-class patch embeddings.

    Returns (pool, sampled_with_replacement). Replacement only happens when
    the other classes cannot fill the pool, and is reported so the caller
    can record a warning.
    """
    parts = [embeddings_by_class[c] for c in sorted(embeddings_by_class) if c != class_k]
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ParameterError(f"no counterexample segments outside class {class_k}")
    combined = np.concatenate(parts, axis=0)
    rng = derived_rng("counter_pool", seed, class_k)
    if pool_size <= len(combined):
        idx = rng.permutation(len(combined))[:pool_size]
        return combined[idx], False
    idx = rng.integers(0, len(combined), size=pool_size)
    return combined[idx], True


def directional_derivative(
    model: ModelGraph, image: np.ndarray, layer: str, class_k: int, cav: Cav
) -> float:
    """S = <grad of logit_k w.r.t. the layer activation, CAV weight>."""
    _, activation = forward(model, image, layer)
    grad = gradient_from_activation(model, layer, activation, class_k)
    return float(grad.ravel() @ cav.weight)


def class_gradients(
    model: ModelGraph, images: list[np.ndarray], layer: str, class_k: int
) -> np.ndarray:
    """Stacked flattened logit-k gradients for a set of images, (n, d)."""
    rows = []
    for image in images:
        _, activation = forward(model, image, layer)
        rows.append(gradient_from_activation(model, layer, activation, class_k).ravel())
    return np.stack(rows) if rows else np.zeros((0, 1))


def tcav_score_from_gradients(gradients: np.ndarray, cav: Cav) -> float:
    if len(gradients) == 0:
        raise ParameterError("tcav score needs at least one instance")
    s = gradients @ cav.weight
    return float((s > 0).mean())


def tcav_score(
    model: ModelGraph,
    class_images: list[np.ndarray],
    layer: str,
    class_k: int,
    cav: Cav,
) -> float:
    """Fraction of the class's instances whose directional derivative is
    positive; always in [0, 1]."""
    if not class_images:
        raise ParameterError("class_images must be non-empty")
    grads = class_gradients(model, class_images, layer, class_k)
    return tcav_score_from_gradients(grads, cav)


def t_test_against_half(scores: np.ndarray) -> float:
    """Two-sided one-sample t-test p-value against mu0 = 0.5.

    Degenerate ensembles are pinned: zero variance at exactly 0.5 carries
    no evidence (p = 1), zero variance away from 0.5 is as extreme as it
    gets (p = 0).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n < 2:
        raise ParameterError("t-test needs at least two scores")
    mean = scores.mean()
    sd = scores.std(ddof=1)
    if sd == 0.0:
        return 1.0 if mean == 0.5 else 0.0
    t = (mean - 0.5) / (sd / np.sqrt(n))
    return float(2.0 * sstats.t.sf(abs(t), df=n - 1))


def tcav_ensemble(
    concept_embeddings: np.ndarray,
    embeddings_by_class: dict[int, np.ndarray],
    gradients: np.ndarray,
    class_k: int,
    n_cavs: int = DEFAULT_N_CAVS,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
) -> tuple[list[Cav | None], TcavStats | None, list[str]]:
    """Train ``n_cavs`` CAVs against independent counterexample pools and
    aggregate their scores.

    ``gradients`` are the precomputed class-logit gradients of the class's
    probe instances at the capture layer. Returns (cavs, stats, warnings);
    stats is None when more than half of the CAVs failed to train, which
    marks the concept untestable.
    """
    if n_cavs < 2:
        raise ParameterError("n_cavs must be >= 2")
    cavs: list[Cav | None] = [None] * n_cavs
    scores: list[float | None] = [None] * n_cavs
    warnings: list[str] = []
    pool_size = len(concept_embeddings)
    for i in range(n_cavs):
        cav_seed = stable_seed("cav", seed, class_k, i)
        try:
            pool, replaced = build_counterexample_pool(
                embeddings_by_class, class_k, pool_size, cav_seed
            )
            if replaced:
                warnings.append(f"cav {i}: counterexample pool sampled with replacement")
            cav = train_cav(concept_embeddings, pool, cav_seed)
        except CavTrainingError as exc:
            warnings.append(f"cav {i}: {exc}")
            continue
        cavs[i] = cav
        scores[i] = tcav_score_from_gradients(gradients, cav)

    trained = [s for s in scores if s is not None]
    if len(trained) <= n_cavs // 2:
        warnings.append("concept untestable: more than half of the CAVs failed")
        return cavs, None, warnings

    arr = np.array(trained, dtype=np.float64)
    p = t_test_against_half(arr)
    stats = TcavStats(
        per_cav_scores=[float(s) if s is not None else float("nan") for s in scores],
        mean_score=float(arr.mean()),
        p_value=p,
        significant=p < alpha,
    )
    return cavs, stats, warnings


def filter_concepts(concepts: list, alpha: float = DEFAULT_ALPHA) -> tuple[list, list]:
    """Partition concepts by significance: retained iff p < alpha (strict).

    Untestable concepts (no stats) are discarded. Both lists come back for
    audit.
    """
    retained, discarded = [], []
    for concept in concepts:
        stats = concept.tcav
        if stats is not None and stats.p_value < alpha:
            retained.append(concept)
        else:
            discarded.append(concept)
    return retained, discarded
