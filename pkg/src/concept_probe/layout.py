"""2D layouts for navigation: exact t-SNE with perplexity bisection,
class "clique" aggregation, and hex-grid placement of the concept space by
minimum-cost assignment.

Hex geometry is fixed: pointy-top cells of unit circumradius, odd rows
shifted half a cell to the right, centers at
(sqrt(3) * (col + 0.5 * (row % 2)), 1.5 * row).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .seeding import derived_rng

SQRT3 = math.sqrt(3.0)

TSNE_EXAGGERATION = 12.0
TSNE_EXAGGERATION_STEPS = 250
TSNE_MOMENTUM_SWITCH = 250
# kept deliberately small: large steps explode the layout into the far-field
# regime where the kernel is scale-free, affinity mass collapses, and
# duplicate points get pinned apart instead of coinciding
TSNE_LEARNING_RATE = 20.0
ENTROPY_TOLERANCE = 1e-4


@dataclass
class ClassPoint:
    class_k: int
    position: tuple[float, float]
    mean_latent: np.ndarray


@dataclass
class Clique:
    clique_id: str
    member_classes: list[int]
    center: tuple[float, float]
    radius: float
    mean_accuracy: float
    representative_images: dict[int, str | None]


@dataclass
class HexAssignment:
    positions: dict[str, tuple[int, int]]  # concept_id -> (col, row)
    grid_cols: int
    grid_rows: int


# -- t-SNE ---------------------------------------------------------------


def _conditional_row(d2: np.ndarray, target_entropy: float) -> np.ndarray:
    """Gaussian affinities for one point, precision bisected until the
    Shannon entropy matches the target within 1e-4 nats."""
    beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
    p = np.zeros_like(d2)
    shifted = d2 - d2.min()
    for _ in range(10_000):
        w = np.exp(-shifted * beta)
        total = w.sum()
        p = w / total
        nz = p > 0
        entropy = float(-(p[nz] * np.log(p[nz])).sum())
        if abs(entropy - target_entropy) <= ENTROPY_TOLERANCE:
            break
        if entropy > target_entropy:
            beta_lo = beta
            beta = beta * 2.0 if not np.isfinite(beta_hi) else 0.5 * (beta + beta_hi)
        else:
            beta_hi = beta
            beta = beta / 2.0 if beta_lo == 0.0 else 0.5 * (beta + beta_lo)
    return p


def tsne_embed(
    vectors: np.ndarray, perplexity: float, seed: int, iterations: int = 1000
) -> np.ndarray:
    """Exact t-SNE to 2D, deterministic under the seed."""
    x = np.asarray(vectors, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise ParameterError("t-SNE needs at least 4 vectors")
    if not perplexity > 0 or perplexity >= (n - 1) / 3:
        raise ParameterError(f"perplexity {perplexity} infeasible for {n} points")

    sq = (x**2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    target = math.log(perplexity)
    p_cond = np.zeros((n, n))
    for i in range(n):
        others = np.concatenate([d2[i, :i], d2[i, i + 1 :]])
        row = _conditional_row(others, target)
        p_cond[i, :i] = row[:i]
        p_cond[i, i + 1 :] = row[i:]
    p = (p_cond + p_cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = derived_rng("tsne", seed, n)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for step in range(iterations):
        p_eff = p * TSNE_EXAGGERATION if step < TSNE_EXAGGERATION_STEPS else p
        ysq = (y**2).sum(axis=1)
        num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2.0 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (p_eff - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        # per-coordinate gains, as in the reference descent: grow where the
        # gradient keeps disagreeing with the velocity, shrink otherwise.
        # The cap stops a runaway along the far-field direction, where the
        # kernel is nearly scale-free and the gradient never quite vanishes.
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.clip(gains, 0.01, 10.0)
        momentum = 0.5 if step < TSNE_MOMENTUM_SWITCH else 0.8
        velocity = momentum * velocity - TSNE_LEARNING_RATE * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Deterministic PCA projection, the layout fallback when t-SNE's
    minimum point count cannot be met."""
    x = np.asarray(vectors, dtype=np.float64)
    n = len(x)
    if n == 0:
        return np.zeros((0, 2))
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    out = np.zeros((n, 2))
    for comp in range(min(2, vt.shape[0])):
        direction = vt[comp]
        if direction[np.argmax(np.abs(direction))] < 0:
            direction = -direction  # fix the sign convention
        out[:, comp] = centered @ direction
    return out


def embed_2d(vectors: np.ndarray, perplexity: float, seed: int) -> np.ndarray:
    """t-SNE when feasible, clamping perplexity into its valid range;
    PCA for point sets too small to embed."""
    n = len(vectors)
    limit = (n - 1) / 3
    if n < 4 or limit <= 1.05:
        return pca_2d(vectors)
    return tsne_embed(vectors, min(perplexity, 0.99 * limit), seed)


# -- cliques --------------------------------------------------------------


def build_cliques(
    class_points: list[ClassPoint],
    predictions: list,
    labels: dict[str, int],
    merge_distance_fraction: float = 0.04,
) -> list[Clique]:
    """Single-linkage aggregation of class positions at a threshold of
    ``merge_distance_fraction`` times the layout's bounding-box diagonal."""
    if not class_points:
        return []
    pos = np.array([cp.position for cp in class_points], dtype=np.float64)
    diag = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0))) if len(pos) > 1 else 0.0
    threshold = merge_distance_fraction * diag

    parent = list(range(len(class_points)))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(class_points)):
        for j in range(i + 1, len(class_points)):
            if np.linalg.norm(pos[i] - pos[j]) <= threshold:
                parent[find(j)] = find(i)

    accuracy, representatives = _per_class_eval(predictions, labels)

    groups: dict[int, list[int]] = {}
    for i in range(len(class_points)):
        groups.setdefault(find(i), []).append(i)
    ordered = sorted(groups.values(), key=lambda g: (-len(g), min(class_points[i].class_k for i in g)))

    scale = max(diag, 1.0)
    cliques = []
    for rank, idxs in enumerate(ordered, start=1):
        members = sorted(class_points[i].class_k for i in idxs)
        center = pos[idxs].mean(axis=0)
        accs = [accuracy[k] for k in members if k in accuracy]
        cliques.append(
            Clique(
                clique_id=f"clique_{rank}",
                member_classes=members,
                center=(float(center[0]), float(center[1])),
                radius=0.03 * scale * math.sqrt(len(members)),
                mean_accuracy=float(np.mean(accs)) if accs else 0.0,
                representative_images={k: representatives.get(k) for k in members},
            )
        )
    return cliques


def _per_class_eval(predictions: list, labels: dict[str, int]):
    """Per-class accuracy and the representative instance: the correctly
    classified one with the highest confidence, else the most confident."""
    totals: dict[int, int] = {}
    correct: dict[int, int] = {}
    best_correct: dict[int, tuple] = {}
    best_any: dict[int, tuple] = {}
    for pred in predictions:
        k = labels[pred.instance_id]
        totals[k] = totals.get(k, 0) + 1
        key = (pred.confidence, pred.instance_id)
        if k not in best_any or key > best_any[k]:
            best_any[k] = key
        if pred.predicted_class == k:
            correct[k] = correct.get(k, 0) + 1
            if k not in best_correct or key > best_correct[k]:
                best_correct[k] = key
    accuracy = {k: correct.get(k, 0) / totals[k] for k in totals}
    reps = {
        k: (best_correct.get(k) or best_any.get(k))[1] if k in best_any else None for k in totals
    }
    return accuracy, reps


# -- hex grid -------------------------------------------------------------


def hex_center(col: int, row: int) -> tuple[float, float]:
    return (SQRT3 * (col + 0.5 * (row % 2)), 1.5 * row)


def hex_corners(col: int, row: int) -> list[tuple[float, float]]:
    cx, cy = hex_center(col, row)
    return [
        (cx + math.cos(math.radians(60 * i + 30)), cy + math.sin(math.radians(60 * i + 30)))
        for i in range(6)
    ]


def hex_neighbors(col: int, row: int) -> list[tuple[int, int]]:
    if row % 2 == 0:
        offsets = ((1, 0), (-1, 0), (0, -1), (-1, -1), (0, 1), (-1, 1))
    else:
        offsets = ((1, 0), (-1, 0), (1, -1), (0, -1), (1, 1), (0, 1))
    return [(col + dc, row + dr) for dc, dr in offsets]


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of n rows to m >= n columns (shortest
    augmenting paths with potentials, O(n^2 m))."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if n > m:
        raise ParameterError("assignment needs at least as many columns as rows")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    assigned_row = np.zeros(m + 1, dtype=np.int64)  # col j (1-based) -> row
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        assigned_row[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned_row[j0]
            cur = np.empty(m + 1)
            cur[0] = np.inf
            cur[1:] = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(masked.argmin())
            delta = masked[j1]
            np.add.at(u, assigned_row[used], delta)
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if assigned_row[j0] == 0:
                break
        while j0:
            j1 = int(way[j0])
            assigned_row[j0] = assigned_row[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if assigned_row[j] > 0:
            cols[assigned_row[j] - 1] = j - 1
    total = float(cost[np.arange(n), cols].sum())
    return cols, total


def isomatch_layout(positions_2d: dict[str, tuple[float, float]]) -> HexAssignment:
    """Place each concept on its own hex cell: normalize the 2D embedding
    into the grid extent, then assign by minimum total squared distance."""
    ids = sorted(positions_2d)
    n = len(ids)
    if n == 0:
        return HexAssignment(positions={}, grid_cols=0, grid_rows=0)
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    cells = [(c, r) for r in range(rows) for c in range(cols)]
    centers = np.array([hex_center(c, r) for c, r in cells])

    pts = np.array([positions_2d[i] for i in ids], dtype=np.float64)
    scaled = np.empty_like(pts)
    for axis in range(2):
        lo, hi = pts[:, axis].min(), pts[:, axis].max()
        tlo, thi = centers[:, axis].min(), centers[:, axis].max()
        if hi > lo:
            scaled[:, axis] = (pts[:, axis] - lo) / (hi - lo) * (thi - tlo) + tlo
        else:
            scaled[:, axis] = 0.5 * (tlo + thi)

    cost = ((scaled[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignment, _ = solve_assignment(cost)
    placed = {ids[i]: cells[int(assignment[i])] for i in range(n)}
    return HexAssignment(positions=placed, grid_cols=cols, grid_rows=rows)


def cluster_boundaries(
    assignment: HexAssignment, cluster_of: dict[str, str]
) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Edges of occupied cells facing a different cluster, an empty cell,
    or the outside of the grid. Each edge appears exactly once (deduplicated
    by the unordered cell pair, so float corner noise cannot split them)."""
    occupied: dict[tuple[int, int], str] = {}
    for concept_id, cell in assignment.positions.items():
        occupied[cell] = cluster_of[concept_id]

    boundary_pairs: dict[tuple, tuple[int, int]] = {}
    for (col, row), cluster_id in occupied.items():
        for neighbor in hex_neighbors(col, row):
            if neighbor in occupied and occupied[neighbor] == cluster_id:
                continue
            pair = tuple(sorted(((col, row), neighbor)))
            # keep an occupied side to anchor the edge geometry
            boundary_pairs[pair] = (col, row)

    edges = []
    for pair in sorted(boundary_pairs):
        col, row = boundary_pairs[pair]
        neighbor = pair[0] if pair[1] == (col, row) else pair[1]
        corners = hex_corners(col, row)
        ncx, ncy = hex_center(*neighbor)
        ranked = sorted(corners, key=lambda p: ((p[0] - ncx) ** 2 + (p[1] - ncy) ** 2, p))
        a, b = sorted(ranked[:2])
        edges.append((a, b))
    return edges
