"""SLIC superpixels at several resolutions, plus segment-to-patch conversion.

The segmenter follows the canonical recipe: CIELAB color space, grid
initialization at interval S = sqrt(N/k), centers nudged to the lowest
3x3 gradient, windowed assignment with the combined distance
D^2 = d_lab^2 + (m/S)^2 * d_xy^2, mean updates, and a connectivity pass
that folds orphan components smaller than S^2/4 into their largest
neighbor. The assignment sweep keeps a pixel's current center when no
candidate beats it, so the summed squared distance never increases.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

MIN_SEGMENT_PIXELS = 9  # sub-3x3 fragments carry no visual semantics

_LEVEL_NAMES = ("coarse", "medium", "fine")

# sRGB -> XYZ (D65) matrix and white point
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = np.array([0.95047, 1.0, 1.08883])


@dataclass
class Segment:
    segment_id: str
    instance_id: str
    resolution_level: str
    mask: np.ndarray  # bool (h, w)
    bbox: tuple[int, int, int, int]  # top, left, height, width

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Patch:
    segment_id: str
    pixels: np.ndarray  # float32, model input shape, values in [0, 1]


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """[0,1] sRGB -> CIELAB, computed in float64."""
    rgb = np.clip(image.astype(np.float64), 0.0, 1.0)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB2XYZ.T
    t = xyz / _WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _init_centers(lab: np.ndarray, n_segments: int) -> np.ndarray:
    """Grid-initialized (k, 5) centers [l, a, b, y, x], each moved to the
    lowest-gradient spot of its 3x3 neighborhood."""
    h, w = lab.shape[:2]
    ny = max(1, round(math.sqrt(n_segments * h / w)))
    nx = max(1, round(n_segments / ny))

    grad = np.full((h, w), np.inf)
    if h > 2 and w > 2:
        dx = lab[1:-1, 2:] - lab[1:-1, :-2]
        dy = lab[2:, 1:-1] - lab[:-2, 1:-1]
        grad[1:-1, 1:-1] = (dx**2).sum(axis=2) + (dy**2).sum(axis=2)

    centers = []
    for i in range(ny):
        for j in range(nx):
            cy = int((i + 0.5) * h / ny)
            cx = int((j + 0.5) * w / nx)
            cy = min(max(cy, 0), h - 1)
            cx = min(max(cx, 0), w - 1)
            best = (np.inf, cy, cx)
            for oy in (-1, 0, 1):
                for ox in (-1, 0, 1):
                    y, x = cy + oy, cx + ox
                    if 0 <= y < h and 0 <= x < w and grad[y, x] < best[0]:
                        best = (grad[y, x], y, x)
            if np.isfinite(best[0]):
                cy, cx = best[1], best[2]
            centers.append([lab[cy, cx, 0], lab[cy, cx, 1], lab[cy, cx, 2], float(cy), float(cx)])
    return np.asarray(centers)


def slic(
    image: np.ndarray,
    n_segments: int,
    compactness: float = 10.0,
    iterations: int = 10,
    seed: int = 0,
    min_size: int | None = None,
    return_objective: bool = False,
):
    """Label raster with contiguous ids from 0 and 4-connected regions.

    ``seed`` is accepted for interface stability; every step here is
    deterministic, so identical inputs always yield identical rasters.
    """
    del seed
    h, w = image.shape[:2]
    n_pixels = h * w
    if n_segments < 2:
        raise ParameterError("n_segments must be >= 2")
    if n_segments > n_pixels:
        raise ParameterError(f"n_segments {n_segments} exceeds pixel count {n_pixels}")

    lab = rgb_to_lab(image)
    interval = math.sqrt(n_pixels / n_segments)
    ratio = compactness / interval
    centers = _init_centers(lab, n_segments)
    k = len(centers)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.full((h, w), -1, dtype=np.int32)
    dist = np.full((h, w), np.inf)
    reach = max(1, int(math.ceil(2 * interval)))
    objective: list[float] = []

    for it in range(iterations):
        if it > 0:
            # distances to the *current* centers of the current assignment,
            # so the sweep below can only improve the objective
            for c in range(k):
                member = labels == c
                if not member.any():
                    continue
                d_lab = ((lab[member] - centers[c, :3]) ** 2).sum(axis=1)
                d_xy = (ys[member] - centers[c, 3]) ** 2 + (xs[member] - centers[c, 4]) ** 2
                dist[member] = d_lab + ratio**2 * d_xy

        for c in range(k):
            cy, cx = centers[c, 3], centers[c, 4]
            y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
            x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
            d_lab = ((lab[y0:y1, x0:x1] - centers[c, :3]) ** 2).sum(axis=2)
            d_xy = (ys[y0:y1, x0:x1] - cy) ** 2 + (xs[y0:y1, x0:x1] - cx) ** 2
            d2 = d_lab + ratio**2 * d_xy
            win_dist = dist[y0:y1, x0:x1]
            improve = d2 < win_dist  # ties keep the first-seen center
            win_dist[improve] = d2[improve]
            labels[y0:y1, x0:x1][improve] = c

        if it == 0 and (labels < 0).any():
            # centers drifted enough to leave windows short of full cover;
            # give stragglers their globally nearest center once
            miss = labels < 0
            my, mx = np.nonzero(miss)
            d_all = (
                ((lab[my, mx][:, None, :] - centers[None, :, :3]) ** 2).sum(axis=2)
                + ratio**2
                * ((my[:, None] - centers[None, :, 3]) ** 2 + (mx[:, None] - centers[None, :, 4]) ** 2)
            )
            labels[my, mx] = d_all.argmin(axis=1)
            dist[my, mx] = d_all.min(axis=1)

        objective.append(float(dist.sum()))

        for c in range(k):
            member = labels == c
            if member.any():
                centers[c, :3] = lab[member].mean(axis=0)
                centers[c, 3] = ys[member].mean()
                centers[c, 4] = xs[member].mean()

    if min_size is None:
        min_size = max(1, int(interval * interval / 4))
    labels = enforce_connectivity(labels, min_size)
    if return_objective:
        return labels, objective
    return labels


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split labels into 4-connected components, merge each component
    smaller than ``min_size`` into its largest neighbor, and relabel
    contiguously in row-major first-encounter order."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    sizes: list[int] = []
    adjacency: list[set[int]] = []

    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            cid = len(sizes)
            lab_val = labels[sy, sx]
            stack = [(sy, sx)]
            comp[sy, sx] = cid
            count = 0
            neigh: set[int] = set()
            while stack:
                y, x = stack.pop()
                count += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if not (0 <= ny < h and 0 <= nx < w):
                        continue
                    if labels[ny, nx] == lab_val:
                        if comp[ny, nx] < 0:
                            comp[ny, nx] = cid
                            stack.append((ny, nx))
                    elif comp[ny, nx] >= 0:
                        neigh.add(int(comp[ny, nx]))
                        adjacency[comp[ny, nx]].add(cid)
            sizes.append(count)
            adjacency.append(neigh)

    n_comp = len(sizes)
    parent = list(range(n_comp))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    root_size = list(sizes)
    root_adj = [set(a) for a in adjacency]

    changed = True
    while changed:
        changed = False
        for cid in range(n_comp):
            root = find(cid)
            if root != cid or root_size[root] >= min_size:
                continue
            neighbors = {find(n) for n in root_adj[root]} - {root}
            if not neighbors:
                continue
            target = max(neighbors, key=lambda r: (root_size[r], -r))
            parent[root] = target
            root_size[target] += root_size[root]
            root_adj[target] |= root_adj[root]
            changed = True

    out = np.empty((h, w), dtype=np.int32)
    remap: dict[int, int] = {}
    flat_comp = comp.ravel()
    flat_out = out.ravel()
    for i in range(flat_comp.size):
        root = find(int(flat_comp[i]))
        if root not in remap:
            remap[root] = len(remap)
        flat_out[i] = remap[root]
    return out


def extract_segments(
    image: np.ndarray,
    instance_id: str,
    resolutions: list[int],
    seed: int = 0,
    compactness: float = 10.0,
    iterations: int = 10,
    min_segment_pixels: int = MIN_SEGMENT_PIXELS,
) -> list[Segment]:
    """Union of per-label segments over all requested resolutions; fragments
    below ``min_segment_pixels`` are dropped."""
    if not resolutions:
        raise ParameterError("resolutions must be non-empty")
    segments: list[Segment] = []
    for level, n_seg in enumerate(resolutions):
        level_name = _LEVEL_NAMES[level] if level < len(_LEVEL_NAMES) else f"level{level}"
        labels = slic(image, n_seg, compactness=compactness, iterations=iterations, seed=seed)
        for lab_val in range(int(labels.max()) + 1):
            mask = labels == lab_val
            if int(mask.sum()) < min_segment_pixels:
                continue
            segments.append(
                Segment(
                    segment_id=f"{instance_id}.{level_name}.{lab_val:03d}",
                    instance_id=instance_id,
                    resolution_level=level_name,
                    mask=mask,
                    bbox=mask_bbox(mask),
                )
            )
    return segments


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    top, left = int(ys.min()), int(xs.min())
    return (top, left, int(ys.max()) - top + 1, int(xs.max()) - left + 1)


def segment_to_patch(
    image: np.ndarray,
    segment: Segment,
    channel_means: np.ndarray,
    model_input_shape: tuple[int, int, int],
) -> Patch:
    """Full-canvas infill: pixels outside the mask become the dataset's
    channel means, then the canvas is bilinearly resized (corner-aligned)."""
    if segment.mask.shape != image.shape[:2]:
        raise ParameterError("segment mask does not match image shape")
    if not segment.mask.any():
        raise ParameterError("segment mask is empty")
    canvas = np.where(segment.mask[:, :, None], image, channel_means[None, None, :])
    resized = resize_bilinear(canvas, model_input_shape[0], model_input_shape[1])
    return Patch(segment_id=segment.segment_id, pixels=np.clip(resized, 0.0, 1.0).astype(np.float32))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling (exact identity at equal sizes)."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.astype(np.float64)
    src_y = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    src_x = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0)[:, None, None]
    fx = (src_x - x0)[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_to_bbox(image: np.ndarray, segment: Segment, channel_means: np.ndarray) -> np.ndarray:
    """Masked, un-resized, bbox-cropped pixels for display thumbnails."""
    top, left, bh, bw = segment.bbox
    canvas = np.where(segment.mask[:, :, None], image, channel_means[None, None, :])
    return canvas[top : top + bh, left : left + bw]


# -- mask serialization and outlines ------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, starting with the leading zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs: list[int] = []
    current = False
    count = 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = v
            count = 1
    runs.append(count)
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos = 0
    val = False
    for run in runs:
        if val:
            flat[pos : pos + run] = True
        pos += run
        val = not val
    return flat.reshape(shape)


_SIDE_VERTS = (
    ((0, 0), (1, 0)),  # top edge, left->right
    ((1, 0), (1, 1)),  # right edge, down
    ((1, 1), (0, 1)),  # bottom edge, right->left
    ((0, 1), (0, 0)),  # left edge, up
)
_SIDE_NEIGHBOR = ((-1, 0), (0, 1), (1, 0), (0, -1))


def mask_to_polygons(mask: np.ndarray) -> list[list[tuple[float, float]]]:
    """Closed boundary rings in pixel-corner coordinates (x, y)."""
    h, w = mask.shape
    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for side, ((ax, ay), (bx, by)) in enumerate(_SIDE_VERTS):
                ny, nx = y + _SIDE_NEIGHBOR[side][0], x + _SIDE_NEIGHBOR[side][1]
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx]:
                    continue
                start = (x + ax, y + ay)
                end = (x + bx, y + by)
                edges.setdefault(start, []).append(end)

    for outs in edges.values():
        outs.sort()
    rings: list[list[tuple[float, float]]] = []
    while edges:
        start = min(edges)
        ring = [start]
        current = start
        while True:
            outs = edges[current]
            nxt = outs.pop(0)
            if not outs:
                del edges[current]
            if nxt == start:
                break
            ring.append(nxt)
            current = nxt
        rings.append([(float(px), float(py)) for px, py in ring])
    return rings
