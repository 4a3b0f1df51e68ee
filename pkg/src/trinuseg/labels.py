"""Synthetic nuclei samples and three-way ground-truth derivation.

Ground truth for the tri-decoder network is a triplet of binary maps per
image: the nuclei foreground, the "normal" edges (boundary pixels of
isolated nuclei) and the "clustered" edges (boundary pixels where distinct
instances touch or nearly touch).  Instance masks are the precursor; the
triplet is derived from them with a fixed, pure rule.

Disk layout for a dataset rooted at ``root``::

    root/images/<id>.png      8-bit grayscale (or RGB) image
    root/instances/<id>.png   16-bit single-channel instance ids (0 = background)
    root/labels/<id>_nuclei.png, <id>_edge.png, <id>_cluster.png
                              cached derived triplet, 8-bit {0, 255}
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)

# Boundary pixels closer (Chebyshev) than this to another instance count as
# clustered edge; 2 keeps one-pixel gaps between nuclei in the clustered set.
DEFAULT_CLUSTER_RADIUS = 2


class LabelError(ValueError):
    """Raised for invalid instance masks."""


@dataclass
class InstanceMask:
    """Integer id map, 0 = background, k > 0 = instance k.

    Ids must form the contiguous range 1..N.
    """

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2:
            raise LabelError(f"instance map must be 2-D, got shape {self.ids.shape}")
        if not np.issubdtype(self.ids.dtype, np.integer):
            raise LabelError(f"instance map must be integer, got {self.ids.dtype}")

    @property
    def n_instances(self) -> int:
        return int(self.ids.max()) if self.ids.size else 0

    def validate(self) -> None:
        """Check that positive ids are exactly 1..N."""
        present = np.unique(self.ids)
        present = present[present > 0]
        n = len(present)
        if n and not np.array_equal(present, np.arange(1, n + 1)):
            raise LabelError(
                f"instance ids must be contiguous 1..N, got {present.tolist()}"
            )

    def foreground(self) -> np.ndarray:
        return self.ids > 0


@dataclass
class LabelTriplet:
    """Per-image ground truth: nuclei / normal-edge / clustered-edge maps."""

    nuclei: np.ndarray       # H x W bool
    edge: np.ndarray         # H x W bool
    cluster_edge: np.ndarray  # H x W bool

    def stacked(self) -> np.ndarray:
        """(3, H, W) float32 view in branch order nuclei, edge, cluster."""
        return np.stack(
            [self.nuclei, self.edge, self.cluster_edge]
        ).astype(np.float32)


def _boundary_pixels(ids: np.ndarray) -> np.ndarray:
    """Instance pixels with a 4-neighbour of a different id or background.

    Neighbours outside the image are not considered, so an instance flush
    with the image border has no boundary there.
    """
    boundary = np.zeros(ids.shape, dtype=bool)
    fg = ids > 0
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        here = _shift_slices(ids.shape, -dy, -dx)
        there = _shift_slices(ids.shape, dy, dx)
        boundary[here] |= fg[here] & (ids[here] != ids[there])
    return boundary


def _shift_slices(shape, dy: int, dx: int):
    """Slices selecting the region that remains in-bounds after a (dy, dx) shift."""
    h, w = shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    return ys, xs


def _near_other_instance(ids: np.ndarray, radius: int) -> np.ndarray:
    """Pixels with a different-instance pixel within Chebyshev ``radius``."""
    near = np.zeros(ids.shape, dtype=bool)
    fg = ids > 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            here = _shift_slices(ids.shape, -dy, -dx)
            there = _shift_slices(ids.shape, dy, dx)
            near[here] |= fg[here] & fg[there] & (ids[here] != ids[there])
    return near


def derive_label_triplet(
    mask: InstanceMask, cluster_radius: int = DEFAULT_CLUSTER_RADIUS
) -> LabelTriplet:
    """Derive the nuclei / edge / clustered-edge triplet from an instance mask.

    A boundary pixel is an instance pixel with a 4-neighbour of different id
    or background.  A boundary pixel is clustered-edge iff a pixel of a
    different instance lies within Chebyshev ``cluster_radius``; the rest of
    the boundary is normal edge.  Edge and cluster-edge partition the
    boundary set exactly.
    """
    mask.validate()
    ids = mask.ids
    boundary = _boundary_pixels(ids)
    near_other = _near_other_instance(ids, cluster_radius)
    cluster = boundary & near_other
    return LabelTriplet(nuclei=ids > 0, edge=boundary & ~cluster, cluster_edge=cluster)


# ---------------------------------------------------------------------------
# Synthetic sample generation
# ---------------------------------------------------------------------------

# Occlusion by later ellipses can leave slivers of earlier instances; pieces
# smaller than this are dropped before ids are re-compacted.
MIN_FRAGMENT_PIXELS = 3


def _ellipse_mask(size: int, cy, cx, ay, ax, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _relabel_components(ids: np.ndarray) -> np.ndarray:
    """Split ids into 4-connected components, drop slivers, compact to 1..N."""
    out = np.zeros_like(ids)
    next_id = 1
    for k in range(1, int(ids.max()) + 1):
        region = ids == k
        if not region.any():
            continue
        parts, n_parts = ndimage.label(region, structure=FOUR_CONNECTED)
        for c in range(1, n_parts + 1):
            piece = parts == c
            if piece.sum() < MIN_FRAGMENT_PIXELS:
                continue
            out[piece] = next_id
            next_id += 1
    return out


def generate_synthetic_sample(
    seed: int,
    size: int = 128,
    n_instances: int = 12,
    cluster_probability: float = 0.3,
) -> tuple[np.ndarray, InstanceMask]:
    """Render random ellipse nuclei; returns (image, instance mask).

    With probability ``cluster_probability`` an ellipse is planted adjacent
    to an existing one so the two touch; otherwise a free spot is sought that
    keeps a safety gap of ``DEFAULT_CLUSTER_RADIUS + 1`` pixels to existing
    foreground (falling back to a random spot when the canvas is too full).
    Later ellipses overwrite earlier ones in the id map; occluded instances
    are split/re-compacted afterwards.  Fully deterministic per seed.
    """
    if size < 64:
        raise ValueError(f"size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    ids = np.zeros((size, size), dtype=np.int32)
    gap = DEFAULT_CLUSTER_RADIUS + 1
    blocked = np.zeros((size, size), dtype=bool)  # fg dilated by the gap
    anchors: list[tuple[float, float, float]] = []  # cy, cx, mean radius

    lo, hi = 0.035 * size, 0.09 * size
    margin = int(np.ceil(hi)) + 2

    for k in range(1, n_instances + 1):
        ay = max(2.5, rng.uniform(lo, hi))
        ax = max(2.5, rng.uniform(lo, hi))
        theta = rng.uniform(0.0, np.pi)
        make_cluster = bool(anchors) and rng.uniform() < cluster_probability

        if make_cluster:
            cy0, cx0, r0 = anchors[rng.integers(len(anchors))]
            phi = rng.uniform(0.0, 2 * np.pi)
            dist = (r0 + 0.5 * (ay + ax)) * rng.uniform(0.8, 1.0)
            fg = ids > 0
            # walk inward until the new ellipse actually touches existing
            # foreground (mean radii overshoot along minor axes)
            for _ in range(12):
                cy = float(np.clip(cy0 + dist * np.sin(phi), margin, size - margin))
                cx = float(np.clip(cx0 + dist * np.cos(phi), margin, size - margin))
                candidate = _ellipse_mask(size, cy, cx, ay, ax, theta)
                touches = ndimage.maximum_filter(candidate, size=3) & fg
                if touches.any():
                    break
                dist *= 0.85
        else:
            cy = cx = None
            for _ in range(40):
                ty = rng.uniform(margin, size - margin)
                tx = rng.uniform(margin, size - margin)
                if not blocked[_ellipse_mask(size, ty, tx, ay, ax, theta)].any():
                    cy, cx = ty, tx
                    break
            if cy is None:  # canvas too crowded, accept the last try
                cy, cx = ty, tx

        ellipse = _ellipse_mask(size, cy, cx, ay, ax, theta)
        ids[ellipse] = k
        anchors.append((cy, cx, 0.5 * (ay + ax)))
        span = 2 * gap + 1
        blocked = ndimage.maximum_filter(ids > 0, size=span)

    ids = _relabel_components(ids)
    n_final = int(ids.max())

    image = np.full((size, size), 0.1, dtype=np.float64)
    intensities = rng.uniform(0.5, 0.9, size=max(n_final, 1))
    for k in range(1, n_final + 1):
        image[ids == k] = intensities[k - 1]
    image += rng.normal(0.0, 0.05, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return image, InstanceMask(ids=ids)


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One dataset item: image, instance ids and the derived label triplet."""

    image: np.ndarray        # H x W x C float32 in [0, 1]
    instances: InstanceMask
    labels: LabelTriplet
    sample_id: str = ""


def make_sample(image: np.ndarray, instances: InstanceMask, sample_id: str = "") -> Sample:
    if image.ndim == 2:
        image = image[:, :, None]
    return Sample(
        image=image.astype(np.float32),
        instances=instances,
        labels=derive_label_triplet(instances),
        sample_id=sample_id,
    )


def generate_dataset(
    seed: int,
    n_samples: int,
    size: int = 128,
    n_instances: int = 12,
    cluster_probability: float = 0.3,
) -> list[Sample]:
    """n_samples synthetic samples with per-sample seeds derived from ``seed``."""
    samples = []
    for i in range(n_samples):
        image, mask = generate_synthetic_sample(
            seed * 100003 + i, size=size, n_instances=n_instances,
            cluster_probability=cluster_probability,
        )
        samples.append(make_sample(image, mask, sample_id=f"{i:05d}"))
    return samples


def save_dataset(root: str, samples: list[Sample]) -> None:
    for sub in ("images", "instances", "labels"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for sample in samples:
        sid = sample.sample_id
        img = np.round(sample.image[:, :, 0] * 255).astype(np.uint8) \
            if sample.image.shape[2] == 1 \
            else np.round(sample.image * 255).astype(np.uint8)
        Image.fromarray(img).save(os.path.join(root, "images", f"{sid}.png"))
        inst = sample.instances.ids.astype(np.uint16)
        Image.fromarray(inst).save(
            os.path.join(root, "instances", f"{sid}.png"))
        for name, arr in (("nuclei", sample.labels.nuclei),
                          ("edge", sample.labels.edge),
                          ("cluster", sample.labels.cluster_edge)):
            Image.fromarray((arr.astype(np.uint8)) * 255).save(
                os.path.join(root, "labels", f"{sid}_{name}.png"))


def load_dataset(root: str) -> list[Sample]:
    """Read the layout written by save_dataset; derives labels when not cached."""
    image_dir = os.path.join(root, "images")
    if not os.path.isdir(image_dir):
        raise FileNotFoundError(f"no images directory under {root}")
    samples = []
    for fname in sorted(os.listdir(image_dir)):
        if not fname.endswith(".png"):
            continue
        sid = fname[:-4]
        image = np.asarray(Image.open(os.path.join(image_dir, fname)))
        image = image.astype(np.float32) / 255.0
        if image.ndim == 2:
            image = image[:, :, None]
        inst_path = os.path.join(root, "instances", f"{sid}.png")
        if not os.path.isfile(inst_path):
            raise FileNotFoundError(f"missing instance map: {inst_path}")
        ids = np.asarray(Image.open(inst_path)).astype(np.int32)
        mask = InstanceMask(ids=ids)
        label_paths = {
            name: os.path.join(root, "labels", f"{sid}_{name}.png")
            for name in ("nuclei", "edge", "cluster")
        }
        if all(os.path.isfile(p) for p in label_paths.values()):
            maps = {
                name: np.asarray(Image.open(p)) > 127
                for name, p in label_paths.items()
            }
            triplet = LabelTriplet(
                nuclei=maps["nuclei"], edge=maps["edge"],
                cluster_edge=maps["cluster"],
            )
        else:
            triplet = derive_label_triplet(mask)
        samples.append(Sample(image=image, instances=mask, labels=triplet,
                              sample_id=sid))
    return samples
