"""Instance counting on rendered/generated images and correction planning.

The built-in counter is dependency-light and exact on clean synthetic
renders: nearest-palette color assignment gates per-class binary maps,
connected components give candidate instances, and simple geometric
features (bounding-box extent plus radial spread) validate the expected
shape. Confidence blends color purity with shape match so that the
least-committed blobs sort last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scenes import BACKGROUND_COLORS, ClassVocabulary, default_vocabulary

__all__ = [
    "CounterConfig",
    "InstanceDetection",
    "ClassCount",
    "CountReport",
    "ClassCorrection",
    "CorrectionPlan",
    "PlanningError",
    "count_objects",
    "plan_correction",
    "dedupe_instances",
    "mask_iou",
    "mask_to_rle",
    "rle_to_mask",
    "shape_match_score",
]


@dataclass(frozen=True)
class CounterConfig:
    confidence_threshold: float = 0.4
    iou_threshold: float = 0.5
    min_area: int = 12
    color_tolerance: float = 0.30  # normalized RGB distance gate
    removal_dilation: int = 3  # pixels of margin around removal masks
    addition_gap: int = 2  # clearance between added blobs and anything else
    addition_default_radius: int = 5  # used when a class has no detected instance

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")

    @classmethod
    def for_vocab(cls, vocab: ClassVocabulary, **overrides) -> "CounterConfig":
        """Derive min_area from the smallest shape the vocab can render."""
        from .scenes import render_shape_mask

        smallest = min(
            int(render_shape_mask(c.shape, (16, 16), 4, (32, 32)).sum()) for c in vocab.classes
        )
        return cls(min_area=max(4, smallest // 2), **overrides)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "CounterConfig":
        return cls(**d)


@dataclass
class InstanceDetection:
    class_id: int
    mask: np.ndarray  # bool [H, W]
    confidence: float
    area: int
    centroid: tuple[float, float]  # (row, col)


@dataclass
class ClassCount:
    count: int
    instances: list[InstanceDetection]


@dataclass
class CountReport:
    per_class: dict[int, ClassCount]
    image_shape: tuple[int, int]

    def count(self, class_id: int) -> int:
        entry = self.per_class.get(class_id)
        return entry.count if entry is not None else 0

    def counts(self) -> dict[int, int]:
        return {cls: e.count for cls, e in self.per_class.items()}

    def validate(self) -> None:
        for cls, entry in self.per_class.items():
            if entry.count != len(entry.instances):
                raise ValueError(f"class {cls}: count {entry.count} != {len(entry.instances)} instances")
            confs = [i.confidence for i in entry.instances]
            if any(b > a for a, b in zip(confs, confs[1:])):
                raise ValueError(f"class {cls}: instances not sorted by confidence")
            union = np.zeros(self.image_shape, dtype=bool)
            for inst in entry.instances:
                if inst.mask.shape != self.image_shape:
                    raise ValueError(f"class {cls}: mask shape {inst.mask.shape} != {self.image_shape}")
                if (inst.mask & union).any():
                    raise ValueError(f"class {cls}: instance masks overlap")
                union |= inst.mask

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "per_class": {
                str(cls): [
                    {
                        "confidence": inst.confidence,
                        "area": inst.area,
                        "centroid": list(inst.centroid),
                        "mask": mask_to_rle(inst.mask),
                    }
                    for inst in entry.instances
                ]
                for cls, entry in self.per_class.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CountReport":
        shape = tuple(d["image_shape"])
        per_class = {}
        for cls_key, items in d["per_class"].items():
            instances = [
                InstanceDetection(
                    class_id=int(cls_key),
                    mask=rle_to_mask(e["mask"]),
                    confidence=e["confidence"],
                    area=e["area"],
                    centroid=tuple(e["centroid"]),
                )
                for e in items
            ]
            per_class[int(cls_key)] = ClassCount(count=len(instances), instances=instances)
        return cls(per_class=per_class, image_shape=shape)


# ---------------------------------------------------------------------------
# Run-length encoding (row-major, counts alternate 0-runs / 1-runs)
# ---------------------------------------------------------------------------


def mask_to_rle(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).ravel()
    counts = []
    pos = 0
    current = False
    for run_val, run_len in _runs(flat):
        if run_val != current:
            counts.append(0)
            current = run_val
        counts.append(int(run_len))
        current = not current
        pos += run_len
    if not flat.size:
        counts = []
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def _runs(flat: np.ndarray):
    if flat.size == 0:
        return
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    for s, e in zip(starts, ends):
        yield bool(flat[s]), e - s


def rle_to_mask(d: dict) -> np.ndarray:
    H, W = d["size"]
    counts = d["counts"]
    if any((not isinstance(c, int)) or c < 0 for c in counts):
        raise ValueError("RLE counts must be non-negative integers")
    total = sum(counts)
    if total != H * W:
        raise ValueError(f"RLE counts sum {total} != {H}x{W}")
    flat = np.zeros(H * W, dtype=bool)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos : pos + c] = True
        pos += c
        val = not val
    return flat.reshape(H, W)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


# ---------------------------------------------------------------------------
# Shape validation
# ---------------------------------------------------------------------------

# Nominal (extent, radial coefficient of variation) per shape for crisp
# rasterized sizes 4..9, with generous tolerances for generated blobs.
_SHAPE_NOMINALS = {
    "circle": {"extent": (0.60, 0.80), "radial_cv": (0.00, 0.16)},
    "square": {"extent": (0.85, 1.00), "radial_cv": (0.08, 0.26)},
    "triangle": {"extent": (0.38, 0.58), "radial_cv": (0.16, 0.40)},
}


def _band_score(value: float, lo: float, hi: float) -> float:
    """1 inside [lo, hi], linear falloff over half the band width outside."""
    falloff = max(0.5 * (hi - lo), 1e-6)
    if value < lo:
        return max(0.0, 1.0 - (lo - value) / falloff)
    if value > hi:
        return max(0.0, 1.0 - (value - hi) / falloff)
    return 1.0


def shape_match_score(mask: np.ndarray, expected_shape: str) -> float:
    """How well a component matches its class's shape, in [0, 1]."""
    if expected_shape not in _SHAPE_NOMINALS:
        raise ValueError(f"unknown shape {expected_shape!r}")
    area = int(mask.sum())
    if area == 0:
        return 0.0
    rows, cols = np.nonzero(mask)
    bbox = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
    extent = area / bbox

    boundary = mask & ~ndimage.binary_erosion(mask)
    brows, bcols = np.nonzero(boundary)
    cy, cx = rows.mean(), cols.mean()
    radii = np.hypot(brows - cy, bcols - cx)
    radial_cv = float(radii.std() / radii.mean()) if radii.mean() > 0 else 1.0

    bands = _SHAPE_NOMINALS[expected_shape]
    return min(
        _band_score(extent, *bands["extent"]),
        _band_score(radial_cv, *bands["radial_cv"]),
    )


# ---------------------------------------------------------------------------
# Counting
# ---------------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def count_objects(
    image_u8: np.ndarray,
    tags: list[int],
    cfg: CounterConfig | None = None,
    vocab: ClassVocabulary | None = None,
) -> CountReport:
    """Segment, classify, and count instances of the tagged classes."""
    cfg = cfg or CounterConfig()
    vocab = vocab or default_vocabulary()
    if not tags:
        raise ValueError("tags must be non-empty")
    for t in tags:
        vocab.by_id(t)

    if image_u8.dtype != np.uint8 or image_u8.ndim != 3 or image_u8.shape[2] != 3:
        raise ValueError(f"expected uint8 HWC image, got {image_u8.dtype} {image_u8.shape}")
    H, W = image_u8.shape[:2]
    pixels = image_u8.astype(np.float64)

    palette = [np.array(c, dtype=np.float64) for c in BACKGROUND_COLORS]
    palette += [np.array(vocab.by_id(c).color, dtype=np.float64) for c in vocab.class_ids]
    palette_arr = np.stack(palette)  # [P, 3]
    dists = np.linalg.norm(pixels[:, :, None, :] - palette_arr[None, None, :, :], axis=-1)
    nearest = np.argmin(dists, axis=2)
    norm = 255.0 * math.sqrt(3.0)

    class_index = {c: i + len(BACKGROUND_COLORS) for i, c in enumerate(vocab.class_ids)}
    per_class: dict[int, ClassCount] = {}
    for class_id in sorted(set(tags)):
        spec = vocab.by_id(class_id)
        pal_idx = class_index[class_id]
        class_map = (nearest == pal_idx) & (dists[:, :, pal_idx] / norm < cfg.color_tolerance)
        labels, n = ndimage.label(class_map, structure=_EIGHT)
        instances: list[InstanceDetection] = []
        for lbl in range(1, n + 1):
            mask = labels == lbl
            area = int(mask.sum())
            if area < cfg.min_area:
                continue
            mean_d = float(dists[:, :, pal_idx][mask].mean()) / norm
            color_score = max(0.0, 1.0 - mean_d / cfg.color_tolerance)
            shape_score = shape_match_score(mask, spec.shape)
            confidence = color_score * (0.55 + 0.45 * shape_score)
            if confidence < cfg.confidence_threshold:
                continue
            rows, cols = np.nonzero(mask)
            instances.append(
                InstanceDetection(
                    class_id=class_id,
                    mask=mask,
                    confidence=confidence,
                    area=area,
                    centroid=(float(rows.mean()), float(cols.mean())),
                )
            )
        instances = dedupe_instances(instances, cfg.iou_threshold)
        instances.sort(key=_detection_order)
        per_class[class_id] = ClassCount(count=len(instances), instances=instances)

    report = CountReport(per_class=per_class, image_shape=(H, W))
    report.validate()
    return report


def _detection_order(inst: InstanceDetection):
    return (-inst.confidence, -inst.area, inst.centroid[0], inst.centroid[1])


def dedupe_instances(instances: list[InstanceDetection], iou_threshold: float) -> list[InstanceDetection]:
    """Drop same-class instances overlapping a higher-confidence one."""
    ordered = sorted(instances, key=_detection_order)
    kept: list[InstanceDetection] = []
    for inst in ordered:
        if all(mask_iou(inst.mask, k.mask) < iou_threshold for k in kept):
            kept.append(inst)
    return kept


# ---------------------------------------------------------------------------
# Correction planning
# ---------------------------------------------------------------------------


class PlanningError(RuntimeError):
    """Raised when an addition cannot be placed in free background."""


@dataclass
class ClassCorrection:
    mask: np.ndarray  # bool [H, W]
    sign: int  # +1 remove, -1 add, 0 no-op
    surplus: int

    def active(self) -> bool:
        return self.surplus != 0


@dataclass
class CorrectionPlan:
    per_class: dict[int, ClassCorrection]
    image_shape: tuple[int, int]

    def active_classes(self) -> list[int]:
        return sorted(cls for cls, c in self.per_class.items() if c.active())

    def union_mask(self) -> np.ndarray:
        union = np.zeros(self.image_shape, dtype=bool)
        for c in self.per_class.values():
            union |= c.mask
        return union

    def restricted_to(self, class_id: int) -> "CorrectionPlan":
        """A plan slice with only one class's correction active."""
        if class_id not in self.per_class:
            raise KeyError(f"plan has no entry for class {class_id}")
        return CorrectionPlan(per_class={class_id: self.per_class[class_id]}, image_shape=self.image_shape)

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "per_class": {
                str(cls): {"sign": c.sign, "surplus": c.surplus, "mask": mask_to_rle(c.mask)}
                for cls, c in self.per_class.items()
            },
        }


def _removal_order(inst: InstanceDetection):
    return (inst.confidence, inst.area, inst.centroid[0], inst.centroid[1])


def plan_correction(
    report: CountReport,
    targets: dict[int, int],
    image_shape: tuple[int, int],
    cfg: CounterConfig | None = None,
) -> CorrectionPlan:
    """Build per-class correction masks from detected vs. target counts.

    Removal selects the lowest-confidence surplus instances (ties: smaller
    area, then topmost-leftmost centroid) and dilates their union. Addition
    greedily places blobs at the points farthest from every existing
    instance, never touching any detected mask.
    """
    cfg = cfg or CounterConfig()
    missing = set(targets) - set(report.per_class)
    if missing:
        raise ValueError(f"targets reference classes absent from the report: {sorted(missing)}")
    H, W = image_shape

    all_instances = np.zeros(image_shape, dtype=bool)
    for entry in report.per_class.values():
        for inst in entry.instances:
            all_instances |= inst.mask

    # Obstacles grow as addition blobs get placed, processed in class order.
    obstacles = all_instances.copy()
    per_class: dict[int, ClassCorrection] = {}
    for class_id, target in sorted(targets.items()):
        entry = report.per_class[class_id]
        surplus = entry.count - target
        if surplus == 0:
            per_class[class_id] = ClassCorrection(
                mask=np.zeros(image_shape, dtype=bool), sign=0, surplus=0
            )
        elif surplus > 0:
            doomed = sorted(entry.instances, key=_removal_order)[:surplus]
            union = np.zeros(image_shape, dtype=bool)
            for inst in doomed:
                union |= inst.mask
            if cfg.removal_dilation > 0:
                union = ndimage.binary_dilation(union, structure=_EIGHT, iterations=cfg.removal_dilation)
            per_class[class_id] = ClassCorrection(mask=union, sign=+1, surplus=surplus)
        else:
            areas = sorted(inst.area for inst in entry.instances)
            if areas:
                median_area = areas[len(areas) // 2]
                radius = max(2, int(round(math.sqrt(median_area / math.pi))))
            else:
                radius = cfg.addition_default_radius
            addition = np.zeros(image_shape, dtype=bool)
            for _ in range(-surplus):
                blob = _place_blob(obstacles, radius, cfg.addition_gap, class_id)
                addition |= blob
                obstacles |= blob
            per_class[class_id] = ClassCorrection(mask=addition, sign=-1, surplus=surplus)

    return CorrectionPlan(per_class=per_class, image_shape=image_shape)


def _place_blob(obstacles: np.ndarray, radius: int, gap: int, class_id: int) -> np.ndarray:
    """Disk at the free point farthest from obstacles and the border."""
    H, W = obstacles.shape
    padded = np.pad(obstacles, 1, constant_values=True)  # border counts as obstacle
    dist = ndimage.distance_transform_edt(~padded)[1:-1, 1:-1]
    best = np.unravel_index(int(np.argmax(dist)), dist.shape)  # first max: smallest (row, col)
    if dist[best] < radius + gap:
        raise PlanningError(
            f"no free region large enough to add a radius-{radius} instance of class {class_id}"
        )
    yy, xx = np.mgrid[0:H, 0:W]
    return (yy - best[0]) ** 2 + (xx - best[1]) ** 2 <= radius**2
