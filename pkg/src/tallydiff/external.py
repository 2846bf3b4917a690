"""Protocol boundary for plugging in an external instance counter.

Wire format (one JSON object per line, UTF-8, over the counter process's
stdin/stdout):

request::

    {"image": "<path>", "tags": ["circle", ...],
     "confidence_threshold": 0.4, "iou_threshold": 0.5, "min_area": 12}

response::

    {"size": [H, W],
     "instances": [{"class": "circle", "confidence": 0.97,
                    "mask": {"size": [H, W], "counts": [run, run, ...]}},
                   ...]}

or ``{"error": "<message>"}``. Masks are run-length encoded row-major,
alternating 0-runs and 1-runs starting with a 0-run (see counting.mask_to_rle).
A reference counter speaking this protocol ships as
``python -m tallydiff.fake_counter``.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass

import numpy as np

from .counting import (
    ClassCount,
    CounterConfig,
    CountReport,
    InstanceDetection,
    dedupe_instances,
    rle_to_mask,
    _detection_order,
)
from .scenes import ClassVocabulary, default_vocabulary

__all__ = [
    "CounterEndpoint",
    "ProtocolError",
    "CounterProcessError",
    "ReportInvariantError",
    "external_count",
    "build_request",
    "parse_response",
]


class ProtocolError(RuntimeError):
    """The counter replied with something outside the wire format."""


class CounterProcessError(RuntimeError):
    """The counter process failed, timed out, or reported an error."""


class ReportInvariantError(RuntimeError):
    """A structurally valid response violated CountReport invariants."""


@dataclass(frozen=True)
class CounterEndpoint:
    command: tuple[str, ...]
    timeout_s: float = 30.0


def build_request(image_path: str, tag_names: list[str], cfg: CounterConfig) -> str:
    return json.dumps(
        {
            "image": str(image_path),
            "tags": list(tag_names),
            "confidence_threshold": cfg.confidence_threshold,
            "iou_threshold": cfg.iou_threshold,
            "min_area": cfg.min_area,
        }
    )


def parse_response(
    line: str,
    tags: list[int],
    cfg: CounterConfig,
    vocab: ClassVocabulary,
) -> CountReport:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ProtocolError("response must be a JSON object")
    if "error" in payload:
        raise CounterProcessError(f"counter reported an error: {payload['error']}")
    if "instances" not in payload or not isinstance(payload["instances"], list):
        raise ProtocolError("response missing 'instances' list")
    size = payload.get("size")
    if (
        not isinstance(size, list)
        or len(size) != 2
        or not all(isinstance(v, int) and v > 0 for v in size)
    ):
        raise ProtocolError("response missing valid 'size' [H, W]")
    shape: tuple[int, int] = (size[0], size[1])

    name_to_id = {vocab.by_id(t).name: t for t in tags}
    grouped: dict[int, list[InstanceDetection]] = {t: [] for t in tags}
    for i, item in enumerate(payload["instances"]):
        if not isinstance(item, dict) or {"class", "confidence", "mask"} - set(item):
            raise ProtocolError(f"instance {i}: missing class/confidence/mask")
        name = item["class"]
        if name not in name_to_id:
            raise ProtocolError(f"instance {i}: class {name!r} not among requested tags")
        conf = item["confidence"]
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise ProtocolError(f"instance {i}: confidence {conf!r} outside [0, 1]")
        try:
            mask = rle_to_mask(item["mask"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"instance {i}: bad mask: {exc}") from exc
        if mask.shape != shape:
            raise ProtocolError(f"instance {i}: mask shape {mask.shape} != declared {shape}")
        rows, cols = np.nonzero(mask)
        area = int(mask.sum())
        if area == 0:
            raise ProtocolError(f"instance {i}: empty mask")
        grouped[name_to_id[name]].append(
            InstanceDetection(
                class_id=name_to_id[name],
                mask=mask,
                confidence=float(conf),
                area=area,
                centroid=(float(rows.mean()), float(cols.mean())),
            )
        )

    per_class: dict[int, ClassCount] = {}
    for class_id in sorted(grouped):
        kept = [
            inst
            for inst in grouped[class_id]
            if inst.confidence >= cfg.confidence_threshold and inst.area >= cfg.min_area
        ]
        kept = dedupe_instances(kept, cfg.iou_threshold)
        kept = _make_disjoint(kept)
        kept.sort(key=_detection_order)
        per_class[class_id] = ClassCount(count=len(kept), instances=kept)
    report = CountReport(per_class=per_class, image_shape=shape)
    try:
        report.validate()
    except ValueError as exc:
        raise ReportInvariantError(str(exc)) from exc
    return report


def _make_disjoint(instances: list[InstanceDetection]) -> list[InstanceDetection]:
    """Resolve below-threshold overlaps: contested pixels go to the
    higher-priority instance so per-class masks end up pairwise disjoint.
    Instances emptied entirely by the resolution are dropped."""
    claimed = None
    result: list[InstanceDetection] = []
    for inst in sorted(instances, key=_detection_order):
        mask = inst.mask if claimed is None else (inst.mask & ~claimed)
        if not mask.any():
            continue
        claimed = mask.copy() if claimed is None else (claimed | mask)
        if mask is inst.mask:
            result.append(inst)
        else:
            rows, cols = np.nonzero(mask)
            result.append(
                InstanceDetection(
                    class_id=inst.class_id,
                    mask=mask,
                    confidence=inst.confidence,
                    area=int(mask.sum()),
                    centroid=(float(rows.mean()), float(cols.mean())),
                )
            )
    return result


def external_count(
    image_path: str,
    tags: list[int],
    endpoint: CounterEndpoint,
    cfg: CounterConfig | None = None,
    vocab: ClassVocabulary | None = None,
) -> CountReport:
    """Count via an external process speaking the line protocol."""
    cfg = cfg or CounterConfig()
    vocab = vocab or default_vocabulary()
    request = build_request(image_path, [vocab.by_id(t).name for t in tags], cfg)
    try:
        proc = subprocess.run(
            list(endpoint.command),
            input=request + "\n",
            capture_output=True,
            text=True,
            timeout=endpoint.timeout_s,
        )
    except subprocess.TimeoutExpired as exc:
        raise CounterProcessError(f"counter timed out after {endpoint.timeout_s}s") from exc
    if proc.returncode != 0:
        raise CounterProcessError(
            f"counter exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
        )
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise ProtocolError(f"expected exactly one response line, got {len(lines)}")
    return parse_response(lines[0], tags, cfg, vocab)
