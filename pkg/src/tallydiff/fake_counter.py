"""Reference external counter: the built-in counter behind the wire protocol.

Run with ``python -m tallydiff.fake_counter``. Reads one JSON request line
from stdin, writes one JSON response line to stdout. Exists so the
protocol can be integration-tested without any real detector.
"""

from __future__ import annotations

import json
import sys

from .counting import CounterConfig, count_objects, mask_to_rle
from .scenes import default_vocabulary
from .util import load_png


def handle_request(line: str) -> str:
    try:
        req = json.loads(line)
        vocab = default_vocabulary()
        tags = [vocab.by_name(name).class_id for name in req["tags"]]
        cfg = CounterConfig(
            confidence_threshold=req.get("confidence_threshold", 0.4),
            iou_threshold=req.get("iou_threshold", 0.5),
            min_area=req.get("min_area", 12),
        )
        image = load_png(req["image"])
        report = count_objects(image, tags, cfg, vocab)
    except Exception as exc:  # any failure becomes a protocol-level error
        return json.dumps({"error": f"{type(exc).__name__}: {exc}"})

    instances = []
    for class_id, entry in sorted(report.per_class.items()):
        name = vocab.by_id(class_id).name
        for inst in entry.instances:
            instances.append(
                {"class": name, "confidence": inst.confidence, "mask": mask_to_rle(inst.mask)}
            )
    return json.dumps({"size": list(report.image_shape), "instances": instances})


def main() -> int:
    line = sys.stdin.readline()
    if not line.strip():
        print(json.dumps({"error": "empty request"}))
        return 1
    print(handle_request(line))
    return 0


if __name__ == "__main__":
    sys.exit(main())
