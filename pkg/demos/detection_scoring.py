"""Score stored lesion-detection outputs against ground truth.

Detection here is evaluation-only: boxes come from an external detector
as a JSON file, and the harness computes greedy-matched precision,
recall, F1, and all-points average precision at IoU 0.40.
"""

import argparse
import json
from pathlib import Path

from pkcp.harness import parse_config, run_experiment


DETECTIONS = [
    # two clean hits
    {"image_id": "img-01", "boxes": [[12, 12, 30, 30, 0.95]],
     "gt": [[12, 12, 30, 30]]},
    {"image_id": "img-02", "boxes": [[40, 8, 58, 26, 0.90]],
     "gt": [[41, 8, 59, 26]]},
    # a confident false alarm next to a weaker hit
    {"image_id": "img-03",
     "boxes": [[5, 5, 15, 15, 0.85], [30, 30, 46, 46, 0.60]],
     "gt": [[31, 31, 46, 46]]},
    # a miss: ground truth with no overlapping prediction
    {"image_id": "img-04", "boxes": [], "gt": [[10, 40, 28, 58]]},
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo_detection", help="output directory")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det_path = out / "detections.json"
    det_path.write_text(json.dumps(DETECTIONS, indent=2))

    cfg = parse_config({
        "name": "detector-eval", "task": "detection_eval",
        "aug_config": "pkcp_no_aug",
        "data": {"manifest": "unused.json", "detections": str(det_path)},
        "seeds": [0], "outputs": str(out / "run"),
    })
    result = run_experiment(cfg)
    for name, value in result.per_seed[0].metrics.items():
        shown = "absent" if value is None else f"{value:.4f}"
        print(f"{name:10s} {shown}")
    print(f"\nmetrics stored under {result.out_dir}")


if __name__ == "__main__":
    main()
