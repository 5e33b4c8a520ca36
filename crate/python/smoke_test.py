"""End-to-end exercise of the semdet_py bindings.

Generates a small synthetic dataset, trains a tiny detector for a few
epochs, scores it on the val split, and runs single-image inference.
This is a wiring check, not a quality bar: it asserts shapes and ranges,
not detection accuracy.

Run from the repository root:

    pip install -e crates/py --no-build-isolation
    python python/smoke_test.py
"""

import sys
import tempfile
from pathlib import Path

try:
    import semdet_py as sd
except ImportError:
    sys.exit("semdet_py is not installed; run: pip install -e crates/py --no-build-isolation")


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="semdet_smoke_") as tmp:
        tmp = Path(tmp)
        data = tmp / "data"

        n = sd.synth(data, family="aei", preset="easy", seed=7, counts=(24, 6, 4))
        assert n == 34, f"expected 34 images, got {n}"
        print(f"synth: {n} images under {data}")

        run = sd.train_detector(
            data,
            tmp / "run",
            epochs=6,
            eval_every=3,
            seed=0,
            batch_size=4,
            down_channels=[4, 8, 8, 8],
            up_channels=[8, 8],
            head_channels=8,
        )
        print(
            f"train: best epoch {run['best_epoch']}, "
            f"val mAP@0.5:0.95 {run['best_map_50_95']:.3f}, "
            f"{run['eval_points']} eval points"
        )
        ckpt = Path(run["best_checkpoint"])
        assert ckpt.exists(), ckpt
        assert run["epochs"] == 6

        det = sd.Detector(ckpt, data, conf_thr=0.05)
        print(f"load: {det!r}")
        assert det.num_classes == 5
        assert det.in_size == 64
        assert det.stride == 4
        assert det.class_names[-1] == "line_collapse"

        scores = det.evaluate(data, split="val")
        assert 0.0 <= scores["map_50"] <= 1.0
        assert set(scores["per_class_ap_50_95"]) == set(det.class_names)
        print(f"eval: val mAP@0.50 {scores['map_50']:.3f}")

        image = sorted((data / "val" / "images").glob("*.pgm"))[0]
        boxes = det.detect(image)
        assert len(boxes) <= 100
        assert all(b.score >= 0.05 for b in boxes)
        assert all(0 <= b.class_id < 5 for b in boxes)
        assert [b.score for b in boxes] == sorted((b.score for b in boxes), reverse=True)
        shown = ", ".join(repr(b) for b in boxes[:3]) or "none above threshold"
        print(f"detect: {len(boxes)} boxes on {image.name}: {shown}")

        # Fine-tuning from the checkpoint goes through the same entry point.
        tuned = sd.train_detector(
            data,
            tmp / "tuned",
            init=ckpt,
            epochs=2,
            eval_every=2,
            seed=1,
            batch_size=4,
            down_channels=[4, 8, 8, 8],
            up_channels=[8, 8],
            head_channels=8,
        )
        assert Path(tuned["best_checkpoint"]).exists()
        print(f"transfer: best epoch {tuned['best_epoch']} of {tuned['epochs']}")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
