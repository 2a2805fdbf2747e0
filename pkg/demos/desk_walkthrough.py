"""Train on the synthetic colored-shape set, then evaluate and draw overlays.

Run from the repository root:

    python3 demos/desk_walkthrough.py [OUT_DIR]

Takes about half a minute on one core. Prints the loss at a few steps, the
training-set mIoU under both evaluation modes and a threshold sweep, and
writes one overlay PNG per image into OUT_DIR (default ``demo_out``).
"""

import sys
from pathlib import Path

from synseg.inference import evaluate, export_overlay, segment, threshold_sweep
from synseg.synthetic import CATEGORIES, eval_items, make_dataset, palette, training_samples
from synseg.training import TrainConfig, train


def main(out_dir: str = "demo_out") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(n_images=8, side=32, seed=0)
    config = TrainConfig.desk()

    def show(step, report):
        if step % 50 == 0:
            print(f"step {step:3d}  total {report.total:.3f}  " +
                  "  ".join(f"{k} {v:.3f}" for k, v in report.terms().items()))

    result = train(config, training_samples(data), on_step=show)
    print(f"final total {result.final.total:.3f} (step 0: {result.history[0].total:.3f})")

    items, pal = eval_items(data), palette()
    for mode in ("with_background", "labeled_only"):
        rep = evaluate(items, pal, result.model, result.encoders, 0.4, mode)
        print(f"{mode:16s} mIoU {rep.miou:.3f}")
    for row in threshold_sweep(items, pal, result.model, result.encoders):
        print(f"threshold {row.threshold:.1f}  mIoU {row.miou:.3f}")

    for s in data:
        res = segment(s.image, list(CATEGORIES), result.model, result.encoders)
        export_overlay(s.image, res, out / f"{s.image_id}.overlay.png")
    print(f"overlays in {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:])
