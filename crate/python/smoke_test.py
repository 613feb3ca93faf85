"""Smoke test for the hallux_py extension module.

Build and install first, e.g. from crates/py:
`maturin build --release -o dist && pip install dist/*.whl`.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import hallux_py as hx


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    check(hx.build_channel_sequence(6) == [1, 2, 3, 4, 5, 6, 1, 3, 5, 2, 4, 6, 1, 4, 2, 5, 3, 6, 1, 5, 2, 6, 1, 6],
          "channel sequence for six channels")

    t = hx.Tensor([2, 3], [float(i) for i in range(6)])
    check(t.shape == [2, 3] and len(t) == 6 and t.tolist()[5] == 5.0, "tensor round trip")
    try:
        hx.Tensor([2, 2], [1.0])
        check(False, "bad tensor shape rejected")
    except ValueError:
        check(True, "bad tensor shape rejected")

    series = [[math.sin(0.3 * i + c) for i in range(50)] for c in range(6)]
    padded = hx.crop_or_pad(series, 64, 5)
    check(len(padded[0]) == 64 and padded[0][:6] == [series[0][0]] * 6, "crop_or_pad repeats the first sample")
    norm = hx.normalize(series)
    check(all(-1.0 - 1e-6 <= v <= 1.0 + 1e-6 for ch in norm for v in ch), "normalize range")
    img = hx.inertial_image(series, 16, 16)
    check(img.shape == [16, 16, 1], "inertial image shape")

    check(abs(hx.triplet_loss([0.0, 0.0], [1.0, 0.0], [0.0, 2.0], 0.2)) < 1e-12, "triplet loss past the margin")
    check(abs(hx.regression_loss([1.0, 2.0], [0.0, 0.0]) - 5.0) < 1e-9, "regression loss")
    fused = hx.fuse_late([[0.7, 0.3], [0.4, 0.6]])
    check(abs(sum(fused) - 1.0) < 1e-6 and fused[0] > fused[1], "late fusion")
    check(hx.accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75, "accuracy")

    with tempfile.TemporaryDirectory() as d:
        small = {"num_classes": 4, "subjects": 3, "trials": 2}
        n = hx.synth(str(Path(d) / "data"), json.dumps(small))
        check(n == 24 and (Path(d) / "data" / "manifest.json").exists(), "synthetic manifest")

        cfg = json.loads(hx.synthetic_config(str(Path(d) / "run"), 3))
        cfg["dataset"] = {"synth": small}
        cfg["augment_views"] = 1
        for stage in ("stream_training", "fusion_training", "hallucination_training"):
            cfg[stage]["epochs"] = 1
        reports = json.loads(hx.run_experiment(json.dumps(cfg)))
        configs = [c["configuration"] for c in reports[0]["folds"][0]["results"]]
        check("inertial" in configs and any(c.startswith("hallucinated-") for c in configs), "run_experiment report")
        try:
            bad = dict(cfg, fusion="late", hall_mode="integrated")
            hx.check_config(json.dumps(bad))
            check(False, "integrated with late fusion rejected")
        except ValueError as e:
            check("N/A" in str(e), "integrated with late fusion rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
