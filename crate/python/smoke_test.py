"""Smoke test for the mitodet_py extension module.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml`, or copy
`target/release/libmitodet_py.so` to `mitodet_py.so` on the Python path.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import mitodet_py as m


def close(a, b, tol=1e-6):
    return abs(a - b) <= tol


def main():
    assert close(m.focal_loss(0.5, 0.25, 2.0), 0.0433217)
    assert close(m.cross_entropy([0.25, 0.75], 0), math.log(4.0))
    assert close(m.average_precision([True, False, True], 2), 0.8333333333, 1e-9)
    assert m.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    anchor = (10.0, 10.0, 42.0, 42.0)
    gt = (12.0, 8.0, 30.0, 40.0)
    back = m.decode(m.encode(gt, anchor), anchor)
    assert all(close(x, y) for x, y in zip(back, gt))
    assert m.nms([(0, 0, 10, 10), (1, 1, 10, 10), (50, 50, 60, 60)], [0.9, 0.8, 0.7], 0.5) == [0, 2]
    assert m.match_detections([((0, 0, 10, 10), 0.9), ((30, 30, 40, 40), 0.5)], [(0, 0, 10, 10)]) == (1, 1, 0)
    assert len(m.generate_anchors(64, 64)) == 9 * (8 * 8 + 4 * 4 + 2 * 2)

    cfg = m.default_config()
    assert "optimizer.learning_rate" in cfg

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        summary = m.synth(str(tmp / "data"), n_cases=12, seed=1, image_size=64)
        assert summary["n_cases"] == 12
        overrides = [
            f"dataset.manifest={json.dumps(str(tmp / 'data' / 'manifest.json'))}",
            f"output.dir={json.dumps(str(tmp / 'run'))}",
            "dataset.patch_size=64",
            "dataset.patches_per_case=1",
            "backbone.channels=16",
            "backbone.head_convs=1",
            "train.epochs=1",
        ]
        trained = m.train(overrides=overrides)
        assert len(trained["epochs"]) == 1
        report = m.evaluate(trained["checkpoint"], overrides=overrides)
        assert 0.0 <= report["map"] <= 1.0

        det = m.Detector.load(trained["checkpoint"])
        pixels = [0.5] * (64 * 64 * 3)
        dets = det.predict(pixels, 64, 64, score_thr=0.0)
        assert all(len(d) == 2 and len(d[0]) == 4 for d in dets)
        assert det.num_parameters() > 0

    fresh = m.Detector(seed=3)
    assert fresh.level_counts(64, 64) == [8 * 8 * 9, 4 * 4 * 9, 2 * 2 * 9]
    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
