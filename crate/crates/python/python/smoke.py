"""Smoke test for the msqnet_py extension.

Build first with `cargo build -p msqnet-py --release`; the script falls back
to the shared library in target/ when the module is not installed.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))


def load():
    try:
        import msqnet_py

        return msqnet_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libmsqnet_py.so")
        if os.path.exists(lib):
            dst = os.path.join(tempfile.mkdtemp(), "msqnet_py.so")
            shutil.copy(lib, dst)
            spec = importlib.util.spec_from_file_location("msqnet_py", dst)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("msqnet_py not found; run `cargo build -p msqnet-py --release`")


def main():
    m = load()

    assert m.average_precision([0.9, 0.8, 0.7], [1.0, 0.0, 1.0]) == (1.0 + 2.0 / 3.0) / 2.0
    assert m.average_precision([0.1, 0.2], [0.0, 0.0]) is None
    assert m.mean_ap([[0.9, 0.1], [0.2, 0.8]], [[1.0, 0.0], [0.0, 1.0]]) == 1.0

    splits = m.zero_shot_splits(12, 0.75, 10, 0)
    assert len(splits) == 10
    for seen, unseen in splits:
        assert len(seen) == 9 and len(unseen) == 3 and not set(seen) & set(unseen)

    exp = m.Experiment.reference(3)
    assert len(exp.classes) == 8
    again = m.Experiment.from_json(exp.to_json())
    assert again.to_json() == exp.to_json()
    try:
        m.Experiment.from_json('{"bogus": 1}')
        raise AssertionError("unknown keys must be rejected")
    except ValueError:
        pass

    pixels, shape, labels = m.generate_video(exp, ["blink"], 7)
    assert shape == [8, 3, 16, 16] and len(pixels) == math.prod(shape)
    assert sum(labels) == 1.0 and all(0.0 <= p <= 1.0 for p in pixels)

    exp.epochs = 2
    exp.n_train = 16
    exp.n_eval = 8
    model, metrics = m.train(exp)
    assert dict(metrics)["map"] > 0.0
    logits = model.predict(pixels)
    assert len(logits) == 8 and all(math.isfinite(x) for x in logits)

    path = os.path.join(tempfile.mkdtemp(), "model.msqk")
    model.save(path)
    fresh = m.Model(exp)
    fresh.load(path)
    assert fresh.checksum() == model.checksum()
    assert fresh.predict(pixels) == logits

    print("python smoke test passed")


if __name__ == "__main__":
    main()
