import numpy as np
import pytest

from norcal.core import Annotation, Box, ClassTable, GroundTruthSet, Image


def make_gt(anns, n_images=None, classes=(1, 2, 3)):
    """anns: iterable of (image_id, class_id, (x, y, w, h)[, ignore])."""
    anns = list(anns)
    if n_images is None:
        n_images = max([a[0] for a in anns] + [1])
    images = tuple(Image(i, 100.0, 100.0) for i in range(1, n_images + 1))
    out = tuple(
        Annotation(k + 1, a[0], a[1], Box(*a[2]), bool(a[3]) if len(a) > 3 else False)
        for k, a in enumerate(anns)
    )
    return GroundTruthSet(images, out, tuple((c, f"c{c}") for c in classes))


@pytest.fixture
def table3():
    # one class per bucket
    return ClassTable.from_counts({1: 5, 2: 50, 3: 500})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(rng, n_classes=3):
    """Tiny random evaluation instance on a coarse grid (many IoU and score ties).

    At most 3 images, and per class at most 4 detections and 3 ground truths.
    Returns (tuples, gt, table, cfg).
    """
    from norcal.core import DetectionTuple
    from norcal.evaluation import DEFAULT_IOU_THRESHOLDS, PER_CLASS_FIXED, PER_IMAGE, EvalConfig

    n_images = int(rng.integers(1, 4))
    classes = tuple(range(1, n_classes + 1))

    def box():
        x, y = rng.integers(0, 4, 2) * 2
        w, h = rng.integers(1, 4, 2) * 2
        return (float(x), float(y), float(w), float(h))

    anns, tuples = [], []
    for c in classes:
        for _ in range(int(rng.integers(0, 4))):
            anns.append((int(rng.integers(1, n_images + 1)), c, box(), bool(rng.random() < 0.2)))
        for _ in range(int(rng.integers(0, 5))):
            score = float(rng.choice([0.1, 0.5, 0.9, rng.random()]))
            tuples.append(DetectionTuple(int(rng.integers(1, n_images + 1)), c, Box(*box()),
                                         score, int(rng.integers(0, 3))))
    gt = make_gt(anns, n_images=n_images, classes=classes)
    counts = {c: int(rng.choice([3, 30, 300])) for c in classes}
    table = ClassTable.from_counts(counts)
    thr = tuple(sorted(rng.choice(DEFAULT_IOU_THRESHOLDS, size=int(rng.integers(1, 4)),
                                  replace=False).tolist()))
    mode = PER_IMAGE if rng.random() < 0.7 else PER_CLASS_FIXED
    cfg = EvalConfig(thr, mode, int(rng.integers(1, 8)))
    return tuples, gt, table, cfg


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
