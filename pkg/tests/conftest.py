import numpy as np
import pytest


def embedding_matrix(d):
    """Column j spans (1, ..., 1, -(j+1), 0, ...) with j+1 leading ones, scaled.

    Built entry by entry, independent of the recurrence used by ``elevate``.
    """
    e = np.zeros((d + 1, d))
    for j in range(d):
        alpha = np.sqrt(2.0 / 3.0) * (d + 1) / np.sqrt((j + 1) * (j + 2))
        for r in range(j + 1):
            e[r, j] = alpha
        e[j + 1, j] = -(j + 1) * alpha
    return e


def features_at_lattice_points(points):
    """Features whose elevation is exactly the given remainder-0 points."""
    points = np.asarray(points, dtype=np.float64)
    d = points.shape[1] - 1
    e = embedding_matrix(d)
    # columns of e are orthogonal with squared norm 2/3 (d+1)^2
    return points @ e / (2.0 / 3.0 * (d + 1) ** 2)


def random_remainder0_points(rng, d, count, spread=4):
    """Distinct zero-sum points with all coordinates divisible by d+1."""
    if (2 * spread + 1) ** d < count:
        raise ValueError("not enough distinct points in range")
    seen = set()
    out = []
    while len(out) < count:
        head = rng.integers(-spread, spread + 1, size=d)
        p = np.append(head, -head.sum()) * (d + 1)
        if tuple(p) not in seen:
            seen.add(tuple(p))
            out.append(p)
    return np.array(out, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_force_pixels(img, kernel):
    """Naive zero-padded cross-correlation, (H, W, Ci) x (Co, Ci, k, k)."""
    h, w, ci = img.shape
    co, _, k, _ = kernel.shape
    r = k // 2
    out = np.zeros((h, w, co))
    for y in range(h):
        for x in range(w):
            for o in range(co):
                acc = 0.0
                for c in range(ci):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xx = y + dy - r, x + dx - r
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += img[yy, xx, c] * kernel[o, c, dy, dx]
                out[y, x, o] = acc
    return out


# one line per acceptance criterion, printed at the end of the run
CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA, key=str):
        passed, detail = CRITERIA[number]
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
