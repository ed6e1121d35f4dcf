"""Independent numerical oracles shared by the test modules."""
import numpy as np


def central_difference(f, x, h=1e-4, points=3):
    """Central finite-difference gradient of scalar ``f`` at array ``x``.
    ``points=5`` uses the fourth-order stencil, which keeps truncation error
    negligible at step sizes large enough to avoid round-off."""
    stencil = {3: ((1, 1 / 2),), 5: ((1, 2 / 3), (2, -1 / 12))}[points]
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        acc = 0.0
        for k, c in stencil:
            flat[i] = old + k * h
            fp = f(x)
            flat[i] = old - k * h
            acc += c * (fp - f(x))
        flat[i] = old
        gf[i] = acc / h
    return g


def max_relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def brute_force_nn_sq(a, b):
    """Squared distance from every row of ``a`` to its nearest row of ``b``."""
    out = []
    for p in a:
        best = min(float(np.sum((p - q) ** 2)) for q in b)
        out.append(best)
    return np.array(out)


# acceptance verdicts, printed again in the terminal summary
VERDICTS: list[str] = []
