import numpy as np


def finite_difference(f, x: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (perturbed in place, restored).

    With ``indices`` (a list of index tuples) only those entries are filled;
    the rest of the result stays 0.
    """
    g = np.zeros_like(x)
    if indices is None:
        indices = list(np.ndindex(x.shape))
    for i in indices:
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b, floor: float = 1e-4) -> float:
    """Norm-wise relative error; below ``floor`` the denominator stops shrinking.

    Without the floor a gradient that is exactly zero (an attention key bias,
    say) compares rounding noise against rounding noise.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
