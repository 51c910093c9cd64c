"""Request arrival generation and arrival-file I/O."""

import json
from pathlib import Path

import numpy as np


class WorkloadError(ValueError):
    pass


def gamma_arrivals(rate: float, cv: float, duration: float, seed: int) -> np.ndarray:
    """Arrival times from i.i.d. gamma inter-arrivals on [0, duration).

    Shape k = 1/cv^2 and mean 1/rate reproduce the requested coefficient of
    variation; cv=1 degenerates to a Poisson process.  Deterministic per seed.
    """
    if rate <= 0 or cv <= 0 or duration <= 0:
        raise WorkloadError("rate, cv and duration must be positive")
    shape = 1.0 / (cv * cv)
    scale = cv * cv / rate
    rng = np.random.default_rng(seed)
    times = []
    t = 0.0
    chunk = max(64, int(rate * duration * 1.25) + 16)
    while t < duration:
        gaps = rng.gamma(shape, scale, size=chunk)
        for gap in gaps:
            t += gap
            if t >= duration:
                break
            times.append(t)
    return np.asarray(times)


def load_arrivals(path: str | Path) -> list[tuple[float, int, int]]:
    """Arrival file: JSON lines of {"t": seconds, "s_in": n, "s_out": n}."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                out.append((float(doc["t"]), int(doc["s_in"]), int(doc["s_out"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise WorkloadError(f"{path}:{lineno}: bad arrival record: {e}") from None
    out.sort(key=lambda r: r[0])
    return out


def save_arrivals(records, path: str | Path):
    with open(path, "w") as f:
        for t, s_in, s_out in records:
            f.write(json.dumps({"t": t, "s_in": s_in, "s_out": s_out}) + "\n")
