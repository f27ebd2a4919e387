"""Counter-based random streams keyed by (seed, stream, index)."""
from __future__ import annotations

import numpy as np

IMU_STREAM = 1
LIDAR_STREAM = 2
CAMERA_STREAM = 3


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Independent Philox generator for one (seed, stream, index) triple."""
    key = np.random.SeedSequence([int(seed), int(stream), int(index)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
