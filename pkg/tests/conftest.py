import numpy as np
import pytest

from gapcast import SeriesRecord, Window


# A 30-tick window with 10 observed ticks and 4 missing blocks; the first
# block starts at tick 4 and is 7 wide. Paired with a 10-tick horizon whose
# first gap sits at position 3, it exercises every variable-length path.
GAP_PATTERN_OBSERVED = np.zeros(30, dtype=bool)
GAP_PATTERN_OBSERVED[[0, 1, 2, 10, 15, 16, 22, 23, 24, 29]] = True
GAP_PATTERN_BLOCKS = [(4, 7), (12, 4), (18, 5), (26, 4)]

HORIZON_MASK = np.array([1, 1, 0, 1, 1, 1, 0, 0, 1, 1], dtype=float)


def gap_pattern_window(seed: int = 0) -> Window:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 1))
    y = rng.normal(size=(30, 1))
    x[~GAP_PATTERN_OBSERVED] = np.nan
    y[~GAP_PATTERN_OBSERVED] = np.nan
    return Window(x, y, GAP_PATTERN_OBSERVED.copy())


def random_gappy_record(n: int = 40, seed: int = 1, p_obs: float = 0.7,
                        d_x: int = 1, d_y: int = 1) -> SeriesRecord:
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, d_y))
    x = rng.normal(size=(n, d_x))
    obs = rng.random(n) < p_obs
    obs[0] = True  # keep at least one observed tick
    y[~obs] = np.nan
    x[~obs] = np.nan
    return SeriesRecord(f"r{seed}", y, x, obs)


@pytest.fixture
def gap_window() -> Window:
    return gap_pattern_window()
