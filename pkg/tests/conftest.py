import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from probcell import Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def vol(data, voxel_size=(1.0, 1.0, 1.0)) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.float32), voxel_size)
