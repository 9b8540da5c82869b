import numpy as np
import pytest

from structngd.matgroup import StructureSpec


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def all_structures(p=6):
    """One instance of every non-Kronecker structure at dimension p."""
    return [
        StructureSpec.full(p),
        StructureSpec.diagonal(p),
        StructureSpec.block_tri_upper(p, 2),
        StructureSpec.block_tri_lower(p, 2),
        StructureSpec.heisenberg_upper(p, 2, 2),
        StructureSpec.heisenberg_lower(p, 2, 2),
    ]


def dense_h(m: np.ndarray) -> np.ndarray:
    """Dense oracle for the quadratic map I + M + M^2/2."""
    eye = np.eye(m.shape[0])
    return eye + m + 0.5 * (m @ m)
