import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def separated_values(rng, shape, low=-1.0, high=1.0):
    """Random array whose sorted values keep a uniform gap.

    Keeps finite-difference probes (step 1e-3) from crossing max/argmax
    ties in pooling windows.
    """
    n = int(np.prod(shape))
    vals = np.linspace(low, high, n, dtype=np.float64)
    rng.shuffle(vals)
    return vals.reshape(shape).astype(np.float32)


def single_level_outputs(logits_flat, deltas_flat, grid_size, anchors_per_loc=2,
                         requires_grad=True):
    """Wrap flat per-anchor predictions as one-level head outputs."""
    from pyradet.heads import HeadOutputs, LevelOutput
    from pyradet.tensor import Tensor

    s, a = grid_size, anchors_per_loc
    cls = np.asarray(logits_flat, dtype=np.float32).reshape(s, s, a).transpose(2, 0, 1)
    box = (
        np.asarray(deltas_flat, dtype=np.float32)
        .reshape(s, s, a, 4)
        .transpose(2, 3, 0, 1)
        .reshape(4 * a, s, s)
    )
    level = LevelOutput(
        cls_logits=Tensor(cls.copy(), requires_grad=requires_grad),
        box_deltas=Tensor(box.copy(), requires_grad=requires_grad),
    )
    return HeadOutputs(levels=[level], anchors_per_loc=a)
