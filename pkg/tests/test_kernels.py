import numpy as np
import pytest

from pdelatent import _kernels as K


def cases(rng):
    return {
        "im2col": (rng.standard_normal((2, 3, 9, 9)), 3, 3, 2, 4, 4),
        "col2im": (rng.standard_normal((2, 4, 4, 27)), 3, 9, 9, 3, 3, 2),
        "periodic_distance": ((rng.random((10, 12)) < 0.1).astype(float),),
        "crps_pointwise": (rng.standard_normal((5, 40)), rng.standard_normal(40)),
        "neumann_laplacian": (rng.standard_normal((7, 7)),),
        "box_smooth": (rng.standard_normal((3, 8, 8)), 2),
    }


@pytest.mark.parametrize("name", sorted(K.NUMPY_KERNELS))
def test_numba_matches_numpy(name, rng):
    args = cases(rng)[name]
    np.testing.assert_allclose(K.NUMBA_KERNELS[name](*args), K.NUMPY_KERNELS[name](*args),
                               rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    xp = rng.standard_normal((2, 3, 9, 9))
    cols = K.im2col(xp, 3, 3, 2, 4, 4)
    g = rng.standard_normal(cols.shape)
    back = K.col2im(g, 3, 9, 9, 3, 3, 2)
    assert np.sum(cols * g) == pytest.approx(np.sum(xp * back), rel=1e-12)


def test_box_smooth_preserves_mean(rng):
    x = rng.standard_normal((8, 8))
    assert K.box_smooth(x, 3).mean() == pytest.approx(x.mean(), abs=1e-12)
