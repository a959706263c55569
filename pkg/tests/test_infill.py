import numpy as np
import pytest

from fidomasks import infill
from fidomasks.infill import InfillSpec, compose, make_infill
from fidomasks.tensor import Tape, Tensor


def toy_image(seed=0, side=16):
    rng = np.random.default_rng(seed)
    return rng.random((3, side, side))


class TestMakeInfill:
    def test_blur_of_constant_is_constant(self):
        x = np.full((3, 16, 16), 0.42)
        out = make_infill(x, InfillSpec(kind="gaussian_blur", blur_sigma=2.0))
        assert np.max(np.abs(out - 0.42)) < 1e-6

    def test_constant_zero_infill(self):
        out = make_infill(toy_image(), InfillSpec(kind="constant", constant_value=0.0))
        np.testing.assert_array_equal(out, np.zeros((3, 16, 16)))

    def test_huge_sigma_approaches_image_mean(self):
        x = toy_image(3, side=32)
        out = make_infill(x, InfillSpec(kind="gaussian_blur", blur_sigma=128.0))
        assert np.max(np.abs(out - x.mean(axis=(1, 2), keepdims=True))) < 0.02

    def test_blur_kernel_is_normalized(self):
        # blur of a centered delta sums back to the kernel mass
        x = np.zeros((1, 65, 65))
        x[0, 32, 32] = 1.0
        out = make_infill(x, InfillSpec(kind="gaussian_blur", blur_sigma=3.0))
        assert abs(out.sum() - 1.0) < 1e-9

    def test_blur_default_sigma_is_side_over_eight(self):
        x = toy_image(4, side=32)
        default = make_infill(x, InfillSpec(kind="gaussian_blur"))
        explicit = make_infill(x, InfillSpec(kind="gaussian_blur", blur_sigma=4.0))
        np.testing.assert_array_equal(default, explicit)

    def test_uniform_random_seeded(self):
        spec = InfillSpec(kind="uniform_random", seed=9)
        a = make_infill(toy_image(), spec)
        b = make_infill(toy_image(1), spec)  # ignores image content
        np.testing.assert_array_equal(a, b)
        assert np.all((a >= 0) & (a <= 1))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            InfillSpec(kind="gan")

    def test_blur_removes_high_frequency_detail(self):
        x = toy_image(5, side=32)
        x[:, 10:16, 10:16] = 1.0  # sharp bright patch
        out = make_infill(x, InfillSpec(kind="gaussian_blur", blur_sigma=4.0))
        patch_contrast = lambda img: img[:, 10:16, 10:16].mean() - img.mean()
        assert patch_contrast(out) < 0.5 * patch_contrast(x)


class TestCompose:
    def test_zero_mask_returns_original(self):
        x, xh = toy_image(0), toy_image(1)
        out = compose(x, xh, np.zeros((16, 16)))
        np.testing.assert_array_equal(out.data, x)

    def test_full_mask_returns_infill(self):
        x, xh = toy_image(0), toy_image(1)
        out = compose(x, xh, np.ones((2, 16, 16)))
        np.testing.assert_array_equal(out.data[0], xh)
        np.testing.assert_array_equal(out.data[1], xh)

    def test_half_mask_is_midpoint(self):
        x, xh = toy_image(0), toy_image(1)
        out = compose(x, xh, np.full((16, 16), 0.5))
        np.testing.assert_allclose(out.data, (x + xh) / 2, atol=1e-15)

    def test_range_preserved(self):
        rng = np.random.default_rng(2)
        x, xh = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        z = rng.random((4, 8, 8))
        out = compose(x, xh, z).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_gradient_wrt_mask_is_infill_minus_image(self):
        x, xh = toy_image(0, 8), toy_image(1, 8)
        z = Tensor(np.full((8, 8), 0.3), requires_grad=True)
        with Tape() as tape:
            phi = compose(x, xh, z)
            total = __import__("fidomasks.tensor", fromlist=["sum_"]).sum_(phi)
        g = tape.backward(total)[z]
        np.testing.assert_allclose(g, (xh - x).sum(axis=0), rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compose(toy_image(), toy_image(), np.zeros((8, 8)))
