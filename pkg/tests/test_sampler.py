import numpy as np
import pytest

from mvcount._kernels import backends
from mvcount.geometry import GROUND_TO_IMAGE, CorrespondenceField
from mvcount.maps import Map2D
from mvcount.sampler import AreaReduce, BilinearResize, sample, sample_adjoint

BACKENDS = sorted(backends)


def identity_field(h, w, tag="cam:x"):
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return CorrespondenceField(rr, cc, np.ones((h, w), bool), GROUND_TO_IMAGE, tag, "ground")


def random_field(rng, ht, wt, src_h, src_w, tag="cam:x"):
    rows = rng.uniform(-1.5, src_h + 0.5, (ht, wt))
    cols = rng.uniform(-1.5, src_w + 0.5, (ht, wt))
    valid = rng.random((ht, wt)) > 0.15
    return CorrespondenceField(rows, cols, valid, GROUND_TO_IMAGE, tag, "ground")


def scalar_reference(src, field):
    """Independent per-cell bilinear interpolation loop."""
    c, h, w = src.shape
    out = np.zeros((c,) + field.valid.shape)
    for i in range(field.valid.shape[0]):
        for j in range(field.valid.shape[1]):
            if not field.valid[i, j]:
                continue
            r, q = field.rows[i, j], field.cols[i, j]
            r0, c0 = int(np.floor(r)), int(np.floor(q))
            fr, fc = r - r0, q - c0
            for ch in range(c):
                acc = 0.0
                for dr, dc, wgt in (
                    (0, 0, (1 - fr) * (1 - fc)),
                    (0, 1, (1 - fr) * fc),
                    (1, 0, fr * (1 - fc)),
                    (1, 1, fr * fc),
                ):
                    ri, ci = r0 + dr, c0 + dc
                    if 0 <= ri < h and 0 <= ci < w:
                        acc += wgt * src[ch, ri, ci]
                out[ch, i, j] = acc
    return out


def test_identity_field_is_bitwise_exact():
    rng = np.random.default_rng(0)
    src = Map2D(np.abs(rng.standard_normal((2, 9, 7))), None, tag="cam:x")
    out = sample(src, identity_field(9, 7))
    assert out.values.tobytes() == src.values.tobytes()
    assert out.tag == "ground"


def test_half_cell_shift_on_ramp_is_exact():
    h, w = 8, 10
    ramp = np.tile(np.arange(w, dtype=np.float64), (h, 1))
    fld = identity_field(h, w)
    fld.cols = fld.cols + 0.5
    fld.valid[:, -1] = False  # the shifted read would leave the raster
    out = sample(Map2D(ramp[None], None, tag="cam:x"), fld)
    interior = out.values[0][:, :-1]
    assert np.abs(interior - (ramp[:, :-1] + 0.5)).max() < 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_scalar_reference(backend, monkeypatch):
    from mvcount import _kernels, sampler

    monkeypatch.setattr(sampler._kernels, "bilinear_gather", backends[backend].bilinear_gather)
    rng = np.random.default_rng(1)
    src = Map2D(rng.standard_normal((3, 16, 16)), None, tag="cam:x")
    fld = random_field(rng, 12, 14, 16, 16)
    out = sample(src, fld)
    ref = scalar_reference(src.values, fld)
    assert np.abs(out.values - ref).max() < 1e-12
    assert (out.values[:, ~fld.valid] == 0).all()


def test_tag_mismatch_is_hard_error():
    src = Map2D(np.zeros((1, 4, 4)), None, tag="cam:other")
    with pytest.raises(ValueError):
        sample(src, identity_field(4, 4, tag="cam:x"))


def test_linearity():
    rng = np.random.default_rng(2)
    fld = random_field(rng, 10, 10, 12, 12)
    a = rng.standard_normal((2, 12, 12))
    b = rng.standard_normal((2, 12, 12))
    al, be = 1.7, -0.4
    out1 = sample(Map2D(al * a + be * b, None, tag="cam:x"), fld)
    out2 = al * sample(Map2D(a, None, tag="cam:x"), fld).values + be * sample(
        Map2D(b, None, tag="cam:x"), fld
    ).values
    assert np.abs(out1.values - out2).max() < 1e-12


class TestAdjoint:
    def test_adjoint_identity_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            fld = random_field(rng, 7, 9, 11, 8)
            x = rng.standard_normal((2, 11, 8))
            y = rng.standard_normal((2, 7, 9))
            ax = sample(Map2D(x, None, tag="cam:x"), fld).values
            aty = sample_adjoint(Map2D(y, None, tag="ground"), fld, 11, 8).values
            lhs = float((ax * y).sum())
            rhs = float((x * aty).sum())
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_identity_field_adjoint_is_identity(self):
        rng = np.random.default_rng(4)
        y = rng.standard_normal((1, 6, 5))
        fld = identity_field(6, 5)
        back = sample_adjoint(Map2D(y, None, tag="ground"), fld, 6, 5)
        assert np.array_equal(back.values, y)

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        fld = random_field(rng, 9, 9, 10, 10)
        x = rng.standard_normal((1, 10, 10))
        target = rng.standard_normal((1, 9, 9))

        def loss(arr):
            out = sample(Map2D(arr, None, tag="cam:x"), fld).values
            return 0.5 * float(((out - target) ** 2).sum())

        out = sample(Map2D(x, None, tag="cam:x"), fld).values
        grad = sample_adjoint(Map2D(out - target, None, tag="ground"), fld, 10, 10).values
        h = 1e-4
        for _ in range(40):
            i = tuple(rng.integers(s) for s in x.shape)
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            fd = (loss(xp) - loss(xm)) / (2 * h)
            an = grad[i]
            assert abs(fd - an) <= 1e-6 * max(abs(fd), abs(an), 1e-3)

    def test_shape_mismatch_is_hard_error(self):
        rng = np.random.default_rng(6)
        fld = random_field(rng, 7, 9, 11, 8)
        with pytest.raises(ValueError):
            sample_adjoint(Map2D(np.zeros((1, 5, 5)), None, tag="ground"), fld, 11, 8)


class TestResizePlans:
    def test_bilinear_resize_preserves_constants(self):
        plan = BilinearResize(8, 8, 20, 14)
        out = plan.forward(np.full((2, 8, 8), 3.25))
        assert np.abs(out - 3.25).max() < 1e-12

    def test_area_reduce_preserves_constants_exactly(self):
        plan = AreaReduce(32, 32, 16, 16)
        out = plan.forward(np.full((1, 32, 32), 0.625))
        assert np.array_equal(out, np.full((1, 16, 16), 0.625))

    def test_area_reduce_rows_sum_to_one(self):
        plan = AreaReduce(13, 17, 5, 6)
        assert np.abs(plan.wr.sum(axis=1) - 1).max() < 1e-12
        assert np.abs(plan.wc.sum(axis=1) - 1).max() < 1e-12

    @pytest.mark.parametrize("plan_cls,shape_in,shape_out", [
        (BilinearResize, (10, 12), (23, 17)),
        (AreaReduce, (23, 17), (10, 12)),
    ])
    def test_adjoints_are_exact_transposes(self, plan_cls, shape_in, shape_out):
        rng = np.random.default_rng(8)
        plan = plan_cls(*shape_in, *shape_out)
        x = rng.standard_normal((3,) + shape_in)
        y = rng.standard_normal((3,) + shape_out)
        lhs = float((plan.forward(x) * y).sum())
        rhs = float((x * plan.adjoint(y)).sum())
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
