import math

import numpy as np
import pytest

from _util import param_gradcheck
from sora.core import Adam, Tensor, backward, no_grad
from sora.encoders import EncoderConfig
from sora.errors import ConfigError, ContractError, DimensionError
from sora.fusion import CrossAttention, FusedFeatureSet, ImageHeads, ImageModel, cross_attend, fuse, image_loss
from sora.volumes import VolumeConfig, generate_volumes, stack_voxels

MICRO = EncoderConfig(d_img=8, n_blocks_2d=1, n_blocks_3d=1, n_heads=2, patch_2d=(4, 4), patch_3d=(2, 4, 4),
                      volume_shape=(4, 8, 8), mlp_ratio=2)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


class TestCrossAttention:
    def test_zero_value_projection(self):
        xa = CrossAttention(8, 2, np.random.default_rng(0))
        xa.v.weight.data[:] = 0.0
        rng = np.random.default_rng(1)
        f2d = rng.normal(size=(5, 8))
        with no_grad():
            out = cross_attend(rng.normal(size=8), f2d, xa).data
        assert out.shape == (5, 8) and np.all(out == 0.0)
        with no_grad():
            assert fuse(f2d, out).data.tobytes() == f2d.tobytes()

    def test_single_slice_weight_is_one(self):
        xa = CrossAttention(8, 4, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        with no_grad():
            _, w = xa(rng.normal(size=8), rng.normal(size=(1, 8)))
        assert np.all(w.data == 1.0)

    def test_one_head_formula_oracle(self):
        d = 6
        xa = CrossAttention(d, 1, np.random.default_rng(4))
        rng = np.random.default_rng(5)
        f3d, f2d = rng.normal(size=d), rng.normal(size=(3, d))
        Wq, Wk, Wv, Wo = (m.weight.data for m in (xa.q, xa.k, xa.v, xa.o))
        q = f3d @ Wq
        K, V = f2d @ Wk, f2d @ Wv
        w = _softmax(np.array([q @ K[j] for j in range(3)]) / math.sqrt(d))
        ref = (sum(w[j] * V[j] for j in range(3))) @ Wo
        with no_grad():
            out, weights = xa(f3d, f2d)
        np.testing.assert_allclose(out.data, ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(weights.data[0], w, atol=1e-12)

    def test_weights_sum_to_one(self):
        xa = CrossAttention(8, 4, np.random.default_rng(6))
        rng = np.random.default_rng(7)
        with no_grad():
            _, w = xa(rng.normal(size=(3, 8)) * 5, rng.normal(size=(3, 6, 8)) * 5)
        assert w.shape == (3, 4, 6)
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_output_broadcast_to_rows(self):
        xa = CrossAttention(8, 2, np.random.default_rng(8))
        rng = np.random.default_rng(9)
        with no_grad():
            out = cross_attend(rng.normal(size=8), rng.normal(size=(4, 8)), xa).data
        assert np.all(out == out[0])

    def test_dimension_mismatch(self):
        xa = CrossAttention(8, 2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            xa(np.zeros(6), np.zeros((3, 8)))

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            CrossAttention(8, 3, np.random.default_rng(0))


class TestFuse:
    def test_identity_and_commutativity(self):
        rng = np.random.default_rng(10)
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        assert fuse(a, np.zeros((4, 8))).data.tobytes() == a.tobytes()
        assert fuse(a, b).data.tobytes() == fuse(b, a).data.tobytes()

    def test_loop_oracle(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        ref = np.array([[a[i, j] + b[i, j] for j in range(7)] for i in range(5)])
        np.testing.assert_allclose(fuse(a, b).data, ref, atol=1e-15, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fuse(np.zeros((3, 4)), np.zeros((4, 4)))


def _zero_heads(d=8, n=7):
    heads = ImageHeads(d, n, np.random.default_rng(0))
    for p in heads.parameters():
        p.data[:] = 0.0
    return heads


class TestImageLoss:
    def test_uniform_logits(self):
        rng = np.random.default_rng(12)
        f2d = rng.normal(size=(4, 8))
        feats = FusedFeatureSet(Tensor(f2d), Tensor(rng.normal(size=8)), None, Tensor(f2d))
        l2d, l3d, lf, total = image_loss(_zero_heads(), feats, 3)
        for term in (l2d, l3d, lf):
            assert term.item() == pytest.approx(math.log(7), abs=1e-12)
        assert total.item() == pytest.approx(5.8378, abs=1e-4)
        assert total.item() == pytest.approx(3 * math.log(7), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 7])
    def test_saturation(self, n):
        heads = _zero_heads(d=1, n=n)
        for lin in (heads.head_2d, heads.head_3d, heads.head_fused):
            lin.bias.data[1] = 20.0
        feats = FusedFeatureSet(Tensor(np.zeros((3, 1))), Tensor(np.zeros(1)), None, Tensor(np.zeros((3, 1))))
        # gap 20 against n-1 competitors: CE = log(1 + (n-1) e^-20)
        for term in image_loss(heads, feats, 1)[:3]:
            assert term.item() == pytest.approx(math.log1p((n - 1) * math.exp(-20)), rel=1e-9)
            if n == 2:
                assert term.item() < 1e-8

    def test_invalid_label(self):
        feats = FusedFeatureSet(Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)), None, Tensor(np.zeros((2, 8))))
        with pytest.raises(ContractError):
            image_loss(_zero_heads(), feats, 7)

    def test_gradient_micro_config(self):
        model = ImageModel(MICRO, 3, np.random.default_rng(13))
        vox = np.random.default_rng(14).uniform(size=(4, 8, 8))

        def loss():
            return image_loss(model.heads, model(vox), 1)[3]

        for name in ("heads.head_fused.weight", "xattn.q.weight", "xattn.v.weight", "enc3d.kernel",
                     "enc2d.embed.weight", "enc3d.body.pos"):
            param = dict(model.named_parameters())[name]
            assert param_gradcheck(loss, param, max_coords=24) < 1e-4, name

    def test_batched_matches_mean_of_singles(self):
        model = ImageModel(MICRO, 3, np.random.default_rng(15))
        vox = np.random.default_rng(16).uniform(size=(3, 4, 8, 8))
        labels = np.array([0, 2, 1])
        with no_grad():
            batched = image_loss(model.heads, model(vox), labels)[3].item()
            singles = [image_loss(model.heads, model(v), int(y))[3].item() for v, y in zip(vox, labels)]
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)


class TestImageModel:
    def test_fused_is_residual_sum(self):
        model = ImageModel(MICRO, 3, np.random.default_rng(17))
        with no_grad():
            f = model(np.random.default_rng(18).uniform(size=(4, 8, 8)))
        assert f.fused.data.tobytes() == (f.f2d.data + f.fout.data).tobytes()
        assert np.all(np.isfinite(f.fused.data))
        np.testing.assert_allclose(f.attn_weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_slice_permutation_covariance_tied(self):
        model = ImageModel(MICRO, 3, np.random.default_rng(19))
        # Tie the 3D positional embeddings; with patch depth 2, swapping the two
        # depth blocks of slices permutes 3D tokens, which tied positions ignore.
        model.enc3d.body.pos.data[1:] = model.enc3d.body.pos.data[1]
        vox = np.random.default_rng(20).uniform(size=(4, 8, 8))
        perm = np.array([2, 3, 0, 1])
        with no_grad():
            a, b = model(vox), model(vox[perm])
        np.testing.assert_allclose(b.f2d.data, a.f2d.data[perm], atol=1e-12)
        np.testing.assert_allclose(b.fused.data, a.fused.data[perm], atol=1e-12)
        np.testing.assert_allclose(b.f3d.data, a.f3d.data, atol=1e-12)

    @pytest.mark.parametrize("mode", ["concat", "3d_only", "2d_only"])
    def test_ablation_modes_shape(self, mode):
        model = ImageModel(MICRO, 3, np.random.default_rng(21), mode=mode)
        with no_grad():
            f = model(np.random.default_rng(22).uniform(size=(2, 4, 8, 8)))
            assert f.fused.shape == (2, 4, 8)
            assert np.isfinite(image_loss(model.heads, f, [0, 1])[3].item())

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            ImageModel(MICRO, 3, np.random.default_rng(0), mode="sum")

    def test_image_loss_decreases_first_epochs(self):
        vcfg = VolumeConfig(n_cases=5, n_train_cases=4)
        voxels = stack_voxels(generate_volumes(vcfg))[:4]
        organs = np.arange(vcfg.n_organs)
        curves = []
        for seed in range(3):
            model = ImageModel(EncoderConfig(), vcfg.n_organs, np.random.default_rng(seed))
            opt = Adam(model.parameters(), lr=1e-3)
            curve = []
            for _ in range(5):
                total = 0.0
                for case in range(4):
                    opt.zero_grad()
                    loss = image_loss(model.heads, model(voxels[case]), organs)[3]
                    backward(loss)
                    opt.step()
                    total += loss.item()
                curve.append(total / 4)
            curves.append(curve)
        mean_curve = np.mean(curves, axis=0)
        assert np.all(np.diff(mean_curve) < 0), mean_curve
