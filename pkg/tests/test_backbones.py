import numpy as np
import pytest
import torch
import torch.nn.functional as F

from strudel import backbones as bb
from strudel.backbones import BackboneSpec, init_model
from strudel.errors import CheckpointError, ConfigError, ShapeError
from strudel.losses import combined_loss

SMALL = dict(depth=2, base_channels=4)


@pytest.fixture(params=["unet", "octse"])
def kind(request):
    return request.param


class TestInit:
    def test_deterministic(self, kind):
        a = init_model(BackboneSpec(kind=kind, **SMALL), 3)
        b = init_model(BackboneSpec(kind=kind, **SMALL), 3)
        assert a.equals(b) and a.fingerprint() == b.fingerprint()

    def test_seed_sensitivity(self, kind):
        a = init_model(BackboneSpec(kind=kind, **SMALL), 3)
        b = init_model(BackboneSpec(kind=kind, **SMALL), 4)
        assert not a.equals(b)

    @pytest.mark.parametrize(
        "bad", [dict(depth=1), dict(kind="resnet"), dict(dropout_rate=1.0), dict(octave_alpha=1.0), dict(base_channels=2)]
    )
    def test_invalid_spec(self, bad):
        with pytest.raises(ConfigError):
            BackboneSpec(**bad)

    def test_clone_is_independent(self):
        a = init_model(BackboneSpec(**SMALL), 0)
        b = a.clone()
        assert a.equals(b)
        with torch.no_grad():
            next(b.net.parameters()).add_(1.0)
        assert not a.equals(b)


class TestForward:
    @pytest.mark.parametrize("size", [16, 32])
    def test_shape_and_range(self, kind, size):
        params = init_model(BackboneSpec(kind=kind, **SMALL), 0)
        x = np.random.default_rng(0).normal(size=(3, size, size))
        out = bb.forward(params, x)
        assert out.shape == (3, 1, size, size)
        assert ((out > 0) & (out < 1)).all()

    def test_indivisible_size(self, kind):
        params = init_model(BackboneSpec(kind=kind, depth=3, base_channels=4), 0)
        with pytest.raises(ShapeError, match="divisible"):
            bb.forward(params, np.zeros((1, 20, 20)))

    def test_deterministic_without_dropout(self, kind):
        params = init_model(BackboneSpec(kind=kind, **SMALL), 0)
        x = np.random.default_rng(1).normal(size=(2, 16, 16))
        assert torch.equal(bb.forward(params, x), bb.forward(params, x))

    def test_dropout_draw_reproducible(self, kind):
        params = init_model(BackboneSpec(kind=kind, **SMALL), 0)
        x = np.random.default_rng(1).normal(size=(2, 16, 16))
        a = bb.forward(params, x, True, 5)
        assert torch.equal(a, bb.forward(params, x, True, 5))
        assert not torch.equal(a, bb.forward(params, x, True, 6))

    def test_forward_does_not_touch_global_rng(self):
        params = init_model(BackboneSpec(**SMALL), 0)
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        bb.forward(params, np.zeros((1, 16, 16)), True, 2)
        assert torch.equal(torch.rand(3), expected)


class TestOctaveConv:
    def test_alpha_zero_is_plain_conv(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(2, 3, 8, 8, generator=gen)
        w = torch.randn(5, 3, 3, 3, generator=gen)
        b = torch.randn(5, generator=gen)
        high, low = bb.octave_conv(x, None, w, b_h=b)
        assert low is None
        torch.testing.assert_close(high, F.conv2d(x, w, b, padding=1))

    def test_module_alpha_zero_matches_conv(self):
        conv = bb.OctaveConv2d(3, 6, 0.0, 0.0)
        torch.nn.init.normal_(conv.w_hh)
        assert conv.w_hl is None and conv.w_lh is None and conv.w_ll is None
        x = torch.randn(1, 3, 8, 8)
        torch.testing.assert_close(conv(x)[0], F.conv2d(x, conv.w_hh, conv.b_h, padding=1))

    def test_zero_cross_paths_are_two_plain_convs(self):
        gen = torch.Generator().manual_seed(1)
        h = torch.randn(1, 4, 8, 8, generator=gen)
        l = torch.randn(1, 2, 4, 4, generator=gen)
        w_hh = torch.randn(3, 4, 3, 3, generator=gen)
        w_ll = torch.randn(2, 2, 3, 3, generator=gen)
        oh, ol = bb.octave_conv(h, l, w_hh, torch.zeros(2, 4, 3, 3), torch.zeros(3, 2, 3, 3), w_ll)
        torch.testing.assert_close(oh, F.conv2d(h, w_hh, padding=1))
        torch.testing.assert_close(ol, F.conv2d(l, w_ll, padding=1))

    def test_cross_paths_by_hand(self):
        # 1x1 weights make each path a pooled or repeated copy of the input
        h = torch.arange(16.0).reshape(1, 1, 4, 4)
        l = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        one = torch.ones(1, 1, 1, 1)
        zero = torch.zeros(1, 1, 1, 1)
        oh, ol = bb.octave_conv(h, l, zero, one, one, zero)
        expected_h = torch.tensor([[1.0, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
        torch.testing.assert_close(oh[0, 0], expected_h)
        torch.testing.assert_close(ol[0, 0], torch.tensor([[2.5, 4.5], [10.5, 12.5]]))

    def test_mismatched_low_resolution(self):
        with pytest.raises(ShapeError, match="half"):
            bb.octave_conv(torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 8, 8), torch.zeros(2, 2, 3, 3))

    def test_output_shapes(self):
        conv = bb.OctaveConv2d(8, 16, 0.5, 0.5)
        oh, ol = conv((torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4)))
        assert oh.shape == (1, 8, 8, 8) and ol.shape == (1, 8, 4, 4)

    def test_split_channels(self):
        assert bb.split_channels(16, 0.5) == (8, 8)
        assert bb.split_channels(5, 0.5) == (3, 2)
        assert bb.split_channels(4, 0.0) == (4, 0)


class TestScse:
    def params(self, channels, r=2, gen=None):
        gen = gen or torch.Generator().manual_seed(0)
        h = channels // r
        return (
            torch.randn(h, channels, generator=gen),
            torch.randn(h, generator=gen),
            torch.randn(channels, h, generator=gen),
            torch.randn(channels, generator=gen),
            torch.randn(channels, generator=gen),
            torch.randn((), generator=gen),
        )

    def test_saturated_gate_is_identity(self):
        x = torch.rand(2, 4, 5, 5) + 0.1
        w1, b1, w2, b2, ws, _ = self.params(4)
        out = bb.scse_gate(x, w1, b1, w2, torch.full((4,), 100.0), ws, torch.tensor(100.0))
        torch.testing.assert_close(out, x)

    def test_zero_input(self):
        out = bb.scse_gate(torch.zeros(1, 4, 3, 3), *self.params(4))
        assert not out.any()

    def test_non_negative_features_attenuated(self):
        for seed in range(5):
            gen = torch.Generator().manual_seed(seed)
            x = torch.rand(2, 6, 4, 4, generator=gen)
            out = bb.scse_gate(x, *self.params(6, 3, gen))
            assert (out <= x + 1e-7).all() and (out >= 0).all()

    def test_is_max_of_two_gates(self):
        x = torch.randn(1, 4, 3, 3)
        w1, b1, w2, b2, ws, bs = self.params(4)
        channel = torch.sigmoid(w2 @ torch.relu(w1 @ x.mean(dim=(2, 3))[0] + b1) + b2)
        spatial = torch.sigmoid((x[0] * ws[:, None, None]).sum(0) + bs)
        expected = torch.maximum(x[0] * channel[:, None, None], x[0] * spatial)
        torch.testing.assert_close(bb.scse_gate(x, w1, b1, w2, b2, ws, bs)[0], expected)

    def test_reduction_must_divide(self):
        with pytest.raises(ShapeError):
            bb.SCSE(6, 4)
        with pytest.raises(ShapeError):
            bb.scse_block(torch.zeros(1, 6, 4, 4), 4)

    def test_block_shape(self):
        assert bb.scse_block(torch.rand(2, 8, 4, 4), 2).shape == (2, 8, 4, 4)


def test_octse_parameter_budget():
    for base in (4, 8, 16):
        unet = init_model(BackboneSpec(kind="unet", depth=3, base_channels=base), 0).num_parameters()
        octse = init_model(BackboneSpec(kind="octse", depth=3, base_channels=base), 0).num_parameters()
        assert octse <= 1.25 * unet


def test_toy_network_gradients_match_finite_differences(kind):
    torch.manual_seed(0)
    params = init_model(BackboneSpec(kind=kind, depth=2, base_channels=4, dropout_rate=0.0), 7)
    params.net.double()
    # the octave low branch halves the grid once more, so it needs 8x8 to keep 2x2 at the bottleneck
    size = 4 if kind == "unet" else 8
    x = torch.randn(1, 1, size, size, dtype=torch.float64)
    y = (torch.rand(1, 1, size, size) > 0.5).double()

    def loss():
        p = torch.sigmoid(bb.logits(params, x))
        return combined_loss(p[0, 0], y[0, 0])[0]

    weights = [p for p in params.net.parameters() if p.dim() == 4][:3]
    params.net.zero_grad()
    loss().backward()
    h = 1e-6
    ok = total = 0
    with torch.no_grad():
        for w in weights:
            flat = w.view(-1)
            for i in range(min(flat.numel(), 20)):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = w.grad.view(-1)[i].item()
                total += 1
                ok += abs(ana - num) <= 1e-3 * max(abs(ana), abs(num), 1e-6)
    assert ok / total >= 0.99


class TestCheckpoint:
    def test_roundtrip(self, kind, tmp_path):
        params = init_model(BackboneSpec(kind=kind, **SMALL), 2)
        bb.save_checkpoint(params, tmp_path / "m.pt", extra={"iteration": 1})
        back = bb.load_checkpoint(tmp_path / "m.pt")
        assert back.equals(params) and back.spec == params.spec and back.seed == 2
        x = np.random.default_rng(0).normal(size=(1, 16, 16))
        assert torch.equal(bb.forward(back, x), bb.forward(params, x))

    def test_version_mismatch(self, tmp_path):
        params = init_model(BackboneSpec(**SMALL), 2)
        bb.save_checkpoint(params, tmp_path / "m.pt")
        payload = torch.load(tmp_path / "m.pt", weights_only=True)
        payload["format_version"] = 99
        torch.save(payload, tmp_path / "m.pt")
        with pytest.raises(CheckpointError, match="99"):
            bb.load_checkpoint(tmp_path / "m.pt")
