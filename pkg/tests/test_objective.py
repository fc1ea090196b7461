import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import grad_errors
from quantnas.nn import Parameter
from quantnas.objective import (
    CostReport,
    ScheduleState,
    cost_report,
    entropy,
    entropy_loss,
    espcn_report,
    flops_of,
    l1_loss,
    mu_schedule,
    soft_bitops_inner,
    soft_bitops_init,
    soft_bitops_loss,
    total_alpha_loss,
)
from quantnas.ops import ConvDesc, parse_op
from quantnas.search import random_genotype
from quantnas.supernet import LayerSpec, SearchSpaceSpec, build_supernet
from quantnas.tensor import ContractError, Tensor


def set_one_hot(net, genotype):
    for choice, layer in zip(genotype.layers, net.layers.values()):
        a = np.zeros(layer.logits.data.size)
        a[layer.spec.ops.index(choice.op) * len(layer.spec.bits) + layer.spec.bits.index(choice.bits)] = 1.0
        layer.alpha_override = a


class TestL1:
    def test_zero(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        assert float(l1_loss(Tensor(x), x).data) == 0.0

    def test_constant_shift(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        assert float(l1_loss(Tensor(x + 0.25), x).data) == pytest.approx(0.25, abs=1e-15)

    def test_scalar_oracle(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        total = 0.0
        for u, v in zip(a.ravel(), b.ravel()):
            total += abs(u - v)
        assert float(l1_loss(Tensor(a), Tensor(b)).data) == pytest.approx(total / 15, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            l1_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))

    def test_gradient(self, rng):
        p = Parameter(rng.normal(size=(2, 3)))
        t = rng.normal(size=(2, 3))
        assert max(grad_errors(lambda: l1_loss(p, t), [p])) < 1e-5


class TestFlops:
    def test_closed_form(self):
        assert flops_of(ConvDesc(3, 3, 8, 8), (32, 32)) == 589_824

    def test_depthwise(self):
        assert flops_of(ConvDesc(1, 1, 16, 16, groups=16), (10, 12)) == 16 * 120

    def test_grouped(self):
        assert flops_of(ConvDesc(3, 3, 6, 9, groups=3), (4, 4)) == 9 * 2 * 9 * 16

    def test_uneven_groups(self):
        # 8 -> 8 channels in 3 groups: (3,3), (3,3), (2,2)
        assert flops_of(ConvDesc(1, 1, 8, 8, groups=3), (1, 1)) == 9 + 9 + 4

    def test_separable_chain(self):
        descs = parse_op("conv_5x1_1x5", 4, 6)
        assert flops_of(descs, (8, 8)) == 5 * 4 * 6 * 64 + 5 * 6 * 6 * 64

    def test_mac_convention_flag(self):
        assert flops_of(ConvDesc(3, 3, 8, 8), (32, 32), macs_per_flop=2) == 2 * 589_824

    def test_espcn(self):
        rep = espcn_report()
        want = 25 * 3 * 64 * 1024 + 9 * 64 * 32 * 1024 + 9 * 32 * 48 * 1024
        assert rep.total_flops == want
        assert rep.total_flops == pytest.approx(3.80e7, rel=0.01)
        assert rep.total_bitops == 64 * want


class TestSoftBitops:
    @pytest.fixture
    def net(self):
        return build_supernet(SearchSpaceSpec(channels=6, bits=(2, 4, 8)))

    def test_uniform_is_one(self, net):
        assert float(soft_bitops_loss(net).data) == 1.0

    def test_cheapest_below_one(self, net):
        for layer in net.layers.values():
            costs = [flops_of(parse_op(o, layer.spec.cin, layer.spec.cout), (1, 1)) for o in layer.spec.ops]
            a = np.zeros(layer.logits.data.size)
            a[int(np.argmin(costs)) * 3] = 1.0  # lowest bit width comes first
            layer.alpha_override = a
        assert float(soft_bitops_loss(net).data) < 1.0

    def test_two_layer_brute_force(self):
        specs = [
            LayerSpec("head", 0, 3, 4, ("simple_3x3", "simple_1x1"), (4, 8)),
            LayerSpec("tail", 0, 4, 3, ("simple_5x5",), (2, 4, 8), high_res=True),
        ]
        alphas = [np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.5, 0.25, 0.25])]
        fake = SimpleNamespace(
            scale=2,
            layers={s.layer_id: SimpleNamespace(spec=s, alpha=lambda a=a: Tensor(a)) for s, a in zip(specs, alphas)},
        )
        h, w = 32, 32
        hand = (
            0.1 * 16 * 9 * 3 * 4 * h * w + 0.2 * 64 * 9 * 3 * 4 * h * w
            + 0.3 * 16 * 3 * 4 * h * w + 0.4 * 64 * 3 * 4 * h * w
            + 0.5 * 4 * 25 * 4 * 3 * 4 * h * w + 0.25 * 16 * 25 * 4 * 3 * 4 * h * w + 0.25 * 64 * 25 * 4 * 3 * 4 * h * w
        )
        init = (
            (16 + 64) / 4 * (9 + 1) * 12 * h * w
            + (4 + 16 + 64) / 3 * 25 * 12 * 4 * h * w
        )
        assert float(soft_bitops_inner(fake).data) == pytest.approx(hand, rel=1e-12)
        assert soft_bitops_init(fake) == pytest.approx(init, rel=1e-12)
        assert float(soft_bitops_loss(fake).data) == pytest.approx(hand / init, rel=1e-12)

    def test_linear_in_alpha(self, net):
        layer = net.layers["body.0"]
        base = np.full(layer.logits.data.size, 0.0)
        base[4] = 0.3
        for other in net.layers.values():
            other.alpha_override = np.zeros(other.logits.data.size)
        layer.alpha_override = base
        one = float(soft_bitops_inner(net).data)
        layer.alpha_override = 2 * base
        assert float(soft_bitops_inner(net).data) == pytest.approx(2 * one, rel=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_one_hot_equals_report(self, seed):
        space = SearchSpaceSpec(channels=6, bits=(2, 4, 8), body_repeats=1 + seed % 2)
        net = build_supernet(space)
        g = random_genotype(space, np.random.default_rng(seed))
        set_one_hot(net, g)
        rep = cost_report(g)
        assert float(soft_bitops_inner(net).data) == pytest.approx(rep.total_bitops, rel=1e-9)

    def test_gradient_only_alpha(self, net):
        net.set_pass(alpha=True, weights=False)
        soft_bitops_loss(net).backward()
        assert all(p.grad is not None for p in net.alpha_parameters())
        assert all(p.grad is None for p in net.weight_parameters())


class TestEntropy:
    def test_one_hot_zero(self):
        net = build_supernet(SearchSpaceSpec())
        for layer in net.layers.values():
            a = np.zeros(layer.logits.data.size)
            a[0] = 1.0
            layer.alpha_override = a
        assert float(entropy_loss(net).data) == 0.0

    @pytest.mark.parametrize("m", [1, 2, 5, 12])
    def test_uniform(self, m):
        assert float(entropy(Tensor(np.full(m, 1 / m))).data) == pytest.approx(math.log(m), abs=1e-14)

    def test_two_layers(self):
        fake = SimpleNamespace(layers={
            "a": SimpleNamespace(alpha=lambda: Tensor(np.full(4, 0.25))),
            "b": SimpleNamespace(alpha=lambda: Tensor(np.full(6, 1 / 6))),
        })
        assert float(entropy_loss(fake).data) == pytest.approx(math.log(4) + math.log(6), abs=1e-14)
        assert float(entropy_loss(fake).data) == pytest.approx(3.178, abs=5e-4)

    def test_tiny_entries_ignored(self):
        a = np.array([1 - 1e-13, 1e-13])
        assert float(entropy(Tensor(a)).data) == pytest.approx(-(1 - 1e-13) * math.log(1 - 1e-13), abs=1e-20)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=10), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, vals, rnd):
        a = np.array(vals) / sum(vals)
        b = a.copy()
        rnd.shuffle(b)
        assert float(entropy(Tensor(a)).data) == pytest.approx(float(entropy(Tensor(b)).data), abs=1e-12)

    def test_gradient(self, rng):
        p = Parameter(rng.uniform(0.1, 1.0, size=6))
        assert max(grad_errors(lambda: entropy(p.softmax()), [p])) < 1e-5


class TestSchedule:
    def test_warmup(self):
        assert mu_schedule(0, 20, 1e-4) == 0.0
        assert mu_schedule(1, 20, 1e-4) == 0.0
        assert mu_schedule(2, 20, 1e-4) > 0

    def test_endpoint(self):
        assert mu_schedule(20, 20, 1e-4) == pytest.approx(1e-4 * math.log(21), rel=1e-15)

    @pytest.mark.parametrize("total", [1, 2, 5, 20, 100])
    def test_monotone_scan(self, total):
        values = [mu_schedule(t, total, 1e-3) for t in range(total + 1)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_state(self):
        s = ScheduleState(epoch=10, total_epochs=20, mu0=1e-3)
        assert s.mu == pytest.approx(1e-3 * 0.5 * math.log(11))
        assert s.warmup_epochs == 2


class TestTotalLoss:
    def test_only_l1(self):
        l1, cq, e = Tensor(0.5), Tensor(1.0), Tensor(2.0)
        assert float(total_alpha_loss(l1, cq, e, 0.0, 0.0).data) == 0.5

    def test_arithmetic(self):
        v = float(total_alpha_loss(Tensor(0.5), Tensor(1.0), Tensor(2.0), 1e-3, 1e-4).data)
        assert v == pytest.approx(0.5012, abs=1e-15)

    @pytest.mark.parametrize("adq", [True, False])
    def test_logit_gradients(self, rng, adq):
        # raw noise scaling keeps the noise independent of the activations, so
        # replaying the same rng freezes it exactly
        space = SearchSpaceSpec(channels=3, bits=(4, 8), adq=adq)
        net = build_supernet(space, "san", seed=1, san_noise_scaling="raw")
        net.set_pass(alpha=True, weights=False)
        net.set_bn_update(False)
        x = Tensor(rng.uniform(size=(2, 3, 4, 4)))
        y = rng.uniform(size=(2, 3, 8, 8))
        for layer in net.layers.values():
            layer.logits.data = rng.normal(scale=0.5, size=layer.logits.data.size)

        def loss():
            pred = net(x, rng=np.random.default_rng(3))
            return total_alpha_loss(l1_loss(pred, y), soft_bitops_loss(net), entropy_loss(net), 0.3, 0.05)

        assert max(grad_errors(loss, net.alpha_parameters())) < 1e-5


class TestReport:
    def test_csv_round_trip(self):
        rep = cost_report(random_genotype(SearchSpaceSpec(bits=(2, 4, 8)), np.random.default_rng(0)))
        back = CostReport.from_csv(rep.to_csv())
        assert back.rows == rep.rows
        assert back.to_csv() == rep.to_csv()

    def test_totals_are_sums(self):
        rep = cost_report(random_genotype(SearchSpaceSpec(bits=(2, 4, 8)), np.random.default_rng(1)))
        assert rep.total_bitops == sum(r.bitops for r in rep.rows)
        assert all(r.bitops == r.bits**2 * r.flops for r in rep.rows)
