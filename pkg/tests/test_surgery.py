import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mop.criteria import WidthScores
from mop.errors import ContractError
from mop.model import ModelConfig, init_model, logits_numpy, weights_digest
from mop.surgery import (PrunePlan, apply_plan, compute_ct, layer_params, plan_width_prune,
                         remove_heads, remove_layer, remove_neurons, removed_params, total_params,
                         width_prune)

from conftest import SMALL

TOKENS = np.array([3, 1, 4, 1, 5, 9, 2, 6])


def enumerate_params(model):
    """Tensor-enumeration oracle: sum of element counts, read from raw arrays."""
    arrays = [model.embedding.data, model.final_norm.data, model.lm_head.data]
    for layer in model.layers:
        arrays += [layer.wq.data, layer.wk.data, layer.wv.data, layer.wo.data, layer.w_gate.data,
                   layer.w_up.data, layer.w_down.data, layer.norm_attn.data, layer.norm_mlp.data]
    return sum(int(np.prod(a.shape)) for a in arrays)


def equal_scores(model):
    return WidthScores([np.zeros(l.n_heads) for l in model.layers], [np.zeros(l.d_ff) for l in model.layers])


def random_scores(model, seed=0):
    rng = np.random.default_rng(seed)
    return WidthScores([rng.random(l.n_heads) for l in model.layers], [rng.random(l.d_ff) for l in model.layers])


class TestAccounting:
    def test_micro_counts(self, micro):
        assert total_params(micro) == enumerate_params(micro) == 1496
        assert layer_params(micro, 0) == 4 * 64 + 3 * 8 * 16 + 2 * 8 == 656
        assert total_params(remove_layer(micro, 0)) == 1496 - 656 == 840
        assert compute_ct(micro, 1) == pytest.approx(0.43850, abs=1e-5)

    def test_empty_model(self, micro):
        bare = remove_layer(remove_layer(micro, 0), 0)
        assert total_params(bare) == 88 + 8 + 88
        assert bare.config.n_layers == 0

    def test_recount_after_width_prune(self, micro):
        m = remove_heads(micro, 0, [1])
        m = remove_neurons(m, 0, range(8))
        assert layer_params(m, 0) == 4 * 8 * 4 + 3 * 8 * 8 + 2 * 8 == 336
        assert total_params(m) == enumerate_params(m)

    def test_equal_layers_equal_ct(self, small):
        assert len({compute_ct(small, i) for i in range(small.n_layers)}) == 1

    def test_bad_index(self, micro):
        with pytest.raises(IndexError):
            layer_params(micro, 2)
        with pytest.raises(IndexError):
            remove_layer(micro, -1)


class TestRemoveLayer:
    def test_identity_layer(self, small):
        small.layers[2].wo.data[:] = 0
        small.layers[2].w_down.data[:] = 0
        out = remove_layer(small, 2)
        np.testing.assert_allclose(logits_numpy(out, TOKENS), logits_numpy(small, TOKENS), atol=1e-6)

    def test_third_to_last_on_32_layers(self):
        m = init_model(ModelConfig(n_layers=32, d_model=4, n_heads=1, d_ff=2, vocab_size=3), seed=0)
        out = remove_layer(m, 29)
        assert out.n_layers == 31
        for kept, orig in zip(out.layers[-2:], m.layers[-2:]):
            np.testing.assert_array_equal(kept.wq.data, orig.wq.data)
        assert m.n_layers == 32

    def test_copy_on_write(self, small):
        before = weights_digest(small)
        remove_layer(small, 0)
        remove_heads(small, 0, [0])
        remove_neurons(small, 0, [0])
        assert weights_digest(small) == before


class TestUnits:
    def test_zero_head(self, small):
        dh = small.layers[1].d_head
        small.layers[1].wo.data[2 * dh:3 * dh, :] = 0
        out = remove_heads(small, 1, [2])
        assert out.layers[1].n_heads == 3
        np.testing.assert_allclose(logits_numpy(out, TOKENS), logits_numpy(small, TOKENS), atol=1e-6)
        assert total_params(small) - total_params(out) == 4 * 16 * dh

    def test_zero_neuron(self, small):
        small.layers[3].w_down.data[[5, 11], :] = 0
        out = remove_neurons(small, 3, [11, 5])
        assert out.layers[3].d_ff == 22
        np.testing.assert_allclose(logits_numpy(out, TOKENS), logits_numpy(small, TOKENS), atol=1e-6)
        assert total_params(small) - total_params(out) == 2 * 3 * 16

    def test_empty_list_identity(self, small):
        assert weights_digest(remove_neurons(small, 0, [])) == weights_digest(small)
        assert weights_digest(remove_heads(small, 0, [])) == weights_digest(small)

    def test_emptying_rejected(self, small):
        with pytest.raises(ContractError):
            remove_heads(small, 0, range(4))
        with pytest.raises(ContractError):
            remove_neurons(small, 0, range(24))

    def test_duplicates_and_range(self, small):
        with pytest.raises(ContractError):
            remove_heads(small, 0, [1, 1])
        with pytest.raises(IndexError):
            remove_neurons(small, 0, [24])

    def test_commutative(self, small):
        a = remove_neurons(remove_heads(small, 2, [0, 3]), 2, [1, 7, 20])
        b = remove_heads(remove_neurons(small, 2, [1, 7, 20]), 2, [0, 3])
        assert weights_digest(a) == weights_digest(b)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_plan_accounting_conserves(data):
    model = init_model(ModelConfig(**SMALL), seed=0)
    heads, neurons = [], []
    for layer in model.layers:
        heads.append(data.draw(st.lists(st.integers(0, layer.n_heads - 1), unique=True, max_size=layer.n_heads - 1)))
        neurons.append(data.draw(st.lists(st.integers(0, layer.d_ff - 1), unique=True, max_size=layer.d_ff - 1)))
    plan = PrunePlan("width", heads=heads, neurons=neurons)
    out = apply_plan(model, plan)
    assert total_params(model) - total_params(out) == removed_params(model, plan)
    assert total_params(out) == enumerate_params(out)


class TestWidthPrune:
    def test_one_head_per_layer(self, micro):
        # a target of prunable / n_heads asks each block for 1/h of its mass: one head per layer
        prunable = 2 * (4 * 64 + 3 * 128)
        c_t = (prunable / 2) / total_params(micro)
        plan = plan_width_prune(micro, random_scores(micro), c_t)
        assert [len(h) for h in plan.heads] == [1, 1]
        head_mass = 2 * 4 * 8 * 4
        assert sum(len(n) for n in plan.neurons) * 3 * 8 == prunable / 2 - head_mass
        out = apply_plan(micro, plan)
        assert total_params(micro) - total_params(out) == prunable / 2

    def test_tie_rule(self, small):
        plan = plan_width_prune(small, equal_scores(small), compute_ct(small, 2))
        for heads, neurons in zip(plan.heads, plan.neurons):
            assert heads == list(range(len(heads)))
            assert neurons == list(range(len(neurons)))

    def test_lowest_scores_removed(self, small):
        scores = random_scores(small, seed=3)
        plan = plan_width_prune(small, scores, compute_ct(small, 2))
        for hs, removed in zip(scores.heads, plan.heads):
            kept = sorted(set(range(len(hs))) - set(removed))
            if removed and kept:
                assert hs[removed].max() <= hs[kept].min()

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_layer_within_two_percent(self, seed):
        model = init_model(ModelConfig(n_layers=12, d_model=128, n_heads=8, d_ff=344, vocab_size=256), seed=0)
        current = model
        for _ in range(5):
            idx = current.n_layers - 3
            p_l = layer_params(current, idx)
            out = width_prune(current, random_scores(current, seed), compute_ct(current, idx))
            gap = abs(total_params(out) - (total_params(current) - p_l)) / p_l
            assert gap <= 0.02
            current = out if seed % 2 else remove_layer(current, idx)

    def test_unreachable(self, micro):
        with pytest.raises(ContractError):
            plan_width_prune(micro, random_scores(micro), 0.9)

    def test_score_shape_mismatch(self, small):
        with pytest.raises(ContractError):
            plan_width_prune(remove_layer(small, 0), random_scores(small), 0.1)

