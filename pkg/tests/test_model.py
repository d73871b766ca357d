import numpy as np
import pytest

from mtdml.gradcheck import check_gradient
from mtdml.model import (
    backward,
    forward,
    forward_fused,
    fuse_embedding,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from mtdml.numerics import make_rng
from mtdml.trainer import make_strategy, sample_thresholds

from helpers import analytic_gradients, full_objective, tiny_problem


def slice_norms(trace):
    return np.concatenate([np.linalg.norm(e, axis=1) for e in trace.slice_embeddings])


class TestInit:
    def test_default_widths(self):
        m = init_model((32, 64, 512), 7, 256, 7, make_rng(0))
        assert m.embedding_dim == 1792
        assert all(m.params[f"M{i}"].shape == (512, 256) for i in range(7))
        assert m.params["Wc"].shape == (1792, 7)
        single = init_model((32, 64, 512), 1, 256, 7, make_rng(0))
        assert single.embedding_dim == 256

    def test_deterministic(self):
        a = init_model((5, 8), 2, 3, 3, make_rng(4))
        b = init_model((5, 8), 2, 3, 3, make_rng(4))
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_he_bounds_and_zero_bias(self):
        m = init_model((50, 40), 1, 10, 2, make_rng(1))
        assert np.abs(m.params["W0"]).max() <= np.sqrt(6 / 50)
        np.testing.assert_array_equal(m.params["b0"], 0.0)


class TestForward:
    def test_eval_deterministic(self):
        m, X, _ = tiny_problem(make_rng(0), dropout=0.5)
        a, b = forward(m, X, "eval"), forward(m, X, "eval")
        np.testing.assert_array_equal(a.logits[0], b.logits[0])
        np.testing.assert_array_equal(a.concat_embedding, b.concat_embedding)

    def test_no_dropout_modes_agree(self):
        m, X, _ = tiny_problem(make_rng(1), dropout=0.0)
        np.testing.assert_array_equal(forward(m, X, "train", rng=make_rng(3)).logits[0],
                                      forward(m, X, "eval").logits[0])

    def test_dropout_changes_train_output(self):
        m, X, _ = tiny_problem(make_rng(1), dropout=0.5)
        t = forward(m, X, "train", rng=make_rng(3))
        assert any(mask is not None for mask in t.dropout_masks)
        assert not np.array_equal(t.logits[0], forward(m, X, "eval").logits[0])

    def test_unit_norm_slices(self):
        rng = make_rng(2)
        m = init_model((6, 10, 12, 9), 3, 4, 3, rng)
        X = rng.standard_normal((5, 6))
        for mode in ("eval", "train"):
            norms = slice_norms(forward(m, X, mode, rng=make_rng(0)))
            assert np.all((norms == 0.0) | (np.abs(norms - 1.0) <= 1e-9))

    def test_concat_is_slices_in_order(self):
        m, X, _ = tiny_problem(make_rng(5), n_slices=3)
        t = forward(m, X, "eval")
        np.testing.assert_array_equal(t.concat_embedding, np.hstack(t.slice_embeddings))

    def test_width_mismatch(self):
        m, X, _ = tiny_problem(make_rng(0))
        with pytest.raises(ValueError):
            forward(m, X[:, :-1], "eval")


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        m, X, _ = tiny_problem(make_rng(0))
        t = forward(m, X, "eval")
        grads = backward(m, t, [np.zeros((len(X), 4))] * 2, np.zeros((len(X), 3)))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_shape_mismatch(self):
        m, X, _ = tiny_problem(make_rng(0))
        t = forward(m, X, "eval")
        with pytest.raises(ValueError):
            backward(m, t, [np.zeros((len(X), 5))] * 2, None)

    def test_slice_isolation(self):
        rng = make_rng(9)
        m, X, _ = tiny_problem(rng, n_slices=3)
        t = forward(m, X, "eval")
        for i in range(3):
            gs = [None] * 3
            gs[i] = rng.standard_normal((len(X), 4))
            grads = backward(m, t, gs, None)
            for j in range(3):
                if j != i:
                    assert not np.any(grads[f"M{j}"])
            assert np.any(grads[f"M{i}"])

    @pytest.mark.parametrize("name,kind", [("Mul-DML", None), ("Mul-DML", "trad"), ("S-DML", None),
                                           ("Mul-DML-Multask", None)])
    def test_full_objective_gradient(self, name, kind):
        sched = sample_thresholds(0.2, 0.6, 0.2)
        strat = make_strategy(name, sched, tau=0.4, loss_kind=kind)
        for seed in range(3):
            m, X, y = tiny_problem(make_rng(seed), n_slices=strat.n_slices, multitask=strat.multitask)
            _, grads, tsets = analytic_gradients(m, X, y, strat)
            res = check_gradient(lambda: full_objective(m, X, y, strat, tsets), m.params, grads)
            assert res.ok(1e-4), res

    def test_gradient_with_replayed_dropout_mask(self):
        strat = make_strategy("Mul-DML", sample_thresholds(0.2, 0.4, 0.2))
        m, X, y = tiny_problem(make_rng(3), dropout=0.5)
        masks = forward(m, X, "train", rng=make_rng(1)).dropout_masks
        _, grads, tsets = analytic_gradients(m, X, y, strat, masks=masks)
        res = check_gradient(lambda: full_objective(m, X, y, strat, tsets, masks), m.params, grads)
        assert res.ok(1e-4), res


class TestFusion:
    def test_single_slice_is_identity(self):
        m, _, _ = tiny_problem(make_rng(0), n_slices=1)
        np.testing.assert_array_equal(fuse_embedding(m).matrix, m.params["M0"])

    @pytest.mark.parametrize("multitask", [False, True])
    def test_fused_matches_sliced(self, multitask):
        for seed in range(5):
            rng = make_rng(seed)
            m = init_model((7, 16, 12), 3, 5, 4, rng, multitask=multitask)
            X = rng.standard_normal((8, 7))
            t = forward(m, X, "eval")
            emb, logits = forward_fused(m, fuse_embedding(m), X)
            assert np.abs(emb - t.concat_embedding).max() <= 1e-9
            for a, b in zip(logits, t.logits):
                assert np.abs(a - b).max() <= 1e-9

    def test_bounds(self):
        m, _, _ = tiny_problem(make_rng(0), n_slices=3, slice_dim=4)
        assert fuse_embedding(m).bounds == [(0, 4), (4, 8), (8, 12)]


class TestCheckpoint:
    @pytest.mark.parametrize("multitask", [False, True])
    def test_bit_exact_round_trip(self, tmp_path, multitask):
        m = init_model((5, 9, 7), 2, 3, 4, make_rng(2), multitask=multitask)
        m.meta = {"taus": [0.15, 0.25]}
        save_checkpoint(m, tmp_path / "ck.json")
        back = load_checkpoint(tmp_path / "ck.json")
        assert back.layer_widths == m.layer_widths and back.multitask == multitask
        assert back.meta == m.meta
        for k, v in m.params.items():
            assert back.params[k].tobytes() == v.tobytes()
