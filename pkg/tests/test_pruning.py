from __future__ import annotations

import numpy as np
import pytest

from app.core.config import EncoderConfig, PruneConfig
from app.core.encoder import init_block, multi_head_attention
from app.core.errors import ContractError
from app.core.model import build_model, run_model
from app.core.pruning import (
    block_macs,
    flops,
    keep_count,
    prune,
    scatter_to_grid,
    score_tokens,
    search_schedule,
)
from app.core.tensor import Tensor, count_macs
from app.core.tokens import SegmentKind, TokenSequence

from conftest import tiny


def make_sequence(kinds, centers, search_grid=2, dim=3, rng=None) -> TokenSequence:
    rng = rng or np.random.default_rng(0)
    kinds = np.asarray(kinds)
    n = len(kinds)
    coords = np.zeros((n, 2), dtype=np.int64)
    search = np.flatnonzero(kinds == SegmentKind.SEARCH)
    coords[search] = np.stack(np.divmod(np.arange(len(search)), search_grid), axis=1)
    return TokenSequence(
        embeddings=Tensor(rng.normal(size=(n, dim))),
        segments=kinds,
        scales=np.where(kinds == SegmentKind.SEARCH, -1, 0),
        grid_coords=coords,
        center_flags=np.asarray(centers, dtype=bool),
        search_grid=search_grid,
    )


def search_only(n: int, grid: int) -> TokenSequence:
    return make_sequence([SegmentKind.SEARCH] * n, [False] * n, search_grid=grid)


def test_omega_hand_summation():
    seq = make_sequence(
        [SegmentKind.STATIC, SegmentKind.DYNAMIC, SegmentKind.SEARCH, SegmentKind.SEARCH],
        [True, True, False, False],
        search_grid=2,
    )
    weights = np.zeros((1, 4, 4))
    weights[0, 0, 2:] = [0.6, 0.4]
    weights[0, 1, 2:] = [0.1, 0.9]
    np.testing.assert_allclose(score_tokens(weights, seq), [0.7, 1.3])


def test_omega_averages_heads():
    seq = make_sequence([SegmentKind.STATIC, SegmentKind.SEARCH, SegmentKind.SEARCH], [True, False, False])
    weights = np.zeros((2, 3, 3))
    weights[0, 0, 1:] = [1.0, 0.0]
    weights[1, 0, 1:] = [0.0, 1.0]
    np.testing.assert_allclose(score_tokens(weights, seq), [0.5, 0.5])


def test_uniform_attention_gives_constant_omega():
    seq = make_sequence([SegmentKind.STATIC] * 2 + [SegmentKind.SEARCH] * 4, [True, True, False, False, False, False])
    weights = np.full((2, 6, 6), 1 / 6)
    omega = score_tokens(weights, seq)
    np.testing.assert_allclose(omega, omega[0])


def test_omega_ignores_the_order_of_non_center_template_tokens():
    rng = np.random.default_rng(4)
    kinds = [SegmentKind.STATIC] * 4 + [SegmentKind.DYNAMIC] * 4 + [SegmentKind.SEARCH] * 4
    centers = [False, True, False, False, False, True, False, False] + [False] * 4
    seq = make_sequence(kinds, centers, search_grid=2, dim=4, rng=rng)
    block = init_block(4, 2, 2, rng, np.float64)
    for t in block.parameters().values():
        t.data = rng.normal(0.0, 0.5, size=t.shape)

    others = np.array([0, 2, 3, 4, 6, 7])
    perm = np.arange(len(kinds))
    perm[others] = rng.permutation(others)
    shuffled = seq.with_embeddings(Tensor(seq.embeddings.data[perm]))

    _, weights = multi_head_attention(block, seq.embeddings)
    _, weights_p = multi_head_attention(block, shuffled.embeddings)
    np.testing.assert_allclose(score_tokens(weights_p, shuffled), score_tokens(weights, seq), atol=1e-12)


def test_omega_follows_permuted_search_tokens():
    rng = np.random.default_rng(6)
    kinds = [SegmentKind.STATIC] * 2 + [SegmentKind.SEARCH] * 6
    seq = make_sequence(kinds, [True, False] + [False] * 6, search_grid=3, dim=4, rng=rng)
    block = init_block(4, 1, 2, rng, np.float64)
    for t in block.parameters().values():
        t.data = rng.normal(0.0, 0.5, size=t.shape)

    search_perm = rng.permutation(6)
    perm = np.concatenate([[0, 1], 2 + search_perm])
    shuffled = seq.with_embeddings(Tensor(seq.embeddings.data[perm]))
    _, weights = multi_head_attention(block, seq.embeddings)
    _, weights_p = multi_head_attention(block, shuffled.embeddings)
    np.testing.assert_allclose(score_tokens(weights_p, shuffled), score_tokens(weights, seq)[search_perm], atol=1e-12)


def test_no_center_tokens_is_a_contract_error():
    seq = make_sequence([SegmentKind.STATIC, SegmentKind.SEARCH], [False, False])
    with pytest.raises(ContractError):
        score_tokens(np.full((1, 2, 2), 0.5), seq)


def test_prune_keeps_top_omega_in_sequence_order():
    seq = search_only(4, grid=2)
    out, decision = prune(seq, np.array([0.1, 0.9, 0.5, 0.4]), 0.5)
    assert decision.kept_search == 2
    np.testing.assert_array_equal(out.search_flat_index(), [1, 2])
    np.testing.assert_array_equal(decision.dropped_grid_coords, [[0, 0], [1, 1]])
    np.testing.assert_allclose(out.embeddings.data, seq.embeddings.data[[1, 2]])


def test_ties_keep_lowest_grid_indices():
    seq = search_only(4, grid=2)
    out, _ = prune(seq, np.ones(4), 0.5)
    np.testing.assert_array_equal(out.search_flat_index(), [0, 1])


def test_keep_ratio_one_is_identity():
    seq = search_only(4, grid=2)
    out, decision = prune(seq, np.array([0.3, 0.1, 0.2, 0.4]), 1.0)
    assert out is seq
    assert decision.kept_search == 4
    assert len(decision.dropped_grid_coords) == 0


def test_templates_are_never_pruned():
    kinds = [SegmentKind.STATIC, SegmentKind.DYNAMIC] + [SegmentKind.SEARCH] * 4
    seq = make_sequence(kinds, [True, True] + [False] * 4)
    out, _ = prune(seq, np.array([0.4, 0.3, 0.2, 0.1]), 0.25)
    assert out.template_count == 2
    assert out.search_count == 1


def test_keep_count_is_a_ceiling():
    assert keep_count(576, 0.7) == 404
    assert keep_count(404, 0.7) == 283
    assert keep_count(283, 0.7) == 199
    assert keep_count(10, 0.7) == 7
    assert keep_count(1, 0.1) == 1


def test_full_size_schedule():
    counts = search_schedule(576, 12, PruneConfig(keep_ratio=0.7, stages=(4, 7, 10)))
    assert counts[:4] == [576] * 4
    assert counts[4:7] == [404] * 3
    assert counts[7:10] == [283] * 3
    assert counts[10:] == [199] * 2


def test_scatter_after_full_size_schedule_leaves_377_zero_cells():
    seq = search_only(576, grid=24)
    rng = np.random.default_rng(0)
    for _ in range(3):
        seq, _ = prune(seq, rng.normal(size=seq.search_count), 0.7)
    grid = scatter_to_grid(seq, 24, 24).data
    assert seq.search_count == 199
    assert int((np.abs(grid).sum(axis=0) == 0).sum()) == 377


def test_scatter_without_pruning_is_a_reshape():
    seq = search_only(4, grid=2)
    grid = scatter_to_grid(seq, 2, 2).data
    np.testing.assert_allclose(grid, seq.embeddings.data.T.reshape(3, 2, 2))


def test_scatter_rejects_duplicate_coordinates():
    seq = search_only(2, grid=2)
    bad = TokenSequence(
        embeddings=seq.embeddings,
        segments=seq.segments,
        scales=seq.scales,
        grid_coords=np.array([[0, 1], [0, 1]]),
        center_flags=seq.center_flags,
        search_grid=2,
    )
    with pytest.raises(ContractError):
        scatter_to_grid(bad, 2, 2)


def test_dense_blocks_cost_the_same():
    cfg = EncoderConfig()
    report = flops(cfg, None)
    assert len(set(report.block_macs)) == 1
    assert sum(report.block_macs) == cfg.num_blocks * block_macs(cfg.num_tokens, cfg.embed_dim, cfg.mlp_ratio)


def test_flops_decrease_with_keep_ratio():
    cfg = EncoderConfig(
        patch_size=16,
        embed_dim=768,
        num_heads=12,
        num_blocks=12,
        template_resolution=192,
        search_resolution=384,
        num_scales=2,
    )
    totals = [flops(cfg, PruneConfig(keep_ratio=r, stages=(4, 7, 10))).total for r in (1.0, 0.9, 0.8, 0.7, 0.6)]
    assert all(a > b for a, b in zip(totals, totals[1:]))
    dense = flops(cfg, None)
    assert flops(cfg, PruneConfig(keep_ratio=1.0, stages=(4, 7, 10))).total == dense.total
    assert flops(cfg, PruneConfig(keep_ratio=0.7, stages=(4, 7, 10))).reduction_vs(dense) > 0


@pytest.mark.parametrize("keep_ratio,stages", [(1.0, ()), (0.7, (1, 2)), (0.5, (2,))])
def test_analytic_macs_match_instrumented_forward(keep_ratio, stages):
    settings = tiny(keep_ratio=keep_ratio, prune_stages=stages)
    model = build_model(settings, seed=0)
    rng = np.random.default_rng(1)
    t = [rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)]
    s = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    with count_macs() as counter:
        run_model(model, t, t, s)
    expected = flops(settings.encoder_config(), settings.prune_config()).total
    assert abs(counter.total - expected) <= 0.01 * expected
