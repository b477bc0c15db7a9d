"""Selection search: candidate roster, determinism, ranking, parallelism."""

import numpy as np
import pytest

from viewsel.errors import ConfigError
from viewsel.fusion import FusionConfig
from viewsel.search import (
    CandidateResult,
    SearchConfig,
    SearchResult,
    candidate_list,
    format_table,
    matrix_baselines,
    run_search,
    save_results,
    vector_baselines,
)
from viewsel.selection import SelectionVector, load_selection, serialize
from viewsel.synth import SynthConfig, generate
from viewsel.training import TrainConfig


def quick_dataset():
    cfg = SynthConfig(n_plants=30, n_days=3, levels=2, views=6, dim=8,
                      noise_sigma=0.1, seed=2)
    d = generate(cfg)
    return (
        d.instances("vector", "train", level=0),
        d.instances("vector", "val", level=0),
    )


def quick_fusion():
    return FusionConfig(d_in=8, d_model=8, n_layers=1, n_heads=2,
                        dropout=0.0, pe_count=6, head_hidden=4)


def quick_train():
    return TrainConfig(epochs=2, batch_size=16, lr_fusion=1e-3, lr_head=1e-2)


class TestCandidateRoster:
    def test_baselines_come_first_in_fixed_order(self):
        cands = candidate_list(SearchConfig(mode="vector", n_candidates=2),
                               levels=5, views=24)
        names = [name for name, _ in cands]
        assert names[:4] == ["all views", "every 2nd", "every 4th", "first view"]
        assert names[4:] == ["random 00", "random 01"]

    def test_vector_baseline_view_counts(self):
        views = [sel.views for _, sel in vector_baselines()]
        assert views == [24, 12, 6, 1]

    def test_matrix_baseline_view_counts(self):
        views = [sel.views for _, sel in matrix_baselines()]
        assert views == [120, 60, 40, 20, 10]

    def test_random_draws_reproduce_per_index(self):
        a = candidate_list(SearchConfig(mode="vector", n_candidates=4),
                           levels=5, views=24)
        b = candidate_list(SearchConfig(mode="vector", n_candidates=8),
                           levels=5, views=24)
        # extending the roster must not disturb earlier draws
        assert all(x[1] == y[1] for x, y in zip(a, b))

    def test_seed_changes_draws(self):
        a = candidate_list(SearchConfig(mode="vector", n_candidates=3, seed=0),
                           levels=5, views=24)
        b = candidate_list(SearchConfig(mode="vector", n_candidates=3, seed=1),
                           levels=5, views=24)
        assert any(x[1] != y[1] for x, y in zip(a[4:], b[4:]))

    def test_matrix_mode_draws_matrices(self):
        cands = candidate_list(SearchConfig(mode="matrix", n_candidates=1),
                               levels=3, views=6)
        name, sel = cands[-1]
        assert sel.bits.shape == (3, 6)

    def test_baselines_can_be_disabled(self):
        cands = candidate_list(
            SearchConfig(mode="vector", n_candidates=2, include_baselines=False),
            levels=5, views=24)
        assert len(cands) == 2

    def test_density_default_by_mode(self):
        assert SearchConfig(mode="vector").resolved_density() == 0.25
        assert SearchConfig(mode="matrix").resolved_density() == 0.10
        assert SearchConfig(mode="vector", density=0.4).resolved_density() == 0.4


class TestSearchRun:
    def test_rows_sorted_and_deterministic(self):
        train_i, val_i = quick_dataset()
        scfg = SearchConfig(mode="vector", n_candidates=2, seed=5)
        a = run_search(train_i, val_i, quick_fusion(), scfg, quick_train(),
                       levels=2, views=6)
        b = run_search(train_i, val_i, quick_fusion(), scfg, quick_train(),
                       levels=2, views=6)
        assert [r.name for r in a.rows] == [r.name for r in b.rows]
        assert [r.val_mae for r in a.rows] == [r.val_mae for r in b.rows]
        maes = [r.val_mae for r in a.rows]
        assert maes == sorted(maes)
        assert a.best.val_mae == min(maes)

    def test_worker_pool_matches_serial(self):
        train_i, val_i = quick_dataset()
        base = SearchConfig(mode="vector", n_candidates=2, seed=5)
        serial = run_search(train_i, val_i, quick_fusion(), base, quick_train(),
                            levels=2, views=6)
        pooled = run_search(train_i, val_i, quick_fusion(),
                            SearchConfig(mode="vector", n_candidates=2, seed=5,
                                         workers=4),
                            quick_train(), levels=2, views=6)
        assert [(r.name, r.val_mae) for r in serial.rows] == \
               [(r.name, r.val_mae) for r in pooled.rows]

    def test_candidate_epochs_follow_budget_rule(self):
        train_i, val_i = quick_dataset()
        scfg = SearchConfig(mode="vector", n_candidates=0)
        res = run_search(train_i, val_i, quick_fusion(), scfg,
                         quick_train(), levels=2, views=6)
        assert all(r.epochs == 15 for r in res.rows)

    def test_explicit_epoch_override(self):
        train_i, val_i = quick_dataset()
        scfg = SearchConfig(mode="vector", n_candidates=0, epochs_per_candidate=2)
        res = run_search(train_i, val_i, quick_fusion(), scfg, quick_train(),
                         levels=2, views=6)
        assert all(r.epochs == 2 for r in res.rows)

    def test_empty_split_rejected(self):
        train_i, val_i = quick_dataset()
        with pytest.raises(ConfigError):
            run_search([], val_i, quick_fusion(),
                       SearchConfig(mode="vector"), quick_train())

    def test_ranking_ties_break_toward_fewer_views(self):
        rows = [
            CandidateResult("a", SelectionVector(np.array([1, 1, 0, 0])), 2,
                            0.5, 0.6, 2, 0),
            CandidateResult("b", SelectionVector(np.array([1, 0, 0, 0])), 1,
                            0.5, 0.6, 2, 0),
        ]
        rows.sort(key=lambda r: (r.val_mae, r.views, serialize(r.selection)))
        assert rows[0].name == "b"

    def test_save_results_round_trip(self, tmp_path):
        train_i, val_i = quick_dataset()
        scfg = SearchConfig(mode="vector", n_candidates=1,
                            epochs_per_candidate=2, seed=5)
        res = run_search(train_i, val_i, quick_fusion(), scfg, quick_train(),
                         levels=2, views=6)
        table_path, best_path = save_results(res, tmp_path)
        text = (tmp_path / "search_table.txt").read_text()
        assert "strategy" in text and "val MAE" in text
        assert load_selection(best_path, views=6) == res.best.selection

    def test_format_table_has_one_line_per_candidate(self):
        train_i, val_i = quick_dataset()
        scfg = SearchConfig(mode="vector", n_candidates=1,
                            epochs_per_candidate=2)
        res = run_search(train_i, val_i, quick_fusion(), scfg, quick_train(),
                         levels=2, views=6)
        lines = format_table(res).splitlines()
        assert len(lines) == 2 + len(res.rows)


class TestSearchConfigValidation:
    @pytest.mark.parametrize("kw", [
        dict(mode="both"),
        dict(mode="vector", n_candidates=-1),
        dict(mode="vector", density=0.0),
        dict(mode="vector", density=1.0),
        dict(mode="vector", workers=0),
        dict(mode="vector", n_candidates=0, include_baselines=False),
    ])
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ConfigError):
            SearchConfig(**kw)
