import dataclasses

import numpy as np
import pytest

from gqla import convert_mla as CM
from gqla import model as M
from gqla.errors import ParameterError
from gqla.model import random_tokens
from gqla.numerics import sym_eig

from conftest import dual_path_bound, plant_group_structured_mla

CALIB = random_tokens(2048, 64, 17)


class TestCalibrate:
    def test_single_token_gives_rank_one_moments(self, mla_config, mla_weights):
        token = random_tokens(1, 64, 30)
        stats = CM.calibrate(mla_weights, mla_config, token, 2)
        latent = mla_weights.kv_down @ token[0]
        for j, acc in enumerate(stats.key):
            act = mla_weights.k_up[j * 64:(j + 1) * 64] @ latent
            assert acc.sample_count == 1
            assert np.max(np.abs(acc.second_moment - np.outer(act, act))) <= 1e-12

    def test_group_blocks_partition_all_rows(self, mla_config):
        blocks = CM._group_row_blocks(mla_config, 2, mla_config.head_dim)
        assert blocks == [(0, 64), (64, 128)]
        spans = [set(range(lo, hi)) for lo, hi in blocks]
        assert set().union(*spans) == set(range(128))
        assert spans[0].isdisjoint(spans[1])

    def test_moments_are_symmetric_psd(self, mla_config, mla_weights):
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:512], 2)
        for acc in stats.key + stats.value:
            m = acc.normalized()
            assert np.max(np.abs(m - m.T)) <= 1e-12 * (1 + np.abs(m).max())
            lam = sym_eig(m).eigenvalues
            assert np.all(lam >= -1e-9 * np.trace(m))

    def test_rejects_bad_inputs(self, mla_config, mla_weights):
        with pytest.raises(ParameterError):
            CM.calibrate(mla_weights, mla_config, np.zeros((0, 64)), 2)
        with pytest.raises(ParameterError):
            CM.calibrate(mla_weights, mla_config, CALIB[:4], 3)  # 3 does not divide 8
        grouped = dataclasses.replace(mla_config, num_groups=2)
        with pytest.raises(ParameterError):
            CM.calibrate(M.init_random(grouped, 0), grouped, CALIB[:4], 2)


class TestFactor:
    def test_one_head_per_group_is_exact(self, mla_config, mla_weights):
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:512], 8)
        fact = CM.factor(mla_weights, mla_config, stats)
        for j in range(8):
            u, v = fact.key_u[j], fact.key_v[j]
            block = mla_weights.k_up[j * 16:(j + 1) * 16]
            assert np.max(np.abs(u @ v - block)) <= 1e-10
            assert np.max(np.abs(u.T @ u - np.eye(16))) <= 1e-10

    def test_planted_low_rank_recovered(self, mla_config):
        planted = plant_group_structured_mla(mla_config, groups=2, seed=5)
        stats = CM.calibrate(planted, mla_config, CALIB[:512], 2)
        fact = CM.factor(planted, mla_config, stats)
        for j in range(2):
            block = planted.k_up[j * 64:(j + 1) * 64]
            assert np.max(np.abs(fact.key_u[j] @ fact.key_v[j] - block)) <= 1e-8
        assert min(fact.key_energy) > 1.0 - 1e-12

    def test_factor_beats_random_bases(self, mla_config, mla_weights):
        from gqla.numerics import weighted_error
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:512], 2)
        fact = CM.factor(mla_weights, mla_config, stats)
        rng = np.random.default_rng(60)
        for j in range(2):
            block = mla_weights.k_up[j * 64:(j + 1) * 64]
            err = weighted_error(block, fact.key_u[j], fact.key_v[j], stats.key[j])
            for _ in range(20):
                b, _ = np.linalg.qr(rng.standard_normal((64, 16)))
                assert err <= weighted_error(block, b, b.T @ block, stats.key[j]) + 1e-9

    def test_rank_bounds(self, mla_config, mla_weights):
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:64], 2)
        with pytest.raises(ParameterError):
            CM.factor(mla_weights, mla_config, stats, key_rank=65)


class TestAbsorb:
    def test_planted_source_converts_losslessly(self, mla_config):
        planted = plant_group_structured_mla(mla_config, groups=2, seed=5)
        converted, report = CM.convert(planted, mla_config, CALIB[:512], 2)
        target = CM.target_config(mla_config, 2)
        for seed in range(5):
            tokens = random_tokens(14, 64, 400 + seed)
            ref, _ = M.forward_gqa_path(planted, mla_config, tokens, 2)
            got, _ = M.forward_gqa_path(converted, target, tokens, 2)
            assert np.max(np.abs(got - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))
        assert report.output_deviation <= 1e-10

    def test_absorbed_matches_unfused(self, mla_config, mla_weights):
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:512], 2)
        fact = CM.factor(mla_weights, mla_config, stats)
        absorbed = CM.absorb_factors(mla_weights, mla_config, fact)
        target = CM.target_config(mla_config, 2)
        tokens = random_tokens(16, 64, 33)
        via_model, _ = M.forward_gqa_path(absorbed, target, tokens, 2)
        via_unfused = CM.unfused_forward(mla_weights, mla_config, fact, tokens, 2)
        assert np.max(np.abs(via_model - via_unfused)) <= \
            1e-10 * (1 + np.max(np.abs(via_unfused)))

    def test_query_and_output_shapes_unchanged(self, mla_config, mla_weights):
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:256], 2)
        fact = CM.factor(mla_weights, mla_config, stats)
        converted = CM.absorb_factors(mla_weights, mla_config, fact)
        assert converted.q_up.shape == mla_weights.q_up.shape
        assert converted.out_proj.shape == mla_weights.out_proj.shape
        # up-projection first dimension shrinks by heads-per-group
        assert converted.k_up.shape[0] == mla_weights.k_up.shape[0] // 4
        assert converted.v_up.shape[0] == mla_weights.v_up.shape[0] // 4

    def test_non_canonical_rank_rejected(self, mla_config, mla_weights):
        stats = CM.calibrate(mla_weights, mla_config, CALIB[:256], 2)
        fact = CM.factor(mla_weights, mla_config, stats, key_rank=8)
        with pytest.raises(ParameterError):
            CM.absorb_factors(mla_weights, mla_config, fact)

    def test_latent_pathway_passes_through(self, mla_config, mla_weights):
        converted, _ = CM.convert(mla_weights, mla_config, CALIB[:512], 2)
        assert np.array_equal(converted.kv_down, mla_weights.kv_down)
        assert np.array_equal(converted.k_rope, mla_weights.k_rope)
        # so the latent cache contents are identical before and after
        tokens = random_tokens(9, 64, 50)
        target = CM.target_config(mla_config, 2)
        _, cache_src = M.forward_absorb_path(mla_weights, mla_config, tokens, 1)
        _, cache_new = M.forward_absorb_path(converted, target, tokens, 1)
        assert np.array_equal(cache_src.kv, cache_new.kv)
        assert np.array_equal(cache_src.k_rope, cache_new.k_rope)


class TestConvert:
    def test_group_per_head_is_exact_reparameterization(self, mla_config, mla_weights):
        converted, report = CM.convert(mla_weights, mla_config, CALIB[:512], 8)
        tokens = random_tokens(15, 64, 44)
        ref, _ = M.forward_gqa_path(mla_weights, mla_config, tokens, 2)
        got, _ = M.forward_gqa_path(converted, mla_config, tokens, 2)
        assert np.max(np.abs(got - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))
        assert report.output_deviation <= 1e-10

    def test_converted_weights_pass_dual_path(self, mla_config, mla_weights):
        converted, _ = CM.convert(mla_weights, mla_config, CALIB[:512], 2)
        target = CM.target_config(mla_config, 2)
        tokens = random_tokens(17, 64, 55)
        a, _ = M.forward_gqa_path(converted, target, tokens, 2)
        b, _ = M.forward_absorb_path(converted, target, tokens, 2)
        o = M.oracle_mha(converted, target, tokens, 2)
        assert np.max(np.abs(a - b)) <= dual_path_bound(a)
        assert np.max(np.abs(b - o)) <= dual_path_bound(a)

    def test_deviation_non_increasing_with_calibration_size(self, mla_config):
        planted = plant_group_structured_mla(mla_config, groups=2, seed=5)
        stream = random_tokens(512, 64, 17)  # nested: the first 64 are a prefix
        small = CM.convert(planted, mla_config, stream[:64], 2)[1].output_deviation
        large = CM.convert(planted, mla_config, stream, 2)[1].output_deviation
        assert large <= small + 1e-12

    def test_report_energies(self, mla_config, mla_weights):
        _, report = CM.convert(mla_weights, mla_config, CALIB[:512], 2)
        assert len(report.key_energy) == 2 and len(report.value_energy) == 2
        assert all(0.0 < e <= 1.0 for e in report.key_energy + report.value_energy)
        assert report.latent_elements_per_token == 40
