import math

import numpy as np
import pandas as pd
import pytest

from src import rounds
from src.bandit import competitive_set, q_of_t
from src.errors import ConfigurationError
from src.outputs import rounds_frame
from src.rounds import (
    METHOD_REGISTRY,
    RoundContext,
    dac_probabilities,
    get_round_function,
    node_streams,
    run_round_baseline,
    run_round_dac,
    run_round_ppdl,
)
from src.sim import build_nodes, processing_order, run_experiment
from tests.oracles import BanditReplay


def step_rounds(config, rounds=None):
    """Drive every node through the rounds by hand, keeping the node states."""
    nodes = build_nodes(config)
    clusters = config.layout.cluster_of()
    step = get_round_function(config.method.value)
    history = []
    for t in range(1, (rounds or config.rounds) + 1):
        snapshot = np.stack([n.model.theta for n in nodes])
        snapshot.setflags(write=False)
        ctx = RoundContext(config, t, snapshot, clusters)
        history.append([step(n, ctx) for n in nodes])
    return nodes, history


class TestRegistry:

    def test_every_method_has_a_round_function(self):
        assert set(METHOD_REGISTRY) == {"ppdl", "ppdl-var", "dac", "random", "oracle", "local"}
        assert get_round_function("ppdl") is get_round_function("ppdl-var") is run_round_ppdl
        assert get_round_function("dac") is run_round_dac
        for name in ("random", "oracle", "local"):
            assert get_round_function(name) is run_round_baseline

    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            get_round_function("gossip")

    def test_node_streams_are_independent_and_reproducible(self):
        a = [g.random(4) for g in node_streams(3, 1, 2)]
        b = [g.random(4) for g in node_streams(3, 1, 2)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(a[0], a[1])
        assert not np.array_equal(a[0], node_streams(3, 2, 2)[0].random(4))


class TestDacProbabilities:

    def test_zero_temperature_is_uniform(self):
        np.testing.assert_allclose(dac_probabilities(np.array([1.0, 5.0, 2.0]), 0.0), np.full(3, 1 / 3))

    def test_lower_loss_gets_higher_probability(self):
        scores = np.array([1 / 0.5, 1 / 0.25, 1 / 1.0])
        probs = dac_probabilities(scores, 30.0)
        assert probs[1] > probs[0] > probs[2]
        assert probs.sum() == pytest.approx(1.0)

    def test_unscored_neighbors_get_mean_score(self):
        probs = dac_probabilities(np.array([1.0, np.nan, 3.0]), 5.0)
        assert probs[0] < probs[1] < probs[2]

    def test_no_scores_yet(self):
        np.testing.assert_allclose(dac_probabilities(np.full(4, np.nan), 30.0), np.full(4, 0.25))

    def test_degenerate_scores(self, caplog):
        np.testing.assert_allclose(dac_probabilities(np.zeros(5), 30.0), np.full(5, 0.2))
        assert "Degenerate" in caplog.text


class TestPpdlRound:

    def test_first_round_explores_every_arm(self, make_config):
        _, history = step_rounds(make_config(T=1))
        for entry in history[0]:
            assert entry.comp_set_size == math.comb(5, 2)
            assert entry.entropy == pytest.approx(math.log(10))

    def test_groups_come_from_the_neighborhood(self, make_config):
        nodes, history = step_rounds(make_config())
        for entries in history:
            for entry, node in zip(entries, nodes):
                assert len(entry.group) == 2
                assert entry.node not in entry.group
                assert set(entry.group) <= set(node.neighbors)
                assert 0.0 <= entry.reward <= 1.0
                assert entry.group == node.policy.catalog.unrank(entry.arm).members

    def test_bandit_state_matches_replay(self, make_config):
        config = make_config(T=10)
        nodes, history = step_rounds(config)
        for node in nodes:
            replay = BanditReplay(node.neighbors, config.group_size)
            for t, entries in enumerate(history, start=1):
                entry = entries[node.node]
                replay.play(entry.arm, entry.reward, q_of_t(config.pseudo_reward, t))
            state = node.policy.state
            arms = range(state.num_arms)
            np.testing.assert_array_equal(state.plays, [replay.plays(a) for a in arms])
            np.testing.assert_allclose(state.cum_loss, replay.cum_loss(), rtol=1e-12)
            for a in arms:
                if replay.plays(a):
                    assert state.reward_sum[a] / state.plays[a] == pytest.approx(replay.mean(a), rel=1e-12)
            got = competitive_set(state, node.policy.catalog, config.significance_divisor)
            assert got.tolist() == replay.competitive(config.significance_divisor)

    def test_failed_aggregation_does_not_charge_the_bandit(self, make_config, caplog):
        nodes, history = step_rounds(make_config(T=8, dropout_prob=0.6))
        failed = 0
        for node in nodes:
            entries = [entries[node.node] for entries in history]
            aggregated = [e for e in entries if e.aggregated]
            failed += len(entries) - len(aggregated)
            assert node.policy.state.plays.sum() == len(aggregated)
            assert all(e.group == () for e in entries if not e.aggregated)
        assert failed > 0
        assert "trains locally" in caplog.text

    def test_merge_weight_counts_survivors(self, make_config, monkeypatch):
        survivors, merged_over = [], []
        real_aggregate, real_merge = rounds.secure_aggregate, rounds.merge

        def recording_aggregate(*args, **kwargs):
            mean, transcript = real_aggregate(*args, **kwargs)
            survivors.append(len(transcript.survivors))
            return mean, transcript

        def recording_merge(local, aggregate, group_size, weight=None):
            merged_over.append(group_size)
            return real_merge(local, aggregate, group_size, weight)

        monkeypatch.setattr(rounds, "secure_aggregate", recording_aggregate)
        monkeypatch.setattr(rounds, "merge", recording_merge)
        step_rounds(make_config(T=8, dropout_prob=0.5, secagg_threshold=1))
        assert merged_over == survivors
        assert 1 in survivors


class TestBaselines:

    def test_local_never_communicates(self, make_config):
        result = run_experiment(make_config(method="local"))
        assert not result.comm.counts.any()
        assert all(e.group == () and not e.aggregated for r in result.records for e in r.entries)

    def test_oracle_is_block_diagonal(self, make_config):
        result = run_experiment(make_config(method="oracle"))
        counts = result.comm.counts
        assert not counts[:3, 3:].any()
        assert not counts[3:, :3].any()
        np.testing.assert_array_equal(counts.sum(axis=1), np.full(6, 2 * 6))

    def test_oracle_takes_every_clustermate_when_short(self, make_config):
        config = make_config(method="oracle", M=3, layout={
            "cluster_sizes": [2, 4], "shift": "labels", "label_subsets": [[0, 1], [2, 3]],
        })
        result = run_experiment(config)
        for record in result.records:
            assert record.entries[0].group == (1,)
            assert record.entries[1].group == (0,)
            assert all(len(e.group) == 3 for e in record.entries[2:])

    def test_random_marginals_are_uniform(self, make_config):
        rounds = 200
        result = run_experiment(make_config(method="random", T=rounds))
        counts = result.comm.counts
        np.testing.assert_array_equal(np.diag(counts), 0)
        np.testing.assert_array_equal(counts.sum(axis=1), np.full(6, 2 * rounds))
        # each of 5 neighbors joins with probability 2/5
        p = 2 / 5
        sigma = math.sqrt(rounds * p * (1 - p))
        off_diagonal = counts[~np.eye(6, dtype=bool)]
        assert np.all(np.abs(off_diagonal - rounds * p) <= 4 * sigma)

    def test_dac_samples_group_size_peers(self, make_config):
        result = run_experiment(make_config(method="dac"))
        for record in result.records:
            for entry in record.entries:
                assert entry.arm is None
                assert len(entry.group) == 2 and entry.node not in entry.group
        # round one is uniform over five neighbors
        assert result.records[0].entries[0].entropy == pytest.approx(math.log(5))


class TestRunExperiment:

    def test_shape_of_result(self, make_config):
        config = make_config()
        result = run_experiment(config)
        assert [r.round for r in result.records] == list(range(1, 7))
        assert all(len(r.entries) == 6 for r in result.records)
        assert [a.node for a in result.accuracies] == list(range(6))
        assert all(1 <= a.best_round <= 6 for a in result.accuracies)
        assert all(0.0 <= a.test_acc <= 1.0 for a in result.accuracies)

    def test_comm_rows_count_group_members(self, make_config):
        result = run_experiment(make_config())
        communicating = np.zeros(6, dtype=np.int64)
        for record in result.records:
            for entry in record.entries:
                communicating[entry.node] += entry.aggregated
        np.testing.assert_array_equal(result.comm.counts.sum(axis=1), 2 * communicating)
        np.testing.assert_array_equal(np.diag(result.comm.counts), 0)

    def test_cluster_mean_is_unweighted(self, make_config):
        config = make_config(method="local", layout={
            "cluster_sizes": [4, 2], "shift": "labels", "label_subsets": [[0, 1], [2, 3]],
        })
        result = run_experiment(config)
        means = result.cluster_means()
        accs = [a.test_acc for a in result.accuracies]
        assert means[0] == pytest.approx(np.mean(accs[:4]))
        assert means[1] == pytest.approx(np.mean(accs[4:]))
        assert result.mean_over_clusters == pytest.approx((means[0] + means[1]) / 2)
        assert result.node_weighted_mean == pytest.approx(np.mean(accs))

    def test_identical_seed_identical_trace(self, make_config):
        a = rounds_frame(run_experiment(make_config()))
        b = rounds_frame(run_experiment(make_config()))
        pd.testing.assert_frame_equal(a, b)

    def test_seeds_give_distinct_traces(self, make_config):
        frames = [rounds_frame(run_experiment(make_config(seed=s))) for s in (0, 1, 2)]
        assert not frames[0]["reward"].equals(frames[1]["reward"])
        assert not frames[1]["reward"].equals(frames[2]["reward"])

    @pytest.mark.parametrize("method", ["ppdl", "dac", "random"])
    def test_processing_order_does_not_matter(self, make_config, method):
        plain = run_experiment(make_config(method=method))
        shuffled = run_experiment(make_config(method=method, node_order_seed=11))
        pd.testing.assert_frame_equal(rounds_frame(plain), rounds_frame(shuffled))
        np.testing.assert_array_equal(plain.comm.counts, shuffled.comm.counts)
        assert plain.accuracies == shuffled.accuracies

    def test_processing_order_is_a_permutation(self, make_config):
        config = make_config(node_order_seed=5)
        for t in (1, 2, 3):
            assert sorted(processing_order(config, t).tolist()) == list(range(6))
        np.testing.assert_array_equal(processing_order(make_config(), 4), np.arange(6))

    def test_saturated_pseudo_rewards_recover_plain_tsallis(self, make_config):
        saturated = {"pseudo_reward": {"q0": 1.0}, "T": 100}
        correlated = run_experiment(make_config(**saturated))
        plain = run_experiment(make_config(competitive_masking=False, **saturated))
        arms = [[e.arm for e in r.entries] for r in correlated.records]
        assert arms == [[e.arm for e in r.entries] for r in plain.records]
        assert all(e.comp_set_size == 10 for r in correlated.records for e in r.entries)

    def test_reward_before_training(self, make_config):
        result = run_experiment(make_config(reward_after_training=False))
        assert any(e.reward != e.val_acc for r in result.records for e in r.entries)

    def test_empty_split_stops_before_round_one(self, make_config):
        config = make_config(task={"classes": 4, "dim": 4, "samples_per_node": 4})
        with pytest.raises(ConfigurationError):
            run_experiment(config)

    def test_audit_log_is_written(self, make_config, tmp_path):
        from src.logging_setup import close_audit_log, open_audit_log

        path = tmp_path / "audit.jsonl"
        run_experiment(make_config(T=2), audit_logger=open_audit_log(path))
        close_audit_log()
        lines = path.read_text().splitlines()
        assert lines and all('"kind"' in line for line in lines)
