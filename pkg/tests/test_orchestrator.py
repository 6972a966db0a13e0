
from fractions import Fraction
from math import comb

import numpy as np
import pytest

from fedsim.adversary import AttackSpec
from fedsim.aggregators import Strategy
from fedsim.data import PartitionSpec
from fedsim.errors import ConfigurationError

from fedsim.model import MlpSpec, TrainSpec
from fedsim.orchestrator import (
    CsvTask,
    ExperimentConfig,
    HoldoutSpec,
    SyntheticTask,
    malicious_round_probability,
    run_experiment,
    run_round,
    select_clients,
    setup_experiment,
)
from fedsim.privacy import DpState

def small_config(**overrides) -> ExperimentConfig:
    base = dict(
        task=SyntheticTask(classes=3, features=5, samples=900, separation=6.0, seed=0),
        partition=PartitionSpec("iid", client_count=8, seed=0),
        model=MlpSpec((5, 8, 3), seed=0),
        train=TrainSpec(epochs=2, batch_size=16, learning_rate=0.1, seed=0),
        strategy=Strategy(kind="fedavg"),
        rounds=4,
        clients_per_round=4,
        selection_seed=5,
        validation=HoldoutSpec(per_label=10, seed=2),
        test=HoldoutSpec(per_label=20, seed=1),
    )
    base.update(overrides)
    return ExperimentConfig(**base)

def exact_binomial_tail(n: int, k0: int, p: Fraction) -> Fraction:
    return sum(
        (comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(k0, n + 1)),
        start=Fraction(0),
    )

class TestSelectClients:
    def test_full_population(self):
        assert sorted(select_clients(6, 6, 0, 3)) == list(range(6))

    def test_repeatable(self):
        assert select_clients(40, 10, 7, 9) == select_clients(40, 10, 7, 9)

    def test_varies_by_round(self):
        streams = {tuple(select_clients(40, 10, r, 9)) for r in range(20)}
        assert len(streams) > 1

    def test_rejects_oversized_count(self):
        with pytest.raises(ConfigurationError):
            select_clients(4, 5, 0, 0)

class TestRunRound:
    def test_corrupted_client_gets_zero_weight(self):
        # a PGA client with a hugely scaled delta must be clamped out
        config = small_config(
            strategy=Strategy(kind="fedval"),
            attack=AttackSpec(kind="pga", scale_factor=20.0, ascent_epochs=2,
                              malicious_fraction=0.2, placement_seed=1),
            clients_per_round=8,
        )
        state = setup_experiment(config)
        assert state.malicious
        log = run_round(state, config)
        for client in state.malicious:
            assert log.weights[client] == 0.0

    def test_weights_sum_to_one_or_zero_update(self):
        config = small_config(strategy=Strategy(kind="fedval"))
        state = setup_experiment(config)
        for _ in range(3):
            log = run_round(state, config)
            total = sum(log.weights.values())
            assert log.zero_update or total == pytest.approx(1.0, abs=1e-9)

    def test_fedavg_and_fedval_agree_on_homogeneous_clients(self):
        results = {}
        for kind in ("fedavg", "fedval"):
            config = small_config(strategy=Strategy(kind=kind), rounds=6)
            results[kind] = run_experiment(config)
        a = results["fedavg"].round_logs[-1].val_loss
        b = results["fedval"].round_logs[-1].val_loss
        assert abs(a - b) / max(a, b) < 0.10

class TestRunExperiment:
    def test_zero_rounds_returns_initial_model(self):
        config = small_config(rounds=0)
        result = run_experiment(config)
        assert result.round_logs == []
        assert result.records == []
        from fedsim import model

        assert np.array_equal(result.final_params, model.init_params(config.model))

    def test_replay_determinism(self):
        config = small_config(strategy=Strategy(kind="fedval"))
        a = run_experiment(config)
        b = run_experiment(config)
        assert np.array_equal(a.final_params, b.final_params)
        assert [r.as_dict() for r in a.round_logs] == [r.as_dict() for r in b.round_logs]
        assert [m.__dict__ for m in a.records] == [m.__dict__ for m in b.records]

    def test_worker_count_does_not_change_results(self):
        config = small_config(strategy=Strategy(kind="fedval"))
        serial = run_experiment(config, workers=1)
        threaded = run_experiment(config, workers=4)
        assert np.array_equal(serial.final_params, threaded.final_params)
        assert [r.as_dict() for r in serial.round_logs] == [
            r.as_dict() for r in threaded.round_logs
        ]

    def test_selection_stream_independent_of_strategy_and_attack(self):
        variants = [
            small_config(strategy=Strategy(kind="fedavg")),
            small_config(strategy=Strategy(kind="fedval")),
            small_config(strategy=Strategy(kind="multi_krum", remove_fraction=0.5)),
            small_config(
                strategy=Strategy(kind="fedavg"),
                attack=AttackSpec(kind="pga", scale_factor=2.0, ascent_epochs=1,
                                  malicious_fraction=0.25, placement_seed=3),
            ),
        ]
        streams = [
            [log.selected for log in run_experiment(c).round_logs] for c in variants
        ]
        assert all(s == streams[0] for s in streams[1:])

    @pytest.mark.parametrize("kind", ["fedavg", "fedval", "trimmed_mean"])
    def test_zero_malicious_fraction_matches_no_attack_bitwise(self, kind):
        strategy = Strategy(kind=kind, trim_fraction=0.25 if kind == "trimmed_mean" else 0.0)
        clean = run_experiment(small_config(strategy=strategy))
        disarmed = run_experiment(
            small_config(
                strategy=strategy,
                attack=AttackSpec(kind="pga", scale_factor=5.0, ascent_epochs=2,
                                  malicious_fraction=0.0, placement_seed=1),
            )
        )
        assert np.array_equal(clean.final_params, disarmed.final_params)

    def test_dp_pipeline_runs_and_adapts_bound(self):
        config = small_config(
            strategy=Strategy(kind="fedavg", pre_transforms=("norm_bound", "dp_noise")),
            dp=DpState(clip_bound=0.5, noise_multiplier=0.1),
        )
        state = setup_experiment(config)
        start_bound = state.dp.clip_bound
        run_round(state, config)
        assert state.dp.clip_bound != start_bound

    def test_pre_transforms_without_dp_rejected(self):
        config = small_config(strategy=Strategy(kind="fedavg", pre_transforms=("norm_bound",)))
        with pytest.raises(ConfigurationError, match="dp"):
            run_experiment(config)

    def test_mismatched_model_rejected(self):
        config = small_config(model=MlpSpec((5, 8, 4), seed=0))
        with pytest.raises(ConfigurationError, match="output dim"):
            run_experiment(config)

    def test_oversubscribed_round_rejected(self):
        config = small_config(clients_per_round=9)
        with pytest.raises(ConfigurationError, match="clients_per_round"):
            run_experiment(config)

    def test_metrics_cadence(self):
        config = small_config(rounds=7, metrics_every=5)
        result = run_experiment(config)
        # every 5th round plus the final round
        assert [r.round for r in result.records] == [4, 6]

    def test_recall_dimension_end_to_end(self, tmp_path):
        # binary task with a demographic group column: the recall dimension
        # flows from csv -> validation groups -> scoring -> metric records
        rng = np.random.default_rng(5)
        rows = ["f0,f1,y,g"]
        for _ in range(300):
            g = int(rng.random() < 0.3)
            y = int(rng.random() < 0.5)
            center = (2.0 if y else -2.0) * (1.0 if g == 0 else -1.0)
            x = rng.normal(center, 1.0, size=2)
            rows.append(f"{x[0]:.5f},{x[1]:.5f},{y},{'A' if g == 0 else 'B'}")
        path = tmp_path / "grouped.csv"
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")

        config = ExperimentConfig(
            task=CsvTask(path=str(path), feature_columns=("f0", "f1"),
                         label_column="y", group_column="g"),
            partition=PartitionSpec("iid", client_count=6, seed=0),
            model=MlpSpec((2, 8, 2), seed=0),
            train=TrainSpec(epochs=3, batch_size=16, learning_rate=0.1, seed=0),
            strategy=Strategy(kind="fedval"),
            rounds=4,
            clients_per_round=3,
            selection_seed=2,
            validation=HoldoutSpec(per_label=15, seed=2),
            test=HoldoutSpec(per_label=25, seed=1),
            recall_dim=True,
        )
        result = run_experiment(config)
        record = result.records[-1]
        assert record.per_group_recall is not None
        assert set(record.per_group_recall) == {0, 1}
        assert all(0.0 <= v <= 1.0 for v in record.per_group_recall.values())
        assert result.round_logs[-1].weights is not None

class TestMaliciousRoundProbability:
    def test_matches_exact_oracle(self):
        per_round, _ = malicious_round_probability(30, 0.1, rounds=1, k0=9)
        exact = exact_binomial_tail(30, 9, Fraction(1, 10))
        assert abs(per_round - float(exact)) / float(exact) < 1e-9

    def test_default_k0_reproduces_nine(self):
        with_threshold, _ = malicious_round_probability(30, 0.1, threshold_fraction=0.4)
        with_k0, _ = malicious_round_probability(30, 0.1, k0=9)
        assert with_threshold == with_k0

    def test_long_horizon_is_near_certain(self):
        _, at_least_once = malicious_round_probability(30, 0.1, k0=9, rounds=25_000)
        assert at_least_once > 0.99

    def test_zero_probability(self):
        per_round, at_least_once = malicious_round_probability(30, 0.0, k0=9, rounds=100)
        assert per_round == 0.0
        assert at_least_once == 0.0

    def test_monotone_in_rounds(self):
        values = [
            malicious_round_probability(30, 0.1, k0=9, rounds=r)[1]
            for r in (1, 100, 25_000)
        ]
        assert values == sorted(values)

    def test_random_fixtures_match_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            k0 = int(rng.integers(0, n + 1))
            num = int(rng.integers(1, 100))
            p = Fraction(num, 100)
            per_round, _ = malicious_round_probability(n, num / 100, rounds=1, k0=k0)
            exact = float(exact_binomial_tail(n, k0, p))
            if exact > 0:
                assert abs(per_round - exact) / exact < 1e-9
            else:
                assert per_round == 0.0
