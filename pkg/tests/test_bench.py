import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedling.bench import (COST_ROWS, LatencyReport, ResourcePricing, compare_inference_modes,
                            cost_per_billion, cost_table, forward_time_per_frame,
                            parse_accelerator, run_throughput_bench)
from seedling.config import RunConfig
from seedling.evaluation import evaluate, greedy_path_q
from seedling.envs import Chain, EnvSpec
from seedling.nn import ConfigurationError, Network, ParamSnapshot


def by_hand(fps, cpus, p100=0, tpu=0):
    hours = 1e9 / fps / 3600
    return hours * (cpus * 0.0475 + p100 * 1.46 + tpu * 1.00)


def test_cost_examples_by_hand():
    assert cost_per_billion(30_000, 176, [("p100", 1)]) == pytest.approx(90.93, abs=0.01)
    assert cost_per_billion(74_000, 104, [("tpu", 2)]) == pytest.approx(26.05, abs=0.01)
    assert cost_per_billion(3600, 0, [("gpu", 1)]) == pytest.approx(1e9 / 3600 / 3600 * 1.46)


def test_every_published_row_is_reproduced():
    rows = cost_table()
    assert len(rows) == len(COST_ROWS) == 13
    for row, spec in zip(rows, COST_ROWS):
        kinds = dict(spec.accelerators)
        expect = by_hand(spec.fps, spec.cpus, kinds.get("p100", 0), kinds.get("tpu", 0))
        assert row["cost"] == pytest.approx(expect, abs=0.005)
        assert row["ok"], row


def test_seed_default_row_sits_between_both_published_figures():
    row = next(r for r in COST_ROWS if r.system == "SEED" and r.table == "dmlab"
               and r.size == "default")
    assert row.reported == (25, 28)
    assert 25 < row.cost() < 28


@given(st.floats(1.0, 1e6), st.floats(0, 1000), st.floats(0, 8), st.floats(0.5, 4))
@settings(max_examples=200)
def test_cost_is_linear_in_resources_and_inverse_in_fps(fps, cpus, tpus, k):
    base = cost_per_billion(fps, cpus, [("tpu", tpus)])
    assert cost_per_billion(fps, k * cpus, [("tpu", k * tpus)]) == pytest.approx(k * base)
    assert cost_per_billion(k * fps, cpus, [("tpu", tpus)]) == pytest.approx(base / k)


def test_pricing_validation(tmp_path):
    with pytest.raises(ValueError):
        ResourcePricing(cpu_core_per_hour=-1)
    with pytest.raises(ValueError):
        cost_per_billion(0, 1)
    with pytest.raises(ValueError):
        parse_accelerator("v100:1")
    assert parse_accelerator("TPU:4") == ("tpu", 4.0)
    assert parse_accelerator("p100") == ("p100", 1.0)
    path = tmp_path / "p.json"
    path.write_text('{"tpu_core_per_hour": 2.0}')
    assert ResourcePricing.load(path).tpu_core_per_hour == 2.0
    row = cost_table(pricing=ResourcePricing.load(path))[3]
    assert row["cost"] > 26.05 and not row["ok"]


def test_latency_report_percentiles_and_batches():
    rep = LatencyReport.from_samples(np.arange(1, 101) / 1000, frames=500, seconds=2.0,
                                     batch_histogram={1: 2, 4: 2})
    assert rep.p50_ms == pytest.approx(50.5) and rep.p99_ms == pytest.approx(99.01)
    assert rep.fps == 250 and rep.mean_batch_size == 2.5
    assert rep.to_record()["mean_batch_size"] == 2.5
    with pytest.raises(ValueError):
        LatencyReport(2.0, 1.0, 3.0, 10.0)
    with pytest.raises(ValueError):
        LatencyReport(1.0, 2.0, 3.0, -1.0)
    empty = LatencyReport.from_samples([], frames=0, seconds=0.0)
    assert np.isnan(empty.p50_ms) and empty.fps == 0.0


def test_compare_modes():
    cfg = {"env": "catch", "lstm_units": 64}
    a = LatencyReport(1, 2, 3, 100.0, forward_per_frame_us=5.0, config=cfg)
    assert compare_inference_modes(a, a)["fps_ratio"] == 1.0
    assert compare_inference_modes(a, a)["forward_ratio"] == 1.0
    b = dataclasses.replace(a, config={"env": "catch", "lstm_units": 32})
    with pytest.raises(ConfigurationError):
        compare_inference_modes(a, b)


def test_batched_forward_is_cheaper_per_frame():
    cfg = RunConfig()
    one = forward_time_per_frame(cfg, 1, reps=100)
    many = forward_time_per_frame(cfg, 32, reps=100)
    assert many < one


def test_throughput_bench_smoke():
    rep = run_throughput_bench(actors=1, envs_per_actor=4, duration=3.0, warmup=1.5)
    assert rep.frames > 0 and rep.fps > 0
    assert rep.p50_ms <= rep.p95_ms <= rep.p99_ms
    assert rep.config["actors"] == 1 and rep.config["mode"] == "central"
    assert sum(rep.batch_histogram.values()) > 0
    with pytest.raises(ValueError):
        run_throughput_bench(duration=1.0, warmup=1.0)


# -- evaluation helpers ----------------------------------------------------------------


def test_evaluate_zero_policy_on_chain_always_moves_left():
    cfg = RunConfig(algo="r2d2", env="chain")
    net = Network(cfg.network_spec())
    snap = ParamSnapshot.create(0, net.zero_params())
    returns = evaluate(net, snap, EnvSpec("chain"), episodes=5)
    assert returns.tolist() == [0.0] * 5  # argmax of all-zero Q is action 0 (left)


def test_greedy_path_q_with_hand_set_bias():
    cfg = RunConfig(algo="r2d2", env="chain", env_length=4)
    net = Network(cfg.network_spec())
    params = net.zero_params()
    params["adv/b"] = np.array([0.0, 1.0], np.float32)
    snap = ParamSnapshot.create(0, params)
    states, qs = greedy_path_q(net, snap, Chain(4))
    assert states == [0, 1, 2]
    assert qs.shape == (3, 2) and np.all(qs[:, 1] > qs[:, 0])
    with pytest.raises(ValueError):
        greedy_path_q(Network(RunConfig().network_spec()), snap, Chain(4))


def test_plots_are_written(tmp_path):
    from seedling import plotting

    rows = cost_table()
    rep = LatencyReport(1.0, 2.0, 3.0, 100.0, batch_histogram={8: 3, 32: 5},
                        stages_ms={"batch_wait": 0.5, "forward": 1.0})
    paths = [plotting.plot_cost_table(rows, tmp_path / "cost.png"),
             plotting.plot_latency_report(rep, tmp_path / "lat.png"),
             plotting.plot_mode_comparison(rep, rep, tmp_path / "modes.png"),
             plotting.plot_learning_curve([{"frames": i, "mean_return_100": i / 10}
                                           for i in range(10)], tmp_path / "curve.png")]
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)
