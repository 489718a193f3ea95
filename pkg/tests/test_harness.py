import csv
import io
import warnings

import numpy as np
import pytest

from tfblender.blender import BlenderConfig, ConfigError
from tfblender.harness import (
    ABLATIONS,
    CSV_COLUMNS,
    Backbone,
    CostModel,
    TrainingDiverged,
    TrainSpec,
    config_digest,
    cost_ratio,
    evaluate,
    evaluate_passthrough,
    oracle_check,
    suppression_stats,
    time_call,
    time_interleaved,
    time_pair,
    tradeoff_sweep,
    train,
    window_batch,
)
from tfblender.synthetic import SceneSpec, generate_sequence

SMALL = SceneSpec(grid=(4, 8, 8), blob_count=1, blob_sigma=1.0)
CLEAN_SMALL = SceneSpec(grid=(4, 8, 8), blob_count=1, blob_sigma=1.0,
                        outlier_probability=0.0, noise_sigma=0.0)


class TestCostRatio:
    @pytest.mark.parametrize("ex,tk,tf,i,expect", [
        (10.0, 5.0, 1.0, 6, 1.0 + 6 / 15),
        (1.0, 0.0, 0.5, 4, 3.0),
        (2.0, 2.0, 3.0, 0, 1.0),
        (3.0, 1.0, 0.0, 8, 1.0),
    ])
    def test_examples(self, ex, tk, tf, i, expect):
        assert cost_ratio(CostModel(ex, tk, tf, i)) == pytest.approx(expect, rel=1e-15)

    def test_linear_in_neighbors(self):
        r = [cost_ratio(CostModel(4.0, 1.0, 0.25, i)) for i in range(6)]
        np.testing.assert_allclose(np.diff(r), 0.05, rtol=1e-12)

    def test_zero_base_cost(self):
        with pytest.raises(ValueError):
            cost_ratio(CostModel(0.0, 0.0, 1.0, 2))

    @pytest.mark.parametrize("args", [(-1.0, 1.0, 1.0, 1), (1.0, 1.0, 1.0, -1)])
    def test_negative_inputs(self, args):
        with pytest.raises(ValueError):
            CostModel(*args)


class TestTrainSpec:
    def test_train_and_eval_seeds_disjoint(self):
        for s in range(3):
            spec = TrainSpec(seed=s)
            train_seeds = {spec.train_seed(n) for n in range(5000)}
            assert train_seeds.isdisjoint({spec.eval_seed(k) for k in range(100)})

    def test_seeds_differ_between_runs(self):
        a, b = TrainSpec(seed=0), TrainSpec(seed=1)
        assert {a.train_seed(n) for n in range(100)}.isdisjoint(
            {b.train_seed(n) for n in range(100)})

    @pytest.mark.parametrize("key,value", [("steps", 0), ("learning_rate", -1.0), ("batch", 0),
                                           ("sequence_length", 4)])
    def test_invalid(self, key, value):
        with pytest.raises(ConfigError) as err:
            TrainSpec(**{key: value})
        assert err.value.key == f"train.{key}"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.momentum"):
            TrainSpec.from_json({"momentum": 0.9})


class TestWindowBatch:
    def test_shapes_and_order(self):
        pair = generate_sequence(SMALL, 7)
        cur, mem, clean, times = window_batch(pair, 4, np.float64)
        assert cur.shape == (3, 4, 8, 8) and mem.shape == (3, 5, 4, 8, 8)
        np.testing.assert_array_equal(times, [2, 3, 4])
        np.testing.assert_array_equal(mem[0, 0], pair.observed[2].feature.data)
        np.testing.assert_array_equal(mem[0, 1], pair.observed[1].feature.data)
        np.testing.assert_array_equal(clean[1], pair.clean[3].feature.data)

    def test_without_self(self):
        cur, mem, _, _ = window_batch(generate_sequence(SMALL, 7), 2, np.float64, False)
        assert mem.shape[1] == 2


class TestTrain:
    def test_zero_learning_rate_keeps_params(self):
        cfg = BlenderConfig()
        spec = TrainSpec(steps=3, learning_rate=0.0, eval_sequences=0)
        out = train(spec, SMALL, cfg)
        for a, b in zip(out.params.arrays(), cfg.init_params(4).arrays()):
            np.testing.assert_array_equal(a, b.astype(a.dtype))
        assert len(out.losses) == 3

    def test_deterministic(self):
        spec = TrainSpec(steps=4, eval_every=2, eval_sequences=1)
        a = train(spec, SMALL, BlenderConfig())
        b = train(spec, SMALL, BlenderConfig())
        assert a.losses == b.losses and a.eval_curve == b.eval_curve
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            np.testing.assert_array_equal(x, y)
        assert [r[0] for r in a.loss_rows()] == [1, 2, 3, 4]
        assert [r[2] is not None for r in a.loss_rows()] == [False, True, False, True]

    def test_loss_trends_down_on_clean_scene(self):
        spec = TrainSpec(steps=100, eval_sequences=0)
        losses = np.array(train(spec, CLEAN_SMALL, BlenderConfig()).losses)
        smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert smooth[-1] < 0.5 * smooth[0]

    def test_divergence_names_step(self):
        spec = TrainSpec(steps=50, learning_rate=1e12, eval_sequences=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingDiverged) as err:
                train(spec, SMALL, BlenderConfig())
        assert 1 <= err.value.step <= 50
        assert f"step {err.value.step}" in str(err.value)


class TestEvaluate:
    def test_clean_scene_passthrough_is_zero(self):
        cfg = BlenderConfig()
        out = evaluate(cfg.init_params(4), cfg, CLEAN_SMALL, [0, 1])
        assert out["passthrough"] == 0.0

    def test_fully_gated_predicts_zero(self):
        cfg = BlenderConfig(delta=-1.0, precision="double")
        seeds = [3]
        out = evaluate(cfg.init_params(4), cfg, SMALL, seeds)
        pair = generate_sequence(SMALL.with_seed(3), 7)
        expect = np.mean([np.mean(pair.clean[t].feature.data ** 2) for t in (2, 3, 4)])
        assert out["tfblender"] == pytest.approx(expect, rel=1e-12)

    def test_zero_neighbors_reports_passthrough(self):
        cfg = BlenderConfig()
        out = evaluate(cfg.init_params(4), cfg, SMALL, [0], neighbors=0)
        assert len(set(out.values())) == 1
        assert out["passthrough"] == evaluate_passthrough(SMALL, [0])

    def test_uniform_matches_hand_average(self):
        cfg = BlenderConfig(precision="double")
        pair = generate_sequence(SMALL.with_seed(2), 5)
        out = evaluate(cfg.init_params(4), cfg, SMALL, [2], sequence_length=5, neighbors=2)
        errs = []
        for t in (1, 2, 3):
            avg = np.mean([pair.observed[k].feature.data for k in (t - 1, t, t + 1)], axis=0)
            errs.append(np.mean((avg - pair.clean[t].feature.data) ** 2))
        assert out["uniform"] == pytest.approx(np.mean(errs), rel=1e-12)

    def test_needs_seeds(self):
        cfg = BlenderConfig()
        with pytest.raises(ValueError):
            evaluate(cfg.init_params(4), cfg, SMALL, [])


class TestOracle:
    @pytest.mark.parametrize("variant", ["concat2", "diff", "sum", "concat2_plus_sum",
                                         "diff_plus_sum", "concat3", "concat4"])
    def test_variants(self, variant):
        assert oracle_check(BlenderConfig(variant=variant, delta=1.0)) < 1e-10
        assert oracle_check(BlenderConfig(variant=variant), seed=3) < 1e-10

    @pytest.mark.parametrize("name", list(ABLATIONS))
    def test_ablations(self, name):
        assert oracle_check(BlenderConfig(**ABLATIONS[name]), seed=1) < 1e-10

    def test_tiny_shapes_only(self):
        with pytest.raises(ValueError, match="tiny"):
            oracle_check(BlenderConfig(), channels=3)


def test_suppression_needs_outliers():
    cfg = BlenderConfig()
    with pytest.raises(ValueError):
        suppression_stats(cfg.init_params(4), cfg, CLEAN_SMALL, [0])


class TestTiming:
    def test_time_call_positive(self):
        assert time_call(lambda: sum(range(100)), repetitions=3, min_seconds=1e-3) > 0

    def test_time_pair_orders_costs(self):
        a, b = time_pair(lambda: sum(range(20000)), lambda: sum(range(200)),
                         repetitions=3, min_seconds=2e-3)
        assert a > b

    def test_time_interleaved_shape(self):
        calls = []
        t = time_interleaved([lambda: calls.append("a"), lambda: calls.append("b")],
                             repetitions=4, warmup=1, min_seconds=1e-4)
        assert t.shape == (4, 2) and np.all(t > 0)
        assert calls[:2] == ["a", "b"]

    def test_backbone_shape(self):
        bb = Backbone(4, widths=(4, 8, 8))
        assert bb.stride == 4
        out = bb(np.zeros((3, 32, 32), np.float32))
        assert out.shape == (4, 8, 8)


class TestTradeoff:
    def test_no_neighbors_ratio_is_one(self):
        res = tradeoff_sweep([0], BlenderConfig(), SceneSpec(grid=(4, 8, 8), blob_sigma=1.0),
                             eval_seeds=(1,), backbone_widths=(8, 16))
        (rec,) = res.records
        assert rec.predicted_r == 1.0
        assert rec.measured_r == pytest.approx(1.0, abs=0.10)
        assert rec.mse_tfblender == rec.mse_passthrough
        assert res.fits == {}
        assert len(rec.row()) == len(CSV_COLUMNS) == 9
        buf = io.StringIO()
        csv.writer(buf).writerows([CSV_COLUMNS, rec.row()])
        assert next(csv.reader(io.StringIO(buf.getvalue())))[0] == "config_digest"

    @pytest.mark.parametrize("counts", [[], [2, 0], [-1, 2]])
    def test_invalid_counts(self, counts):
        with pytest.raises(ValueError):
            tradeoff_sweep(counts, BlenderConfig(), SMALL)

    def test_digest_tracks_config(self):
        a = config_digest(BlenderConfig(), 1)
        assert a == config_digest(BlenderConfig(), 1)
        assert a != config_digest(BlenderConfig(delta=0.5), 1)
        assert len(a) == 12
