import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unimoe import tensor as tn
from unimoe.affinity import GateParams, softmax_affinity
from unimoe.allocation import expert_choice_allocate_split
from unimoe.harness.bench import BENCH_COLUMNS, BenchConfig, bench_route, write_bench_csv
from unimoe.harness.cli import main
from unimoe.harness.config import DataSpec, ExperimentConfig
from unimoe.harness.data import generate_synthetic_task
from unimoe.harness.golden import compare_golden, golden_outputs, golden_instance
from unimoe.harness.train import (
    _DATA,
    _INIT,
    ablate_softmax_combine,
    build_model,
    forward,
    load_checkpoint,
    train,
)
from unimoe.layer import ALL_ROUTERS, RouterKind, moe_forward, moe_layer_step
from unimoe.serialize import load_arrays

SMALL = {"model": {"dim": 8, "hidden": 16, "experts": 4}, "data": {"classes": 4, "images": 32, "tokens_per_image": 8}}


def small_config(router="softmax_token_choice", steps=5, **extra):
    d = json.loads(json.dumps(SMALL))
    d.update(router={"kind": router}, optim={"steps": steps, "batch_size": 4}, **extra)
    return ExperimentConfig.from_dict(d)


class TestConfig:
    @given(
        st.sampled_from([k.value for k in RouterKind]),
        st.integers(1, 3),
        st.floats(0.25, 4),
        st.floats(0, 5),
        st.integers(0, 2**31),
        st.one_of(st.none(), st.floats(0, 2)),
    )
    def test_round_trip(self, kind, k, factor, spread, seed, noise):
        cfg = ExperimentConfig(
            router={"kind": kind, "k": k, "capacity_factor": factor},
            data={"spread": spread},
            seed=seed,
            noise_std=noise,
        )
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = small_config("soft_moe", gate_skew=2.0)
        cfg.save(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize(
        "bad",
        [
            {"nonsense": 1},
            {"router": {"kind": "nope"}},
            {"router": {"k": 0}},
            {"model": {"experts": 1}, "data": {"classes": 8}},
            {"optim": {"momentum": 1.0}},
            {"data": {"spread": -1}},
            {"noise_std": -0.1},
        ],
    )
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(bad)

    def test_default_noise_scale(self):
        assert ExperimentConfig(model={"experts": 8}, data={"classes": 8}).effective_noise_std == 1 / 8


class TestSyntheticTask:
    def test_zero_spread_is_centroids(self):
        data = generate_synthetic_task(DataSpec(classes=3, tokens_per_image=4, spread=0.0, images=9, dim=5), tn.Rng(0))
        np.testing.assert_array_equal(data.tokens, np.broadcast_to(data.centroids[data.labels][:, None], data.tokens.shape))

    def test_deterministic(self):
        spec = DataSpec(images=20)
        a, b = generate_synthetic_task(spec, tn.Rng(4)), generate_synthetic_task(spec, tn.Rng(4))
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_balanced_labels(self):
        data = generate_synthetic_task(DataSpec(classes=4, images=40), tn.Rng(0))
        assert np.bincount(data.labels).tolist() == [10] * 4

    def test_linear_probe_separates(self):
        # least squares on mean-pooled tokens with a bias column
        data = generate_synthetic_task(DataSpec(classes=2, spread=0.1, dim=4, images=64), tn.Rng(0))
        pooled = np.c_[data.tokens.mean(axis=1), np.ones(len(data))]
        target = np.where(data.labels == 1, 1.0, -1.0)
        w, *_ = np.linalg.lstsq(pooled, target, rcond=None)
        assert np.all(np.sign(pooled @ w) == target)

    def test_chance_at_huge_spread(self):
        data = generate_synthetic_task(DataSpec(classes=2, spread=1e6, dim=4, images=2000), tn.Rng(0))
        pooled = data.tokens.mean(axis=1)
        # the nearest-centroid rule does no better than chance
        dists = ((pooled[:, None, :] - data.centroids[None]) ** 2).sum(-1)
        assert abs(np.mean(dists.argmin(1) == data.labels) - 0.5) < 0.05


class TestTraining:
    def test_zero_lr_freezes_parameters(self):
        d = json.loads(json.dumps(SMALL))
        d.update(router={"kind": "softmax_expert_choice"}, optim={"steps": 4, "batch_size": 32, "lr": 0.0}, noise_std=0.0)
        cfg = ExperimentConfig.from_dict(d)
        before = build_model(cfg, tn.Rng(cfg.seed).child(_INIT)).parameters()
        result = train(cfg)
        after = result.model.parameters()
        for name in before:
            np.testing.assert_array_equal(before[name].value, after[name].value)
        losses = [r["loss"] for r in result.log]
        np.testing.assert_allclose(losses, losses[0], rtol=1e-12)

    def test_deterministic_log(self):
        strip = lambda log: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in log]
        a, b = train(small_config("softmax_token_choice", 6)), train(small_config("softmax_token_choice", 6))
        assert strip(a.log) == strip(b.log)

    @pytest.mark.parametrize("kind", ALL_ROUTERS)
    def test_smoke_every_router(self, kind):
        result = train(small_config(kind.value, 3))
        assert [r["step"] for r in result.log] == [0, 1, 2]
        for r in result.log:
            assert np.isfinite(r["loss"])
            assert len(r["per_expert_occupancy"]) == 4 and 0 <= r["dropped_token_fraction"] <= 1
        assert result.report["nan_events"] == 0

    def test_aux_loss_only_for_softmax_token_choice(self):
        assert train(small_config("softmax_token_choice", 2)).log[0]["aux_loss"] > 0
        assert train(small_config("softmax_expert_choice", 2)).log[0]["aux_loss"] == 0

    def test_run_directory(self, tmp_path):
        cfg = small_config("sparse_expert_choice", 3)
        result = train(cfg, tmp_path / "run")
        for name in ("config.json", "log.jsonl", "report.json", "checkpoint.bin", "checkpoint.bin.json"):
            assert (tmp_path / "run" / name).exists()
        lines = (tmp_path / "run" / "log.jsonl").read_text().splitlines()
        assert [json.loads(x)["step"] for x in lines] == [0, 1, 2]
        assert ExperimentConfig.load(tmp_path / "run" / "config.json") == cfg
        model, cfg2 = load_checkpoint(tmp_path / "run" / "checkpoint.bin")
        assert cfg2 == cfg
        for name, p in result.model.parameters().items():
            np.testing.assert_array_equal(model.parameters()[name].value, p.value)

    def test_divergence_writes_record_and_cli_exit_code(self, tmp_path):
        code = main(["train", "--router", "soft_moe", "--steps", "10", "--lr", "1e8", "--output-dir", str(tmp_path)])
        assert code == 2
        last = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[-1])
        assert last["event"] == "nan"

    def test_soft_moe_routes_per_image(self):
        cfg = small_config("soft_moe")
        data = generate_synthetic_task(cfg.data, tn.Rng(0).child(_DATA))
        model = build_model(cfg, tn.Rng(0).child(_INIT))
        out = forward(model, cfg, data.tokens[:3], data.labels[:3], None, training=False)
        assert len(out.reports) == 3 and all(r.num_tokens == 8 for r in out.reports)


class TestAblation:
    def test_rejects_non_sinkhorn(self):
        with pytest.raises(ValueError):
            ablate_softmax_combine(small_config("softmax_expert_choice"))

    def test_arms(self, tmp_path):
        results = ablate_softmax_combine(small_config("sinkhorn_token_choice", 3), tmp_path)
        assert set(results) == {"with_softmax_combine", "without_softmax_combine"}
        assert len(results["with_softmax_combine"].log) == len(results["without_softmax_combine"].log)
        assert (tmp_path / "without_softmax_combine" / "log.jsonl").exists()

    @pytest.mark.parametrize("kind", ["sinkhorn_token_choice", "sinkhorn_expert_choice"])
    def test_flag_changes_only_combine_on_first_batch(self, kind):
        cfg_with = small_config(kind)
        cfg_without = cfg_with.with_router(softmax_combine=False)
        data = generate_synthetic_task(cfg_with.data, tn.Rng(0).child(_DATA))
        outs = []
        for cfg in (cfg_with, cfg_without):
            model = build_model(cfg, tn.Rng(0).child(_INIT))
            outs.append(forward(model, cfg, data.tokens[:4], data.labels[:4], None))
        a, b = (o.routings[0].tensors for o in outs)
        np.testing.assert_array_equal(a.D, b.D)
        assert not np.array_equal(a.Cmb, b.Cmb)

    def test_with_arm_gradient_flows_only_through_combine(self):
        cfg = small_config("sinkhorn_expert_choice")
        data = generate_synthetic_task(cfg.data, tn.Rng(0).child(_DATA))
        model = build_model(cfg, tn.Rng(0).child(_INIT))
        X = data.tokens[:4].reshape(-1, 8) @ model.embed_w.value + model.embed_b.value
        R = np.random.default_rng(0).normal(size=X.shape)
        W = model.gates[0].W
        out = moe_layer_step(X, model.banks[0], model.gates[0], cfg.router, None)
        g = tn.backward(tn.sum(out.Y * R))[W]
        plan = tn.constant(out.routing.dispatch_affinity.array.copy())
        W2 = tn.parameter(W.value.copy())
        comb = softmax_affinity(X, GateParams(W2))
        rt = expert_choice_allocate_split(plan, comb, out.routing.tensors.capacity)
        g_const = tn.backward(tn.sum(moe_forward(X, model.banks[0], rt) * R))[W2]
        assert np.any(g != 0)
        np.testing.assert_array_equal(g, g_const)


class TestBench:
    def test_grid_shape_and_determinism(self, tmp_path):
        cfg = BenchConfig(tokens=(32, 64), experts=4, dim=8)
        rows = bench_route(cfg, trials=3)
        assert len(rows) == 6 * 2 * 2
        again = bench_route(cfg, trials=3)
        for a, b in zip(rows, again):
            assert {k: v for k, v in a.items() if not k.endswith("_s")} == {k: v for k, v in b.items() if not k.endswith("_s")}
        text = write_bench_csv(rows, tmp_path / "b.csv")
        header, *body = text.strip().split("\n")
        assert header.split(",") == list(BENCH_COLUMNS) and len(body) == 24

    def test_trials_minimum(self):
        with pytest.raises(ValueError):
            bench_route(BenchConfig(tokens=(8,), experts=2), trials=2)

    def test_expert_choice_never_underused(self):
        rows = bench_route(BenchConfig(tokens=(64,), experts=4, dim=8), trials=3)
        for row in rows:
            if "expert_choice" in row["router"]:
                assert row["underused_slots"] == 0


class TestGolden:
    def test_fixtures_match(self):
        errors = compare_golden("tests/golden")
        assert set(errors) == {k.value for k in ALL_ROUTERS}
        assert max(errors.values()) <= 1e-10

    def test_loop_and_layer_agree(self):
        inst = golden_instance()
        for kind in ALL_ROUTERS:
            a = golden_outputs(kind, inst)
            b = golden_outputs(kind, inst, use_layer=True)
            assert np.max(np.abs(a["Y"] - b["Y"])) < 1e-12


class TestCli:
    def test_route_json(self, capsys):
        assert main(["route", "--router", "sinkhorn_expert_choice", "--tokens", "16", "--experts", "4"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["underused_slots"] == 0 and report["mode"] == "expert_choice"

    def test_route_save(self, tmp_path, capsys):
        assert main(["route", "--router", "soft_moe", "--tokens", "8", "--experts", "2", "--save", str(tmp_path / "r.bin")]) == 0
        arrays, meta = load_arrays(tmp_path / "r.bin")
        assert arrays["dispatch"].shape == (8, 2, 4) and meta["mode"] == "soft"

    def test_train_flags_and_config(self, tmp_path, capsys):
        small_config("soft_moe", 2).save(tmp_path / "c.json")
        code = main(["train", "--config", str(tmp_path / "c.json"), "--steps", "3", "--set", "optim.lr=0.01",
                     "--output-dir", str(tmp_path / "run")])
        assert code == 0
        saved = ExperimentConfig.load(tmp_path / "run" / "config.json")
        assert saved.optim.steps == 3 and saved.optim.lr == 0.01 and saved.model.dim == 8

    def test_validation_exit_code(self, capsys):
        assert main(["train", "--classes", "100"]) == 1
        assert main(["ablate", "--router", "soft_moe", "--steps", "1"]) == 1
        assert main(["train", "--set", "nonsense"]) == 1

    def test_grad_check(self, capsys):
        assert main(["grad-check"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"]

    def test_bench(self, tmp_path, capsys):
        assert main(["bench", "--tokens", "16", "--experts", "2", "--dim", "4", "--trials", "3", "--out", str(tmp_path / "b.csv")]) == 0
        assert len((tmp_path / "b.csv").read_text().strip().split("\n")) == 1 + 12

    def test_golden_round_trip(self, tmp_path, capsys):
        assert main(["golden", "--dir", str(tmp_path)]) == 0
        assert main(["golden", "--dir", str(tmp_path), "--check"]) == 0
