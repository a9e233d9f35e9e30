import math
from dataclasses import replace

import numpy as np
import pytest
import torch

import oracles
from protodoctor.archive import load_model, read_tensors, save_model, write_tensors
from protodoctor.config import TrainConfig, load_config, parse_config
from protodoctor.errors import ConfigError, ContractError, NumericError, SchemaError
from protodoctor.model import ProtoDoctor
from protodoctor.schema import synthetic_schema
from protodoctor.training import (LOG_COLUMNS, batch_objective, cross_entropy, diversity_loss, gradient_check,
                                  l1_penalty, sparsity_loss, sparsity_template, train)


class TestCrossEntropy:
    def test_half_probability(self):
        assert float(cross_entropy([0.5], [1])) == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_correct(self):
        assert float(cross_entropy([1.0], [1])) == pytest.approx(0.0, abs=1e-12)

    def test_clamped_at_zero_probability(self):
        assert float(cross_entropy([0.0], [1])) == pytest.approx(-math.log(1e-12))

    def test_matches_oracle(self, rng):
        p, y = rng.uniform(0.01, 0.99, size=3), rng.integers(0, 2, size=3)
        assert abs(float(cross_entropy(p, y)) - oracles.cross_entropy(p, y)) < 1e-12

    def test_bad_label(self):
        with pytest.raises(ContractError):
            cross_entropy([0.5], [2])


class TestDiversity:
    def test_far_apart_is_zero(self):
        assert float(diversity_loss([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]], 3.0)) == 0.0

    def test_identical_pair(self):
        assert float(diversity_loss([[1.0, 1.0], [1.0, 1.0]], 3.0)) == 9.0

    def test_matches_oracle(self, rng):
        P = rng.normal(size=(4, 3))
        assert abs(float(diversity_loss(P, 3.0)) - oracles.diversity(P.tolist(), 3.0)) < 1e-12

    def test_identical_pair_has_finite_gradient(self):
        P = torch.ones(2, 3, dtype=torch.float64, requires_grad=True)
        diversity_loss(P, 3.0).backward()
        assert bool(torch.isfinite(P.grad).all())

    def test_needs_two(self):
        with pytest.raises(ContractError):
            diversity_loss([[1.0]], 3.0)


class TestSparsity:
    def test_template_ten(self):
        assert sparsity_template(10, 0.1).tolist() == [0.0] * 9 + [1.0]

    def test_template_fifty(self):
        r = sparsity_template(50, 0.1)
        assert int((r == 0).sum()) == 45 and int((r == 1).sum()) == 5

    def test_template_padding(self):
        # floor(0.75 * 3) + floor(0.25 * 3) = 2 < 3, so one leading zero is padded
        assert sparsity_template(3, 0.25).tolist() == [0.0, 0.0, 0.0]
        assert sparsity_template(7, 0.3).tolist() == [0.0] * 5 + [1.0, 1.0]

    def test_template_match_is_zero(self):
        r = sparsity_template(10, 0.1)
        assert float(sparsity_loss(r[torch.randperm(10)], 0.1)) == 0.0

    def test_all_ones(self):
        assert float(sparsity_loss(torch.ones(1, 10, dtype=torch.float64), 0.1)) == 9.0

    def test_matches_oracle(self, rng):
        S = rng.uniform(size=(5, 7))
        assert abs(float(sparsity_loss(S, 0.3)) - oracles.sparsity(S.tolist(), 0.3)) < 1e-12


class TestCompositeObjective:
    def test_breakdown_matches_term_oracles(self, tiny_model, small_batches):
        _, tr, _, _ = small_batches
        with torch.no_grad():
            tiny_model.interaction.normal_(0, 0.1, generator=torch.Generator().manual_seed(0))
        obj = batch_objective(tiny_model, tr)
        cfg = tiny_model.config
        with torch.no_grad():
            out = tiny_model.run(tr)
        ref = {
            "ce": oracles.cross_entropy(out.y_hat.tolist(), tr.labels.tolist()),
            "div_cohort": oracles.diversity(tiny_model.cohort_prototypes.detach().tolist(), cfg.d_min_cohort),
            "div_course": oracles.diversity(tiny_model.course_prototypes.detach().tolist(), cfg.d_min_course),
            "sparsity": oracles.sparsity(out.s_course.tolist(), cfg.alpha),
            "prog": float(np.mean([oracles.prognostication(p, o) for p, o in
                                   zip(out.predicted_states.tolist(), out.health_states.tolist())])),
            "l1": oracles.l1(tiny_model.interaction.detach().tolist()),
        }
        for k, v in ref.items():
            assert abs(obj.raw[k] - v) < 1e-10, k
        assert abs(sum(obj.weighted.values()) - obj.total.item()) < 1e-10

    def test_zero_lambdas_gives_ce(self, tiny_model, small_batches):
        _, tr, _, _ = small_batches
        cfg = replace(tiny_model.config, lambda_div_cohort=0.0, lambda_div_course=0.0, lambda_sparsity=0.0,
                      lambda_prog=0.0, lambda_interaction=0.0)
        obj = batch_objective(tiny_model, tr, cfg)
        assert obj.total.item() == obj.raw["ce"]

    def test_zero_interaction_zero_l1(self, tiny_model):
        assert l1_penalty(tiny_model.interaction).item() == 0.0

    def test_par_off_drops_prognostication(self, tiny_model, small_batches):
        _, tr, _, _ = small_batches
        obj = batch_objective(tiny_model, tr, replace(tiny_model.config, enable_par=False))
        assert obj.raw["prog"] == 0.0 and obj.weighted["prog"] == 0.0

    def test_non_finite_term_named(self, tiny_model, small_batches):
        _, tr, _, _ = small_batches
        with torch.no_grad():
            tiny_model.interaction[0, 0] = float("inf")
        with pytest.raises(NumericError):
            batch_objective(tiny_model, tr)


class TestTraining:
    def test_train_ce_decreases(self, small_batches):
        _, tr, va, _ = small_batches
        res = train(tr, va, TrainConfig.tiny(max_epochs=15, patience=15, learning_rate=1e-2))
        first = next(r for r in res.log if r["split"] == "train" and r["epoch"] == 0)
        last = [r for r in res.log if r["split"] == "train"][-1]
        assert last["CE"] < first["CE"]

    def test_patience_one_constant_validation(self, small_batches):
        _, tr, va, _ = small_batches
        res = train(tr, va, TrainConfig.tiny(max_epochs=10, patience=1, learning_rate=1e-300))
        assert res.epochs_run == 2 and res.best_epoch == 1

    def test_log_columns(self, small_batches):
        _, tr, va, _ = small_batches
        res = train(tr, va, TrainConfig.tiny(max_epochs=2))
        header = res.log_csv().splitlines()[0]
        assert header == ",".join(LOG_COLUMNS)
        assert {r["split"] for r in res.log} == {"train", "validation"}

    def test_returns_best_snapshot(self, small_batches):
        _, tr, va, _ = small_batches
        res = train(tr, va, TrainConfig.tiny(max_epochs=6, learning_rate=5e-2))
        from protodoctor.training import evaluate_objective
        assert float(evaluate_objective(res.model, va).total) == pytest.approx(res.best_validation, abs=1e-12)
        assert res.model.trained

    def test_bit_reproducible(self, small_batches):
        _, tr, va, _ = small_batches
        a = train(tr, va, TrainConfig.tiny(max_epochs=3, seed=4))
        b = train(tr, va, TrainConfig.tiny(max_epochs=3, seed=4))
        assert a.log_csv() == b.log_csv()
        for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_dci_off_keeps_interaction_zero(self, small_batches):
        _, tr, va, _ = small_batches
        res = train(tr, va, TrainConfig.tiny(max_epochs=2, enable_dci=False))
        assert float(res.model.interaction.abs().sum()) == 0.0

    def test_dci_nesting_initial_objective(self, small_batches):
        _, tr, va, _ = small_batches
        on = train(tr, va, TrainConfig.tiny(max_epochs=1))
        off = train(tr, va, TrainConfig.tiny(max_epochs=1, enable_dci=False))
        assert on.log[0] == off.log[0]

    def test_divergence_keeps_snapshot(self, small_batches):
        _, tr, va, _ = small_batches
        res = train(tr, va, TrainConfig.tiny(max_epochs=5, learning_rate=1e300))
        assert res.diverged
        assert np.all(np.isfinite(res.model.predict_proba(va)))

    def test_empty_partition_rejected(self, small_batches):
        _, tr, va, _ = small_batches
        with pytest.raises(ContractError):
            train(tr, va.subset([]), TrainConfig.tiny())


class TestGradientCheck:
    @pytest.mark.parametrize("group,tol", [("linear", 1e-6), ("prototypes", 1e-4), ("recurrent", 1e-3)])
    def test_groups_within_tolerance(self, tiny_model, small_batches, group, tol):
        _, tr, _, _ = small_batches
        res = gradient_check(tiny_model, tr.subset(range(8)), group)
        assert res.max_rel_error < tol
        assert 0 < len(res.checked) <= 50

    def test_explicit_names(self, tiny_model, small_batches):
        _, tr, _, _ = small_batches
        res = gradient_check(tiny_model, tr.subset(range(4)), ["w_course"])
        assert {c[0] for c in res.checked} == {"w_course"}

    def test_empty_group(self, small_batches):
        _, tr, _, _ = small_batches
        m = ProtoDoctor(TrainConfig.tiny(enable_dci=False), tr.physiology.shape[-1], tr.demographics.shape[-1])
        with pytest.raises(ContractError):
            gradient_check(m, tr.subset(range(4)), ["interaction"])


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.n_courses, c.n_cohorts, c.phi, c.tau) == (50, 20, 5.0, 1e-6)
        assert (c.lambda_div_cohort, c.lambda_div_course, c.lambda_sparsity, c.lambda_prog,
                c.lambda_interaction) == (1e-3, 1e-3, 5e-1, 5e-2, 1e-3)
        assert (c.learning_rate, c.batch_size, c.max_epochs, c.patience) == (1e-3, 32, 100, 10)

    @pytest.mark.parametrize("kw", [{"alpha": 1.0}, {"patience": 0}, {"lambda_prog": -1.0},
                                    {"encoder_mode": "gru"}, {"n_courses": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_text_round_trip(self):
        c = TrainConfig.tiny(enable_par=False, seed=9)
        assert parse_config(c.to_text()) == c
        assert parse_config(c.to_text()).config_hash() == c.config_hash()

    def test_overrides_take_precedence(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[protodoctor]\nn_courses = 7\nseed = 1\n")
        c = load_config(path, {"seed": "3"})
        assert (c.n_courses, c.seed) == (7, 3)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config("[protodoctor]\nbogus = 1\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            parse_config("[protodoctor]\nenable_dci = maybe\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse_config("[other]\nx = 1\n")


class TestArchive:
    def test_round_trip(self, tmp_path, tiny_model, small_batches):
        stats, tr, _, _ = small_batches
        tiny_model.trained = True
        save_model(tmp_path / "m.pdm", tiny_model, synthetic_schema(), stats, {"note": "x"})
        b = load_model(tmp_path / "m.pdm")
        assert b.config == tiny_model.config and b.model.trained
        assert b.stats.to_dict() == stats.to_dict() and b.metadata == {"note": "x"}
        np.testing.assert_array_equal(b.model.predict_proba(tr), tiny_model.predict_proba(tr))

    def test_identical_models_identical_bytes(self, tmp_path, tiny_model, small_batches):
        stats = small_batches[0]
        save_model(tmp_path / "a.pdm", tiny_model, synthetic_schema(), stats)
        save_model(tmp_path / "b.pdm", tiny_model, synthetic_schema(), stats)
        assert (tmp_path / "a.pdm").read_bytes() == (tmp_path / "b.pdm").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nonsense" * 4)
        with pytest.raises(SchemaError):
            read_tensors(tmp_path / "x")

    def test_tensor_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        write_tensors(tmp_path / "t", {"b": arr, "a": np.array(1.5)})
        tensors, header = read_tensors(tmp_path / "t")
        assert [e["name"] for e in header["tensors"]] == ["a", "b"]
        np.testing.assert_array_equal(tensors["b"], arr)
        assert tensors["a"].shape == () and tensors["a"].item() == 1.5

    def test_schema_tamper_detected(self, tmp_path, tiny_model, small_batches):
        save_model(tmp_path / "m.pdm", tiny_model, synthetic_schema(), small_batches[0])
        raw = (tmp_path / "m.pdm").read_bytes().replace(b"syn_00", b"syn_99", 1)
        (tmp_path / "m.pdm").write_bytes(raw)
        with pytest.raises(SchemaError):
            load_model(tmp_path / "m.pdm")
