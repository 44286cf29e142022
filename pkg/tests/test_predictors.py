import numpy as np
import pytest
import torch

from co2surro.data import fit_scaler, sample_patches
from co2surro.predictors import (
    GSI_UNET_LAMBDA_SCHEDULE,
    GSI_UNETPP_LAMBDA_SCHEDULE,
    ROM_LAMBDA_SCHEDULE,
    LossConfig,
    PredictorSpec,
    RolloutConfig,
    TrainConfig,
    TrainingDivergedError,
    boundary_mse,
    boundary_weighted_loss,
    build_predictor,
    count_parameters,
    load_checkpoint,
    patch_full_consistency,
    ring_mask,
    rollout_loss,
    save_checkpoint,
    train_one_step,
    train_rollout,
)
from conftest import make_series

TOY = PredictorSpec(variant="unet", depth=2, base_width=4)


def toy_samples(horizon=1, n_snapshots=8, size=16, seed=0):
    series = make_series(n_snapshots=n_snapshots, height=size, width=size, seed=seed)
    params = fit_scaler([series])
    return sample_patches(series, params, size, horizon=horizon, divisor=2)


class TestArchitecture:
    @pytest.mark.parametrize("variant", ["unet", "unetpp"])
    def test_shape_preserved_on_64(self, variant):
        model = build_predictor(PredictorSpec(variant=variant, depth=2, base_width=4), seed=0)
        out = model(torch.randn(2, 12, 64, 64))
        assert out.shape == (2, 4, 64, 64)

    def test_full_depth_shapes_across_sizes(self):
        model = build_predictor(PredictorSpec(variant="unet"), seed=0)
        for size in (64, 96):
            assert model(torch.randn(1, 12, size, size)).shape == (1, 4, size, size)

    def test_indivisible_size_errors_naming_divisor(self):
        model = build_predictor(PredictorSpec(variant="unet"), seed=0)
        with pytest.raises(ValueError, match="16"):
            model(torch.randn(1, 12, 60, 60))

    def test_weight_set_independent_of_input_size(self):
        model = build_predictor(TOY, seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model(torch.randn(1, 12, 16, 16))
        model(torch.randn(1, 12, 64, 64))
        after = model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_parameter_count_targets(self):
        unet = count_parameters(PredictorSpec(variant="unet"))
        unetpp = count_parameters(PredictorSpec(variant="unetpp"))
        assert abs(unet - 7_700_000) / 7_700_000 < 0.15
        assert abs(unetpp - 9_000_000) / 9_000_000 < 0.15
        assert unetpp > unet

    @pytest.mark.parametrize("variant", ["unet", "unetpp"])
    def test_analytic_count_matches_module(self, variant):
        spec = PredictorSpec(variant=variant, depth=3, base_width=8)
        model = build_predictor(spec)
        assert count_parameters(spec) == sum(p.numel() for p in model.parameters())

    def test_halving_width_shrinks_count_quadratically(self):
        full = count_parameters(PredictorSpec(variant="unet", base_width=32))
        half = count_parameters(PredictorSpec(variant="unet", base_width=16))
        assert 3.3 < full / half < 4.3

    def test_invalid_variant_rejected(self):
        with pytest.raises(ValueError):
            PredictorSpec(variant="resnet")


class TestBoundaryLoss:
    def test_lambda_zero_equals_plain_mse(self):
        pred = torch.rand(2, 4, 16, 16)
        target = torch.rand(2, 4, 16, 16)
        assert boundary_weighted_loss(pred, target, 0.0).item() == pytest.approx(
            ((pred - target) ** 2).mean().item(), rel=1e-6
        )

    def test_perfect_prediction_is_zero(self):
        x = torch.rand(1, 4, 16, 16)
        for lam in (0.0, 0.5, 1.0):
            assert boundary_weighted_loss(x, x, lam).item() == 0.0

    def test_corner_pixel_toy_example(self):
        pred = torch.zeros(1, 1, 4, 4)
        target = torch.zeros(1, 1, 4, 4)
        target[0, 0, 0, 0] = 1.0
        loss = boundary_weighted_loss(pred, target, 1.0)
        assert loss.item() == pytest.approx(1 / 16 + 1 / 12, rel=1e-6)

    def test_affine_in_lambda(self):
        pred = torch.rand(2, 4, 12, 12)
        target = torch.rand(2, 4, 12, 12)
        ring = boundary_mse(pred, target).item()
        l0 = boundary_weighted_loss(pred, target, 0.0).item()
        for lam in (0.3, 0.7, 1.0):
            assert boundary_weighted_loss(pred, target, lam).item() == pytest.approx(
                l0 + lam * ring, rel=1e-6
            )

    def test_negative_lambda_rejected(self):
        x = torch.rand(1, 4, 8, 8)
        with pytest.raises(ValueError):
            boundary_weighted_loss(x, x, -0.1)

    def test_ring_mask_counts(self):
        assert ring_mask(4, 4).sum().item() == 12
        assert ring_mask(5, 7).sum().item() == 2 * 7 + 2 * 3


class TestSchedule:
    def test_paper_rom_schedule_steps(self):
        cfg = LossConfig(ROM_LAMBDA_SCHEDULE)
        assert cfg.lambda_at(0) == 0.0
        assert cfg.lambda_at(99) == 0.0
        assert cfg.lambda_at(100) == 0.5
        assert cfg.lambda_at(199) == 0.5
        assert cfg.lambda_at(200) == 1.0
        assert cfg.lambda_at(999) == 1.0

    def test_gsi_schedules(self):
        unet = LossConfig(GSI_UNET_LAMBDA_SCHEDULE)
        assert (unet.lambda_at(49), unet.lambda_at(50), unet.lambda_at(100)) == (0.0, 0.5, 1.0)
        unetpp = LossConfig(GSI_UNETPP_LAMBDA_SCHEDULE)
        assert (unetpp.lambda_at(14), unetpp.lambda_at(15), unetpp.lambda_at(65)) == (0.0, 0.5, 1.0)

    def test_empty_schedule_stays_zero(self):
        cfg = LossConfig(())
        assert all(cfg.lambda_at(e) == 0.0 for e in range(250))

    def test_invalid_schedules_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(((10, 0.5), (10, 1.0)))
        with pytest.raises(ValueError):
            LossConfig(((0, 0.5), (10, 0.2)))
        with pytest.raises(ValueError):
            LossConfig(((0, -0.5),))

    def test_training_lambda_trace_follows_schedule(self):
        samples = toy_samples()
        model = build_predictor(TOY, seed=0)
        loss_cfg = LossConfig(((0, 0.0), (2, 0.5), (4, 1.0)))
        history = train_one_step(model, samples[:4], samples[:2], loss_cfg,
                                 TrainConfig(epochs=6, batch_size=4, seed=0))
        assert history["lambda"] == [0.0, 0.0, 0.5, 0.5, 1.0, 1.0]


class TestGradients:
    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_boundary_loss_backprop_matches_finite_differences(self, lam):
        torch.manual_seed(0)
        model = build_predictor(TOY).double()
        x = torch.rand(2, 12, 8, 8, dtype=torch.float64)
        y = torch.rand(2, 4, 8, 8, dtype=torch.float64)

        def loss_fn():
            return boundary_weighted_loss(model(x), y, lam)

        assert max_grad_rel_error(model, loss_fn) < 1e-4

    def test_rollout_chain_backprop_matches_finite_differences(self):
        torch.manual_seed(1)
        model = build_predictor(TOY).double()
        x = torch.rand(1, 12, 8, 8, dtype=torch.float64)
        y = torch.rand(1, 2, 4, 8, 8, dtype=torch.float64)

        def loss_fn():
            return rollout_loss(model, x, y, 0.5)

        assert max_grad_rel_error(model, loss_fn) < 1e-4


def max_grad_rel_error(model, loss_fn, n_coords=8, h=1e-6):
    """Compare backprop gradients with central finite differences on a
    deterministic sample of weight coordinates."""
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    params = [p for p in model.parameters() if p.requires_grad]
    for _ in range(n_coords):
        p = params[rng.integers(len(params))]
        flat_idx = int(rng.integers(p.numel()))
        idx = np.unravel_index(flat_idx, p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        bp = p.grad[idx].item()
        denom = max(abs(fd), abs(bp), 1e-8)
        worst = max(worst, abs(fd - bp) / denom)
    return worst


class TestTraining:
    def test_one_step_requires_horizon_one(self):
        samples = toy_samples(horizon=2)
        model = build_predictor(TOY, seed=0)
        with pytest.raises(ValueError, match="horizon"):
            train_one_step(model, samples, samples, LossConfig(), TrainConfig(epochs=1))

    def test_loss_decreases_on_toy_problem(self):
        samples = toy_samples()
        model = build_predictor(TOY, seed=0)
        history = train_one_step(model, samples, samples[:2], LossConfig(),
                                 TrainConfig(epochs=10, batch_size=8, lr=1e-3, seed=0))
        assert history["train_loss"][-1] < history["train_loss"][0]
        assert len(history["val_loss"]) == 10

    def test_divergence_aborts_with_epoch(self):
        samples = toy_samples()
        model = build_predictor(TOY, seed=0)
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train_one_step(model, samples, samples[:2], LossConfig(),
                           TrainConfig(epochs=3, batch_size=8, lr=1e12, seed=0))


class TestRollout:
    def test_t1_identical_to_one_step(self):
        samples = toy_samples(horizon=1)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=0)
        model_a = build_predictor(TOY, seed=7)
        hist_a = train_one_step(model_a, samples, samples[:2], LossConfig(), cfg)
        model_b = build_predictor(TOY, seed=7)
        hist_b = train_rollout(model_b, samples, samples[:2], RolloutConfig(horizon=1),
                               LossConfig(), cfg)
        assert hist_a["train_loss"] == pytest.approx(hist_b["train_loss"], rel=1e-7)
        for ka, kb in zip(model_a.state_dict().values(), model_b.state_dict().values()):
            assert torch.allclose(ka, kb)

    def test_t8_runs_eight_forward_passes_per_batch(self):
        samples = toy_samples(horizon=8, n_snapshots=12)
        model = build_predictor(TOY, seed=0)
        calls = []
        train_rollout(model, samples[:2], samples[:2], RolloutConfig(horizon=8), LossConfig(),
                      TrainConfig(epochs=1, batch_size=2, seed=0), step_hook=calls.append)
        assert calls == list(range(8))

    def test_window_contains_only_predictions_after_three_steps(self):
        seen = []

        class Marker(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.calls = 0

            def forward(self, window):
                seen.append(window.detach().clone())
                self.calls += 1
                return torch.full_like(window[:, :4], 10.0 + self.calls - 1)

        model = Marker()
        window = torch.zeros(1, 12, 8, 8)
        targets = torch.zeros(1, 5, 4, 8, 8)
        rollout_loss(model, window, targets, 0.0)
        # at the 4th call the window holds predictions 1, 2 and 3 only
        assert torch.all(seen[3][:, 0:4] == 10.0)
        assert torch.all(seen[3][:, 4:8] == 11.0)
        assert torch.all(seen[3][:, 8:12] == 12.0)

    def test_perfect_model_gives_zero_loss(self):
        class Persist(torch.nn.Module):
            def forward(self, window):
                return window[:, -4:]

        window = torch.rand(1, 12, 8, 8)
        last = window[:, -4:]
        targets = last.unsqueeze(1).repeat(1, 4, 1, 1, 1)
        loss = rollout_loss(Persist(), window, targets, 1.0)
        assert loss.item() == 0.0

    def test_horizon_mismatch_errors(self):
        samples = toy_samples(horizon=2)
        model = build_predictor(TOY, seed=0)
        with pytest.raises(ValueError, match="horizon"):
            train_rollout(model, samples, samples, RolloutConfig(horizon=8), LossConfig(),
                          TrainConfig(epochs=1))

    def test_curriculum_initialisation_applied(self):
        samples = toy_samples(horizon=2, n_snapshots=10)
        donor = build_predictor(TOY, seed=3)
        init_state = {k: v.clone() for k, v in donor.state_dict().items()}
        model = build_predictor(TOY, seed=9)
        train_rollout(model, samples[:2], samples[:2], RolloutConfig(horizon=2, init_state=init_state),
                      LossConfig(), TrainConfig(epochs=0, batch_size=2))
        for k, v in model.state_dict().items():
            assert torch.equal(v, init_state[k])

    def test_invalid_horizon_rejected(self):
        with pytest.raises(ValueError):
            RolloutConfig(horizon=0)


class TestCheckpoints:
    def test_round_trip_preserves_weights_and_metadata(self, tmp_path):
        spec = PredictorSpec(variant="unetpp", depth=2, base_width=4)
        model = build_predictor(spec, seed=0)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, spec, train_config=TrainConfig(epochs=5), epoch=5)
        loaded, payload = load_checkpoint(path)
        assert payload["spec"]["variant"] == "unetpp"
        assert payload["width_schedule"] == [4, 8]
        assert payload["epoch"] == 5
        assert payload["train_config"]["epochs"] == 5
        assert "rng_state" in payload
        for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)

    def test_tampered_spec_hash_rejected(self, tmp_path):
        spec = PredictorSpec(variant="unet", depth=2, base_width=4)
        model = build_predictor(spec, seed=0)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, spec)
        payload = torch.load(path, weights_only=False)
        payload["spec"]["base_width"] = 8
        torch.save(payload, path)
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(path)


class TestPatchConsistency:
    def test_zero_background_embedding_is_consistent_at_toy_scale(self):
        model = build_predictor(PredictorSpec(variant="unet", depth=2, base_width=8), seed=0)
        patch = torch.rand(12, 32, 32)
        assert patch_full_consistency(model, patch, embed_size=64, central=8) < 1e-5

    def test_misaligned_offset_rejected(self):
        model = build_predictor(TOY, seed=0)
        with pytest.raises(ValueError, match="divisible"):
            patch_full_consistency(model, torch.rand(12, 16, 16), 64, offset=(3, 4), central=8)
