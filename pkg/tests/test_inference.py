import numpy as np
import pytest
import torch

from co2surro.compression import Autoencoder, CompressionSpec
from co2surro.data import apply_scaler, fit_scaler, invert_scaler
from co2surro.inference import (
    PredictedSeries,
    RolloutRequest,
    gsi_predict,
    predict_window_then_handoff,
    rom_predict,
)
from co2surro.metrics import pcc
from co2surro.predictors import PredictorSpec, build_predictor
from conftest import make_series

TOY = PredictorSpec(variant="unet", depth=2, base_width=4)


def make_request(n_steps=3, pipeline="gsi", size=16, seed=0, **kwargs):
    series = make_series(n_snapshots=8, height=size, width=size, seed=seed)
    scaler = fit_scaler([series])
    window = series.to_array()[:3]
    model = kwargs.pop("predictor", build_predictor(TOY, seed=seed))
    return RolloutRequest(
        initial_window=window,
        n_steps=n_steps,
        pipeline=pipeline,
        predictor=model,
        scaler=scaler,
        **kwargs,
    ), series


class TestGSI:
    def test_single_step_equals_definition(self):
        request, _ = make_request(n_steps=1)
        out = gsi_predict(request)
        scaled = apply_scaler(request.initial_window, request.scaler)
        stacked = torch.from_numpy(scaled.reshape(1, 12, 16, 16).astype(np.float32))
        with torch.no_grad():
            expected = invert_scaler(request.predictor(stacked).numpy()[0][None], request.scaler)[0]
        assert np.allclose(out.snapshots[0], expected, atol=1e-6)

    def test_prediction_count_alignment(self):
        request, series = make_request(n_steps=5)
        out = gsi_predict(request)
        assert out.snapshots.shape == (5, 4, 16, 16)
        assert len(out) == 5

    def test_window_slides_with_own_predictions(self):
        windows = []

        class Recorder(torch.nn.Module):
            def forward(self, x):
                windows.append(x.detach().clone())
                return x[:, -4:] + 1.0

        request, _ = make_request(n_steps=4, predictor=Recorder())
        gsi_predict(request)
        first = windows[0]
        second = windows[1]
        assert torch.equal(second[:, :8], first[:, 4:])
        assert torch.equal(second[:, 8:], first[:, -4:] + 1.0)
        fourth = windows[3]  # after 3 predictions the window is all self-fed
        assert torch.equal(fourth[:, 8:], windows[2][:, -4:] + 1.0)

    def test_deterministic(self):
        r1, _ = make_request(n_steps=4)
        r2, _ = make_request(n_steps=4)
        assert np.array_equal(gsi_predict(r1).snapshots, gsi_predict(r2).snapshots)

    def test_nonfinite_prediction_aborts_with_step(self):
        class Explode(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.calls = 0

            def forward(self, x):
                self.calls += 1
                out = x[:, -4:].clone()
                if self.calls == 3:
                    out[0, 0, 0, 0] = float("nan")
                return out

        request, _ = make_request(n_steps=5, predictor=Explode())
        with pytest.raises(FloatingPointError, match="step 3"):
            gsi_predict(request)

    def test_clip_option(self):
        class Overshoot(torch.nn.Module):
            def forward(self, x):
                return torch.full_like(x[:, :4], 1.2)

        request, _ = make_request(n_steps=1, predictor=Overshoot())
        raw = gsi_predict(request)
        request_clipped, _ = make_request(n_steps=1, predictor=Overshoot())
        request_clipped.clip_scaled = True
        clipped = gsi_predict(request_clipped)
        assert raw.snapshots.max() > clipped.snapshots.max()

    def test_bad_requests_rejected(self):
        request, _ = make_request(n_steps=0)
        with pytest.raises(ValueError, match="n_steps"):
            gsi_predict(request)
        request, _ = make_request(pipeline="rom")
        with pytest.raises(ValueError, match="compression"):
            request.validate()


class TestROM:
    def make_rom(self, n_steps=3, latent_channels=4):
        comp = Autoencoder(CompressionSpec(widths=(8, 16, 16, 8), latent_channels=latent_channels,
                                           adversarial=False))
        request, series = make_request(n_steps=n_steps, pipeline="rom", size=32, compression=comp)
        return request, series, comp

    def test_latent_marching_never_reencodes(self):
        request, _, comp = self.make_rom(n_steps=4)
        encode_calls = []
        original = comp.encode

        def counting_encode(x):
            encode_calls.append(x.shape)
            return original(x)

        comp.encode = counting_encode
        out = rom_predict(request)
        assert len(encode_calls) == 1  # the three initial snapshots, encoded once
        assert encode_calls[0][0] == 3
        assert out.snapshots.shape == (4, 4, 32, 32)

    def test_latent_shape_factor_four(self):
        request, _, _ = self.make_rom(n_steps=2)
        out = rom_predict(request)
        assert tuple(out.provenance["latent_shape"]) == (8, 8)

    def test_zero_steps_rejected(self):
        request, _, _ = self.make_rom(n_steps=2)
        request.n_steps = 0
        with pytest.raises(ValueError, match="n_steps"):
            rom_predict(request)

    def test_latent_channel_mismatch_fails_early(self):
        request, _, _ = self.make_rom(n_steps=2, latent_channels=2)
        with pytest.raises(ValueError, match="latent channel"):
            rom_predict(request)

    def test_contract_matches_gsi(self):
        request, _, _ = self.make_rom(n_steps=2)
        out = rom_predict(request)
        assert isinstance(out, PredictedSeries)
        assert out.provenance["pipeline"] == "rom"


class TestHandoff:
    def test_perfect_model_never_stops(self):
        series = make_series(n_snapshots=8, height=16, width=16, seed=1)
        scaler = fit_scaler([series])
        truth = series.to_array()[3:8]
        truth_scaled = apply_scaler(truth, scaler)

        class Oracle(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.step = 0

            def forward(self, x):
                out = torch.from_numpy(truth_scaled[self.step][None].astype(np.float32))
                self.step += 1
                return out

        request = RolloutRequest(series.to_array()[:3], 5, "gsi", Oracle(), scaler)
        out, stop = predict_window_then_handoff(request, truth, threshold=0.75)
        assert stop == 5
        assert len(out) == 5

    def test_constant_output_stops_at_step_one(self):
        class Flat(torch.nn.Module):
            def forward(self, x):
                return torch.full_like(x[:, :4], 0.5)

        request, series = make_request(n_steps=5, predictor=Flat())
        truth = series.to_array()[3:8]
        out, stop = predict_window_then_handoff(request, truth, threshold=0.75)
        assert stop == 1
        assert len(out) == 1

    def test_stop_matches_offline_pcc_curve(self):
        series = make_series(n_snapshots=10, height=16, width=16, seed=2)
        scaler = fit_scaler([series])
        truth = series.to_array()[3:10]
        truth_scaled = apply_scaler(truth, scaler)
        rng = np.random.default_rng(0)

        class Degrading(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.step = 0

            def forward(self, x):
                noise = 0.25 * self.step * rng.standard_normal(truth_scaled[self.step].shape)
                out = torch.from_numpy((truth_scaled[self.step] + noise)[None].astype(np.float32))
                self.step += 1
                return out

        request = RolloutRequest(series.to_array()[:3], 7, "gsi", Degrading(), scaler)
        out, stop = predict_window_then_handoff(request, truth, threshold=0.75)

        pred_scaled = apply_scaler(out.snapshots, scaler)
        offline_stop = request.n_steps
        for step in range(len(out)):
            values = [pcc(pred_scaled[step, f], truth_scaled[step, f]) for f in range(4)]
            if any(np.isnan(v) or v < 0.75 for v in values):
                offline_stop = step + 1
                break
        assert 1 < stop < 7
        assert stop == offline_stop

    def test_truth_shorter_than_horizon_errors(self):
        request, series = make_request(n_steps=5)
        with pytest.raises(ValueError, match="shorter"):
            predict_window_then_handoff(request, series.to_array()[3:5])
