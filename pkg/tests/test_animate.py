"""Tests for animating a source portrait along a keypoint track."""

import hashlib
from pathlib import Path

import pytest

from mobile_portrait.config import with_overrides
from mobile_portrait.models import FrameJob, RunManifest
from mobile_portrait.pipeline import engine as engine_module
from mobile_portrait.pipeline.animate import MANIFEST_NAME, animate, frame_name, precompute_job_bank
from mobile_portrait.pipeline.engine import init_weights
from mobile_portrait.synthesis import FeatureBank
from mobile_portrait.validation import DimensionError, InputFormatError, MissingWeightError, NumericalError


def with_output(job: FrameJob, out_dir: Path, **updates) -> FrameJob:
    return job.model_copy(update={"output_dir": out_dir, **updates})


def frame_bytes(paths: list[Path]) -> list[bytes]:
    return [p.read_bytes() for p in paths]


class TestAnimate:
    """Tests for the frame loop and its manifest."""

    def test_renders_every_frame(self, demo_job, settings):
        result = animate(demo_job, settings)
        assert [p.name for p in result.frames] == [frame_name(i) for i in range(10)]
        assert all(p.read_bytes().startswith(b"P6\n64 64\n255\n") for p in result.frames)

    def test_manifest(self, demo_job, settings):
        """Test that the manifest records settings and the hash of every file."""
        result = animate(demo_job, settings)
        manifest = RunManifest.model_validate_json(result.manifest_path.read_text())
        assert result.manifest_path.name == MANIFEST_NAME
        assert (manifest.preset, manifest.resolution, manifest.seed, manifest.bank_views) == ("toy", 64, 0, 0)
        assert manifest.frames == 10
        assert manifest.weights_sha256 is None
        for output, path in zip(manifest.outputs, result.frames, strict=True):
            assert output.path == path.name
            assert output.sha256 == hashlib.sha256(path.read_bytes()).hexdigest()
        assert manifest.inputs["track"] == hashlib.sha256(demo_job.track.read_bytes()).hexdigest()
        assert set(manifest.inputs) == {"source_image", "source_keypoints", "track", "background", "fg_mask"}

    def test_deterministic(self, demo_job, settings, tmp_path):
        first = animate(with_output(demo_job, tmp_path / "a"), settings)
        second = animate(with_output(demo_job, tmp_path / "b"), settings)
        assert frame_bytes(first.frames) == frame_bytes(second.frames)

    def test_pipelined_matches_sequential(self, demo_job, settings, tmp_path):
        sequential = animate(with_output(demo_job, tmp_path / "seq"), settings)
        pipelined = animate(with_output(demo_job, tmp_path / "par"), with_overrides(settings, threads=2))
        assert frame_bytes(sequential.frames) == frame_bytes(pipelined.frames)

    def test_precomputed_bank_file(self, demo_job, settings, tmp_path):
        """Test that a bank saved ahead of time renders the same frames as one built in-run."""
        banked = with_overrides(settings, bank_views=2)
        in_run = animate(with_output(demo_job, tmp_path / "in_run"), banked)
        bank_path = tmp_path / "bank.mpw"
        bank = precompute_job_bank(demo_job, bank_path, banked)
        assert bank.count == 2
        assert FeatureBank.load(bank_path).count == 2
        from_file = animate(with_output(demo_job, tmp_path / "from_file", bank=bank_path), settings)
        assert from_file.manifest.bank_views == 2
        assert "bank" in from_file.manifest.inputs
        assert frame_bytes(in_run.frames) == frame_bytes(from_file.frames)

    def test_bank_changes_frames(self, demo_job, settings, tmp_path):
        plain = animate(with_output(demo_job, tmp_path / "plain"), settings)
        banked = animate(with_output(demo_job, tmp_path / "banked"), with_overrides(settings, bank_views=4))
        assert frame_bytes(plain.frames) != frame_bytes(banked.frames)

    def test_empty_track(self, demo_job, settings):
        demo_job.track.write_text("")
        result = animate(demo_job, settings)
        assert result.frames == []
        assert result.manifest.frames == 0

    def test_frame_names_follow_track_indices(self, demo_job, settings):
        lines = demo_job.track.read_text().splitlines()
        demo_job.track.write_text("\n".join(lines[:3]).replace('"frame": 2', '"frame": 7') + "\n")
        result = animate(demo_job, settings)
        assert [p.name for p in result.frames] == [frame_name(0), frame_name(1), frame_name(7)]

    def test_weight_file(self, demo_job, settings, tmp_path, toy_preset):
        path = init_weights(toy_preset, seed=5, training_heads=False).save(tmp_path / "w.mpw")
        result = animate(demo_job, with_overrides(settings, weights_path=path))
        assert result.manifest.weights_sha256 == hashlib.sha256(path.read_bytes()).hexdigest()

    def test_incompatible_weight_file(self, demo_job, settings, tmp_path, toy_weights):
        del toy_weights.entries["dmn.stem.weight"]
        path = toy_weights.save(tmp_path / "w.mpw")
        with pytest.raises(MissingWeightError):
            animate(demo_job, with_overrides(settings, weights_path=path))

    def test_resolution_must_fit_preset(self, demo_job, settings):
        with pytest.raises(DimensionError):
            animate(demo_job, with_overrides(settings, resolution=60))

    def test_frame_errors_are_tagged(self, demo_job, settings, monkeypatch):
        """Test that a failure inside the frame loop names the failing frame."""
        calls = []
        real_render = engine_module.PortraitEngine.render

        def failing_render(self, state, warped):
            calls.append(1)
            if len(calls) == 3:
                raise NumericalError("synthesis produced NaN")
            return real_render(self, state, warped)

        monkeypatch.setattr(engine_module.PortraitEngine, "render", failing_render)
        with pytest.raises(NumericalError, match="^frame 2: synthesis produced NaN"):
            animate(demo_job, settings)


class TestFrameJob:
    """Tests for job validation."""

    def test_missing_input(self, demo_job):
        data = demo_job.model_dump()
        data["background"] = demo_job.background.with_name("absent.ppm")
        with pytest.raises(InputFormatError, match="absent.ppm"):
            FrameJob.model_validate(data)

    def test_bank_required_without_precompute(self, demo_job):
        data = demo_job.model_dump()
        data["precompute_bank"] = False
        with pytest.raises(InputFormatError) as exc_info:
            FrameJob.model_validate(data)
        assert exc_info.value.exit_code == 2

    def test_precompute_needs_no_bank_file(self, demo_job):
        assert demo_job.bank is None
        assert demo_job.precompute_bank
