"""Shared fixtures: generated scenes are expensive, so they are session-scoped."""

import sys

import pytest

from spl.synth import SynthObject, SynthSceneSpec, standard_benchmark_spec, synth_scene


def gt_by_frame(frames, gt_list):
    return {fb.frame_id: recs for fb, recs in zip(frames, gt_list)}


def small_scene_spec(seed=1, n_frames=8):
    """A fast three-object scene (one track per class), all inside the FOV."""
    objects = [
        SynthObject(0, (4.4, 1.8, 1.5), (10.0, -3.0), velocity=(3.0, 0.0),
                    track_id=0),
        SynthObject(1, (0.6, 0.6, 1.7), (8.0, 2.0), velocity=(1.2, 0.0),
                    track_id=1),
        SynthObject(2, (1.8, 0.6, 1.7), (14.0, 4.5), velocity=(2.5, -0.5),
                    track_id=2),
    ]
    return SynthSceneSpec(n_frames=n_frames, objects=objects, seed=seed)


@pytest.fixture(scope="session")
def small_scene():
    frames, gt_list = synth_scene(small_scene_spec())
    return frames, gt_by_frame(frames, gt_list)


@pytest.fixture(scope="session")
def benchmark_scene():
    frames, gt_list = synth_scene(standard_benchmark_spec(seed=0))
    return frames, gt_by_frame(frames, gt_list)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criterion lines, which capture would otherwise
    swallow on passing runs."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
