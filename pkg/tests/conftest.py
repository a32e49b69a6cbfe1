import math
import time
from pathlib import Path

import numpy as np
import pytest

from cos3d.curation.records import CanonicalLine, InstanceRecord
from cos3d.geometry import Box3D, CameraIntrinsics, Rotation, project_box, quantize2d

DATA = Path(__file__).parent / "data"

# acceptance verdict lines, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []
SESSION_START = time.monotonic()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
    elapsed = time.monotonic() - SESSION_START
    terminalreporter.write_line(f"full suite wall time: {elapsed:.1f} s (limit 600 s)")


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def fixture_path() -> Path:
    return DATA / "synthetic_fixture.jsonl"


@pytest.fixture
def golden_path() -> Path:
    return DATA / "golden_canonical.jsonl"


@pytest.fixture
def cam1000() -> CameraIntrinsics:
    return CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0, 1000, 1000)


@pytest.fixture
def kitti_cam() -> CameraIntrinsics:
    return CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)


def unit_cube(x=0.0, y=0.0, z=0.0, yaw=0.0) -> Box3D:
    return Box3D([x, y, z], [1.0, 1.0, 1.0], Rotation.from_yaw(yaw))


def cube_pair_with_iou(v: float, z: float = 10.0) -> tuple[Box3D, Box3D]:
    """Two axis-aligned unit cubes whose IoU is ``v`` (x offset (1-v)/(1+v))."""
    s = (1.0 - v) / (1.0 + v)
    return unit_cube(0.0, 0.0, z), unit_cube(s, 0.0, z)


def random_rotation(rng: np.random.Generator) -> Rotation:
    axis = rng.normal(size=3)
    return Rotation.from_axis_angle(axis, float(rng.uniform(-math.pi, math.pi)))


def make_record(cam: CameraIntrinsics, center, dims=(1.8, 1.5, 4.2), yaw=0.0, category="car",
                order=0, rot: Rotation | None = None) -> InstanceRecord:
    box = Box3D(center, dims, rot or Rotation.from_yaw(yaw))
    px = project_box(box, cam).clipped
    return InstanceRecord(category, box, px, quantize2d(px, cam), float(box.center[2]),
                          1.0, 0.0, False, ("test", str(order)), order)


def make_line(cam: CameraIntrinsics, centers, category="car", image="img.png") -> CanonicalLine:
    recs = [make_record(cam, c, category=category, order=i) for i, c in enumerate(centers)]
    recs.sort(key=lambda r: (r.depth, r.order))
    return CanonicalLine(image, category, cam, recs, "test")


PIPELINE_OUTPUTS = ("canonical.jsonl", "negatives.jsonl", "conversations.jsonl", "packs.jsonl")


def run_pipeline(workdir: Path, source: Path, seed: int = 0) -> dict[str, Path]:
    """normalize -> negatives -> package -> pack through the CLI entry point."""
    from cos3d.cli import main

    workdir.mkdir(parents=True, exist_ok=True)
    out = {name: workdir / name for name in PIPELINE_OUTPUTS}
    steps = [
        ["normalize", "--input", str(source), "--output", str(out["canonical.jsonl"])],
        ["negatives", "--input", str(out["canonical.jsonl"]), "--output", str(out["negatives.jsonl"])],
        ["package", "--input", str(out["canonical.jsonl"]), "--negatives", str(out["negatives.jsonl"]),
         "--grounding", "both", "--output", str(out["conversations.jsonl"])],
        ["pack", "--input", str(out["conversations.jsonl"]), "--output", str(out["packs.jsonl"])],
    ]
    for argv in steps:
        status = main(argv + ["--seed", str(seed)])
        assert status == 0, f"{argv[0]} exited {status}"
    return out
