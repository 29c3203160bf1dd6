import numpy as np
import pytest

from flowavoid.errors import ContractViolation
from flowavoid.policy import ArchConfig, init_params
from flowavoid.rollout import RolloutConfig, rollout
from flowavoid.scene import Scene
from flowavoid.trajlog import COLUMNS, TrajectoryLog, from_trace, read_trajectory, write_trajectory


def _log(rng, n=6):
    return TrajectoryLog(
        np.arange(n) / 15.0,
        rng.normal(size=(n, 3)),
        rng.normal(size=(n, 3)),
        rng.normal(size=(n, 3)),
        rng.normal(size=(n, 3)),
        rng.uniform(-3, 3, n),
        ["running"] * (n - 1) + ["reached"],
    )


def test_round_trip_is_exact(tmp_path, rng):
    log = _log(rng)
    write_trajectory(log, tmp_path / "t.txt")
    back = read_trajectory(tmp_path / "t.txt")
    for name in ("t", "p", "v", "a", "cmd", "yaw"):
        assert np.array_equal(getattr(back, name), getattr(log, name))
    assert back.status == log.status
    assert back.poses().shape == (6, 4)


def test_header_and_field_checks(tmp_path, rng):
    path = tmp_path / "t.txt"
    write_trajectory(_log(rng), path)
    assert path.read_text().splitlines()[0] == "# " + " ".join(COLUMNS)
    path.write_text("t x\n1 2\n")
    with pytest.raises(ContractViolation):
        read_trajectory(path)
    path.write_text("# " + " ".join(COLUMNS) + "\n1 2 3\n")
    with pytest.raises(ContractViolation):
        read_trajectory(path)


def test_from_trace_rows():
    arch = ArchConfig(encoder=[8], hidden=4, head=[4])
    tr = rollout(init_params(arch, 0), [Scene(())], [[-18.0, 0, 1.5]], [[18.0, 0, 1.5]], [3.0], 5, RolloutConfig(), "eval")
    log = from_trace(tr)
    assert len(log) == 6
    assert np.array_equal(log.p[0], [-18.0, 0, 1.5])
    assert log.status[-1] == tr.status[0]
