"""Per-step trajectory logs as whitespace-separated text.

One header line names the columns; each following row is
``t px py pz vx vy vz ax ay az cx cy cz yaw status``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import RUNNING
from .errors import ContractViolation

COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az", "cx", "cy", "cz", "yaw", "status")


@dataclass
class TrajectoryLog:
    t: np.ndarray  # (N,)
    p: np.ndarray  # (N, 3)
    v: np.ndarray
    a: np.ndarray
    cmd: np.ndarray
    yaw: np.ndarray
    status: list

    def __len__(self):
        return len(self.t)

    def poses(self) -> np.ndarray:
        """``(N, 4)`` rows of ``x, y, z, yaw``."""
        return np.column_stack([self.p, self.yaw])


def from_trace(trace, env: int = 0) -> TrajectoryLog:
    """Extract one environment's rows (initial state plus every executed step)."""
    n = int(trace.end_step[env])
    rows = slice(0, n + 1)
    status = [RUNNING] * n + [trace.status[env]]
    return TrajectoryLog(
        t=np.arange(n + 1) * trace.dt,
        p=trace.positions[rows, env],
        v=trace.velocities[rows, env],
        a=trace.accels[rows, env],
        cmd=trace.commands[rows, env],
        yaw=trace.yaws[rows, env],
        status=status,
    )


def write_trajectory(log: TrajectoryLog, path) -> None:
    with open(path, "w") as fh:
        fh.write("# " + " ".join(COLUMNS) + "\n")
        for i in range(len(log)):
            nums = [log.t[i], *log.p[i], *log.v[i], *log.a[i], *log.cmd[i], log.yaw[i]]
            fh.write(" ".join(repr(float(x)) for x in nums) + f" {log.status[i]}\n")


def read_trajectory(path) -> TrajectoryLog:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].lstrip("# ").split() != list(COLUMNS):
        raise ContractViolation("trajectory log header missing or unexpected")
    nums, status = [], []
    for k, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != len(COLUMNS):
            raise ContractViolation(f"line {k}: expected {len(COLUMNS)} fields, got {len(parts)}")
        nums.append([float(x) for x in parts[:-1]])
        status.append(parts[-1])
    a = np.array(nums, dtype=float).reshape(-1, len(COLUMNS) - 1)
    return TrajectoryLog(a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7:10], a[:, 10:13], a[:, 13], status)
