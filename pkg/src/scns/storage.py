"""Binary snapshots, trajectory CSV index and record directories."""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .diagnostics import energy
from .dynamics import State, TrajectoryRecord
from .model import ModelParams, NoiseModel
from .spectral import TorusGrid, sobolev12_sq

MAGIC = b"SCNS1"
_HEADER = struct.Struct("<4I")
_TIMES = struct.Struct("<2d")
_PARAMS = struct.Struct("<9d")

CSV_COLUMNS = ("t", "mass", "energy", "kinetic", "sobolev12_sq", "min_rho", "seed")


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_snapshot(state: State, params: ModelParams, K: int) -> bytes:
    g = state.grid
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_HEADER.pack(g.d, g.n, g.N, K))
    buf.write(_TIMES.pack(state.t, g.L))
    buf.write(_PARAMS.pack(*params.as_tuple()))
    buf.write(np.ascontiguousarray(state.rho_samples, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(state.u_samples, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_snapshot(data: bytes, level: str = "zero"):
    """Inverse of ``encode_snapshot``: returns ``(state, params, K)``."""
    if data[:5] != MAGIC:
        raise ValueError("not an SCNS1 snapshot")
    off = 5
    d, n, N, K = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    t, L = _TIMES.unpack_from(data, off)
    off += _TIMES.size
    vals = _PARAMS.unpack_from(data, off)
    off += _PARAMS.size
    grid = TorusGrid(d, n, N, L)
    size = n**d
    expected = off + 8 * size * (1 + d)
    if len(data) != expected:
        raise ValueError(f"corrupt snapshot: {len(data)} bytes, expected {expected}")
    rho = np.frombuffer(data, "<f8", size, off).reshape(grid.shape).astype(float)
    off += 8 * size
    u = np.frombuffer(data, "<f8", size * d, off).reshape((d,) + grid.shape).astype(float)
    names = ("a", "gamma", "mu", "eta", "M0", "eps", "delta", "Gamma", "R")
    params = ModelParams(**dict(zip(names, vals)), level=level)
    return State.from_fields(rho, u, t=t, grid=grid), params, K


def write_snapshot(path, state: State, params: ModelParams, K: int) -> None:
    atomic_write(path, encode_snapshot(state, params, K))


def read_snapshot(path, level: str = "zero"):
    return decode_snapshot(Path(path).read_bytes(), level)


def trajectory_csv(record: TrajectoryRecord) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for t, s in zip(record.times, record.states):
        rep = energy(s, record.params)
        row = (
            float(t), s.mass, rep.total, rep.kinetic,
            sobolev12_sq(s.u), float(s.rho_samples.min()),
        )
        buf.write(",".join(repr(float(v)) for v in row) + f",{record.seed}\n")
    return buf.getvalue()


def save_record(record: TrajectoryRecord, out: Path, snapshot_every: int = 1) -> list:
    """Write snapshots, increments and the CSV index; returns the file inventory."""
    out = Path(out)
    snap_dir = out / "snapshots"
    files = []
    for i in range(0, len(record.states), snapshot_every):
        p = snap_dir / f"snap_{i:06d}.scns"
        write_snapshot(p, record.states[i], record.params, record.noise.K)
        files.append(p)
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(record.increments, dtype="<f8"))
    atomic_write(out / "increments.npy", buf.getvalue())
    atomic_write(out / "trajectory.csv", trajectory_csv(record))
    files += [out / "increments.npy", out / "trajectory.csv"]
    return [str(p.relative_to(out)) for p in files]


def load_record(
    out: Path,
    noise: NoiseModel,
    dt: float,
    stride: int,
    snapshot_every: int,
    seed: int,
    level: str = "zero",
    params: ModelParams | None = None,
    symmetric: bool = False,
) -> TrajectoryRecord:
    out = Path(out)
    paths = sorted((out / "snapshots").glob("snap_*.scns"))
    if not paths:
        raise FileNotFoundError(f"no snapshots in {out}")
    states = []
    for p in paths:
        s, prm, K = read_snapshot(p, level)
        if K != noise.K:
            raise ValueError(f"snapshot {p.name} has K={K}, expected {noise.K}")
        states.append(s)
    inc_path = out / "increments.npy"
    if not inc_path.exists():
        raise FileNotFoundError(f"missing {inc_path}")
    incs = np.load(inc_path)
    return TrajectoryRecord(
        grid=states[0].grid,
        params=params or prm,
        noise=noise,
        dt=dt,
        stride=stride * snapshot_every,
        states=states,
        increments=incs,
        seed=seed,
        symmetric=symmetric,
    )


def report_csv(rows, header=("term", "value")) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n")
    return buf.getvalue()
