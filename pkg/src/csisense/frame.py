"""2D-CSI frame assembly, tensor conversion and binary serialization.

A frame stacks the per-link beam captures into a complex matrix with
L*N_r rows (link-major row blocks) and one column per beam.  The network
consumes the real-valued view with real/imaginary parts split into two
trailing channels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import ShapeMismatch

MAGIC = b"CSIF"
VERSION = 1

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class FrameMeta:
    n_links: int
    n_antennas: int
    n_beams: int
    scenario_id: str = ""
    seed: int = 0


@dataclass(frozen=True)
class CsiFrame:
    matrix: np.ndarray  # complex, (n_links * n_antennas, n_beams)
    meta: FrameMeta

    def __post_init__(self):
        rows = self.meta.n_links * self.meta.n_antennas
        if self.matrix.shape != (rows, self.meta.n_beams):
            raise ShapeMismatch(
                f"frame matrix {self.matrix.shape} != ({rows}, {self.meta.n_beams})"
            )
        if not np.all(np.isfinite(self.matrix.real) & np.isfinite(self.matrix.imag)):
            raise ShapeMismatch("frame contains non-finite entries")


def assemble_frame(
    vectors: Sequence[Sequence[np.ndarray]],
    scenario_id: str = "",
    seed: int = 0,
) -> CsiFrame:
    """Stack per-link per-beam CSI vectors into a frame.

    `vectors[l][i]` is the length-N_r capture of link l at beam i; column i
    of the result is the vertical concatenation over links.
    """
    if not vectors or not vectors[0]:
        raise ShapeMismatch("need at least one link and one beam")
    n_links = len(vectors)
    n_beams = len(vectors[0])
    n_antennas = len(np.asarray(vectors[0][0]).ravel())
    for l, link in enumerate(vectors):
        if len(link) != n_beams:
            raise ShapeMismatch(f"link {l} has {len(link)} beams, expected {n_beams}")
        for i, vec in enumerate(link):
            if np.asarray(vec).shape != (n_antennas,):
                raise ShapeMismatch(
                    f"link {l} beam {i} vector shape {np.asarray(vec).shape}, "
                    f"expected ({n_antennas},)"
                )
    matrix = np.empty((n_links * n_antennas, n_beams), dtype=complex)
    for i in range(n_beams):
        matrix[:, i] = np.concatenate([np.asarray(vectors[l][i]) for l in range(n_links)])
    meta = FrameMeta(n_links, n_antennas, n_beams, scenario_id, seed)
    return CsiFrame(matrix=matrix, meta=meta)


def to_tensor(frame: CsiFrame) -> np.ndarray:
    """Real-valued (rows, beams, 2) view; channel 0 real, channel 1 imaginary."""
    return np.stack([frame.matrix.real, frame.matrix.imag], axis=-1)


def from_tensor(tensor: np.ndarray, meta: FrameMeta | None = None) -> CsiFrame:
    """Inverse of to_tensor; exact complex round trip."""
    t = np.asarray(tensor, dtype=float)
    if t.ndim != 3 or t.shape[-1] != 2:
        raise ShapeMismatch(f"expected (rows, beams, 2) tensor, got {t.shape}")
    matrix = t[..., 0] + 1j * t[..., 1]
    if meta is None:
        meta = FrameMeta(n_links=1, n_antennas=t.shape[0], n_beams=t.shape[1])
    return CsiFrame(matrix=matrix, meta=meta)


@dataclass(frozen=True)
class NormStats:
    """Per-channel standardization constants, frozen from the training split."""

    mean: tuple[float, float]
    std: tuple[float, float]


def compute_stats(tensors: Sequence[np.ndarray]) -> NormStats:
    """Global per-channel mean/std over a collection of frame tensors."""
    stacked = np.stack([np.asarray(t, dtype=float) for t in tensors])
    mean = stacked.mean(axis=(0, 1, 2))
    std = stacked.std(axis=(0, 1, 2))
    return NormStats(mean=(float(mean[0]), float(mean[1])),
                     std=(float(std[0]), float(std[1])))


def normalize(tensor: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean) / std per channel, with a floor on std."""
    mean = np.asarray(stats.mean, dtype=float)
    std = np.maximum(np.asarray(stats.std, dtype=float), STD_FLOOR)
    return (np.asarray(tensor, dtype=float) - mean) / std


_HEADER = struct.Struct("<4sHHHH")


def write_frame(fp: IO[bytes], frame: CsiFrame) -> None:
    """Little-endian binary record: CSIF header then row-major (re, im) float64."""
    m = frame.meta
    fp.write(_HEADER.pack(MAGIC, VERSION, m.n_links, m.n_antennas, m.n_beams))
    interleaved = np.empty(frame.matrix.shape + (2,), dtype="<f8")
    interleaved[..., 0] = frame.matrix.real
    interleaved[..., 1] = frame.matrix.imag
    fp.write(interleaved.tobytes())


def read_frame(fp: IO[bytes]) -> CsiFrame | None:
    """Read one frame record; None at end of stream."""
    header = fp.read(_HEADER.size)
    if not header:
        return None
    if len(header) != _HEADER.size:
        raise ShapeMismatch("truncated frame header")
    magic, version, n_links, n_antennas, n_beams = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ShapeMismatch(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise ShapeMismatch(f"unsupported frame version {version}")
    rows = n_links * n_antennas
    payload = fp.read(rows * n_beams * 2 * 8)
    if len(payload) != rows * n_beams * 2 * 8:
        raise ShapeMismatch("truncated frame payload")
    flat = np.frombuffer(payload, dtype="<f8").reshape(rows, n_beams, 2)
    matrix = flat[..., 0] + 1j * flat[..., 1]
    return CsiFrame(matrix=matrix, meta=FrameMeta(n_links, n_antennas, n_beams))
