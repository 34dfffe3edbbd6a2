"""Control signals and the chroma adherence metric.

Pitch classes are indexed C=0 ... B=11 with A4 = 440 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractError

N_CLASSES = 12
NO_CHORD = -1
KINDS = ("chroma", "chroma_thresholded", "chord")
_CSV_KIND = {"chroma": "chroma", "chroma_thresholded": "thresh", "chord": "chord"}
_CSV_KIND_INV = {v: k for k, v in _CSV_KIND.items()}


@dataclass
class Chromagram:
    values: np.ndarray
    frame_rate_hz: float = 11.7

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_CLASSES:
            raise ContractError(f"chromagram must be 12×T, got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class ConditionMap:
    values: np.ndarray
    kind: str = "chroma"
    frame_rate_hz: float = 11.7

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in KINDS:
            raise ContractError(f"unknown condition kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] != N_CLASSES:
            raise ContractError(f"condition map must be 12×T, got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ChordEvent:
    start: int
    root: int
    tones: frozenset = field(default_factory=frozenset)


@dataclass
class ChordSequence:
    events: list[ChordEvent]

    def spans(self, frames: int) -> Iterable[tuple[ChordEvent, int, int]]:
        """Yield ``(event, start, stop)``; raises if ``[0, frames)`` is not covered."""
        if not self.events or self.events[0].start != 0:
            raise ContractError("chord events must start at frame 0")
        starts = [ev.start for ev in self.events]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ContractError("chord events must be sorted and non-overlapping")
        if starts[-1] >= frames:
            raise ContractError(f"chord event starts at {starts[-1]}, beyond {frames} frames")
        stops = starts[1:] + [frames]
        for ev, a, b in zip(self.events, starts, stops):
            yield ev, a, b

    def to_json(self) -> list:
        return [[ev.start, ev.root, sorted(ev.tones)] for ev in self.events]

    @classmethod
    def from_json(cls, data) -> "ChordSequence":
        return cls([ChordEvent(int(s), int(r), frozenset(int(t) for t in tones)) for s, r, tones in data])


def triad(root: int, minor: bool = False) -> ChordEvent:
    third = 3 if minor else 4
    return ChordEvent(0, root % 12, frozenset({root % 12, (root + third) % 12, (root + 7) % 12}))


# ---------------------------------------------------------------------------
# Chroma


def normalize_frames(values: np.ndarray) -> np.ndarray:
    """Scale each frame so its maximum is 1; all-zero frames stay zero."""
    peak = values.max(axis=0, keepdims=True)
    return np.divide(values, peak, out=np.zeros_like(values), where=peak > 0)


def pitch_class_of(freqs: np.ndarray) -> np.ndarray:
    midi = 12 * np.log2(freqs / 440.0) + 69
    return np.mod(np.rint(midi).astype(np.int64), 12)


def chromagram_from_audio(samples, sample_rate: float, frame_size: int = 4096, hop: int | None = None,
                          fmin: float = 27.5) -> Chromagram:
    """Pitch-class energy from a Hann-windowed magnitude STFT.

    Each FFT bin above ``fmin`` is assigned to its nearest pitch class;
    squared magnitudes are summed per class and every frame is normalized
    to a maximum of 1. Signals shorter than a frame are zero-padded.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ContractError("empty waveform")
    if sample_rate <= 0:
        raise ContractError("sample_rate must be positive")
    hop = hop or frame_size // 2
    if x.size < frame_size:
        x = np.pad(x, (0, frame_size - x.size))
    n_frames = 1 + (x.size - frame_size) // hop
    idx = np.arange(frame_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(frame_size)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2

    freqs = np.fft.rfftfreq(frame_size, 1.0 / sample_rate)
    use = freqs >= fmin
    classes = pitch_class_of(freqs[use])
    chroma = np.zeros((N_CLASSES, n_frames))
    for pc in range(N_CLASSES):
        chroma[pc] = power[:, use][:, classes == pc].sum(axis=1)
    # digital silence leaves round-off noise only
    chroma[:, chroma.max(axis=0) <= 1e-20] = 0.0
    return Chromagram(normalize_frames(chroma), sample_rate / hop)


def chroma_from_noteroll(roll, frame_rate_hz: float = 11.7) -> Chromagram:
    roll = np.asarray(roll, dtype=np.float64)
    if roll.ndim != 2 or roll.shape[0] != N_CLASSES:
        raise ContractError(f"note roll must be 12×T, got {roll.shape}")
    if roll.min(initial=0.0) < 0 or roll.max(initial=0.0) > 1:
        raise ContractError("note roll values must lie in [0, 1]")
    return Chromagram(normalize_frames(roll), frame_rate_hz)


def as_condition(ch: Chromagram) -> ConditionMap:
    return ConditionMap(ch.values.copy(), "chroma", ch.frame_rate_hz)


def threshold_chroma(ch: Chromagram | ConditionMap, theta: float = 0.9) -> ConditionMap:
    """Binary map: 1 where the chroma is ``>= theta``, else 0."""
    if not 0 < theta <= 1:
        raise ContractError(f"theta must lie in (0, 1], got {theta}")
    return ConditionMap((ch.values >= theta).astype(np.float64), "chroma_thresholded", ch.frame_rate_hz)


def encode_chords(seq: ChordSequence, frames: int, frame_rate_hz: float = 11.7) -> ConditionMap:
    """Per frame: root class 2, other chord tones 1, rest 0; no-chord frames are all 0."""
    out = np.zeros((N_CLASSES, frames))
    for ev, a, b in seq.spans(frames):
        if ev.root == NO_CHORD:
            continue
        col = np.zeros(N_CLASSES)
        col[sorted(ev.tones)] = 1.0
        col[ev.root] = 2.0
        out[:, a:b] = col[:, None]
    return ConditionMap(out, "chord", frame_rate_hz)


# ---------------------------------------------------------------------------
# Resampling


def window_average(values: np.ndarray, target_frames: int) -> np.ndarray:
    """Average over equal source spans, weighting partially covered frames by overlap."""
    if target_frames < 1:
        raise ContractError("target_frames must be >= 1")
    src = values.shape[-1]
    if src == target_frames:
        return values.copy()
    edges = np.arange(target_frames + 1) * (src / target_frames)
    weights = np.zeros((src, target_frames))
    for j in range(target_frames):
        lo, hi = edges[j], edges[j + 1]
        first, last = int(np.floor(lo)), min(int(np.ceil(hi)), src)
        for i in range(first, last):
            weights[i, j] = min(hi, i + 1) - max(lo, i)
    weights /= weights.sum(axis=0, keepdims=True)
    return values @ weights


def resample_condition(cmap: ConditionMap | Chromagram, target_frames: int):
    """Pool to ``target_frames`` and restore the kind's value constraint."""
    if cmap.values.shape[1] == target_frames:
        return type(cmap)(**{**cmap.__dict__, "values": cmap.values.copy()})
    pooled = window_average(cmap.values, target_frames)
    rate = cmap.frame_rate_hz * target_frames / cmap.values.shape[1]
    if isinstance(cmap, Chromagram):
        return Chromagram(normalize_frames(pooled), rate)
    if cmap.kind == "chroma":
        pooled = normalize_frames(pooled)
    elif cmap.kind == "chord":
        pooled = np.clip(np.rint(pooled), 0, 2)
    else:
        pooled = np.clip(np.rint(pooled), 0, 1)
    return ConditionMap(pooled, cmap.kind, rate)


# ---------------------------------------------------------------------------
# Metric


def cmse(c_in, c_out) -> float:
    """Mean squared difference over all 12×T chroma entries."""
    a = getattr(c_in, "values", c_in)
    b = getattr(c_out, "values", c_out)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"chromagram shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# CSV files


def write_condition_csv(path, cmap: ConditionMap) -> None:
    lines = [f"# kind={_CSV_KIND[cmap.kind]} rate={cmap.frame_rate_hz:g}"]
    for frame in cmap.values.T:
        lines.append(",".join(repr(float(v)) for v in frame))
    Path(path).write_text("\n".join(lines) + "\n")


def read_condition_csv(path, kind: str = "chroma", frame_rate_hz: float = 11.7) -> ConditionMap:
    rows: list[list[float]] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, val = token.partition("=")
                if key == "kind":
                    if val not in _CSV_KIND_INV:
                        raise ContractError(f"unknown condition kind {val!r} in {path}")
                    kind = _CSV_KIND_INV[val]
                elif key == "rate":
                    frame_rate_hz = float(val)
            continue
        row = [float(v) for v in line.split(",")]
        if len(row) != N_CLASSES:
            raise ContractError(f"expected 12 values per row, got {len(row)}")
        rows.append(row)
    values = np.array(rows, dtype=np.float64).T if rows else np.zeros((N_CLASSES, 0))
    return ConditionMap(values, kind, frame_rate_hz)


def condition_map(kind: str, roll: np.ndarray, chords: ChordSequence | None = None,
                  theta: float = 0.9) -> ConditionMap:
    """Build the requested condition from a sample's note roll / chord truth."""
    if kind == "chroma":
        return as_condition(chroma_from_noteroll(roll))
    if kind in ("thresh", "chroma_thresholded"):
        return threshold_chroma(chroma_from_noteroll(roll), theta)
    if kind == "chord":
        if chords is None:
            raise ContractError("chord conditioning needs chord truth")
        return encode_chords(chords, roll.shape[1])
    raise ContractError(f"unknown condition kind {kind!r}")


def stack_maps(maps: Sequence[ConditionMap]) -> np.ndarray:
    return np.stack([m.values for m in maps])
