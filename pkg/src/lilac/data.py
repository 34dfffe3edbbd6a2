"""Synthetic multitrack data and an exactly invertible latent codec.

Every sample is one "song": a key, a diatonic chord progression, a target
stem rendered in one of a few playing patterns, and a context mixture of
other stems from the same song.

Style reaches the chroma through two channels. With probability
``pattern_coupling`` the style id picks the playing pattern. Each sample also
has a release style (equal to the style id with probability ``coupling``,
otherwise another style) that fixes how long released notes ring on under the
following ones. The latent style rows blend the two,
``(1 - style_blend) * onehot(style) + style_blend * onehot(release_style)``,
so the chroma carries style information the embedding alone cannot predict,
the way real chromagrams carry traces of timbre. Ringing tails survive
per-frame normalization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditions import N_CLASSES, ChordEvent, ChordSequence
from .numerics import ConfigError, ContractError, make_rng

# (semitone offset from the key, minor?) for diatonic triads of a major key
DIATONIC = [(0, False), (2, True), (4, True), (5, False), (7, False), (9, True)]
MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
PATTERNS = ("pad", "bass", "arp")
RELEASES = ("dry", "short", "long")
RELEASE_LEVEL = 0.5


@dataclass(frozen=True)
class DataConfig:
    n: int = 2000
    test_n: int = 200
    frames: int = 32
    num_styles: int = 3
    coupling: float = 0.5
    pattern_coupling: float = 0.8
    style_blend: float = 0.3
    texture_amplitude: float = 0.1
    passing_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_styles < 2:
            raise ConfigError("need at least 2 styles")
        if not 0 <= self.coupling <= 1 or not 0 <= self.pattern_coupling <= 1:
            raise ConfigError("coupling strengths must lie in [0, 1]")
        if not 0 <= self.style_blend < 0.5:
            raise ConfigError("style_blend must lie in [0, 0.5) so the style id stays the argmax")


@dataclass
class SyntheticSample:
    note_roll: np.ndarray
    style_id: int
    context_roll: np.ndarray
    chord_truth: ChordSequence
    pattern: str
    passing_tones: list[tuple[int, int]] = field(default_factory=list)
    texture_seed: tuple[int, ...] = (0,)
    release_style: int | None = None

    @property
    def release(self) -> int:
        return self.style_id if self.release_style is None else self.release_style


# ---------------------------------------------------------------------------
# Rendering


def _progression(rng: np.random.Generator, key: int, frames: int) -> ChordSequence:
    span = int(rng.choice([4, 8])) if frames >= 8 else frames
    events = []
    for i, start in enumerate(range(0, frames, span)):
        offset, minor = DIATONIC[0] if i == 0 else DIATONIC[int(rng.integers(len(DIATONIC)))]
        root = (key + offset) % 12
        third = 3 if minor else 4
        events.append(ChordEvent(start, root, frozenset({root, (root + third) % 12, (root + 7) % 12})))
    return ChordSequence(events)


def _ordered_tones(ev: ChordEvent) -> list[int]:
    # root, third, fifth
    return sorted(ev.tones, key=lambda pc: (pc - ev.root) % 12)


def render_stem(pattern: str, chords: ChordSequence, frames: int, key: int, rng: np.random.Generator,
                passing_prob: float = 0.1) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Piano-roll of one stem; every active frame peaks at exactly 1."""
    roll = np.zeros((N_CLASSES, frames))
    passing: list[tuple[int, int]] = []
    if pattern == "pad":
        for ev, a, b in chords.spans(frames):
            fade = np.linspace(0.8, 0.4, b - a)
            for pc in ev.tones:
                roll[pc, a:b] = fade
            roll[ev.root, a:b] = 1.0
    elif pattern == "bass":
        rhythm = (1, 1, 1, 0) if rng.random() < 0.5 else (1, 0, 1, 0)
        for ev, a, b in chords.spans(frames):
            for t in range(a, b):
                roll[ev.root, t] = rhythm[(t - a) % 4]
    elif pattern == "arp":
        rate = int(rng.choice([1, 2]))
        scale = [(key + s) % 12 for s in MAJOR_SCALE]
        for ev, a, b in chords.spans(frames):
            tones = _ordered_tones(ev)
            for step, t in enumerate(range(a, b, rate)):
                pc = tones[step % len(tones)]
                if rng.random() < passing_prob:
                    pc = scale[(scale.index(pc) + 1) % len(scale)] if pc in scale else pc
                    if pc not in ev.tones:
                        passing.extend((tt, pc) for tt in range(t, min(t + rate, b)))
                roll[pc, t:min(t + rate, b)] = 1.0
    else:
        raise ConfigError(f"unknown pattern {pattern!r}")
    return roll, passing


def style_pattern(style: int) -> str:
    return PATTERNS[style % len(PATTERNS)]


def release_tail(style: int, level: float = RELEASE_LEVEL) -> tuple[float, ...]:
    """Gains of the frames after a note ends: none, one frame, or a halving tail."""
    kind = RELEASES[style % len(RELEASES)]
    if kind == "dry" or level == 0:
        return ()
    if kind == "short":
        return (level,)
    return (level, level / 2, level / 4)


def apply_release(roll: np.ndarray, tail: Sequence[float]) -> np.ndarray:
    """Let every note ring on for ``len(tail)`` frames after it ends.

    A tail frame carries ``gain * last note value``; it stops early when the
    same pitch class sounds again and never lowers an existing value.
    """
    out = roll.copy()
    frames = roll.shape[1]
    for pc, t in zip(*np.nonzero((roll[:, :-1] > 0) & (roll[:, 1:] == 0))):
        for k, gain in enumerate(tail, start=1):
            if t + k >= frames or roll[pc, t + k] > 0:
                break
            out[pc, t + k] = max(out[pc, t + k], gain * roll[pc, t])
    return out


def make_sample(rng: np.random.Generator, frames: int, num_styles: int, coupling: float = 0.5,
                passing_prob: float = 0.1, texture_seed: tuple[int, ...] = (0,),
                pattern_coupling: float = 0.8) -> SyntheticSample:
    key = int(rng.integers(12))
    chords = _progression(rng, key, frames)
    style = int(rng.integers(num_styles))
    if rng.random() < pattern_coupling:
        pattern = style_pattern(style)
    else:
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    release = style
    if rng.random() >= coupling:
        release = (style + 1 + int(rng.integers(num_styles - 1))) % num_styles
    roll, passing = render_stem(pattern, chords, frames, key, rng, passing_prob)
    tail = release_tail(release)
    flagged = set(passing)
    for ev, a, b in chords.spans(frames):
        # tails stop at chord changes; tails of passing tones are flagged like the tone
        roll[:, a:b] = apply_release(roll[:, a:b], tail)
        for pc, t in zip(*np.nonzero(roll[:, a:b])):
            if int(pc) not in ev.tones and (a + int(t), int(pc)) not in flagged:
                passing.append((a + int(t), int(pc)))

    context = np.zeros_like(roll)
    for _ in range(int(rng.integers(1, 4))):
        other = PATTERNS[int(rng.integers(len(PATTERNS)))]
        stem, _ = render_stem(other, chords, frames, key, rng, passing_prob)
        context += stem
    np.clip(context, 0.0, 1.0, out=context)
    return SyntheticSample(roll, style, context, chords, pattern, passing, texture_seed, release)


def generate_dataset(n: int, frames: int, num_styles: int, seed: int, split: int = 0,
                     coupling: float = 0.5, passing_prob: float = 0.1,
                     pattern_coupling: float = 0.8) -> list[SyntheticSample]:
    """``n`` samples; sample ``i`` depends only on ``(seed, split, i)``."""
    if num_styles < 2:
        raise ConfigError("need at least 2 styles")
    return [
        make_sample(make_rng(seed, split, i), frames, num_styles, coupling, passing_prob,
                    texture_seed=(seed, split, i, 0x7E), pattern_coupling=pattern_coupling)
        for i in range(n)
    ]


def dataset_from_config(cfg: DataConfig, split: int = 0) -> list[SyntheticSample]:
    n = cfg.n if split == 0 else cfg.test_n
    return generate_dataset(n, cfg.frames, cfg.num_styles, cfg.seed, split, cfg.coupling, cfg.passing_prob,
                            cfg.pattern_coupling)


# ---------------------------------------------------------------------------
# Codec


class LatentCodec:
    """``z_t = Q f_t`` with ``f_t = [chroma; style blend; texture noise]``.

    The style rows hold ``(1 - style_blend) * onehot(style) + style_blend *
    onehot(release_style)``; with ``style_blend < 0.5`` their argmax is the style id.
    """

    def __init__(self, latent_channels: int, num_styles: int, seed: int = 0, texture_amplitude: float = 0.1,
                 style_blend: float = 0.3):
        if latent_channels < N_CLASSES + num_styles:
            raise ConfigError(
                f"{latent_channels} latent channels cannot hold 12 chroma + {num_styles} style rows"
            )
        self.channels = latent_channels
        self.num_styles = num_styles
        self.texture_amplitude = texture_amplitude
        if not 0 <= style_blend < 0.5:
            raise ConfigError("style_blend must lie in [0, 0.5)")
        self.style_blend = style_blend
        a = make_rng(seed, 0xC0DEC).standard_normal((latent_channels, latent_channels))
        q, r = np.linalg.qr(a)
        self.Q = q * np.sign(np.diag(r))[None, :]

    @property
    def style_rows(self) -> slice:
        return slice(N_CLASSES, N_CLASSES + self.num_styles)

    @property
    def texture_rows(self) -> slice:
        return slice(N_CLASSES + self.num_styles, self.channels)

    def style_vector(self, style: int, release: int | None = None) -> np.ndarray:
        release = style if release is None else release
        for s in (style, release):
            if not 0 <= s < self.num_styles:
                raise ContractError(f"style {s} out of range")
        v = np.zeros(self.num_styles)
        v[style] += 1.0 - self.style_blend
        v[release] += self.style_blend
        return v

    def features(self, roll: np.ndarray, style: int | None, texture: np.ndarray | None = None,
                 release: int | None = None) -> np.ndarray:
        frames = roll.shape[1]
        f = np.zeros((self.channels, frames))
        f[:N_CLASSES] = roll
        if style is not None:
            f[self.style_rows] = self.style_vector(style, release)[:, None]
        if texture is not None:
            f[self.texture_rows] = texture
        return f

    def texture(self, sample: SyntheticSample) -> np.ndarray:
        n_tex = self.channels - N_CLASSES - self.num_styles
        frames = sample.note_roll.shape[1]
        rng = make_rng(*sample.texture_seed)
        return self.texture_amplitude * rng.standard_normal((n_tex, frames))

    def encode(self, sample: SyntheticSample) -> np.ndarray:
        return self.Q @ self.features(sample.note_roll, sample.style_id, self.texture(sample), sample.release)

    def encode_context(self, roll: np.ndarray) -> np.ndarray:
        return self.Q @ self.features(roll, None)

    def decode_probe(self, z) -> tuple[np.ndarray, np.ndarray]:
        """``(chroma clipped to [0,1], style scores)`` from ``C×T`` or ``B×C×T`` latents."""
        z = np.asarray(z, dtype=np.float64)
        f = np.einsum("ji,...jt->...it", self.Q, z)
        chroma = np.clip(f[..., :N_CLASSES, :], 0.0, 1.0)
        return chroma, f[..., self.style_rows, :]


def encode_latent(sample: SyntheticSample, codec: LatentCodec) -> np.ndarray:
    return codec.encode(sample)


def decode_probe(z, codec: LatentCodec):
    return codec.decode_probe(z)


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(path, samples: list[SyntheticSample], cfg: DataConfig | None = None) -> None:
    meta = {
        "config": asdict(cfg) if cfg else None,
        "chords": [s.chord_truth.to_json() for s in samples],
        "patterns": [s.pattern for s in samples],
        "passing": [s.passing_tones for s in samples],
        "texture_seeds": [list(s.texture_seed) for s in samples],
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            note_roll=np.stack([s.note_roll for s in samples]),
            context_roll=np.stack([s.context_roll for s in samples]),
            style=np.array([s.style_id for s in samples], dtype=np.int64),
            release=np.array([s.release for s in samples], dtype=np.int64),
            meta=np.array(json.dumps(meta)),
        )


def load_dataset(path) -> list[SyntheticSample]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        rolls, ctx, styles, release = data["note_roll"], data["context_roll"], data["style"], data["release"]
    return [
        SyntheticSample(
            rolls[i], int(styles[i]), ctx[i], ChordSequence.from_json(meta["chords"][i]),
            meta["patterns"][i], [tuple(p) for p in meta["passing"][i]], tuple(meta["texture_seeds"][i]),
            int(release[i]),
        )
        for i in range(len(styles))
    ]
