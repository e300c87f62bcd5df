"""EEG channel streams to labeled grayscale spectrogram images.

Recordings are 512 Hz single-channel sample streams. They are cut into
non-overlapping 13 s segments, turned into 0-20 Hz magnitude spectrograms,
rendered as 32x32 grayscale images, and (optionally) stacked with the paired
parietal channel into 64x32 images.

All operations are pure given their inputs; dataset building is deterministic
in manifest order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "SAMPLE_RATE",
    "SEGMENT_SAMPLES",
    "Pvt",
    "Channel",
    "ChannelSet",
    "Label",
    "EegRecording",
    "Segment",
    "SpectrogramImage",
    "PipelineError",
    "segment",
    "stft_frame_count",
    "stft_magnitudes",
    "to_decibels",
    "stft_spectrogram",
    "resample_bilinear",
    "to_grayscale_image",
    "concat_vertical",
    "label_from_kss",
    "synth_eeg",
    "load_recording",
    "save_recording",
    "load_recordings_manifest",
    "build_synth_corpus",
    "build_dataset",
    "write_pgm",
    "read_pgm",
    "write_dataset",
    "load_dataset",
]

SAMPLE_RATE = 512
SEGMENT_SECONDS = 13
SEGMENT_SAMPLES = SEGMENT_SECONDS * SAMPLE_RATE  # 6656

STFT_WINDOW = 512
STFT_HOP = 256  # 50% overlap
MAX_FREQ_HZ = 20
N_FREQ_BINS = MAX_FREQ_HZ + 1  # 1 Hz bin spacing at 512-point window
SEGMENT_FRAMES = (SEGMENT_SAMPLES - STFT_WINDOW) // STFT_HOP + 1  # 25

DB_FLOOR = -80.0
DB_CEIL = 0.0
IMAGE_HW = (32, 32)


class PipelineError(ValueError):
    """Invalid recording, segment, or manifest input."""


class Pvt(Enum):
    PVT1 = "PVT1"
    PVT2 = "PVT2"
    PVT3 = "PVT3"


class Channel(Enum):
    FZ = "Fz"
    PZ = "Pz"


class ChannelSet(Enum):
    FZ = "Fz"
    PZ = "Pz"  # intermediate only; datasets hold Fz or FzPz
    FZPZ = "FzPz"


class Label(Enum):
    ALERT = "Alert"
    DROWSY = "Drowsy"


@dataclass
class EegRecording:
    subject_id: str
    pvt: Pvt
    channel: Channel
    sample_rate: int
    samples: np.ndarray
    kss: int

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise PipelineError(f"sample_rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not 1 <= self.kss <= 9:
            raise PipelineError(f"kss must be in [1, 9], got {self.kss}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise PipelineError(f"samples must be 1-D, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise PipelineError(f"recording {self.subject_id}/{self.channel.value} contains non-finite samples")


@dataclass
class Segment:
    subject_id: str
    pvt: Pvt
    channel: Channel
    start_sample: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (SEGMENT_SAMPLES,):
            raise PipelineError(f"segment must hold exactly {SEGMENT_SAMPLES} samples, got {self.samples.shape}")


@dataclass
class SpectrogramImage:
    pixels: np.ndarray  # uint8, HxW
    label: Label
    subject_id: str
    channel_set: ChannelSet
    segment_index: int
    split: Optional[str] = None  # "train"/"test" once assigned by a fold
    source_path: Optional[str] = None  # manifest-relative path when loaded from disk

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 2:
            raise PipelineError(f"pixels must be a 2-D uint8 array, got {self.pixels.dtype} {self.pixels.shape}")

    def copy_with(self, **kw) -> "SpectrogramImage":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def segment(recording: EegRecording) -> list[Segment]:
    """Consecutive non-overlapping 13 s windows; trailing remainder discarded."""
    n = len(recording.samples) // SEGMENT_SAMPLES
    return [
        Segment(
            subject_id=recording.subject_id,
            pvt=recording.pvt,
            channel=recording.channel,
            start_sample=i * SEGMENT_SAMPLES,
            samples=recording.samples[i * SEGMENT_SAMPLES : (i + 1) * SEGMENT_SAMPLES],
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# spectrogram
# ---------------------------------------------------------------------------


def stft_frame_count(n_samples: int, window: int = STFT_WINDOW, hop: int = STFT_HOP) -> int:
    if n_samples < window:
        raise PipelineError(f"need at least {window} samples, got {n_samples}")
    return (n_samples - window) // hop + 1


def stft_magnitudes(samples: np.ndarray, window: int = STFT_WINDOW, hop: int = STFT_HOP, max_bin: int = MAX_FREQ_HZ) -> np.ndarray:
    """Hann-windowed STFT magnitudes for bins 0..max_bin; shape [max_bin + 1, frames]."""
    samples = np.asarray(samples, dtype=np.float64)
    n_frames = stft_frame_count(len(samples), window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * np.hanning(window)
    spec = np.abs(np.fft.rfft(frames, n=window, axis=1))[:, : max_bin + 1]
    return spec.T.copy()


def to_decibels(magnitudes: np.ndarray) -> np.ndarray:
    return np.clip(20.0 * np.log10(magnitudes + 1e-12), DB_FLOOR, DB_CEIL)


def stft_spectrogram(seg: Segment) -> np.ndarray:
    """dB-scaled magnitude matrix [21 freq bins x 25 frames] for one segment."""
    spec = to_decibels(stft_magnitudes(seg.samples))
    assert spec.shape == (N_FREQ_BINS, SEGMENT_FRAMES)
    return spec


# ---------------------------------------------------------------------------
# imaging
# ---------------------------------------------------------------------------


def resample_bilinear(matrix: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with endpoints mapped to endpoints."""
    matrix = np.asarray(matrix, dtype=np.float64)
    in_h, in_w = matrix.shape
    r = np.linspace(0.0, in_h - 1.0, out_h) if in_h > 1 else np.zeros(out_h)
    c = np.linspace(0.0, in_w - 1.0, out_w) if in_w > 1 else np.zeros(out_w)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    a = matrix[np.ix_(r0, c0)]
    b = matrix[np.ix_(r0, c1)]
    d = matrix[np.ix_(r1, c0)]
    e = matrix[np.ix_(r1, c1)]
    # lerp rows then columns: exact at grid points and for constant inputs
    top = a + fc * (b - a)
    bottom = d + fc * (e - d)
    return top + fr * (bottom - top)


def to_grayscale_image(spec_db: np.ndarray) -> np.ndarray:
    """Map a 21x25 dB matrix onto the fixed [-80, 0] range and resample to 32x32.

    Row 0 of the result is the highest frequency (frequency increases upward).
    """
    spec_db = np.asarray(spec_db, dtype=np.float64)
    norm = (np.clip(spec_db, DB_FLOOR, DB_CEIL) - DB_FLOOR) / (DB_CEIL - DB_FLOOR)
    resized = resample_bilinear(norm, *IMAGE_HW)
    return np.rint(resized[::-1] * 255.0).astype(np.uint8)


def concat_vertical(fz: SpectrogramImage, pz: SpectrogramImage) -> SpectrogramImage:
    """Stack the Fz image on top of the paired Pz image into a 64x32 image."""
    if fz.channel_set != ChannelSet.FZ or pz.channel_set != ChannelSet.PZ:
        raise PipelineError(f"concat_vertical needs an Fz and a Pz image, got {fz.channel_set}, {pz.channel_set}")
    if fz.subject_id != pz.subject_id or fz.segment_index != pz.segment_index:
        raise PipelineError(
            f"provenance mismatch: {fz.subject_id}#{fz.segment_index} vs {pz.subject_id}#{pz.segment_index}"
        )
    if fz.pixels.shape != IMAGE_HW or pz.pixels.shape != IMAGE_HW:
        raise PipelineError("concat_vertical requires two 32x32 images")
    return SpectrogramImage(
        pixels=np.vstack([fz.pixels, pz.pixels]),
        label=fz.label,
        subject_id=fz.subject_id,
        channel_set=ChannelSet.FZPZ,
        segment_index=fz.segment_index,
    )


# ---------------------------------------------------------------------------
# labeling
# ---------------------------------------------------------------------------


def label_from_kss(kss: int, pvt: Pvt) -> Optional[Label]:
    """KSS <= 4 is Alert, >= 7 is Drowsy; PVT2 and the 5-6 middle band are unlabeled."""
    if not 1 <= kss <= 9:
        raise PipelineError(f"kss must be in [1, 9], got {kss}")
    if pvt == Pvt.PVT2:
        return None
    if kss <= 4:
        return Label.ALERT
    if kss >= 7:
        return Label.DROWSY
    return None


# ---------------------------------------------------------------------------
# synthetic recordings
# ---------------------------------------------------------------------------

# band-limited component amplitudes per class; theta dominates when drowsy,
# alpha (plus some beta) when alert
_THETA_BAND = (4.0, 8.0)
_ALPHA_BAND = (8.0, 13.0)
_BETA_BAND = (13.0, 20.0)

_CLASS_AMPLITUDES = {
    Label.ALERT: {"theta": 0.0008, "alpha": 0.0060, "beta": 0.0020},
    Label.DROWSY: {"theta": 0.0060, "alpha": 0.0012, "beta": 0.0008},
}
_CHANNEL_GAIN = {
    Channel.FZ: {"theta": 1.2, "alpha": 1.0, "beta": 1.0},
    Channel.PZ: {"theta": 0.8, "alpha": 1.3, "beta": 1.0},
}
_NOISE_SIGMA = 0.0004


def _band_component(rng: np.random.Generator, band: tuple, amplitude: float, t: np.ndarray) -> np.ndarray:
    k = 8
    freqs = rng.uniform(band[0], band[1], size=k)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=k)
    parts = np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])
    return (amplitude / np.sqrt(k)) * parts.sum(axis=0)


def _pink_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    spec = rng.normal(size=n // 2 + 1) + 1j * rng.normal(size=n // 2 + 1)
    freqs = np.arange(n // 2 + 1, dtype=np.float64)
    freqs[0] = 1.0
    spec /= np.sqrt(freqs)
    noise = np.fft.irfft(spec, n=n)
    return noise * (sigma / noise.std())


def synth_eeg(label: Label, subject_seed: int, duration_s: float, channel: Channel = Channel.FZ) -> EegRecording:
    """Band-structured stand-in recording: 1/f background plus class-dependent rhythms.

    Deterministic in (label, subject_seed, duration, channel). Alert output has
    dominant alpha power; drowsy output has dominant theta power.
    """
    if duration_s < SEGMENT_SECONDS:
        raise PipelineError(f"duration must cover at least one segment ({SEGMENT_SECONDS} s)")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng((0xEE6, subject_seed, 1 if label == Label.DROWSY else 0, 1 if channel == Channel.PZ else 0))
    t = np.arange(n) / SAMPLE_RATE
    amp = _CLASS_AMPLITUDES[label]
    gain = _CHANNEL_GAIN[channel]
    jitter = {band: 1.0 + 0.2 * rng.uniform(-1.0, 1.0) for band in amp}
    samples = _pink_noise(rng, n, _NOISE_SIGMA)
    samples += _band_component(rng, _THETA_BAND, amp["theta"] * gain["theta"] * jitter["theta"], t)
    samples += _band_component(rng, _ALPHA_BAND, amp["alpha"] * gain["alpha"] * jitter["alpha"], t)
    samples += _band_component(rng, _BETA_BAND, amp["beta"] * gain["beta"] * jitter["beta"], t)
    # KSS belongs to the subject, not the channel: draw from a channel-free stream
    kss_rng = np.random.default_rng((0x55, subject_seed, 1 if label == Label.DROWSY else 0))
    kss = int(kss_rng.integers(1, 5)) if label == Label.ALERT else int(kss_rng.integers(7, 10))
    pvt = Pvt.PVT1 if label == Label.ALERT else Pvt.PVT3
    return EegRecording(
        subject_id=f"s{subject_seed}",
        pvt=pvt,
        channel=channel,
        sample_rate=SAMPLE_RATE,
        samples=samples,
        kss=kss,
    )


# ---------------------------------------------------------------------------
# recording IO
# ---------------------------------------------------------------------------


def save_recording(path: Path, samples: np.ndarray) -> None:
    np.asarray(samples, dtype="<f4").tofile(path)


def load_recording(path: Path, subject_id: str, pvt: Pvt, channel: Channel, kss: int, csv_has_header: bool = False) -> EegRecording:
    """Read raw little-endian float32 (.f32) or single-column CSV samples."""
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"recording file not found: {path}")
    if path.suffix == ".csv":
        text = path.read_text().strip().splitlines()
        if csv_has_header:
            text = text[1:]
        try:
            samples = np.array([float(line.split(",")[0]) for line in text], dtype=np.float64)
        except ValueError as exc:
            raise PipelineError(f"non-numeric CSV sample in {path} (header present but not flagged?): {exc}") from exc
    else:
        raw = path.read_bytes()
        if len(raw) % 4 != 0:
            raise PipelineError(f"{path} has {len(raw)} bytes, not a whole number of float32 samples")
        samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if samples.size == 0:
        raise PipelineError(f"{path} holds no samples")
    return EegRecording(subject_id=subject_id, pvt=pvt, channel=channel, sample_rate=SAMPLE_RATE, samples=samples, kss=kss)


def load_recordings_manifest(manifest_path: Path) -> list[EegRecording]:
    """Read recordings.csv (subject_id,pvt,channel,kss,path) and load each file."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    recordings = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"subject_id", "pvt", "channel", "kss", "path"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise PipelineError(f"recordings manifest must have columns {sorted(expected)}, got {reader.fieldnames}")
        for row in reader:
            try:
                pvt = Pvt(row["pvt"])
                channel = Channel(row["channel"])
                kss = int(row["kss"])
            except (ValueError, KeyError) as exc:
                raise PipelineError(f"bad manifest row {row}: {exc}") from exc
            recordings.append(load_recording(base / row["path"], row["subject_id"], pvt, channel, kss))
    return recordings


def build_synth_corpus(out_dir: Path, n_alert: int, n_drowsy: int, minutes: float, seed: int) -> Path:
    """Write synthetic Fz+Pz recordings and recordings.csv; returns the manifest path."""
    if n_alert < 1 or n_drowsy < 1:
        raise PipelineError("need at least one subject per class")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    plan = [(Label.ALERT, f"a{i:02d}", i) for i in range(n_alert)]
    plan += [(Label.DROWSY, f"d{i:02d}", i) for i in range(n_drowsy)]
    for label, subject_id, i in plan:
        subject_seed = int(np.random.default_rng((seed, 1 if label == Label.DROWSY else 0, i)).integers(0, 2**31))
        for channel in (Channel.FZ, Channel.PZ):
            rec = synth_eeg(label, subject_seed, minutes * 60.0, channel)
            fname = f"{subject_id}_{rec.pvt.value}_{channel.value}.f32"
            save_recording(out_dir / fname, rec.samples)
            rows.append({"subject_id": subject_id, "pvt": rec.pvt.value, "channel": channel.value, "kss": rec.kss, "path": fname})
    manifest = out_dir / "recordings.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["subject_id", "pvt", "channel", "kss", "path"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest


# ---------------------------------------------------------------------------
# dataset building
# ---------------------------------------------------------------------------


def _images_for_recording(rec: EegRecording, label: Label) -> list[SpectrogramImage]:
    out = []
    for i, seg in enumerate(segment(rec)):
        pixels = to_grayscale_image(stft_spectrogram(seg))
        out.append(
            SpectrogramImage(
                pixels=pixels,
                label=label,
                subject_id=rec.subject_id,
                channel_set=ChannelSet.FZ if rec.channel == Channel.FZ else ChannelSet.PZ,
                segment_index=i,
            )
        )
    return out


def build_dataset(recordings: Sequence[EegRecording], channel_set: ChannelSet) -> list[SpectrogramImage]:
    """Segment, transform, and label recordings into spectrogram images.

    Unlabeled recordings (PVT2 or mid KSS) are skipped. FzPz mode pairs each
    subject's Fz and Pz recordings by segment index and stacks them.
    """
    if channel_set == ChannelSet.FZ:
        images = []
        for rec in recordings:
            if rec.channel != Channel.FZ:
                continue
            label = label_from_kss(rec.kss, rec.pvt)
            if label is None:
                continue
            images.extend(_images_for_recording(rec, label))
        return images

    if channel_set != ChannelSet.FZPZ:
        raise PipelineError(f"datasets are built for Fz or FzPz, not {channel_set}")

    by_key: dict[tuple, dict[Channel, EegRecording]] = {}
    order = []
    for rec in recordings:
        key = (rec.subject_id, rec.pvt)
        if key not in by_key:
            by_key[key] = {}
            order.append(key)
        if rec.channel in by_key[key]:
            raise PipelineError(f"duplicate {rec.channel.value} recording for subject {rec.subject_id} {rec.pvt.value}")
        by_key[key][rec.channel] = rec

    images = []
    for key in order:
        pair = by_key[key]
        if Channel.FZ not in pair or Channel.PZ not in pair:
            raise PipelineError(f"FzPz mode requires both channels for subject {key[0]} {key[1].value}")
        fz_rec, pz_rec = pair[Channel.FZ], pair[Channel.PZ]
        if fz_rec.kss != pz_rec.kss:
            raise PipelineError(f"KSS disagrees between channels for subject {key[0]}: {fz_rec.kss} vs {pz_rec.kss}")
        label = label_from_kss(fz_rec.kss, fz_rec.pvt)
        if label is None:
            continue
        fz_images = _images_for_recording(fz_rec, label)
        pz_images = _images_for_recording(pz_rec, label)
        if len(fz_images) != len(pz_images):
            raise PipelineError(
                f"missing paired Pz segment for subject {key[0]}: {len(fz_images)} Fz vs {len(pz_images)} Pz segments"
            )
        images.extend(concat_vertical(f, p) for f, p in zip(fz_images, pz_images))
    return images


# ---------------------------------------------------------------------------
# image store (binary PGM + manifest)
# ---------------------------------------------------------------------------


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise PipelineError(f"{path} is not a binary PGM file")
    parts = raw.split(b"\n", 3)
    if len(parts) != 4:
        raise PipelineError(f"{path} has a malformed PGM header")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise PipelineError(f"{path} must use maxval 255")
    data = parts[3][: h * w]
    if len(data) != h * w:
        raise PipelineError(f"{path} is truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_dataset(images: Sequence[SpectrogramImage], out_dir: Path) -> Path:
    """Write PGM files plus dataset.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "dataset.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image_path", "label", "subject_id", "channel_set", "segment_index"])
        writer.writeheader()
        for i, img in enumerate(images):
            fname = f"{i:05d}_{img.subject_id}_{img.segment_index:04d}.pgm"
            write_pgm(out_dir / fname, img.pixels)
            writer.writerow(
                {
                    "image_path": fname,
                    "label": img.label.value,
                    "subject_id": img.subject_id,
                    "channel_set": img.channel_set.value,
                    "segment_index": img.segment_index,
                }
            )
    return manifest


def load_dataset(manifest_path: Path) -> list[SpectrogramImage]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    images = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"image_path", "label", "subject_id", "channel_set", "segment_index"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise PipelineError(f"dataset manifest must have columns {sorted(expected)}, got {reader.fieldnames}")
        for row in reader:
            images.append(
                SpectrogramImage(
                    pixels=read_pgm(base / row["image_path"]),
                    label=Label(row["label"]),
                    subject_id=row["subject_id"],
                    channel_set=ChannelSet(row["channel_set"]),
                    segment_index=int(row["segment_index"]),
                    source_path=row["image_path"],
                )
            )
    return images
