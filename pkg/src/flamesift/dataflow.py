"""Frame ingestion, preprocessing, selective targets, and synthetic data.

Frames are 8-bit grayscale grids with a class label.  Preprocessing is
per-frame standardization (zero mean, unit population std), so frames can
be handled independently in streaming order.  Selective targets implement
the class mask: stable frames get an all-black (all-zero) target, unstable
frames get their own normalized pixels back.

The synthetic generator stands in for combustor video: a smooth horizontal
plume, brightest at the inlet (right edge), with regime-controlled
"mushroom" vortex blobs riding on it for unstable frames.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

LABELS = ("stable", "unstable", "unlabeled")
LABEL_CODES = {"stable": 0, "unstable": 1, "unlabeled": 2}
CODE_LABELS = {code: name for name, code in LABEL_CODES.items()}

REGIMES = ("stable", "unstable", "intermittent")

PACKED_MAGIC = b"FSDS"
PACKED_VERSION = 1


@dataclass
class Frame:
    """One 8-bit grayscale frame with its class label and stream position."""

    pixels: np.ndarray
    label: str = "unlabeled"
    sequence_index: int = 0
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ShapeError(f"frame pixels must be 2-D (h, w), got shape {px.shape}")
        if px.dtype != np.uint8:
            if not np.issubdtype(px.dtype, np.integer):
                raise ValueError(f"frame pixels must be integers, got dtype {px.dtype}")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("frame pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}, expected one of {LABELS}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class FrameDataset:
    """Ordered frames plus free-form manifest metadata (source conditions)."""

    frames: list[Frame]
    metadata: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def count(self, label):
        return sum(1 for f in self.frames if f.label == label)


def resize_bilinear(frame, out_h, out_w):
    """Bilinear resample with corner-aligned sampling, rounded back to 8 bits.

    Rounding is half away from zero.  Resizing to the same dims copies the
    pixels unchanged.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target dims must be >= 1, got {out_h}x{out_w}")
    src = frame.pixels
    h, w = src.shape
    if (out_h, out_w) == (h, w):
        return replace(frame, pixels=src.copy())
    data = src.astype(np.float64)
    ys = np.zeros(out_h) if out_h == 1 else np.arange(out_h) * (h - 1) / (out_h - 1)
    xs = np.zeros(out_w) if out_w == 1 else np.arange(out_w) * (w - 1) / (out_w - 1)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = data[np.ix_(y0, x0)] * (1 - fx) + data[np.ix_(y0, x1)] * fx
    bottom = data[np.ix_(y1, x0)] * (1 - fx) + data[np.ix_(y1, x1)] * fx
    values = top * (1 - fy) + bottom * fy
    out = np.floor(values + 0.5).astype(np.uint8)
    return replace(frame, pixels=out)


def normalize(frame):
    """Standardize a frame to zero mean and unit population std.

    Returns a (1, h, w) float64 tensor; a constant frame maps to zeros.
    Accepts a Frame or a bare 2-D pixel array.
    """
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    data = px.astype(np.float64)
    std = data.std()
    if std == 0.0:
        return np.zeros((1,) + data.shape)
    return ((data - data.mean()) / std)[None]


def denormalize(values, frame):
    """Map normalized values back through a frame's own statistics to uint8."""
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    data = px.astype(np.float64)
    vals = np.asarray(values, dtype=np.float64).reshape(data.shape)
    raw = vals * data.std() + data.mean()
    return np.floor(np.clip(raw, 0, 255) + 0.5).astype(np.uint8)


def make_selective_target(frame):
    """Class-dependent target: stable frames are masked to black (all zeros),
    unstable frames reconstruct their own normalized pixels."""
    if frame.label == "stable":
        return np.zeros((1,) + frame.pixels.shape)
    if frame.label == "unstable":
        return normalize(frame)
    raise ValueError(
        f"selective target needs a labeled frame, got {frame.label!r} "
        f"(sequence_index {frame.sequence_index})"
    )


def selective_training_arrays(frames):
    """Stack labeled frames into (inputs, targets) tensors for training."""
    inputs = np.stack([normalize(f) for f in frames])
    targets = np.stack([make_selective_target(f) for f in frames])
    return inputs, targets


@dataclass
class ScheduleEntry:
    """Regime switch: from ``start`` onward, generate ``regime`` frames."""

    start: int
    regime: str
    intensity: float = 1.0


@dataclass
class SynthParams:
    """Deterministic recipe for a synthetic frame sequence."""

    seed: int
    frames: int
    schedule: list
    noise_level: float = 3.0
    height: int = 64
    width: int = 64

    def __post_init__(self):
        entries = []
        for e in self.schedule:
            entries.append(e if isinstance(e, ScheduleEntry) else ScheduleEntry(*e))
        self.schedule = entries

    def validate(self):
        if self.frames < 1:
            raise ConfigError(f"frame count must be >= 1, got {self.frames}")
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"frame dims must be >= 4, got {self.height}x{self.width}")
        if self.noise_level < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise_level}")
        if not self.schedule:
            raise ConfigError("schedule must contain at least one entry")
        prev = -1
        for e in self.schedule:
            if e.regime not in REGIMES:
                raise ConfigError(
                    f"unknown regime {e.regime!r}, expected one of {REGIMES}"
                )
            if e.start < 0 or e.start >= self.frames:
                raise ConfigError(
                    f"schedule index {e.start} is out of range [0, {self.frames})"
                )
            if e.start <= prev:
                raise ConfigError(
                    f"schedule indices must be strictly increasing, got {e.start} "
                    f"after {prev}"
                )
            if not 0.0 <= e.intensity <= 1.0:
                raise ConfigError(
                    f"intensity must be in [0, 1], got {e.intensity} "
                    f"at index {e.start}"
                )
            prev = e.start
        if self.schedule[0].start != 0:
            raise ConfigError(
                f"schedule must start at index 0, got {self.schedule[0].start}"
            )


def _plume_field(h, w):
    """Smooth stable-flame background: brightest at the inlet (right edge),
    decaying downstream, with a soft vertical profile."""
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    ramp = (xx / max(w - 1, 1)) ** 1.5
    profile = np.exp(-(((yy - (h - 1) / 2.0) / (0.32 * h)) ** 2))
    return 30.0 + 90.0 * ramp * profile


def _mushroom_field(h, w, x_center, contrast):
    """Two-lobed vortex blob with a stalk trailing back toward the inlet."""
    yy = np.arange(h)[:, None].astype(np.float64)
    xx = np.arange(w)[None, :].astype(np.float64)
    y_mid = (h - 1) / 2.0
    sep = 0.16 * h
    sigma = 0.15 * h
    cap = np.exp(-(((xx - x_center) ** 2) + ((yy - (y_mid - sep)) ** 2)) / (2 * sigma**2))
    cap += np.exp(-(((xx - x_center) ** 2) + ((yy - (y_mid + sep)) ** 2)) / (2 * sigma**2))
    stalk_x = np.exp(-(((xx - x_center - 0.14 * w) ** 2)) / (2 * (0.11 * w) ** 2))
    stalk_y = np.exp(-(((yy - y_mid) ** 2)) / (2 * (0.10 * h) ** 2))
    blob = cap + 0.9 * stalk_x * stalk_y
    return contrast * blob / blob.max()

# the vortex sheds in discrete steps: cycle length and per-step advance
SHED_POSITIONS = 8


def _regime_per_frame(params):
    """Expand the schedule into one (regime, intensity) per frame index."""
    out = []
    entries = params.schedule
    for i, entry in enumerate(entries):
        end = entries[i + 1].start if i + 1 < len(entries) else params.frames
        out.extend([(entry.regime, entry.intensity)] * (end - entry.start))
    return out


def synth_generate(params):
    """Generate a labeled synthetic dataset, byte-identical per seed.

    Stable regime: plume plus Gaussian pixel noise, labeled stable.
    Unstable regime: plume plus a mushroom blob whose downstream position
    advances with the sequence index and whose contrast scales with the
    schedule intensity, labeled unstable.  Intermittent regime: stable
    background with short unstable bursts (geometric run lengths, mean 5
    frames) at the schedule's partial intensity, labeled unlabeled.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    h, w = params.height, params.width
    plume = _plume_field(h, w)
    regimes = _regime_per_frame(params)
    source = f"synth{params.seed}"

    frames = []
    burst_left = 0
    gap_left = 0
    prev_regime = None
    for i in range(params.frames):
        regime, intensity = regimes[i]
        if regime == "intermittent" and prev_regime != "intermittent":
            burst_left = 0
            gap_left = int(rng.geometric(1.0 / 12.0))
        prev_regime = regime

        show_blob = regime == "unstable"
        blob_intensity = intensity
        if regime == "intermittent":
            if burst_left > 0:
                show_blob = True
                burst_left -= 1
            else:
                gap_left -= 1
                if gap_left <= 0:
                    burst_left = int(rng.geometric(1.0 / 5.0))
                    gap_left = int(rng.geometric(1.0 / 12.0))

        field_vals = plume.copy()
        if show_blob:
            # shedding: the blob advances downstream one slot per frame
            slot = i % SHED_POSITIONS
            x_center = (w - 1) - 0.14 * w - slot * (0.30 * w / (SHED_POSITIONS - 1))
            field_vals += _mushroom_field(h, w, x_center, 185.0 * blob_intensity)
        field_vals += rng.normal(0.0, params.noise_level, size=(h, w))
        pixels = np.floor(np.clip(field_vals, 0, 255) + 0.5).astype(np.uint8)

        label = {"stable": "stable", "unstable": "unstable", "intermittent": "unlabeled"}[
            regime
        ]
        frames.append(Frame(pixels, label=label, sequence_index=i, source_id=source))

    metadata = {
        "source": source,
        "seed": str(params.seed),
        "frames": str(params.frames),
        "noise_level": repr(float(params.noise_level)),
        "schedule": ",".join(
            f"{e.regime}:{e.start}:{e.intensity!r}" for e in params.schedule
        ),
    }
    return FrameDataset(frames, metadata)


# --- PGM (P5) frame files ----------------------------------------------------


def write_pgm(pixels, path):
    """Binary PGM (P5) with maxval 255, written atomically."""
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim != 2:
        raise ShapeError(f"PGM pixels must be 2-D, got shape {px.shape}")
    h, w = px.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + px.tobytes())
    os.replace(tmp, path)


def _pgm_tokens(data, count):
    """First `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset of the byte right after the final token's
    single whitespace terminator).
    """
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ParseError("truncated PGM header")
        tokens.append(data[start:i])
    if i >= n:
        raise ParseError("truncated PGM header")
    return tokens, i + 1  # consume exactly one whitespace byte after maxval


def read_pgm(path):
    """Parse a binary PGM (P5) file into a uint8 (h, w) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise ParseError(f"{path}: bad PGM magic (expected P5)")
    try:
        tokens, offset = _pgm_tokens(data[2:], 3)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None
    offset += 2
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ParseError(f"{path}: non-numeric PGM header fields") from None
    if w < 1 or h < 1:
        raise ParseError(f"{path}: invalid PGM dimensions {w}x{h}")
    if not 1 <= maxval <= 255:
        raise ParseError(f"{path}: unsupported PGM maxval {maxval} (need single byte)")
    body = data[offset : offset + h * w]
    if len(body) != h * w:
        raise ParseError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# --- manifest + per-frame PGM datasets ---------------------------------------


def save_dataset(dataset, out_dir, stem="frame"):
    """Write one PGM per frame plus a manifest; returns the manifest path.

    Manifest lines are ``relative_path,label,sequence_index``; metadata is
    stored in leading ``# key=value`` comment lines.
    """
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    lines = []
    for key in sorted(dataset.metadata):
        lines.append(f"# {key}={dataset.metadata[key]}")
    for i, frame in enumerate(dataset.frames):
        rel = os.path.join("frames", f"{stem}_{i:06d}.pgm")
        write_pgm(frame.pixels, os.path.join(out_dir, rel))
        lines.append(f"{rel},{frame.label},{frame.sequence_index}")
    manifest = os.path.join(out_dir, "manifest.txt")
    tmp = f"{manifest}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest)
    return manifest


def load_dataset(manifest_path):
    """Read a manifest and its referenced PGM frames back into a dataset."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    metadata = {}
    frames = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, value = body.split("=", 1)
                    metadata[key.strip()] = value.strip()
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(
                    f"{manifest_path}:{ln}: expected 'path,label,sequence_index', "
                    f"got {line!r}"
                )
            rel, label, seq_text = (p.strip() for p in parts)
            if label not in LABELS:
                raise ParseError(
                    f"{manifest_path}:{ln}: unknown label {label!r}, "
                    f"expected one of {LABELS}"
                )
            try:
                seq = int(seq_text)
            except ValueError:
                raise ParseError(
                    f"{manifest_path}:{ln}: bad sequence index {seq_text!r}"
                ) from None
            frame_path = os.path.join(base, rel)
            if not os.path.exists(frame_path):
                raise ParseError(
                    f"{manifest_path}:{ln}: frame file not found: {frame_path}"
                )
            pixels = read_pgm(frame_path)
            frames.append(
                Frame(
                    pixels,
                    label=label,
                    sequence_index=seq,
                    source_id=metadata.get("source", ""),
                )
            )
    return FrameDataset(frames, metadata)


# --- packed binary dataset ----------------------------------------------------
#
# magic "FSDS", u32 version, u32 count, u16 height, u16 width,
# count*h*w pixel bytes, count label bytes (0 stable / 1 unstable /
# 2 unlabeled), trailing CRC32 over all preceding bytes; little-endian.


def save_packed(dataset, path):
    """Write the single-file packed form; all frames must share one shape."""
    if not dataset.frames:
        raise ConfigError("cannot pack an empty dataset")
    h, w = dataset.frames[0].shape
    for i, f in enumerate(dataset.frames):
        if f.shape != (h, w):
            raise ShapeError(
                f"frame {i} has shape {f.shape}, expected {(h, w)} for packing"
            )
    blob = bytearray()
    blob += PACKED_MAGIC
    blob += struct.pack("<IIHH", PACKED_VERSION, len(dataset.frames), h, w)
    for f in dataset.frames:
        blob += f.pixels.tobytes()
    blob += bytes(LABEL_CODES[f.label] for f in dataset.frames)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_packed(path):
    """Read a packed dataset; sequence indices are regenerated as 0..n-1."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != PACKED_MAGIC:
        raise ParseError(f"{path}: bad magic, not a packed dataset")
    if len(data) < 16:
        raise ParseError(f"{path}: truncated packed header")
    version, count, h, w = struct.unpack_from("<IIHH", data, 4)
    if version != PACKED_VERSION:
        raise ParseError(
            f"{path}: unsupported packed version {version} (expected {PACKED_VERSION})"
        )
    expected = 16 + count * h * w + count + 4
    if len(data) != expected:
        raise ParseError(
            f"{path}: packed file is {len(data)} bytes, expected {expected}"
        )
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ParseError(f"{path}: checksum mismatch, packed dataset is corrupt")
    source = os.path.splitext(os.path.basename(path))[0]
    frames = []
    offset = 16
    for i in range(count):
        px = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
        offset += h * w
        code = data[16 + count * h * w + i]
        if code not in CODE_LABELS:
            raise ParseError(f"{path}: unknown label code {code} for frame {i}")
        frames.append(
            Frame(
                px.reshape(h, w).copy(),
                label=CODE_LABELS[code],
                sequence_index=i,
                source_id=source,
            )
        )
    return FrameDataset(frames, {"source": source})
