"""Sample types, the frame-level annotation manifest, crop helpers and the synthetic scene generator."""
from __future__ import annotations

import csv
import io
import json
import math
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParseError, ValidationError

SPEAKING = "SPEAKING_AUDIBLE"
NOT_SPEAKING = "NOT_SPEAKING"
LABELS = {SPEAKING: 1, NOT_SPEAKING: 0}

MANIFEST_COLUMNS = ["video_id", "frame_timestamp", "entity_id", "label", "fx1", "fy1", "fx2", "fy2"]
BODY_COLUMNS = ["bx1", "by1", "bx2", "by2"]
OPTIONAL_COLUMNS = BODY_COLUMNS + ["category"]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) and 0.0 <= c <= 1.0 for c in coords):
            raise ValidationError(f"box coordinates must lie in [0, 1]: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"box needs x1 < x2 and y1 < y2: {coords}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def relative_to(self, outer: "BoundingBox") -> "BoundingBox | None":
        """This box expressed in ``outer``'s coordinates, clipped; None if they do not overlap."""
        x1 = (max(self.x1, outer.x1) - outer.x1) / outer.width
        x2 = (min(self.x2, outer.x2) - outer.x1) / outer.width
        y1 = (max(self.y1, outer.y1) - outer.y1) / outer.height
        y2 = (min(self.y2, outer.y2) - outer.y1) / outer.height
        if x2 <= x1 or y2 <= y1:
            return None
        clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
        return BoundingBox(clip(x1), clip(y1), clip(x2), clip(y2))


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    frame_timestamp: float
    entity_id: str
    label: int
    face_box: BoundingBox
    body_box: BoundingBox | None = None
    category: str | None = None

    @property
    def key(self):
        return (self.video_id, self.entity_id, round(self.frame_timestamp, 6))


@dataclass
class ClipSample:
    """One utterance of one candidate speaker."""

    clip_id: str
    frames: np.ndarray  # (T, H, W, 3) uint8
    waveform: np.ndarray  # (N,) float32 in [-1, 1]
    sample_rate: int
    fps: float
    face_boxes: list
    body_boxes: list
    labels: np.ndarray  # (T,) int {0, 1}
    entity_id: str = ""
    category: str | None = None

    def __post_init__(self):
        t = len(self.frames)
        if not (t == len(self.labels) == len(self.face_boxes) == len(self.body_boxes)):
            raise ValidationError("frames, labels and boxes must have equal length")
        if t < 1:
            raise ValidationError("a clip needs at least one frame")
        min_samples = (t / self.fps - 0.5 / self.fps) * self.sample_rate
        if len(self.waveform) < min_samples - 1e-9:
            raise ValidationError("waveform shorter than the frame sequence")
        if not self.entity_id:
            self.entity_id = f"{self.clip_id}:0"

    @property
    def num_frames(self):
        return len(self.frames)

    def timestamps(self):
        return [round(i / self.fps, 6) for i in range(self.num_frames)]

    def records(self) -> list:
        return [
            ManifestRecord(self.clip_id, ts, self.entity_id, int(y), fb, bb, self.category)
            for ts, y, fb, bb in zip(self.timestamps(), self.labels, self.face_boxes, self.body_boxes)
        ]


@dataclass
class SyntheticConfig:
    num_clips: int = 200
    T: int = 25
    fps: float = 25.0
    sample_rate: int = 16000
    image_size: int = 128
    tone_hz: float = 440.0
    tone_amplitude: float = 0.5
    noise_level: float = 0.05
    speaking_prob: float = 0.5
    body_agreement: float = 0.8
    seed: int = 7

    def __post_init__(self):
        if self.T < 1 or self.num_clips < 0:
            raise ValidationError("T >= 1 and num_clips >= 0 required")
        if not 0.0 <= self.speaking_prob <= 1.0:
            raise ValidationError("speaking_prob must lie in [0, 1]")
        if not 0.0 <= self.body_agreement <= 1.0:
            raise ValidationError("body_agreement must lie in [0, 1]")
        if self.image_size < 16:
            raise ValidationError("image_size must be at least 16")


# --------------------------------------------------------------------------- manifest


def _box(row, cols, lineno):
    try:
        values = [float(row[c]) for c in cols]
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric box coordinate in {cols}", line=lineno) from None
    try:
        return BoundingBox(*values)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None


def parse_manifest(text: str) -> list:
    """Parse manifest CSV text into records (one per data row)."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty manifest (missing header)", line=1) from None
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"missing columns {missing}", line=1)
    extra = [c for c in header if c not in MANIFEST_COLUMNS + OPTIONAL_COLUMNS]
    if extra:
        raise ParseError(f"unknown columns {extra}", line=1)
    has_body = all(c in header for c in BODY_COLUMNS)
    if any(c in header for c in BODY_COLUMNS) and not has_body:
        raise ParseError("body box needs all of bx1, by1, bx2, by2", line=1)

    records, seen = [], set()
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(cells)}", line=lineno)
        row = dict(zip(header, (c.strip() for c in cells)))
        try:
            ts = float(row["frame_timestamp"])
        except ValueError:
            raise ParseError("frame_timestamp is not a number", line=lineno) from None
        if not math.isfinite(ts) or ts < 0:
            raise ValidationError(f"line {lineno}: negative or non-finite timestamp")
        if row["label"] not in LABELS:
            raise ParseError(f"unknown label {row['label']!r}", line=lineno)
        body = None
        if has_body and any(row[c] for c in BODY_COLUMNS):
            body = _box(row, BODY_COLUMNS, lineno)
        rec = ManifestRecord(
            video_id=row["video_id"],
            frame_timestamp=ts,
            entity_id=row["entity_id"],
            label=LABELS[row["label"]],
            face_box=_box(row, MANIFEST_COLUMNS[4:8], lineno),
            body_box=body,
            category=row.get("category") or None,
        )
        if rec.key in seen:
            raise ValidationError(f"line {lineno}: duplicate (video_id, entity_id, frame_timestamp)")
        seen.add(rec.key)
        records.append(rec)
    return records


def format_manifest(records) -> str:
    records = list(records)
    header = list(MANIFEST_COLUMNS)
    with_body = any(r.body_box is not None for r in records)
    with_cat = any(r.category for r in records)
    if with_body:
        header += BODY_COLUMNS
    if with_cat:
        header.append("category")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    names = {v: k for k, v in LABELS.items()}
    for r in records:
        row = [r.video_id, repr(float(r.frame_timestamp)), r.entity_id, names[r.label]]
        row += [repr(float(v)) for v in r.face_box.as_tuple()]
        if with_body:
            row += [repr(float(v)) for v in r.body_box.as_tuple()] if r.body_box else [""] * 4
        if with_cat:
            row.append(r.category or "")
        writer.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------- crops


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` matrix of box-filter weights (fractional pixel overlaps)."""
    scale = n_in / n_out
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / scale


def _as_float_image(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.shape[0] == 0 or frame.shape[1] == 0:
        raise ValidationError(f"expected a non-empty (H, W, 3) frame, got {frame.shape}")
    if frame.dtype == np.uint8:
        return frame.astype(np.float64) / 255.0
    return np.clip(frame.astype(np.float64), 0.0, 1.0)


def pixel_box(box: BoundingBox, height: int, width: int):
    x1, x2 = round(box.x1 * width), round(box.x2 * width)
    y1, y2 = round(box.y1 * height), round(box.y2 * height)
    return x1, y1, x2, y2


def crop_and_resize(frame, box: BoundingBox, size: int = 112) -> np.ndarray:
    """Crop ``box`` out of an ``(H, W, 3)`` frame and area-resample it to ``(3, size, size)``.

    uint8 frames are scaled to [0, 1]. The box is rounded to whole pixels
    first; a box that collapses to zero pixels raises ValidationError.
    """
    img = _as_float_image(frame)
    h, w = img.shape[:2]
    x1, y1, x2, y2 = pixel_box(box, h, w)
    if x2 <= x1 or y2 <= y1:
        raise ValidationError(f"box {box.as_tuple()} has zero pixel area in a {w}x{h} frame")
    region = img[y1:y2, x1:x2]
    ry = area_weights(y2 - y1, size)
    rx = area_weights(x2 - x1, size)
    out = np.einsum("ij,jkc,lk->cil", ry, region, rx, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def mask_face_region(body_crop, face_box: BoundingBox | None) -> np.ndarray:
    """Black out the face box (given in body-crop coordinates) of a ``(C, H, W)`` crop."""
    out = np.array(body_crop, copy=True)
    if face_box is None:
        return out
    h, w = out.shape[-2:]
    x1, y1, x2, y2 = pixel_box(face_box, h, w)
    out[..., y1:y2, x1:x2] = 0
    return out


# --------------------------------------------------------------------------- synthetic scenes


def _segments(rng, t, speaking_prob):
    labels = np.zeros(t, dtype=np.int64)
    starts = []
    i = 0
    while i < t:
        n = int(rng.integers(6, 21))
        labels[i:i + n] = rng.random() < speaking_prob
        starts.append((i, min(i + n, t)))
        i += n
    return labels, starts


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / max(ry, 0.5)) ** 2 + ((xx + 0.5 - cx) / max(rx, 0.5)) ** 2 <= 1.0


def _rect(img, y1, y2, x1, x2, color):
    h, w = img.shape[:2]
    y1, y2 = max(int(y1), 0), min(int(y2), h)
    x1, x2 = max(int(x1), 0), min(int(x2), w)
    if y2 > y1 and x2 > x1:
        img[y1:y2, x1:x2] = color


def _quantize(x):
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767)
    return (pcm / 32768.0).astype(np.float32)


def generate_clip(cfg: SyntheticConfig, index: int) -> ClipSample:
    """Generate clip ``index`` from its own RNG stream, seeded by ``(seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    t, s = cfg.T, cfg.image_size
    labels, segments = _segments(rng, t, cfg.speaking_prob)
    moving = np.zeros(t, dtype=bool)
    for a, b in segments:
        agree = rng.random() < cfg.body_agreement
        moving[a:b] = bool(labels[a]) if agree else not bool(labels[a])

    # layout (pixels): body box and a face box at its top centre
    bw = rng.uniform(0.40, 0.55) * s
    bh = rng.uniform(0.70, 0.90) * s
    bx1 = rng.uniform(0.02 * s, s - bw - 0.02 * s)
    by1 = rng.uniform(0.02 * s, s - bh - 0.02 * s)
    fw = rng.uniform(0.40, 0.50) * bw
    fh = fw * rng.uniform(1.1, 1.3)
    fx1 = bx1 + (bw - fw) / 2
    fy1 = by1 + 0.03 * bh

    bg = rng.uniform(0.05, 0.35, size=3)
    texture = rng.normal(0.0, 0.03, size=(s, s, 1))
    skin = rng.uniform([0.55, 0.40, 0.30], [0.90, 0.70, 0.55])
    shirt = rng.uniform(0.2, 0.8, size=3)
    mouth_color = np.array([1.0, 0.95, 0.9])
    freq = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    limb_freq = rng.uniform(1.5, 3.0)

    face_mask = _ellipse_mask(s, s, fy1 + fh / 2, fx1 + fw / 2, fh / 2, fw / 2)
    frames = np.empty((t, s, s, 3), dtype=np.uint8)
    face_boxes, body_boxes = [], []
    for i in range(t):
        img = np.broadcast_to(bg, (s, s, 3)) + texture + rng.normal(0.0, 0.01, size=(s, s, 3))
        img = np.array(img)
        # torso and arms
        torso_top = fy1 + fh
        _rect(img, torso_top, by1 + bh, bx1 + 0.2 * bw, bx1 + 0.8 * bw, shirt)
        arm_len = 0.45 * bh
        if moving[i]:
            lift = 0.5 + 0.5 * np.sin(2 * np.pi * limb_freq * i / cfg.fps + phase)
            lift += rng.uniform(-0.15, 0.15)
        else:
            lift = 0.0
        for side in (0, 1):
            ax1 = bx1 + (0.02 if side == 0 else 0.82) * bw
            top = torso_top + 0.05 * bh - lift * 0.6 * arm_len
            _rect(img, top, top + arm_len, ax1, ax1 + 0.16 * bw, shirt * 0.7)
        # face, eyes, mouth
        img[face_mask] = skin
        for ex in (0.3, 0.7):
            _rect(img, fy1 + 0.35 * fh, fy1 + 0.43 * fh, fx1 + (ex - 0.07) * fw,
                  fx1 + (ex + 0.07) * fw, 0.05)
        if labels[i]:
            opening = 0.16 + 0.12 * np.sin(2 * np.pi * freq * i / cfg.fps + phase)
            opening += rng.uniform(-0.05, 0.05)
        else:
            opening = 0.10
        mouth = _ellipse_mask(s, s, fy1 + 0.72 * fh, fx1 + fw / 2, max(opening, 0.02) * fh / 2,
                              0.22 * fw)
        img[mouth] = mouth_color
        frames[i] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        face_boxes.append(BoundingBox(*(round(v / s, 6) for v in (fx1, fy1, fx1 + fw, fy1 + fh))))
        body_boxes.append(BoundingBox(*(round(v / s, 6) for v in (bx1, by1, bx1 + bw, by1 + bh))))

    n = int(round(t / cfg.fps * cfg.sample_rate))
    time = np.arange(n) / cfg.sample_rate
    frame_of_sample = np.minimum((time * cfg.fps).astype(int), t - 1)
    voiced = labels[frame_of_sample].astype(np.float64)
    audio = cfg.tone_amplitude * voiced * np.sin(2 * np.pi * cfg.tone_hz * time)
    audio += rng.normal(0.0, cfg.noise_level, size=n)
    return ClipSample(
        clip_id=f"clip_{index:05d}",
        frames=frames,
        waveform=_quantize(audio),
        sample_rate=cfg.sample_rate,
        fps=cfg.fps,
        face_boxes=face_boxes,
        body_boxes=body_boxes,
        labels=labels,
    )


def generate_synthetic(cfg: SyntheticConfig) -> list:
    """Deterministic synthetic dataset; clip ``i`` depends only on ``(cfg, i)``."""
    return [generate_clip(cfg, i) for i in range(cfg.num_clips)]


# --------------------------------------------------------------------------- disk format


def write_wav(path, waveform, sample_rate):
    pcm = np.clip(np.round(np.asarray(waveform, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValidationError(f"{path}: only 16-bit PCM is supported")
        rate, channels = fh.getframerate(), fh.getnchannels()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return (data.astype(np.float64) / 32768.0).astype(np.float32), rate


def save_clip(clip: ClipSample, directory) -> Path:
    root = Path(directory) / clip.clip_id
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        Image.fromarray(frame).save(root / "frames" / f"{i:05d}.png", optimize=False)
    write_wav(root / "audio.wav", clip.waveform, clip.sample_rate)
    (root / "manifest.csv").write_text(format_manifest(clip.records()), encoding="utf-8")
    return root


def save_dataset(clips, directory, config: SyntheticConfig | None = None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for clip in clips:
        save_clip(clip, root)
        records.extend(clip.records())
    (root / "manifest.csv").write_text(format_manifest(records), encoding="utf-8")
    if config is not None:
        (root / "synthetic.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    return root


def load_clip(directory) -> ClipSample:
    root = Path(directory)
    records = parse_manifest((root / "manifest.csv").read_text(encoding="utf-8"))
    if not records:
        raise ValidationError(f"{root}: empty manifest")
    records.sort(key=lambda r: r.frame_timestamp)
    frame_files = sorted((root / "frames").glob("*.png"))
    if len(frame_files) != len(records):
        raise ValidationError(f"{root}: {len(frame_files)} frames but {len(records)} manifest rows")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in frame_files])
    waveform, rate = read_wav(root / "audio.wav")
    if len(records) > 1:
        span = records[-1].frame_timestamp - records[0].frame_timestamp
        fps = round((len(records) - 1) / span, 3)
    else:
        fps = 25.0
    return ClipSample(
        clip_id=records[0].video_id,
        frames=frames,
        waveform=waveform,
        sample_rate=rate,
        fps=fps,
        face_boxes=[r.face_box for r in records],
        body_boxes=[r.body_box or r.face_box for r in records],
        labels=np.array([r.label for r in records], dtype=np.int64),
        entity_id=records[0].entity_id,
        category=records[0].category,
    )


def load_dataset(directory) -> list:
    root = Path(directory)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.csv").exists())
    if not dirs:
        raise ValidationError(f"{root}: no clip directories found")
    return [load_clip(d) for d in dirs]


__all__ = [
    "SPEAKING", "NOT_SPEAKING", "BoundingBox", "ManifestRecord", "ClipSample", "SyntheticConfig",
    "parse_manifest", "format_manifest", "area_weights", "crop_and_resize", "mask_face_region",
    "generate_clip", "generate_synthetic", "save_dataset", "load_dataset", "load_clip",
    "read_wav", "write_wav",
]
