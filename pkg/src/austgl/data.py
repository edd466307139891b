"""Video datasets on disk, fixed-length clip sampling and evaluation segmenting.

Layout::

    root/<video_id>/frames/000000.png ...
    root/<video_id>/labels.csv        # frame,AU1,AU2,...,AU26 with values in {0, 1, -1}
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .encoder import FrameSequence

log = logging.getLogger(__name__)

AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")
CLIP_LENGTH = 16
UNANNOTATED = -1
# label rows of blank padding frames; never read because valid_mask is False
PAD_LABEL = -1
FRAME_EXTS = (".png", ".jpg", ".jpeg")


class IngestionError(ValueError):
    pass


@dataclass
class VideoRecord:
    video_id: str
    frame_paths: list
    labels: Optional[np.ndarray] = None  # (F, N) int8, None when unlabeled
    frame_ids: Optional[list] = None
    frames: Optional[np.ndarray] = field(default=None, repr=False)  # in-memory (F, C, H, W)

    def __post_init__(self):
        if self.frame_ids is None:
            self.frame_ids = list(range(len(self)))

    def __len__(self):
        if self.frames is not None:
            return len(self.frames)
        return len(self.frame_paths)

    @property
    def labeled(self):
        return self.labels is not None

    @property
    def has_unannotated(self):
        return self.labeled and bool((self.labels == UNANNOTATED).any())


@dataclass
class ClipSpec:
    video_id: str
    start_index: int
    length: int = CLIP_LENGTH
    pad_count: int = 0

    @property
    def num_real(self):
        return self.length - self.pad_count


def _frame_number(path):
    m = re.search(r"(\d+)$", Path(path).stem)
    if m is None:
        raise IngestionError(f"frame file {path} has no numeric name")
    return int(m.group(1))


def read_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if header[0] != "frame":
        raise IngestionError(f"{path}: first column must be 'frame'")
    frame_ids = [int(r[0]) for r in body]
    labels = np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int8).reshape(len(body), len(header) - 1)
    if labels.size and not np.isin(labels, (0, 1, UNANNOTATED)).all():
        raise IngestionError(f"{path}: label values must be 0, 1 or -1")
    return header[1:], frame_ids, labels


def write_label_csv(path, frame_ids, labels, au_names=AU_NAMES):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", *au_names[: labels.shape[1]]])
        for fid, row in zip(frame_ids, labels):
            w.writerow([fid, *(int(v) for v in row)])


def scan_dataset(root) -> list:
    """One VideoRecord per subdirectory of ``root``, sorted by video id."""
    root = Path(root)
    records = []
    for vdir in sorted(p for p in root.iterdir() if p.is_dir()):
        fdir = vdir / "frames"
        paths = sorted((p for p in fdir.iterdir() if p.suffix.lower() in FRAME_EXTS),
                       key=_frame_number) if fdir.is_dir() else []
        if not paths:
            log.warning("skipping %s: no frames", vdir.name)
            continue
        frame_ids = [_frame_number(p) for p in paths]
        labels = None
        lpath = vdir / "labels.csv"
        if lpath.exists():
            _, label_ids, labels = read_labels(lpath)
            if len(label_ids) != len(paths):
                raise IngestionError(f"video {vdir.name}: {len(paths)} frames but {len(label_ids)} label rows")
            if label_ids != frame_ids:
                raise IngestionError(f"video {vdir.name}: label frame column does not match frame files")
        records.append(VideoRecord(vdir.name, [str(p) for p in paths], labels, frame_ids))
    return records


def load_image(path):
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return img.transpose(2, 0, 1)


class FrameStore:
    """Decodes frames, optionally keeping whole videos in memory."""

    def __init__(self, cache=True):
        self.cache = cache
        self._videos = {}

    def video(self, record: VideoRecord):
        if record.frames is not None:
            return record.frames
        if record.video_id in self._videos:
            return self._videos[record.video_id]
        arr = np.stack([load_image(p) for p in record.frame_paths])
        if self.cache:
            self._videos[record.video_id] = arr
        return arr

    def clip(self, record: VideoRecord, spec: ClipSpec):
        if self.cache or record.frames is not None:
            return self.video(record)[spec.start_index: spec.start_index + spec.num_real]
        paths = record.frame_paths[spec.start_index: spec.start_index + spec.num_real]
        return np.stack([load_image(p) for p in paths])


_default_store = FrameStore(cache=False)


def make_clip(record: VideoRecord, spec: ClipSpec, store: FrameStore | None = None):
    """Materialise a clip: real frames followed by blank padding."""
    store = store or _default_store
    real = store.clip(record, spec)
    frames = np.zeros((spec.length, *real.shape[1:]), dtype=np.float32)
    frames[: spec.num_real] = real
    valid = np.arange(spec.length) < spec.num_real
    return FrameSequence(frames, valid, clip_id=(record.video_id, spec.start_index))


def clip_labels(record: VideoRecord, spec: ClipSpec, num_aus=len(AU_NAMES)):
    out = np.full((spec.length, num_aus), PAD_LABEL, dtype=np.int64)
    if record.labeled:
        out[: spec.num_real] = record.labels[spec.start_index: spec.start_index + spec.num_real]
    else:
        out[: spec.num_real] = UNANNOTATED
    return out


def clip_spec(record: VideoRecord, start, length=CLIP_LENGTH):
    num_real = min(length, len(record) - start)
    return ClipSpec(record.video_id, start, length, length - num_real)


def sample_training_clip(record: VideoRecord, rng_seed, length=CLIP_LENGTH, store=None):
    """Uniformly random window of ``length`` frames; short videos are tail-padded.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    Returns ``(FrameSequence, labels (length, N), ClipSpec)``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    start = int(rng.integers(0, max(len(record) - length, 0) + 1))
    spec = clip_spec(record, start, length)
    num_aus = record.labels.shape[1] if record.labeled else len(AU_NAMES)
    return make_clip(record, spec, store), clip_labels(record, spec, num_aus), spec


def segment_specs(record: VideoRecord, length=CLIP_LENGTH):
    return [clip_spec(record, s, length) for s in range(0, len(record), length)]


def segment_for_eval(record: VideoRecord, length=CLIP_LENGTH, store=None):
    """Consecutive non-overlapping windows; the last one is padded with blank frames."""
    return [(make_clip(record, spec, store), spec) for spec in segment_specs(record, length)]


class RegionIntensityRule:
    """AU ``i`` is active when the mean intensity of grid cell ``i`` exceeds ``threshold``."""

    def __init__(self, num_aus=len(AU_NAMES), image_size=(64, 64), grid=(4, 4), threshold=0.5):
        if num_aus > grid[0] * grid[1]:
            raise ValueError(f"{num_aus} AUs do not fit a {grid} region grid")
        self.num_aus = num_aus
        self.grid = grid
        self.cell = (image_size[0] // grid[0], image_size[1] // grid[1])
        self.threshold = threshold

    def region(self, i):
        r, c = divmod(i, self.grid[1])
        h, w = self.cell
        return slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w)

    def __call__(self, image):
        out = np.zeros(self.num_aus, dtype=np.int8)
        for i in range(self.num_aus):
            rs, cs = self.region(i)
            out[i] = image[:, rs, cs].mean() > self.threshold
        return out


def _render_frame(rng, state, rule: RegionIntensityRule, tint, image_size):
    img = 0.25 + 0.04 * rng.standard_normal((3, *image_size))
    img += tint[:, None, None]
    h, w = rule.cell
    for i in np.flatnonzero(state):
        rs, cs = rule.region(i)
        # bright blob with a random shift inside its cell
        dy, dx = rng.integers(-2, 3, size=2)
        yy, xx = np.mgrid[0:h, 0:w]
        blob = np.exp(-(((yy - h / 2 - dy) / (h / 2.5)) ** 2 + ((xx - w / 2 - dx) / (w / 2.5)) ** 2))
        img[:, rs, cs] += 0.75 * blob
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8)


def _synth_video(rng, n_frames, rule, image_size, flip_prob=0.25):
    tint = rng.uniform(-0.05, 0.05, size=3)
    state = rng.random(rule.num_aus) < 0.4
    images, labels = [], []
    for _ in range(n_frames):
        img8 = _render_frame(rng, state, rule, tint, image_size)
        images.append(img8)
        labels.append(rule(img8.astype(np.float32) / 255.0))
        state = state ^ (rng.random(rule.num_aus) < flip_prob)
    return images, np.stack(labels) if labels else np.zeros((0, rule.num_aus), np.int8)


def generate_synthetic(root, num_videos, frames_per_video, num_aus=len(AU_NAMES), image_size=(64, 64),
                       rng_seed=0, rule: Optional[Callable] = None, max_tries=100):
    """Write a learnable toy dataset: each AU lights up its own image region.

    Labels are read off the quantised pixels by ``rule`` (default
    :class:`RegionIntensityRule`). The whole set is redrawn until every AU has
    at least one positive and one negative frame.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rule = rule or RegionIntensityRule(num_aus, image_size)
    rng = np.random.default_rng(rng_seed)
    lengths = [frames_per_video] * num_videos if np.isscalar(frames_per_video) else list(frames_per_video)
    for _ in range(max_tries):
        videos = [_synth_video(rng, n, rule, image_size) for n in lengths]
        if not videos:
            break
        all_labels = np.concatenate([lab for _, lab in videos])
        if len(all_labels) < 2 or ((all_labels == 1).any(0) & (all_labels == 0).any(0)).all():
            break
    else:
        raise RuntimeError("could not draw a dataset with both classes present for every AU")

    for v, (images, labels) in enumerate(videos):
        vdir = root / f"video_{v:03d}"
        fdir = vdir / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(images):
            Image.fromarray(img.transpose(1, 2, 0)).save(fdir / f"{t:06d}.png")
        write_label_csv(vdir / "labels.csv", list(range(len(images))), labels)
    return root
