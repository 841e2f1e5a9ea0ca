"""Moving-shapes videos with exact masklets and templated region questions.

Dataset file layout (all integers little-endian)::

    header   b"ORGS" | u32 version | u32 sample count | 32-byte sha256 of the synth config
    record   u32 payload length | payload | u32 crc32(payload)

    payload  u64 scene seed | u8 task kind | u16 T | u16 H0 | u16 W0
             T*3*H0*W0 bytes of RGB planes (frame, channel, row, column)
             u8 object count
               per object: u8 shape | u8 color | u8 motion | u8 size | i16 x0 | i16 y0 | i16 vx | i16 vy
               per object, per frame: u32 run count | u32 runs... (run-length mask, see rle_encode)
             u8 region count | u8 object index per region
             u16 instruction length | u16 ids | u16 answer length | u16 ids
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import vocab
from .errors import GenerationError, ParseError, ValidationError
from .region import RegionPrompt

MAGIC = b"ORGS"
VERSION = 1
TASK_KINDS = ("attribute", "motion", "relation")

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "white": (255, 255, 255),
    "orange": (255, 128, 0),
}
DIRECTIONS = {"static": (0, 0), "left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 4
    frame_size: int = 48
    object_size: int = 12
    speed: int = 2
    min_objects: int = 1
    max_objects: int = 4
    max_retries: int = 500

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


@dataclass(frozen=True)
class ObjectRecord:
    shape: str
    color: str
    motion: str
    size: int
    x0: int
    y0: int
    vx: int
    vy: int


@dataclass
class SynthScene:
    seed: int
    frames: np.ndarray  # (T, 3, H0, W0) uint8
    objects: list[ObjectRecord]
    masks: np.ndarray  # (n_objects, T, H0, W0) uint8

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class QASample:
    scene: SynthScene
    regions: list[int]  # object index per region, in placeholder order
    instruction: list[int]
    answer: list[int]
    task_kind: str

    @property
    def region_prompts(self) -> list[RegionPrompt]:
        return [RegionPrompt.from_mask(self.scene.masks[i, 0]) for i in self.regions]

    def masklet(self, region: int) -> np.ndarray:
        return self.scene.masks[self.regions[region]]


# -------------------------------------------------------------- rendering

def shape_stencil(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    elif shape == "triangle":
        m = np.abs(xx - c) <= (yy + 0.5) / 2
    else:
        raise ValidationError(f"unknown shape {shape!r}")
    return m.astype(np.uint8)


def object_mask(obj: ObjectRecord, t: int, frame_size: int) -> np.ndarray:
    mask = np.zeros((frame_size, frame_size), dtype=np.uint8)
    x, y = obj.x0 + t * obj.vx, obj.y0 + t * obj.vy
    mask[y:y + obj.size, x:x + obj.size] = shape_stencil(obj.shape, obj.size)
    return mask


def _start_range(v: int, span: int, extent: int, size: int) -> tuple[int, int]:
    lo = max(0, -v * span)
    hi = extent - size - max(0, v * span)
    return lo, hi


def generate_scene(seed: int, n_objects: int, config: SynthConfig = SynthConfig(),
                   motions: list[str] | None = None) -> SynthScene:
    """Render ``n_objects`` non-overlapping shapes moving in straight lines.

    Attributes are drawn once; only positions are re-drawn when objects collide.
    """
    if not 1 <= n_objects <= 4:
        raise ValidationError(f"n_objects must be in 1..4, got {n_objects}")
    rng = np.random.default_rng(seed)
    T, size, S = config.n_frames, config.object_size, config.frame_size
    if size + config.speed * (T - 1) > S:
        raise GenerationError("objects cannot stay inside the frame at this speed")
    shapes = rng.integers(0, 3, n_objects)
    colors = rng.integers(0, len(vocab.COLORS), n_objects)
    picked = rng.integers(0, len(vocab.MOTIONS), n_objects)
    if motions is not None:
        if len(motions) != n_objects:
            raise ValidationError("one motion per object is required")
        names = list(motions)
    else:
        names = [vocab.MOTIONS[i] for i in picked]

    for _ in range(config.max_retries):
        objects = []
        for k in range(n_objects):
            dx, dy = DIRECTIONS[names[k]]
            vx, vy = dx * config.speed, dy * config.speed
            xlo, xhi = _start_range(vx, T - 1, S, size)
            ylo, yhi = _start_range(vy, T - 1, S, size)
            objects.append(ObjectRecord(vocab.SHAPES[shapes[k]], vocab.COLORS[colors[k]], names[k], size,
                                        int(rng.integers(xlo, xhi + 1)), int(rng.integers(ylo, yhi + 1)),
                                        vx, vy))
        masks = np.stack([[object_mask(o, t, S) for t in range(T)] for o in objects])
        if masks.sum(axis=0).max() <= 1:
            break
    else:
        raise GenerationError(f"could not place {n_objects} objects after {config.max_retries} tries")

    frames = np.zeros((T, 3, S, S), dtype=np.uint8)
    for obj, masklet in zip(objects, masks):
        rgb = np.array(PALETTE[obj.color], dtype=np.uint8)
        for t in range(T):
            on = masklet[t].astype(bool)
            frames[t][:, on] = rgb[:, None]
    return SynthScene(seed, frames, objects, masks)


# --------------------------------------------------------------------- QA

def centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def make_qa(scene: SynthScene, seed, task_kind: str | None = None) -> QASample:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(scene.objects)
    if n < 1:
        raise ValidationError("scene has no objects")
    kinds = TASK_KINDS if n >= 2 else TASK_KINDS[:2]
    if task_kind is None:
        task_kind = kinds[int(rng.integers(len(kinds)))]
    elif task_kind not in kinds:
        raise ValidationError(f"task {task_kind!r} is not possible with {n} object(s)")

    if task_kind == "relation":
        a, b = (int(i) for i in rng.choice(n, size=2, replace=False))
        ax, _ = centroid(scene.masks[a, -1])
        bx, _ = centroid(scene.masks[b, -1])
        instruction = "is <region> left of <region> at the last frame ?"
        return QASample(scene, [a, b], vocab.encode(instruction),
                        vocab.encode(["yes" if ax < bx else "no"]), task_kind)
    k = int(rng.integers(n))
    obj = scene.objects[k]
    if task_kind == "attribute":
        return QASample(scene, [k], vocab.encode("what is <region> ?"),
                        vocab.encode([obj.color, obj.shape]), task_kind)
    return QASample(scene, [k], vocab.encode("which way does <region> move ?"),
                    vocab.encode([obj.motion]), task_kind)


def generate_samples(count: int, seed: int, config: SynthConfig = SynthConfig()) -> list[QASample]:
    """``count`` samples; sample i depends only on (seed, i, config)."""
    samples = []
    for i in range(count):
        scene_seed = int(np.random.SeedSequence([seed, i]).generate_state(2, np.uint32).view(np.uint64)[0])
        rng = np.random.default_rng(scene_seed)
        n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
        scene = generate_scene(scene_seed, n_obj, config)
        samples.append(make_qa(scene, rng))
    return samples


# -------------------------------------------------------------------- RLE

def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the row-major flattened mask, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, shape: tuple[int, ...]) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(np.prod(shape))
    if runs.sum() != total or (runs < 0).any():
        raise ValueError(f"runs cover {int(runs.sum())} pixels, mask has {total}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(shape)


# -------------------------------------------------------------------- I/O

_SHAPE_CODE = {s: i for i, s in enumerate(vocab.SHAPES)}
_COLOR_CODE = {c: i for i, c in enumerate(vocab.COLORS)}
_MOTION_CODE = {m: i for i, m in enumerate(vocab.MOTIONS)}
_TASK_CODE = {k: i for i, k in enumerate(TASK_KINDS)}


def encode_record(sample: QASample) -> bytes:
    scene = sample.scene
    T, _, H0, W0 = scene.frames.shape
    parts = [struct.pack("<QBHHH", scene.seed, _TASK_CODE[sample.task_kind], T, H0, W0),
             np.ascontiguousarray(scene.frames, dtype=np.uint8).tobytes(),
             struct.pack("<B", len(scene.objects))]
    for o in scene.objects:
        parts.append(struct.pack("<BBBBhhhh", _SHAPE_CODE[o.shape], _COLOR_CODE[o.color],
                                 _MOTION_CODE[o.motion], o.size, o.x0, o.y0, o.vx, o.vy))
    for masklet in scene.masks:
        for m in masklet:
            runs = rle_encode(m)
            parts.append(struct.pack("<I", len(runs)) + np.asarray(runs, dtype="<u4").tobytes())
    parts.append(struct.pack("<B", len(sample.regions)) + bytes(sample.regions))
    for ids in (sample.instruction, sample.answer):
        parts.append(struct.pack("<H", len(ids)) + np.asarray(ids, dtype="<u2").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, record: int):
        self.buf, self.pos, self.record = buf, 0, record

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError("record is truncated", self.record)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_record(payload: bytes, record: int = 0) -> QASample:
    r = _Reader(payload, record)
    try:
        seed, task, T, H0, W0 = r.unpack("<QBHHH")
        frames = np.frombuffer(r.take(T * 3 * H0 * W0), dtype=np.uint8).reshape(T, 3, H0, W0).copy()
        (n_obj,) = r.unpack("<B")
        objects = []
        for _ in range(n_obj):
            sh, co, mo, size, x0, y0, vx, vy = r.unpack("<BBBBhhhh")
            objects.append(ObjectRecord(vocab.SHAPES[sh], vocab.COLORS[co], vocab.MOTIONS[mo],
                                        size, x0, y0, vx, vy))
        masks = np.zeros((n_obj, T, H0, W0), dtype=np.uint8)
        for k in range(n_obj):
            for t in range(T):
                (n_runs,) = r.unpack("<I")
                runs = np.frombuffer(r.take(4 * n_runs), dtype="<u4")
                masks[k, t] = rle_decode(runs, (H0, W0))
        (n_reg,) = r.unpack("<B")
        regions = list(r.take(n_reg))
        (n_ins,) = r.unpack("<H")
        instruction = np.frombuffer(r.take(2 * n_ins), dtype="<u2").tolist()
        (n_ans,) = r.unpack("<H")
        answer = np.frombuffer(r.take(2 * n_ans), dtype="<u2").tolist()
        kind = TASK_KINDS[task]
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), record) from None
    if r.pos != len(payload):
        raise ParseError(f"{len(payload) - r.pos} trailing bytes", record)
    if any(i >= n_obj for i in regions):
        raise ParseError("region refers to a missing object", record)
    return QASample(SynthScene(seed, frames, objects, masks), regions, instruction, answer, kind)


def write_dataset(samples: list[QASample], path, config: SynthConfig = SynthConfig()) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(samples)) + config.digest())
        for sample in samples:
            payload = encode_record(sample)
            fh.write(struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))


@dataclass
class Dataset:
    samples: list[QASample]
    config_hash: bytes = b""
    version: int = VERSION

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != MAGIC:
        raise ParseError("not a dataset file (bad magic or short header)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ParseError(f"unsupported dataset version {version}")
    config_hash = data[12:44]
    pos, samples = 44, []
    for i in range(count):
        if pos + 4 > len(data):
            raise ParseError("file ends before record length", i)
        (n,) = struct.unpack_from("<I", data, pos)
        end = pos + 4 + n + 4
        if end > len(data):
            raise ParseError("record runs past end of file", i)
        payload = data[pos + 4:pos + 4 + n]
        (crc,) = struct.unpack_from("<I", data, pos + 4 + n)
        if zlib.crc32(payload) != crc:
            raise ParseError("checksum mismatch", i)
        samples.append(decode_record(payload, i))
        pos = end
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes after {count} records")
    return Dataset(samples, config_hash, version)
