"""Procedural part/object scenes: creatures and vehicles on a noisy background.

Taxonomy (label 0 is background in both maps):

========  ======================================  ==========
object    parts                                   part ids
========  ======================================  ==========
creature  head (disk), body (rectangle), legs     1, 2, 3
vehicle   body (rectangle), wheels (disks), roof  4, 5, 6
========  ======================================  ==========

All geometry is integer arithmetic and all randomness comes from
:class:`Xoshiro256ss`, so datasets are byte-identical across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

N_PARTS = 6
N_OBJECTS = 2
CREATURE, VEHICLE = 1, 2
PART_NAMES = ["background", "head", "body", "legs", "vehicle_body", "wheels", "roof"]
OBJECT_NAMES = ["background", "creature", "vehicle"]
PART_COLORS = np.array([
    [0, 0, 0],
    [220, 60, 60],
    [60, 170, 60],
    [60, 80, 220],
    [230, 200, 40],
    [40, 40, 40],
    [200, 60, 200],
], dtype=np.float64)

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple:
    """Returns ``(next_state, output)``."""
    state = (state + _GOLDEN) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _M64


class Xoshiro256ss:
    """xoshiro256** seeded through splitmix64."""

    def __init__(self, seed: int):
        st = seed & _M64
        s = []
        for _ in range(4):
            st, out = splitmix64(st)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _M64, 7) * 9) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi)``."""
        n = hi - lo
        if n <= 0:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        return lo + ((self.next_u64() * n) >> 64)

    def normal(self) -> float:
        u1 = ((self.next_u64() >> 11) + 1) * (1.0 / (1 << 53))
        u2 = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def normal_array(self, shape) -> np.ndarray:
        """Standard normals from 1024 vectorised xoshiro lanes seeded off this stream."""
        n = int(np.prod(shape))
        lanes = _Lanes(self.next_u64(), 1024)
        pairs = (n + 1) // 2
        steps = -(-pairs // lanes.n)
        a = np.concatenate([lanes.next() for _ in range(steps)])[:pairs]
        b = np.concatenate([lanes.next() for _ in range(steps)])[:pairs]
        u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / (1 << 53))
        u2 = (b >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(shape)

    def child(self) -> "Xoshiro256ss":
        return Xoshiro256ss(self.next_u64())


class _Lanes:
    """Many independent xoshiro256** streams advanced together with uint64 arrays."""

    def __init__(self, seed: int, n: int):
        self.n = n
        st = np.uint64(seed) + np.arange(n, dtype=np.uint64) * np.uint64(4 * _GOLDEN & _M64)
        words = []
        for _ in range(4):
            st = st + np.uint64(_GOLDEN)
            z = st.copy()
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            words.append(z ^ (z >> np.uint64(31)))
        self.s = words

    @staticmethod
    def _rotl(x, k):
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    def next(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s
        result = self._rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = self._rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result


def derive_seed(seed: int, index: int) -> int:
    """Independent per-sample seed for ``index`` under a dataset ``seed``."""
    _, a = splitmix64(seed & _M64)
    _, b = splitmix64((a ^ ((index * _GOLDEN) & _M64)) & _M64)
    return b


# ---------------------------------------------------------------- scene description

@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] uint8
    part_map: np.ndarray  # [H, W] uint8 in [0, N_PARTS]
    obj_map: np.ndarray  # [H, W] uint8 in [0, N_OBJECTS]
    occluded_fraction: Optional[float] = None
    occluder: Optional[tuple] = None  # (y0, x0, y1, x1), exclusive end

    def to_bytes(self) -> bytes:
        return self.image.tobytes() + self.part_map.tobytes() + self.obj_map.tobytes()


@dataclass
class GenConfig:
    image_h: int = 64
    image_w: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 26
    max_size: int = 38
    margin: int = 2
    max_overlap: float = 0.25
    color_jitter: float = 15.0
    noise_std: float = 8.0
    occlusion: bool = False
    occlusion_min: float = 0.2
    occlusion_max: float = 0.4
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.min_size > self.max_size or self.min_size < 10:
            raise ValueError("object size range invalid (min_size >= 10)")
        if self.max_size + 2 * self.margin > min(self.image_h, self.image_w):
            raise ValueError(f"max_size {self.max_size} with margin {self.margin} does not fit "
                             f"a {self.image_h}x{self.image_w} image")
        if not 0.0 < self.occlusion_min <= self.occlusion_max < 1.0:
            raise ValueError("occlusion coverage range must satisfy 0 < min <= max < 1")


@dataclass
class ObjectSpec:
    """One object instance: ``kind`` (1 creature, 2 vehicle), top-left corner and size."""

    kind: int
    y: int
    x: int
    size: int
    colors: dict = field(default_factory=dict)  # part id -> RGB floats

    def extent(self) -> tuple:
        return object_extent(self.kind, self.size)


def _creature_dims(size: int) -> dict:
    h = size
    bw = h * 6 // 10
    r = max(3, h * 17 // 100)
    body_top = r + r * 6 // 10
    body_bot = body_top + h * 4 // 10
    leg_w = max(3, h * 14 // 100)
    inset = bw * 15 // 100
    return dict(h=h, w=bw, body=(body_top, 0, body_bot, bw), head=(r, bw // 2, r),
                legs=[(body_bot, inset, h, inset + leg_w), (body_bot, bw - inset - leg_w, h, bw - inset)])


def _vehicle_dims(size: int) -> dict:
    w = size * 13 // 10
    roof_h = max(3, w * 14 // 100)
    roof_w = w // 2
    body_h = w * 35 // 100
    r = max(3, w * 13 // 100)
    body_bot = roof_h + body_h
    return dict(h=body_bot + r, w=w, roof=(0, (w - roof_w) // 2, roof_h, (w - roof_w) // 2 + roof_w),
                body=(roof_h, 0, body_bot, w),
                wheels=[(body_bot, w * 22 // 100, r), (body_bot, w - w * 22 // 100, r)])


def object_extent(kind: int, size: int) -> tuple:
    """``(height, width)`` of the object's bounding box (disks may add a row/column)."""
    d = _creature_dims(size) if kind == CREATURE else _vehicle_dims(size)
    return d["h"] + 1, d["w"] + 1


def _rect(h, w, y0, x0, y1, x1) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[max(y0, 0):max(min(y1, h), 0), max(x0, 0):max(min(x1, w), 0)] = True
    return m


def _disk(h, w, cy, cx, r) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rasterize_object(spec: ObjectSpec, h: int, w: int) -> list:
    """``[(part_id, mask)]`` in paint order (later entries paint over earlier ones)."""
    oy, ox = spec.y, spec.x
    if spec.kind == CREATURE:
        d = _creature_dims(spec.size)
        t, l, b, r = d["body"]
        out = [(3, _rect(h, w, oy + y0, ox + x0, oy + y1, ox + x1)) for y0, x0, y1, x1 in d["legs"]]
        out.append((2, _rect(h, w, oy + t, ox + l, oy + b, ox + r)))
        cy, cx, rad = d["head"]
        out.append((1, _disk(h, w, oy + cy, ox + cx, rad)))
        return out
    if spec.kind == VEHICLE:
        d = _vehicle_dims(spec.size)
        t, l, b, r = d["body"]
        out = [(4, _rect(h, w, oy + t, ox + l, oy + b, ox + r))]
        y0, x0, y1, x1 = d["roof"]
        out.append((6, _rect(h, w, oy + y0, ox + x0, oy + y1, ox + x1)))
        for cy, cx, rad in d["wheels"]:
            out.append((5, _disk(h, w, oy + cy, ox + cx, rad)))
        return out
    raise ValueError(f"unknown object kind {spec.kind}")


def object_mask(spec: ObjectSpec, h: int, w: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    for _, pm in rasterize_object(spec, h, w):
        m |= pm
    return m


def render_scene(objects: Iterable[ObjectSpec], cfg: GenConfig, rng: Optional[Xoshiro256ss],
                 background: Optional[np.ndarray] = None) -> Sample:
    """Paint objects back to front over a flat background, then add pixel noise."""
    h, w = cfg.image_h, cfg.image_w
    bg = np.array([128.0, 128.0, 128.0]) if background is None else np.asarray(background, float)
    img = np.broadcast_to(bg, (h, w, 3)).copy()
    part_map = np.zeros((h, w), dtype=np.uint8)
    obj_map = np.zeros((h, w), dtype=np.uint8)
    for spec in objects:
        for pid, m in rasterize_object(spec, h, w):
            part_map[m] = pid
            obj_map[m] = spec.kind
            img[m] = spec.colors.get(pid, PART_COLORS[pid])
    if cfg.noise_std > 0 and rng is not None:
        img = img + cfg.noise_std * rng.normal_array((h, w, 3))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(img, part_map, obj_map)


def _place(rng: Xoshiro256ss, cfg: GenConfig, kind: int, placed: list) -> ObjectSpec:
    h, w, mg = cfg.image_h, cfg.image_w, cfg.margin
    size = rng.integers(cfg.min_size, cfg.max_size + 1)
    while True:
        eh, ew = object_extent(kind, size)
        if eh + 2 * mg <= h and ew + 2 * mg <= w:
            break
        size -= 1
    best = None
    while True:
        eh, ew = object_extent(kind, size)
        for _ in range(100):
            y = rng.integers(mg, h - mg - eh + 1)
            x = rng.integers(mg, w - mg - ew + 1)
            spec = ObjectSpec(kind, y, x, size)
            m = object_mask(spec, h, w)
            area = m.sum()
            worst = 0.0
            for other in placed:
                inter = (m & other).sum()
                worst = max(worst, inter / area, inter / max(other.sum(), 1))
            if worst <= cfg.max_overlap:
                return spec
            if best is None or worst < best[0]:
                best = (worst, spec)
        if size <= cfg.min_size // 2 or size <= 10:
            return best[1]
        size = max(10, size * 85 // 100)


def gen_sample(rng: Xoshiro256ss, cfg: GenConfig) -> Sample:
    """One random scene; occlusion is applied when ``cfg.occlusion`` is set."""
    cfg.validate()
    n_obj = rng.integers(cfg.min_objects, cfg.max_objects + 1)
    gray = rng.uniform(90.0, 170.0)
    bg = np.array([gray + rng.uniform(-15, 15) for _ in range(3)])
    objects, masks = [], []
    for _ in range(n_obj):
        kind = rng.integers(1, N_OBJECTS + 1)
        spec = _place(rng, cfg, kind, masks)
        pids = (1, 2, 3) if kind == CREATURE else (4, 5, 6)
        spec.colors = {p: PART_COLORS[p] + np.array([cfg.color_jitter * rng.normal() for _ in range(3)])
                       for p in pids}
        objects.append(spec)
        masks.append(object_mask(spec, cfg.image_h, cfg.image_w))
    sample = render_scene(objects, cfg, rng, bg)
    if cfg.occlusion:
        sample = apply_occlusion(sample, rng, (cfg.occlusion_min, cfg.occlusion_max))
    return sample


def apply_occlusion(s: Sample, rng: Xoshiro256ss, coverage=(0.2, 0.4)) -> Sample:
    """Paint a gray textured rectangle over ``coverage`` of the object pixels.

    Labels are kept. The achieved fraction is stored in ``occluded_fraction``;
    if no placement lands inside the range after 100 tries the closest one is used.
    """
    lo, hi = coverage
    objmask = s.obj_map > 0
    area = int(objmask.sum())
    if area == 0:
        raise ValueError("sample has no object pixels to occlude")
    h, w = objmask.shape
    ys, xs = np.nonzero(objmask)
    integral = np.pad(objmask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    target = rng.uniform(lo, hi)
    scale = target * area
    best = None
    for _ in range(100):
        k = rng.integers(0, len(ys))
        cy, cx = int(ys[k]), int(xs[k])
        aspect = rng.uniform(0.5, 2.0)
        for _ in range(8):
            rh = int(max(1, min(h, round(np.sqrt(scale * aspect)))))
            rw = int(max(1, min(w, round(np.sqrt(scale / aspect)))))
            y0 = min(max(cy - rh // 2, 0), h - rh)
            x0 = min(max(cx - rw // 2, 0), w - rw)
            covered = int(integral[y0 + rh, x0 + rw] - integral[y0, x0 + rw]
                          - integral[y0 + rh, x0] + integral[y0, x0])
            frac = covered / area
            gap = 0.0 if lo <= frac <= hi else min(abs(frac - lo), abs(frac - hi))
            if best is None or gap < best[0]:
                best = (gap, (y0, x0, y0 + rh, x0 + rw), frac)
            if gap == 0.0:
                break
            scale *= target / frac if frac > 0 else 2.0
        if best[0] == 0.0:
            break
        scale = target * area
    _, (y0, x0, y1, x1), frac = best
    img = s.image.astype(np.float64)
    gray = rng.uniform(100.0, 160.0)
    texture = gray + 20.0 * rng.normal_array((y1 - y0, x1 - x0, 1))
    img[y0:y1, x0:x1] = texture
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(img, s.part_map.copy(), s.obj_map.copy(), occluded_fraction=frac,
                  occluder=(y0, x0, y1, x1))


def generate(cfg: GenConfig, count: int, seed: Optional[int] = None, start: int = 0) -> list:
    """``count`` samples; sample ``i`` depends only on ``(seed, start + i)``."""
    seed = cfg.seed if seed is None else seed
    return [gen_sample(Xoshiro256ss(derive_seed(seed, start + i)), cfg) for i in range(count)]


# ---------------------------------------------------------------- dataset file

MAGIC = b"LGSYN1\x00"
VERSION = 1
_HEADER = struct.Struct("<IIHHBB")


class DatasetFormatError(ValueError):
    pass


def dataset_write(path, samples: list, n_parts: int = N_PARTS, n_objects: int = N_OBJECTS,
                  shape: Optional[tuple] = None) -> None:
    if samples:
        h, w = samples[0].part_map.shape
    elif shape is not None:
        h, w = shape
    else:
        h = w = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, len(samples), h, w, n_parts, n_objects))
        for s in samples:
            if s.part_map.shape != (h, w):
                raise ValueError("all samples must share one size")
            fh.write(s.to_bytes())


def dataset_read(path) -> list:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic at offset 0")
    off = len(MAGIC)
    if len(buf) < off + _HEADER.size:
        raise DatasetFormatError(f"truncated header at offset {off}")
    version, count, h, w, n_parts, n_objects = _HEADER.unpack_from(buf, off)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset {len(MAGIC)}")
    off += _HEADER.size
    per = h * w * 5
    out = []
    for i in range(count):
        if off + per > len(buf):
            raise DatasetFormatError(f"truncated sample {i} at offset {off}")
        raw = np.frombuffer(buf, dtype=np.uint8, count=per, offset=off)
        img = raw[:h * w * 3].reshape(h, w, 3).copy()
        pm = raw[h * w * 3:h * w * 4].reshape(h, w).copy()
        om = raw[h * w * 4:].reshape(h, w).copy()
        if pm.max(initial=0) > n_parts or om.max(initial=0) > n_objects:
            raise DatasetFormatError(f"label out of range in sample {i} at offset {off}")
        out.append(Sample(img, pm, om))
        off += per
    if off != len(buf):
        raise DatasetFormatError(f"trailing bytes at offset {off}")
    return out


def dataset_header(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read(len(MAGIC) + _HEADER.size)
    if buf[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic at offset 0")
    version, count, h, w, p, o = _HEADER.unpack_from(buf, len(MAGIC))
    return dict(version=version, count=count, h=h, w=w, n_parts=p, n_objects=o)
