"""Synthetic tracking benchmark: rendered shapes with programmatic descriptions.

Everything is a pure function of a :class:`SceneSpec` (which carries its own
seed). Object centres are integers and sizes even, so the analytic ground
truth box coincides with the rasterized shape's pixel extent.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .tracker import Box, crop, search_window, template_boxes_in_crop, template_window

WORLD_VERSION = 1
CANVAS = 160
DEFAULT_LENGTH = 40
MAX_PAIR_GAP = 20
MIN_OCCLUDED_LENGTH = 12  # shorter sequences are never occluded

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
SHAPES = ("square", "circle", "triangle", "cross")
SIZES = {"small": 16, "large": 28}
DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}
MOTIONS = ("linear", "sine", "random-walk")
OCCLUDER_COLOR = (0.5, 0.5, 0.5)
PROFILES = ("easy", "distract", "occlude", "mixed")


@dataclass
class ObjectSpec:
    shape: str
    color: str
    size: str
    x: int
    y: int
    motion: str = "linear"
    direction: str = "right"
    speed: int = 0
    amplitude: int = 0
    period: int = 20

    def attributes(self):
        return (self.size, self.color, self.shape)

    @property
    def pixels(self):
        return SIZES[self.size]


@dataclass
class SceneSpec:
    target: ObjectSpec
    distractors: list = field(default_factory=list)
    clutter: float = 0.0
    occlusions: list = field(default_factory=list)  # [start, stop) frame ranges
    length: int = DEFAULT_LENGTH
    canvas: int = CANVAS
    seed: int = 0

    def validate(self):
        s = self.target.pixels
        if not (s // 2 <= self.target.x <= self.canvas - s // 2 and s // 2 <= self.target.y <= self.canvas - s // 2):
            raise ValueError("target must start fully inside the canvas")
        for d in self.distractors:
            if d.attributes() == self.target.attributes():
                raise ValueError("a distractor may not share every attribute with the target")
        occluded = sum(b - a for a, b in self.occlusions)
        if occluded > self.length // 4:
            raise ValueError("occlusion limited to 25% of the sequence")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["target"] = ObjectSpec(**d["target"])
        d["distractors"] = [ObjectSpec(**o) for o in d["distractors"]]
        d["occlusions"] = [list(o) for o in d["occlusions"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# language
# ---------------------------------------------------------------------------

def describe(spec: SceneSpec) -> str:
    t = spec.target
    text = f"the {t.size} {t.color} {t.shape}"
    if t.motion == "linear" and t.speed > 0:
        text += f" moving {t.direction}"
    return text


def parse_description(text: str):
    """Inverse of :func:`describe`: (size, color, shape, direction or None)."""
    w = text.split()
    if len(w) < 4 or w[0] != "the":
        raise ValueError(f"not a scene description: {text!r}")
    direction = w[5] if len(w) == 6 and w[4] == "moving" else None
    return w[1], w[2], w[3], direction


# ---------------------------------------------------------------------------
# motion and rendering
# ---------------------------------------------------------------------------

def _clamp(v, lo, hi):
    return min(max(v, lo), hi)


def trajectory(obj: ObjectSpec, length, canvas, rng):
    """Integer centres (length, 2); objects stop at the canvas border."""
    half = obj.pixels // 2
    lo, hi = half, canvas - half
    x, y = _clamp(obj.x, lo, hi), _clamp(obj.y, lo, hi)
    out = np.empty((length, 2), dtype=np.int64)
    dx, dy = DIRECTIONS[obj.direction]
    for k in range(length):
        if obj.motion == "linear":
            px, py = x + dx * obj.speed * k, y + dy * obj.speed * k
        elif obj.motion == "sine":
            off = int(round(obj.amplitude * math.sin(2 * math.pi * k / obj.period)))
            px, py = x + dx * off, y + dy * off
        else:
            if k:
                x += int(rng.integers(-obj.speed, obj.speed + 1))
                y += int(rng.integers(-obj.speed, obj.speed + 1))
                x, y = _clamp(x, lo, hi), _clamp(y, lo, hi)
            px, py = x, y
        out[k] = (_clamp(px, lo, hi), _clamp(py, lo, hi))
    return out


def shape_mask(shape, cx, cy, size, canvas):
    """Boolean (canvas, canvas) mask; a pixel is in when its centre is."""
    c = np.arange(canvas) + 0.5
    dx = c[None, :] - cx
    dy = c[:, None] - cy
    h = size / 2
    if shape == "square":
        return (np.abs(dx) < h) & (np.abs(dy) < h)
    if shape == "circle":
        return dx * dx + dy * dy <= h * h
    if shape == "triangle":
        return (dy > -h) & (dy < h) & (np.abs(dx) <= (dy + h) / 2)
    if shape == "cross":
        arm = size / 5
        return ((np.abs(dx) < arm) & (np.abs(dy) < h)) | ((np.abs(dy) < arm) & (np.abs(dx) < h))
    raise ValueError(f"unknown shape {shape!r}")


class TrackSequence:
    """Frames are rendered on demand from the spec; ``frames`` renders them all."""

    CACHE_FRAMES = 4

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.background = _background(spec, rng)
        self.paths = [trajectory(spec.target, spec.length, spec.canvas, rng)]
        for d in spec.distractors:
            self.paths.append(trajectory(d, spec.length, spec.canvas, rng))
        s = spec.target.pixels
        p = self.paths[0].astype(np.float64)
        self.gt = np.column_stack([p, np.full(len(p), s, float), np.full(len(p), s, float)])
        self.description = describe(spec)
        self._cache = {}

    def __len__(self):
        return self.spec.length

    def occluded(self, k):
        return any(a <= k < b for a, b in self.spec.occlusions)

    def frame(self, k):
        if k in self._cache:
            return self._cache[k]
        spec = self.spec
        img = self.background.copy()
        objs = list(spec.distractors) + [spec.target]
        paths = self.paths[1:] + self.paths[:1]
        for obj, path in zip(objs, paths):
            m = shape_mask(obj.shape, path[k, 0], path[k, 1], obj.pixels, spec.canvas)
            img[:, m] = np.asarray(COLORS[obj.color], np.float32)[:, None]
        if self.occluded(k):
            cx, cy = self.paths[0][k]
            m = shape_mask("square", cx, cy, spec.target.pixels + 6, spec.canvas)
            img[:, m] = np.asarray(OCCLUDER_COLOR, np.float32)[:, None]
        if len(self._cache) >= self.CACHE_FRAMES:
            self._cache.pop(next(iter(self._cache)))
        self._cache[k] = img
        return img

    @property
    def frames(self):
        return np.stack([self.frame(k) for k in range(len(self))])

    def boxes(self):
        return [Box(*row) for row in self.gt]


def _background(spec, rng):
    base = np.full((3, spec.canvas, spec.canvas), 0.2, dtype=np.float32)
    if spec.clutter > 0:
        cells = spec.canvas // 8
        blotch = rng.uniform(-1, 1, (3, cells, cells)).astype(np.float32)
        base += spec.clutter * np.kron(blotch, np.ones((8, 8), np.float32))
    return np.clip(base, 0.0, 1.0)


def render_sequence(spec: SceneSpec) -> TrackSequence:
    return TrackSequence(spec)


def save_frames(path, seq: TrackSequence):
    checkpoint.save(path, {f"frame_{k:04d}": seq.frame(k) for k in range(len(seq))}, {"spec": seq.spec.to_dict()})


def load_frames(path):
    tensors, meta = checkpoint.load(path)
    return np.stack([tensors[k] for k in sorted(tensors)]), meta


# ---------------------------------------------------------------------------
# scene sampling and benchmarks
# ---------------------------------------------------------------------------

def _rand_object(rng, canvas, shape=None, color=None, size=None, near=None):
    size = size or str(rng.choice(list(SIZES)))
    half = SIZES[size] // 2
    if near is not None:
        x = int(near[0] + rng.integers(-40, 41))
        y = int(near[1] + rng.integers(-40, 41))
    else:
        x, y = (int(v) for v in rng.integers(half, canvas - half + 1, 2))
    motion = str(rng.choice(MOTIONS))
    return ObjectSpec(
        shape=shape or str(rng.choice(SHAPES)),
        color=color or str(rng.choice(list(COLORS))),
        size=size,
        x=_clamp(x, half, canvas - half),
        y=_clamp(y, half, canvas - half),
        motion=motion,
        direction=str(rng.choice(list(DIRECTIONS))),
        speed=int(rng.integers(0, 4)) if motion != "sine" else 0,
        amplitude=int(rng.integers(8, 25)) if motion == "sine" else 0,
        period=int(rng.integers(12, 30)),
    )


def sample_spec(profile, rng, seed, length=DEFAULT_LENGTH, canvas=CANVAS) -> SceneSpec:
    if profile == "mixed":
        profile = str(rng.choice(["easy", "distract", "occlude"]))
    target = _rand_object(rng, canvas)
    target.x = int(_clamp(target.x, 40, canvas - 40))
    target.y = int(_clamp(target.y, 40, canvas - 40))
    distractors, occlusions = [], []
    clutter = float(rng.choice([0.0, 0.05, 0.1]))
    if profile == "distract":
        n = int(rng.integers(2, 5))
        others = [c for c in COLORS if c != target.color]
        colors = rng.permutation(others)
        for i in range(n):
            if i < 2:
                d = _rand_object(rng, canvas, shape=target.shape, color=str(colors[i]), near=(target.x, target.y))
            else:
                d = _rand_object(rng, canvas)
            while d.attributes() == target.attributes():
                d = _rand_object(rng, canvas)
            distractors.append(d)
    elif profile == "occlude":
        if rng.random() < 0.5:
            d = _rand_object(rng, canvas)
            while d.attributes() == target.attributes():
                d = _rand_object(rng, canvas)
            distractors.append(d)
        if length >= MIN_OCCLUDED_LENGTH:
            dur = int(rng.integers(3, min(10, length // 4) + 1))
            start = int(rng.integers(5, length - dur))
            occlusions.append([start, start + dur])
    elif profile != "easy":
        raise ValueError(f"unknown profile {profile!r}")
    return SceneSpec(target, distractors, clutter, occlusions, length, canvas, seed).validate()


def build_benchmark(name, n_sequences, profile, seed, length=DEFAULT_LENGTH):
    """Manifest dict listing ``n_sequences`` specs; sequences render lazily."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {PROFILES}")
    if n_sequences < 1:
        raise ValueError("a benchmark needs at least one sequence")
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n_sequences):
        s = int(rng.integers(0, 2**31 - 1))
        spec = sample_spec(profile, np.random.default_rng(s), s, length)
        seqs.append({"index": i, "seed": s, "spec": spec.to_dict()})
    params = {"name": name, "profile": profile, "seed": seed, "n_sequences": n_sequences, "length": length}
    fp = hashlib.sha256(json.dumps({**params, **data_fingerprint()}, sort_keys=True).encode()).hexdigest()[:16]
    return {**params, "canvas": CANVAS, "world_version": WORLD_VERSION, "config_hash": fp, "sequences": seqs}


def manifest_dumps(manifest) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def save_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(manifest_dumps(manifest))


def load_manifest(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def manifest_sequences(manifest):
    return [render_sequence(SceneSpec.from_dict(s["spec"])) for s in manifest["sequences"]]


def data_fingerprint(vocab=None):
    """Identity of the synthetic world a model was trained for."""
    out = {"world_version": WORLD_VERSION, "canvas": CANVAS}
    if vocab is not None:
        out["vocab"] = list(vocab.tokens)
    return out


# ---------------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------------

class TrainingPair:
    """Template/search crops from two frames of one sequence; crops are made on first access."""

    def __init__(self, seq, i, j, description, search_center, plan):
        self.seq, self.i, self.j = seq, i, j
        self.description = description
        self.plan = plan
        box_i, box_j = Box(*seq.gt[i]), Box(*seq.gt[j])
        self.template_window = template_window(box_i, plan)
        self.search_window = search_window(search_center[0], search_center[1], box_i.scale, plan)
        b = self.search_window.box_to_crop(box_j)
        self.search_box = np.array(b.xyxy())
        self.template_box = template_boxes_in_crop([box_i], plan)[0]

    @property
    def missing(self):
        return self.description is None

    @property
    def template(self):
        return crop(self.seq.frame(self.i), self.template_window)

    @property
    def search(self):
        return crop(self.seq.frame(self.j), self.search_window)


def make_training_pairs(sequences, lang_missing_fraction, rng, plan, max_gap=MAX_PAIR_GAP, jitter=0.2):
    """Endless stream of :class:`TrainingPair`; description is ``None`` (missing) with the given probability."""
    if not 0.0 <= lang_missing_fraction <= 1.0:
        raise ValueError("lang_missing_fraction must lie in [0, 1]")
    seqs = list(sequences)
    while True:
        seq = seqs[int(rng.integers(len(seqs)))]
        visible = [k for k in range(len(seq)) if not seq.occluded(k)]
        i = visible[int(rng.integers(len(visible)))]
        near = [k for k in visible if abs(k - i) <= max_gap]
        j = near[int(rng.integers(len(near)))]
        missing = rng.random() < lang_missing_fraction
        side = search_window(0, 0, Box(*seq.gt[i]).scale, plan).side
        off = rng.uniform(-jitter, jitter, 2) * side
        center = (seq.gt[j, 0] + off[0], seq.gt[j, 1] + off[1])
        yield TrainingPair(seq, i, j, None if missing else seq.description, center, plan)
