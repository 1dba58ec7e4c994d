"""Shapes-world: procedurally generated images/videos with captions and QA.

A scene is 1-3 coloured shapes on a 3x3 grid.  Video scenes move the first
object one grid cell over 8 frames.  Everything is a pure function of
``(seed, split, index)`` so generation is reproducible and parallel-safe.
"""
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
DIRECTIONS = ("left", "right", "up", "down")
RELATIONS = ("above", "below", "left of", "right of")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.7, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 0.85, 0.0),
}
_DIR_STEP = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}

IMAGE_SIZE = 48
GRID = 3
MARGIN = 3
CELL = 14  # 3 + 3*14 + 3 = 48
N_FRAMES = 8
FRAME_SHIFT = CELL / (N_FRAMES - 1)  # pixels per frame; exactly 2

SPLITS = {"train": (0, 8), "val": (8, 9), "test": (9, 10)}
_SPLIT_ID = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class Obj:
    color: str
    shape: str
    row: int
    col: int


@dataclass(frozen=True)
class Scene:
    objects: tuple
    motion: str = None  # direction of objects[0], video scenes only

    def __post_init__(self):
        cells = {(o.row, o.col) for o in self.objects}
        if len(cells) != len(self.objects):
            raise ValueError("two objects share a grid cell")
        if not 1 <= len(self.objects) <= 3:
            raise ValueError("scenes hold 1-3 objects")
        if self.motion is not None:
            dr, dc = _DIR_STEP[self.motion]
            o = self.objects[0]
            dest = (o.row + dr, o.col + dc)
            if not (0 <= dest[0] < GRID and 0 <= dest[1] < GRID) or dest in cells:
                raise ValueError("motion leaves the grid or hits another object")

    @property
    def frames(self):
        return N_FRAMES if self.motion else 1

    def key(self):
        objs = ";".join(f"{o.color},{o.shape},{o.row},{o.col}" for o in self.objects)
        return f"{objs}|{self.motion or '-'}"

    def digest(self):
        return int.from_bytes(hashlib.sha256(self.key().encode()).digest()[:8], "little")

    def split(self):
        bucket = self.digest() % 10
        for name, (lo, hi) in SPLITS.items():
            if lo <= bucket < hi:
                return name

    def to_json(self):
        return {"objects": [asdict(o) for o in self.objects], "motion": self.motion}


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def object_center(obj, frame_index=0, motion=None):
    cy = MARGIN + obj.row * CELL + CELL / 2
    cx = MARGIN + obj.col * CELL + CELL / 2
    if motion:
        dr, dc = _DIR_STEP[motion]
        cy += dr * FRAME_SHIFT * frame_index
        cx += dc * FRAME_SHIFT * frame_index
    return cy, cx


def render(scene, frame_index=0):
    """Rasterize one frame as float32 (H, W, 3) in [0, 1] on a white background."""
    img = np.ones((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    for i, obj in enumerate(scene.objects):
        motion = scene.motion if i == 0 else None
        cy, cx = object_center(obj, frame_index, motion)
        r, g, b = RGB[obj.color]
        if obj.shape == "circle":
            K.render_disc(img, cy, cx, 5.0, r, g, b)
        elif obj.shape == "square":
            K.render_box(img, cy, cx, 4.5, r, g, b)
        else:
            K.render_tri(img, cy, cx, 5.5, r, g, b)
    return img


def render_frames(scene):
    return np.stack([render(scene, f) for f in range(scene.frames)])


# --------------------------------------------------------------------------
# language
# --------------------------------------------------------------------------

def _phrase(obj):
    return f"a {obj.color} {obj.shape}"


def relation(a, b):
    if a.row < b.row:
        return "above"
    if a.row > b.row:
        return "below"
    return "left of" if a.col < b.col else "right of"


def caption(scene):
    objs = scene.objects
    text = _phrase(objs[0])
    if len(objs) >= 2:
        text += f" {relation(objs[0], objs[1])} {_phrase(objs[1])}"
    if len(objs) == 3:
        text += f" and {_phrase(objs[2])}"
    if scene.motion:
        text += f" moving {scene.motion}"
    return text


@dataclass(frozen=True)
class CaptionFacts:
    objects: tuple  # ((color, shape), ...)
    relation: str = None
    motion: str = None


def scene_facts(scene):
    objs = scene.objects
    rel = relation(objs[0], objs[1]) if len(objs) >= 2 else None
    return CaptionFacts(tuple((o.color, o.shape) for o in objs), rel, scene.motion)


_OBJ = rf"a ({'|'.join(COLORS)}) ({'|'.join(SHAPES)})"
_CAPTION_RE = re.compile(
    rf"^{_OBJ}(?: ({'|'.join(RELATIONS)}) {_OBJ})?(?: and {_OBJ})?(?: moving ({'|'.join(DIRECTIONS)}))?$"
)


def parse_caption(text):
    """Recover :class:`CaptionFacts` from a caption; None if ungrammatical."""
    m = _CAPTION_RE.match(text.strip())
    if m is None:
        return None
    g = m.groups()
    objects = [(g[0], g[1])]
    if g[2]:
        objects.append((g[3], g[4]))
    if g[5]:
        if not g[2]:
            return None
        objects.append((g[5], g[6]))
    return CaptionFacts(tuple(objects), g[2], g[7])


QA_KINDS = ("color", "shape", "count", "direction")
_NUMBER_WORDS = {1: "1", 2: "2", 3: "3"}


def make_qa(scene, kind="color"):
    """Return ``(question, answer)``; the question carries no trailing "?".

    Falls through to the next template when the scene cannot support the
    requested one (the count question always applies)."""
    start = QA_KINDS.index(kind)
    for k in QA_KINDS[start:] + QA_KINDS[:start]:
        qa = _try_qa(scene, k)
        if qa is not None:
            return qa
    raise AssertionError("unreachable: count question always applies")


def _try_qa(scene, kind):
    objs = scene.objects
    if kind == "color":
        for o in objs:
            if sum(p.shape == o.shape for p in objs) == 1:
                return f"what color is the {o.shape}", o.color
    elif kind == "shape":
        for o in objs:
            if sum(p.color == o.color for p in objs) == 1:
                return f"what shape is the {o.color} one", o.shape
    elif kind == "count":
        return "how many objects", _NUMBER_WORDS[len(objs)]
    elif kind == "direction" and scene.motion:
        return "which direction is it moving", scene.motion
    return None


def answer_from_caption(question, facts):
    """Answer a templated question using only parsed caption facts."""
    question = question.rstrip("?").strip()
    m = re.match(r"what color is the (\w+)$", question)
    if m:
        return next(c for c, s in facts.objects if s == m.group(1))
    m = re.match(r"what shape is the (\w+) one$", question)
    if m:
        return next(s for c, s in facts.objects if c == m.group(1))
    if question == "how many objects":
        return _NUMBER_WORDS[len(facts.objects)]
    if question == "which direction is it moving":
        return facts.motion
    raise ValueError(f"unknown question template: {question!r}")


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _random_scene(rng, video):
    n = int(rng.integers(1, 4))
    cells = rng.permutation(GRID * GRID)[:n]
    objs = [
        Obj(COLORS[int(rng.integers(4))], SHAPES[int(rng.integers(3))], int(c) // GRID, int(c) % GRID)
        for c in cells
    ]
    motion = None
    if video:
        occupied = {(o.row, o.col) for o in objs}
        first = objs[0]
        options = [
            d for d in DIRECTIONS
            if 0 <= first.row + _DIR_STEP[d][0] < GRID
            and 0 <= first.col + _DIR_STEP[d][1] < GRID
            and (first.row + _DIR_STEP[d][0], first.col + _DIR_STEP[d][1]) not in occupied
        ]
        if not options:
            return None
        motion = options[int(rng.integers(len(options)))]
    rest = sorted(objs[1:], key=lambda o: o.row * GRID + o.col)
    if not video:
        objs = sorted(objs, key=lambda o: o.row * GRID + o.col)
        return Scene(tuple(objs))
    return Scene((first,) + tuple(rest), motion)


def make_scene(seed, split, index, video_fraction=0.0):
    """Deterministic scene for ``(seed, split, index)``; splits are disjoint by hash."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_ID[split], index])
    video = bool(rng.random() < video_fraction)
    while True:
        scene = _random_scene(rng, video)
        if scene is not None and scene.split() == split:
            return scene


@dataclass
class Sample:
    index: int
    scene: Scene
    caption: str
    question: str
    answer: str

    @property
    def frames(self):
        return render_frames(self.scene)


def make_sample(seed, split, index, video_fraction=0.0):
    scene = make_scene(seed, split, index, video_fraction)
    kind = QA_KINDS[np.random.default_rng([seed, 7, _SPLIT_ID[split], index]).integers(3)]
    q, a = make_qa(scene, "direction" if scene.motion else kind)
    return Sample(index, scene, caption(scene), q, a)


def dataset(seed, split, size, video_fraction=0.0):
    return [make_sample(seed, split, i, video_fraction) for i in range(size)]


@dataclass
class SampleBatch:
    """Collated samples.  ``tokens`` holds the whole sequence including the
    single VIS slot at column ``vis_pos``; ``loss_mask`` is 1 exactly on the
    supervised caption/answer tokens (and EOS), 0 on prompt and padding."""

    indices: np.ndarray
    tokens: np.ndarray
    loss_mask: np.ndarray
    vis_pos: int
    frames: list = field(default=None, repr=False)
    answers: list = None


def corpus(seed, split, size, batch_size, tokenizer, task="caption", video_fraction=0.0,
           with_frames=True):
    """Yield :class:`SampleBatch` objects over a fixed, indexed sample list."""
    from .evaluation import CAPTION_TEMPLATE, render_prompt

    samples = dataset(seed, split, size, video_fraction)
    for lo in range(0, size, batch_size):
        chunk = samples[lo:lo + batch_size]
        if task == "caption":
            prompt = render_prompt(CAPTION_TEMPLATE)
            pairs = [(prompt, s.caption) for s in chunk]
        else:
            from .evaluation import QA_TEMPLATES
            pairs = [(render_prompt(QA_TEMPLATES[task], question=s.question), s.answer) for s in chunk]
        batch = collate(pairs, tokenizer, [s.index for s in chunk])
        if with_frames:
            batch.frames = [s.frames for s in chunk]
        batch.answers = [p[1] for p in pairs]
        yield batch


def collate(pairs, tokenizer, indices=None):
    """Tokenize ``(prompt, target)`` pairs into a right-padded batch."""
    rows, masks, vis = [], [], None
    for prompt, target in pairs:
        p = [tokenizer.bos_id] + tokenizer.encode(prompt, allow_vis=True)
        t = tokenizer.encode(target) + [tokenizer.eos_id]
        if tokenizer.vis_id in p:
            pos = p.index(tokenizer.vis_id)
            if vis is not None and pos != vis:
                raise ValueError("VIS slot must sit at the same column for every row")
            vis = pos
        rows.append(p + t)
        masks.append([0] * len(p) + [1] * len(t))
    width = max(len(r) for r in rows)
    tokens = np.full((len(rows), width), tokenizer.pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float32)
    for i, (r, m) in enumerate(zip(rows, masks)):
        tokens[i, :len(r)] = r
        mask[i, :len(m)] = m
    idx = np.arange(len(rows)) if indices is None else np.asarray(indices)
    return SampleBatch(idx, tokens, mask, vis if vis is not None else -1)


def text_corpus(seed, size):
    """Caption and QA text documents (no images) for language-model pretraining.

    Half of the documents are a bare caption, the rest a caption followed by
    one question/answer pair about it.
    """
    docs = []
    for i in range(size):
        s = make_sample(seed, "train", i, video_fraction=0.25)
        if i % 2 == 0:
            docs.append(s.caption)
        else:
            docs.append(f"{s.caption} . Question: {s.question}? Answer: {s.answer}")
    return docs


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def export_split(out_dir, seed, split, size, video_fraction=0.0):
    """Write ``<out_dir>/<split>/`` with one raw little-endian float32 frame
    file per sample plus ``metadata.jsonl``."""
    d = Path(out_dir) / split
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "metadata.jsonl", "w", encoding="utf-8") as meta:
        for s in dataset(seed, split, size, video_fraction):
            frames = s.frames.astype("<f4")
            name = f"{s.index:06d}.f32"
            (d / name).write_bytes(frames.tobytes())
            rec = {
                "index": s.index,
                "file": name,
                "frames": int(frames.shape[0]),
                "height": IMAGE_SIZE,
                "width": IMAGE_SIZE,
                "channels": 3,
                "caption": s.caption,
                "qa": {"question": s.question, "answer": s.answer},
                "scene": s.scene.to_json(),
            }
            meta.write(json.dumps(rec, sort_keys=True) + "\n")
    return d


def load_exported(split_dir):
    split_dir = Path(split_dir)
    out = []
    for line in (split_dir / "metadata.jsonl").read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        raw = np.frombuffer((split_dir / rec["file"]).read_bytes(), dtype="<f4")
        rec["pixels"] = raw.reshape(rec["frames"], rec["height"], rec["width"], rec["channels"])
        out.append(rec)
    return out
