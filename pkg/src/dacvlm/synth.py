"""Seeded synthetic multimodal corpus: rendered shape scenes with exact
captions, question/answer pairs, instructions and text-only sentences."""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DimensionError
from .patch_embed import PATCH, ImageInput, from_ppm_bytes, to_ppm_bytes
from .tokenizer import COLORS, NUMBER_WORDS, SHAPES

GRID = 4
MAX_OBJECTS = 4
DEFAULT_CANVAS = (256, 256)

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.6, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 0.9, 0.0),
    "purple": (0.5, 0.0, 0.6),
    "orange": (1.0, 0.5, 0.0),
    "cyan": (0.0, 0.9, 0.9),
    "gray": (0.5, 0.5, 0.5),
}
assert tuple(PALETTE) == COLORS

RELATIONS = ("left of", "right of", "above", "below")
KINDS = ("caption", "qa", "instruction", "text_only", "web")
DEFAULT_MIX = {"caption": 0.35, "qa": 0.3, "instruction": 0.15, "text_only": 0.1, "web": 0.1}

QA_PROMPT = "question: {} answer:"
INSTRUCTION_PROMPT = "user: {} assistant:"
DESCRIBE = "describe this image."


class SceneError(ValueError):
    """A scene violates the layout rules."""


class GenerationError(ValueError):
    """A sample cannot be generated for the given scene."""


@dataclass(frozen=True, order=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str


@dataclass(frozen=True)
class Scene:
    objects: Tuple[SceneObject, ...] = ()

    def __post_init__(self):
        objs = tuple(self.objects)
        if len(objs) > MAX_OBJECTS:
            raise SceneError(f"at most {MAX_OBJECTS} objects, got {len(objs)}")
        cells = [(o.row, o.col) for o in objs]
        if len(set(cells)) != len(cells):
            raise SceneError(f"two objects share a cell: {cells}")
        for o in objs:
            if o.shape not in SHAPES or o.color not in PALETTE:
                raise SceneError(f"unknown shape/color {o.shape}/{o.color}")
            if not (0 <= o.row < GRID and 0 <= o.col < GRID):
                raise SceneError(f"cell ({o.row}, {o.col}) outside the {GRID}x{GRID} grid")
        object.__setattr__(self, "objects", objs)

    def ordered(self) -> Tuple[SceneObject, ...]:
        return tuple(sorted(self.objects))

    def __eq__(self, other):
        return isinstance(other, Scene) and self.ordered() == other.ordered()

    def __hash__(self):
        return hash(self.ordered())


def random_scene(rng: np.random.Generator, min_objects: int = 0, max_objects: int = MAX_OBJECTS) -> Scene:
    k = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.choice(GRID * GRID, size=k, replace=False)
    objs = [
        SceneObject(int(c) // GRID, int(c) % GRID, SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))])
        for c in cells
    ]
    return Scene(tuple(objs))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=64)
def _shape_mask(shape: str, ch: int, cw: int) -> np.ndarray:
    v = (np.arange(ch) + 0.5) / ch - 0.5
    u = (np.arange(cw) + 0.5) / cw - 0.5
    V, U = np.meshgrid(v, u, indexing="ij")
    if shape == "circle":
        m = U**2 + V**2 <= 0.35**2
    elif shape == "square":
        m = (np.abs(U) <= 0.3) & (np.abs(V) <= 0.3)
    else:
        m = (V >= -0.32) & (V <= 0.32) & (np.abs(U) <= 0.35 * (V + 0.32) / 0.64)
    m.setflags(write=False)
    return m


def render(scene: Scene, h: int = DEFAULT_CANVAS[0], w: int = DEFAULT_CANVAS[1]) -> ImageInput:
    """Rasterise solid shapes on a white canvas; a pure function of the scene."""
    if h % PATCH or w % PATCH or h < GRID or w < GRID:
        raise DimensionError(f"canvas {h}x{w} must be a multiple of {PATCH}")
    if not isinstance(scene, Scene):
        scene = Scene(tuple(scene))
    img = np.ones((3, h, w))
    ch, cw = h // GRID, w // GRID
    for o in scene.objects:
        m = _shape_mask(o.shape, ch, cw)
        cell = img[:, o.row * ch : (o.row + 1) * ch, o.col * cw : (o.col + 1) * cw]
        for k, val in enumerate(PALETTE[o.color]):
            cell[k][m] = val
    return ImageInput(img)


# ---------------------------------------------------------------------------
# Text targets
# ---------------------------------------------------------------------------
def _describe(o: SceneObject) -> str:
    return f"a {o.color} {o.shape} at row {o.row} column {o.col}"


def caption_of(scene: Scene) -> str:
    """Canonical row-major caption, bijective with the scene."""
    if not scene.objects:
        return "an empty canvas"
    return ", ".join(_describe(o) for o in scene.ordered())


def parse_caption(text: str) -> Scene:
    text = text.strip()
    if text == "an empty canvas":
        return Scene()
    objs = []
    for part in text.split(", "):
        words = part.split()
        if len(words) != 8 or words[0] != "a" or words[3:5] != ["at", "row"] or words[6] != "column":
            raise SceneError(f"unparseable caption fragment {part!r}")
        objs.append(SceneObject(int(words[5]), int(words[7]), words[2], words[1]))
    return Scene(tuple(objs))


def web_caption_of(scene: Scene) -> str:
    """Brief, lossy caption in the style of scraped alt-text."""
    return f"a picture with {len(scene.objects)} shapes"


def _unique_objects(scene: Scene) -> List[SceneObject]:
    keys = [(o.color, o.shape) for o in scene.objects]
    return [o for o in scene.ordered() if keys.count((o.color, o.shape)) == 1]


def relation_holds(a: SceneObject, rel: str, b: SceneObject) -> bool:
    return {
        "left of": a.col < b.col,
        "right of": a.col > b.col,
        "above": a.row < b.row,
        "below": a.row > b.row,
    }[rel]


def qa_templates(scene: Scene) -> List[str]:
    """Question templates answerable unambiguously for ``scene``."""
    if not scene.objects:
        return []
    out = ["count"]
    shapes = [o.shape for o in scene.objects]
    if any(shapes.count(s) == 1 for s in shapes):
        out.insert(0, "color")
    if len(_unique_objects(scene)) >= 2:
        out.append("relation")
    return out


def qa_of(scene: Scene, seed: int, template: Optional[str] = None) -> Tuple[str, str]:
    """A templated question about ``scene`` with its exact answer."""
    if not scene.objects:
        raise GenerationError("no question can be asked about an empty scene")
    rng = np.random.default_rng(seed)
    options = qa_templates(scene)
    if template is None:
        template = options[rng.integers(len(options))]
    elif template not in options:
        raise GenerationError(f"template {template!r} not answerable for this scene")
    if template == "color":
        shapes = [o.shape for o in scene.objects]
        uniq = sorted(s for s in set(shapes) if shapes.count(s) == 1)
        shape = uniq[rng.integers(len(uniq))]
        obj = next(o for o in scene.objects if o.shape == shape)
        return f"what color is the {shape}?", obj.color
    if template == "count":
        present = sorted({o.color for o in scene.objects})
        pool = present if rng.random() < 0.5 else list(COLORS)
        color = pool[rng.integers(len(pool))]
        n = sum(o.color == color for o in scene.objects)
        return f"how many {color} objects are there?", str(n)
    uniq = _unique_objects(scene)
    i, j = rng.choice(len(uniq), size=2, replace=False)
    a, b = uniq[int(i)], uniq[int(j)]
    rel = RELATIONS[rng.integers(len(RELATIONS))]
    answer = "yes" if relation_holds(a, rel, b) else "no"
    return f"is the {a.color} {a.shape} {rel} the {b.color} {b.shape}?", answer


def instruction_of(scene: Scene, seed: int) -> Tuple[str, str]:
    """Instruction-format request: a description or a question."""
    rng = np.random.default_rng(seed)
    if not scene.objects or rng.random() < 0.25:
        return INSTRUCTION_PROMPT.format(DESCRIBE), caption_of(scene)
    q, a = qa_of(scene, int(rng.integers(2**31)))
    return INSTRUCTION_PROMPT.format(q), a


def _num(n: int) -> str:
    return NUMBER_WORDS[n]


def text_only(seed: int) -> str:
    """A deterministic, true sentence over the closed vocabulary."""
    rng = np.random.default_rng(seed)
    r = rng.random()
    if r < 0.6:
        a, b = int(rng.integers(0, 11)), int(rng.integers(0, 11))
        if rng.random() < 0.5:
            return f"{_num(a)} plus {_num(b)} equals {_num(a + b)}"
        a, b = max(a, b), min(a, b)
        return f"{_num(a)} minus {_num(b)} equals {_num(a - b)}"
    if r < 0.75:
        a, b = (int(x) for x in rng.choice(21, size=2, replace=False))
        rel = "more than" if a > b else "less than"
        return f"{_num(a)} is {rel} {_num(b)}"
    facts = [f"{c} is a color" for c in COLORS]
    facts += [f"a {s} is a shape" for s in SHAPES]
    facts += ["a square has four sides", "a triangle has three sides", "a circle is round"]
    return facts[rng.integers(len(facts))]


# ---------------------------------------------------------------------------
# Samples and corpora
# ---------------------------------------------------------------------------
@dataclass
class Sample:
    """One supervised example; ``image`` is rendered from ``scene`` on demand."""

    kind: str
    prompt: str
    target: str
    scene: Optional[Scene] = None
    canvas: Tuple[int, int] = DEFAULT_CANVAS
    sample_id: int = 0

    @property
    def has_image(self) -> bool:
        return self.scene is not None

    @property
    def image(self) -> Optional[ImageInput]:
        return None if self.scene is None else render(self.scene, *self.canvas)

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "kind": self.kind,
            "prompt": self.prompt,
            "target": self.target,
            "scene": None if self.scene is None else caption_of(self.scene),
            "canvas": list(self.canvas),
        }


def make_sample(kind: str, seed: int, sample_id: int = 0, canvas=DEFAULT_CANVAS) -> Sample:
    rng = np.random.default_rng(seed)
    canvas = tuple(canvas)
    if kind == "text_only":
        return Sample(kind, "", text_only(int(rng.integers(2**31))), None, canvas, sample_id)
    need = 1 if kind in ("qa",) else 0
    scene = random_scene(rng, min_objects=need)
    sub = int(rng.integers(2**31))
    if kind == "caption":
        return Sample(kind, "", caption_of(scene), scene, canvas, sample_id)
    if kind == "web":
        return Sample(kind, "", web_caption_of(scene), scene, canvas, sample_id)
    if kind == "qa":
        q, a = qa_of(scene, sub)
        return Sample(kind, QA_PROMPT.format(q), a, scene, canvas, sample_id)
    if kind == "instruction":
        p, a = instruction_of(scene, sub)
        return Sample(kind, p, a, scene, canvas, sample_id)
    raise GenerationError(f"unknown sample kind {kind!r}")


def make_corpus(n: int, seed: int = 0, mix: Optional[Dict[str, float]] = None, canvas=DEFAULT_CANVAS) -> List[Sample]:
    """``n`` samples; sample ``i`` depends only on ``(seed, i)``."""
    mix = dict(DEFAULT_MIX if mix is None else mix)
    kinds = [k for k in KINDS if mix.get(k, 0) > 0]
    p = np.array([mix[k] for k in kinds], dtype=np.float64)
    p /= p.sum()
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        kind = kinds[int(rng.choice(len(kinds), p=p))]
        out.append(make_sample(kind, int(rng.integers(2**31)), sample_id=i, canvas=canvas))
    return out


def split_by_kind(samples: Sequence[Sample]) -> Dict[str, List[Sample]]:
    out: Dict[str, List[Sample]] = {k: [] for k in KINDS}
    for s in samples:
        out[s.kind].append(s)
    return out


def write_corpus(samples: Sequence[Sample], out_dir, inline: bool = False) -> Path:
    """Write ``corpus.jsonl`` plus PPM images under ``images/``.

    With ``inline=True`` each image is embedded as a hex string of its PPM
    bytes in the ``image_hex`` field instead.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    path = out_dir / "corpus.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            row = s.to_dict()
            row["image"] = None
            if s.has_image:
                raw = to_ppm_bytes(s.image)
                if inline:
                    row["image_hex"] = raw.hex()
                else:
                    img_dir.mkdir(exist_ok=True)
                    rel = f"images/{s.sample_id:06d}.ppm"
                    (out_dir / rel).write_bytes(raw)
                    row["image"] = rel
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_corpus(path) -> List[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.jsonl"
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            scene = None if row["scene"] is None else parse_caption(row["scene"])
            out.append(Sample(row["kind"], row["prompt"], row["target"], scene, tuple(row["canvas"]), int(row["id"])))
    return out


def load_sample_image(row: dict, base_dir) -> Optional[ImageInput]:
    """Decode the image stored for one corpus row (file or inline hex)."""
    if row.get("image_hex"):
        return from_ppm_bytes(bytes.fromhex(row["image_hex"]))
    if row.get("image"):
        return from_ppm_bytes((Path(base_dir) / row["image"]).read_bytes())
    return None
