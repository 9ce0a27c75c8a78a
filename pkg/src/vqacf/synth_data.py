"""Synthetic shapes-VQA dataset with exact ground-truth object masks.

Scenes contain 1..max_objects non-overlapping colored shapes on a uniform
background. Questions are templated ("what color is the circle", "what shape
is the red object") with a closed vocabulary, so every answer can be checked
against the scene graph directly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle")

DEFAULT_PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.05),
    "cyan": (0.10, 0.85, 0.85),
    "gray": (0.50, 0.50, 0.50),
}

TEMPLATE_WORDS = ("what", "color", "shape", "is", "the", "object")

# Bounded retry counts for rejection sampling.
_MAX_PLACEMENT_TRIES = 200
_MAX_SCENE_RETRIES = 64


class PlacementError(RuntimeError):
    """Raised when no valid object placement exists after bounded retries."""


class TemplateExhaustionError(RuntimeError):
    """Raised when a scene offers no unique referent for the question template."""


class VocabularyError(ValueError):
    """Raised on tokens outside the closed question vocabulary."""


class BalanceError(RuntimeError):
    """Raised when the answer-frequency cap cannot be satisfied."""


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: int  # palette index
    center: tuple[int, int]  # (row, col)
    size: int  # half-extent in pixels


@dataclass(frozen=True)
class SceneSpec:
    background_color: int
    objects: tuple[ObjectSpec, ...]
    seed: int


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    question: list[int]  # token ids
    question_text: str
    answer: int  # answer-vocabulary index
    masks: list[np.ndarray]  # per-object (h, w) bool
    question_type: str  # "color" | "shape"
    target_object: int
    scene: SceneSpec
    seed: int


@dataclass
class DatasetConfig:
    h: int = 64
    w: int = 64
    max_objects: int = 3
    min_size: int = 5
    max_size: int = 10
    palette: dict[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PALETTE)
    )
    question_types: tuple[str, ...] = ("color", "shape")
    answer_cap: float = 0.4
    train_size: int = 2000
    val_size: int = 500
    train_seed: int = 1_000_000
    val_seed: int = 9_000_000

    def color_names(self) -> list[str]:
        return list(self.palette.keys())

    def answer_vocab(self) -> list[str]:
        return self.color_names() + list(SHAPES)

    def question_vocab(self) -> list[str]:
        return list(TEMPLATE_WORDS) + self.color_names() + list(SHAPES)


def tokenize(text: str, vocab: list[str]) -> list[int]:
    """Whitespace tokenization over the closed vocabulary; unknown tokens raise."""
    index = {w: i for i, w in enumerate(vocab)}
    ids = []
    for tok in text.lower().split():
        if tok not in index:
            raise VocabularyError(f"token {tok!r} not in question vocabulary")
        ids.append(index[tok])
    return ids


def detokenize(ids: list[int], vocab: list[str]) -> str:
    return " ".join(vocab[i] for i in ids)


def _boxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    # boxes are (top, bottom, left, right) inclusive; 1px gap required
    return not (a[1] + 1 < b[0] or b[1] + 1 < a[0] or a[3] + 1 < b[2] or b[3] + 1 < a[2])


def generate_scene(seed: int, config: DatasetConfig) -> SceneSpec:
    """Sample a scene satisfying all placement invariants, deterministic in (seed, config)."""
    if not config.palette:
        raise ValueError("palette must be nonempty")
    if config.max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    rng = np.random.default_rng(seed)
    n_colors = len(config.palette)
    n_objects = int(rng.integers(1, config.max_objects + 1))
    background = int(rng.integers(0, n_colors))

    objects: list[ObjectSpec] = []
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(n_objects):
        placed = False
        for _ in range(_MAX_PLACEMENT_TRIES):
            shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
            color = int(rng.integers(0, n_colors))
            if color == background:
                continue
            size = int(rng.integers(config.min_size, config.max_size + 1))
            # full fit inside bounds with a 1px margin
            if 2 * size + 4 >= min(config.h, config.w):
                continue
            cy = int(rng.integers(size + 1, config.h - size - 1))
            cx = int(rng.integers(size + 1, config.w - size - 1))
            box = (cy - size, cy + size, cx - size, cx + size)
            if any(_boxes_overlap(box, other) for other in boxes):
                continue
            objects.append(ObjectSpec(shape, color, (cy, cx), size))
            boxes.append(box)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place object {len(objects)} for seed {seed}")
    return SceneSpec(background_color=background, objects=tuple(objects), seed=seed)


def _shape_mask(obj: ObjectSpec, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = obj.center
    s = obj.size
    if obj.shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= s * s
    if obj.shape == "square":
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    if obj.shape == "triangle":
        # upward isoceles triangle: apex at (cy - s), base at (cy + s)
        t = yy - (cy - s)
        return (t >= 0) & (t <= 2 * s) & (np.abs(xx - cx) <= t / 2.0)
    raise ValueError(f"unknown shape {obj.shape!r}")


def render(scene: SceneSpec, h: int, w: int, config: DatasetConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rasterize a scene to an image in [0,1] and one binary mask per object."""
    if h < 32 or w < 32:
        raise ValueError("image size must be at least 32x32")
    colors = np.asarray(list(config.palette.values()), dtype=np.float32)
    image = np.empty((h, w, 3), dtype=np.float32)
    image[:] = colors[scene.background_color]
    masks = []
    for obj in scene.objects:
        mask = _shape_mask(obj, h, w)
        image[mask] = colors[obj.color]
        masks.append(mask)
    return image, masks


def _unique_referents(scene: SceneSpec, qtype: str) -> list[int]:
    """Indices of objects uniquely identified by the template's referent attribute."""
    if qtype == "color":
        # referent is the shape word, so the shape must be unique in the scene
        counts: dict[str, int] = {}
        for obj in scene.objects:
            counts[obj.shape] = counts.get(obj.shape, 0) + 1
        return [i for i, obj in enumerate(scene.objects) if counts[obj.shape] == 1]
    if qtype == "shape":
        counts_c: dict[int, int] = {}
        for obj in scene.objects:
            counts_c[obj.color] = counts_c.get(obj.color, 0) + 1
        return [i for i, obj in enumerate(scene.objects) if counts_c[obj.color] == 1]
    raise ValueError(f"unknown question type {qtype!r}")


def make_question(
    scene: SceneSpec, qtype: str, rng: np.random.Generator, config: DatasetConfig
) -> tuple[list[int], int, int]:
    """Build (token ids, answer index, target object) for one templated question."""
    candidates = _unique_referents(scene, qtype)
    if not candidates:
        raise TemplateExhaustionError(f"no unique {qtype} referent in scene (seed {scene.seed})")
    target = int(candidates[int(rng.integers(0, len(candidates)))])
    obj = scene.objects[target]
    color_names = config.color_names()
    if qtype == "color":
        text = f"what color is the {obj.shape}"
        answer = config.answer_vocab().index(color_names[obj.color])
    else:
        text = f"what shape is the {color_names[obj.color]} object"
        answer = config.answer_vocab().index(obj.shape)
    return tokenize(text, config.question_vocab()), answer, target


def make_sample(seed: int, config: DatasetConfig, qtype: str) -> Sample:
    """Generate one sample, retrying with derived seeds when no referent exists."""
    for retry in range(_MAX_SCENE_RETRIES):
        scene_seed = seed if retry == 0 else seed * 1_000_003 + retry
        scene = generate_scene(scene_seed, config)
        try:
            rng = np.random.default_rng(scene_seed + 17)
            tokens, answer, target = make_question(scene, qtype, rng, config)
        except TemplateExhaustionError:
            continue
        image, masks = render(scene, config.h, config.w, config)
        return Sample(
            sample_id=f"{qtype}_{seed:08d}",
            image=image,
            question=tokens,
            question_text=detokenize(tokens, config.question_vocab()),
            answer=answer,
            masks=masks,
            question_type=qtype,
            target_object=target,
            scene=scene,
            seed=scene_seed,
        )
    raise TemplateExhaustionError(f"no usable scene after {_MAX_SCENE_RETRIES} retries (seed {seed})")


def _answer_cap_count(target: int, n_answers: int, cap: float) -> int:
    # floor(cap * target) keeps the frequency bound tight; the ceil term keeps
    # the quota feasible for small answer spaces (3 shapes)
    return max(math.floor(cap * target), math.ceil(target / n_answers))


def generate_split(config: DatasetConfig, size: int, base_seed: int) -> list[Sample]:
    """Generate `size` samples, balanced across question types and answer-capped."""
    per_type = {q: size // len(config.question_types) for q in config.question_types}
    for q in config.question_types[: size % len(config.question_types)]:
        per_type[q] += 1
    n_answers = {"color": len(config.palette), "shape": len(SHAPES)}
    caps = {
        q: _answer_cap_count(per_type[q], n_answers[q], config.answer_cap)
        for q in config.question_types
    }
    counts: dict[str, dict[int, int]] = {q: {} for q in config.question_types}
    accepted: dict[str, list[Sample]] = {q: [] for q in config.question_types}

    cursor = 0
    budget = 400 * size + 1000
    while any(len(accepted[q]) < per_type[q] for q in config.question_types):
        if cursor >= budget:
            raise BalanceError("answer-frequency cap unsatisfiable within the sampling budget")
        qtype = config.question_types[cursor % len(config.question_types)]
        cursor += 1
        if len(accepted[qtype]) >= per_type[qtype]:
            continue
        sample = make_sample(base_seed + cursor, config, qtype)
        taken = counts[qtype].get(sample.answer, 0)
        if taken >= caps[qtype]:
            continue
        counts[qtype][sample.answer] = taken + 1
        accepted[qtype].append(sample)

    out: list[Sample] = []
    for q in config.question_types:
        out.extend(accepted[q])
    return out


def generate_dataset(config: DatasetConfig) -> dict[str, list[Sample]]:
    return {
        "train": generate_split(config, config.train_size, config.train_seed),
        "val": generate_split(config, config.val_size, config.val_seed),
    }


def lookup_answer(scene: SceneSpec, question_type: str, target_object: int, config: DatasetConfig) -> int:
    """Independent scene-graph answer lookup, used as the soundness oracle."""
    obj = scene.objects[target_object]
    vocab = config.answer_vocab()
    if question_type == "color":
        return vocab.index(config.color_names()[obj.color])
    return vocab.index(obj.shape)


# ---------------------------------------------------------------------------
# on-disk format: PNG images/masks plus a JSONL manifest


def _save_png(path: Path, array: np.ndarray) -> None:
    if array.ndim == 2:  # binary mask
        Image.fromarray((array.astype(np.uint8)) * 255, mode="L").save(path)
    else:
        Image.fromarray(np.round(array * 255.0).astype(np.uint8), mode="RGB").save(path)


def save_dataset(splits: dict[str, list[Sample]], out_dir: str | Path, config: DatasetConfig) -> None:
    out = Path(out_dir)
    for split, samples in splits.items():
        img_dir = out / split / "images"
        mask_dir = out / split / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for s in samples:
            image_path = img_dir / f"{s.sample_id}.png"
            _save_png(image_path, s.image)
            mask_paths = []
            for k, mask in enumerate(s.masks):
                mp = mask_dir / f"{s.sample_id}_obj{k}.png"
                _save_png(mp, mask)
                mask_paths.append(str(mp.relative_to(out)))
            records.append(
                {
                    "sample_id": s.sample_id,
                    "image_path": str(image_path.relative_to(out)),
                    "question_tokens": s.question,
                    "question_text": s.question_text,
                    "answer": config.answer_vocab()[s.answer],
                    "question_type": s.question_type,
                    "target_object": s.target_object,
                    "mask_paths": mask_paths,
                    "seed": s.seed,
                    "scene": {
                        "background_color": s.scene.background_color,
                        "objects": [dataclasses.asdict(o) for o in s.scene.objects],
                        "seed": s.scene.seed,
                    },
                }
            )
        with open(out / split / "manifest.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    with open(out / "dataset_config.json", "w") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2)


def load_dataset(root: str | Path, split: str, config: DatasetConfig | None = None) -> list[Sample]:
    root = Path(root)
    if config is None:
        with open(root / "dataset_config.json") as fh:
            raw = json.load(fh)
        raw["palette"] = {k: tuple(v) for k, v in raw["palette"].items()}
        raw["question_types"] = tuple(raw["question_types"])
        config = DatasetConfig(**raw)
    vocab = config.answer_vocab()
    samples = []
    with open(root / split / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            image = np.asarray(Image.open(root / rec["image_path"]), dtype=np.float32) / 255.0
            masks = [
                np.asarray(Image.open(root / mp)) > 127 for mp in rec["mask_paths"]
            ]
            scene = SceneSpec(
                background_color=rec["scene"]["background_color"],
                objects=tuple(
                    ObjectSpec(
                        shape=o["shape"],
                        color=o["color"],
                        center=tuple(o["center"]),
                        size=o["size"],
                    )
                    for o in rec["scene"]["objects"]
                ),
                seed=rec["scene"]["seed"],
            )
            samples.append(
                Sample(
                    sample_id=rec["sample_id"],
                    image=image,
                    question=list(rec["question_tokens"]),
                    question_text=rec["question_text"],
                    answer=vocab.index(rec["answer"]),
                    masks=masks,
                    question_type=rec["question_type"],
                    target_object=rec["target_object"],
                    scene=scene,
                    seed=rec["seed"],
                )
            )
    return samples
