"""Procedural RAVEN-style puzzles.

Each puzzle is a 3x3 matrix of panels. Every panel is described by a small
attribute tuple (shape, size, shade, count, rotation); one to three of the
ordinal/nominal attributes follow a row rule shared by all three rows. The
bottom-right panel is removed and hidden among seven distractors, each of which
differs from the answer in exactly one rule-governed attribute.

Rotation is pure noise: it is re-drawn for every panel and never governed by a
rule, so pixel matching alone cannot solve a puzzle.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    FormatError,
    GenerationExhausted,
    InconsistentPrefix,
    RangeViolation,
    TruncatedFile,
)

SHAPES = ("triangle", "square", "pentagon", "hexagon", "circle")
ATTRIBUTES = ("shape_type", "size", "shade", "count")
KINDS = ("Constant", "Progression", "Arithmetic", "DistributeThree")

DOMAINS: dict[str, tuple[int, ...]] = {
    "shape_type": tuple(range(0, 5)),
    "size": tuple(range(1, 6)),
    "shade": tuple(range(0, 5)),
    "count": tuple(range(1, 5)),
}
ALLOWED_KINDS: dict[str, tuple[str, ...]] = {
    "shape_type": ("Constant", "Progression", "DistributeThree"),
    "size": KINDS,
    "shade": KINDS,
    "count": KINDS,
}
PROGRESSION_STEPS = (-2, -1, 1, 2)

# gray value per shade level, 0 = lightest; background is white
SHADE_LEVELS = (200, 160, 120, 80, 0)
BACKGROUND = 255
# 2x2 layout slots (col, row) in fill order
LAYOUT_SLOTS = ((0, 0), (1, 1), (1, 0), (0, 1))

FORMAT_VERSION = "dircr-pzl-v1"
BLOB_MAGIC = b"DIRCRPZL"
BLOB_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "puzzles.bin"
MAX_RETRIES = 1000

FULL_SPLITS = {"train": 42_000, "val": 14_000, "test": 14_000}


@dataclass(frozen=True)
class PanelAttributes:
    shape_type: int
    size: int
    shade: int
    count: int
    rotation: int = 0

    def __post_init__(self):
        for name in ATTRIBUTES:
            if getattr(self, name) not in DOMAINS[name]:
                raise ValueError(f"{name}={getattr(self, name)} out of range")
        if not 0 <= self.rotation <= 7:
            raise ValueError(f"rotation={self.rotation} out of range")

    def get(self, attribute: str) -> int:
        return getattr(self, attribute)

    def with_value(self, attribute: str, value: int) -> "PanelAttributes":
        return replace(self, **{attribute: value})

    def to_list(self) -> list[int]:
        return [self.shape_type, self.size, self.shade, self.count, self.rotation]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "PanelAttributes":
        return cls(*(int(v) for v in values))


@dataclass(frozen=True)
class RuleSpec:
    attribute: str
    kind: str
    param: int | tuple[int, int, int] = 0

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        if self.kind not in ALLOWED_KINDS[self.attribute]:
            raise ValueError(f"{self.kind} not allowed on {self.attribute}")
        if self.kind == "Progression" and self.param not in PROGRESSION_STEPS:
            raise ValueError(f"bad progression step {self.param}")
        if self.kind == "Arithmetic" and self.param not in (1, -1):
            raise ValueError(f"bad arithmetic sign {self.param}")
        if self.kind == "DistributeThree":
            triple = tuple(int(v) for v in self.param)
            domain = DOMAINS[self.attribute]
            if len(triple) != 3 or len(set(triple)) != 3 or any(v not in domain for v in triple):
                raise ValueError(f"bad value triple {self.param}")
            object.__setattr__(self, "param", triple)

    def to_dict(self) -> dict:
        param = list(self.param) if isinstance(self.param, tuple) else self.param
        return {"attribute": self.attribute, "kind": self.kind, "param": param}

    @classmethod
    def from_dict(cls, d: dict) -> "RuleSpec":
        param = d.get("param", 0)
        if isinstance(param, list):
            param = tuple(param)
        return cls(d["attribute"], d["kind"], param)


def row_satisfies(rule: RuleSpec, values: Sequence[int]) -> bool:
    """Check a full row of three values directly against the rule definition."""
    a, b, c = values
    if rule.kind == "Constant":
        return a == b == c
    if rule.kind == "Progression":
        return b - a == rule.param and c - b == rule.param
    if rule.kind == "Arithmetic":
        return c == a + rule.param * b
    return sorted((a, b, c)) == sorted(rule.param)


def apply_rule(rule: RuleSpec, v1: int, v2: int) -> int:
    """Return the third row value forced by ``rule`` given the first two."""
    domain = DOMAINS[rule.attribute]
    if v1 not in domain or v2 not in domain:
        raise InconsistentPrefix(f"({v1}, {v2}) outside {rule.attribute} range")
    if rule.kind == "Constant":
        if v1 != v2:
            raise InconsistentPrefix(f"Constant rule needs v1 == v2, got ({v1}, {v2})")
        out = v1
    elif rule.kind == "Progression":
        if v2 - v1 != rule.param:
            raise InconsistentPrefix(f"step {rule.param} does not match ({v1}, {v2})")
        out = v2 + rule.param
    elif rule.kind == "Arithmetic":
        out = v1 + rule.param * v2
    else:
        rest = [v for v in rule.param if v not in (v1, v2)]
        if v1 == v2 or len(rest) != 1:
            raise InconsistentPrefix(f"({v1}, {v2}) not two distinct members of {rule.param}")
        out = rest[0]
    if out not in domain:
        raise RangeViolation(f"{rule.kind} forces {out}, outside {rule.attribute} range")
    return out


def valid_prefixes(rule: RuleSpec) -> list[tuple[int, int]]:
    domain = DOMAINS[rule.attribute]
    pairs = []
    for v1 in domain:
        for v2 in domain:
            try:
                apply_rule(rule, v1, v2)
            except (InconsistentPrefix, RangeViolation):
                continue
            pairs.append((v1, v2))
    return pairs


def _sample_param(rng: np.random.Generator, attribute: str, kind: str):
    if kind == "Progression":
        return int(rng.choice(PROGRESSION_STEPS))
    if kind == "Arithmetic":
        return int(rng.choice((1, -1)))
    if kind == "DistributeThree":
        return tuple(int(v) for v in rng.choice(DOMAINS[attribute], size=3, replace=False))
    return 0


def sample_rule_specs(
    rng: np.random.Generator, n_rules: int, kinds: Iterable[str] | None = None
) -> list[RuleSpec]:
    if not 1 <= n_rules <= 3:
        raise ValueError("n_rules must be in 1..3")
    kinds = tuple(KINDS if kinds is None else kinds)
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown rule kind {k!r}")
    eligible = [a for a in ATTRIBUTES if any(k in ALLOWED_KINDS[a] for k in kinds)]
    if len(eligible) < n_rules:
        raise ValueError(f"kinds {kinds} cannot cover {n_rules} distinct attributes")

    chosen = rng.choice(len(eligible), size=n_rules, replace=False)
    specs = []
    for idx in chosen:
        attribute = eligible[int(idx)]
        options = [k for k in kinds if k in ALLOWED_KINDS[attribute]]
        while True:
            kind = options[int(rng.integers(len(options)))]
            spec = RuleSpec(attribute, kind, _sample_param(rng, attribute, kind))
            if valid_prefixes(spec):
                break
        specs.append(spec)
    return specs


@lru_cache(maxsize=8)
def _pixel_centres(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(image_size) + 0.5
    return np.meshgrid(coords, coords)


def render_panel(attrs: PanelAttributes, image_size: int) -> np.ndarray:
    return _render_cached(attrs, image_size).copy()


@lru_cache(maxsize=16384)
def _render_cached(attrs: PanelAttributes, image_size: int) -> np.ndarray:
    """Rasterize a panel to an ``image_size`` x ``image_size`` uint8 array.

    Pixels are sampled at their centres; a pixel is filled when the centre lies
    inside the shape, so output is exact and platform independent.
    """
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    s = float(image_size)
    img = np.full((image_size, image_size), BACKGROUND, dtype=np.uint8)
    xx, yy = _pixel_centres(image_size)
    cell = s / 2.0
    radius = (cell / 2.0) * (0.48 + 0.12 * (attrs.size - 1))
    gray = SHADE_LEVELS[attrs.shade]
    theta0 = -np.pi / 2 + attrs.rotation * np.pi / 4

    for col, row in LAYOUT_SLOTS[: attrs.count]:
        cx, cy = (col + 0.5) * cell, (row + 0.5) * cell
        # each shape lies inside its own layout cell
        win = (
            slice(int(np.floor(row * cell)), int(np.ceil((row + 1) * cell))),
            slice(int(np.floor(col * cell)), int(np.ceil((col + 1) * cell))),
        )
        x, y = xx[win], yy[win]
        if SHAPES[attrs.shape_type] == "circle":
            mask = (x - cx) ** 2 + (y - cy) ** 2 <= radius**2
        else:
            n = attrs.shape_type + 3
            angles = theta0 + 2 * np.pi * np.arange(n) / n
            vx = np.round(cx + radius * np.cos(angles), 6)
            vy = np.round(cy + radius * np.sin(angles), 6)
            mask = np.ones_like(x, dtype=bool)
            for i in range(n):
                x0, y0, x1, y1 = vx[i], vy[i], vx[(i + 1) % n], vy[(i + 1) % n]
                # vertices run clockwise in image coordinates (y down)
                mask &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
        img[win][mask] = gray
    img.flags.writeable = False
    return img


@dataclass(eq=False)
class Puzzle:
    context: np.ndarray  # [8, H, W] uint8
    candidates: np.ndarray  # [8, H, W] uint8
    answer_index: int
    rules: list[RuleSpec]
    seed: int
    context_attrs: list[PanelAttributes] = field(default_factory=list)
    candidate_attrs: list[PanelAttributes] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return int(self.context.shape[-1])

    @property
    def answer(self) -> np.ndarray:
        return self.candidates[self.answer_index]

    def metadata(self) -> dict:
        return {
            "rules": [r.to_dict() for r in self.rules],
            "seed": int(self.seed),
            "context_attrs": [a.to_list() for a in self.context_attrs],
            "candidate_attrs": [a.to_list() for a in self.candidate_attrs],
        }

    def __eq__(self, other):
        if not isinstance(other, Puzzle):
            return NotImplemented
        return (
            np.array_equal(self.context, other.context)
            and np.array_equal(self.candidates, other.candidates)
            and self.answer_index == other.answer_index
            and self.metadata() == other.metadata()
        )


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 80
    n_rules: int = 1
    kinds: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 1 <= self.n_rules <= 3:
            raise ValueError("n_rules must be in 1..3")
        if self.kinds is not None:
            kinds = tuple(self.kinds)
            if not kinds or any(k not in KINDS for k in kinds):
                raise ValueError(f"kinds must be a non-empty subset of {KINDS}")
            object.__setattr__(self, "kinds", kinds)


def _row_values(rng: np.random.Generator, rule: RuleSpec) -> list[list[int]]:
    if rule.kind == "DistributeThree":
        t = list(rule.param)
        return [t[i:] + t[:i] for i in range(3)]
    prefixes = valid_prefixes(rule)
    rows = []
    for _ in range(3):
        v1, v2 = prefixes[int(rng.integers(len(prefixes)))]
        rows.append([v1, v2, apply_rule(rule, v1, v2)])
    return rows


def generate_puzzle(seed: int | np.random.Generator, cfg: GenConfig = GenConfig()) -> Puzzle:
    """Generate one puzzle. An integer seed is recorded on the puzzle; a
    Generator is used to draw that seed first."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    if cfg.image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    rules = sample_rule_specs(rng, cfg.n_rules, cfg.kinds)
    governed = [r.attribute for r in rules]

    for _ in range(MAX_RETRIES):
        base = {a: int(rng.choice(DOMAINS[a])) for a in ATTRIBUTES}
        grid = [[dict(base) for _ in range(3)] for _ in range(3)]
        for rule in rules:
            for r, row in enumerate(_row_values(rng, rule)):
                for c, v in enumerate(row):
                    grid[r][c][rule.attribute] = v
        panels = [
            PanelAttributes(**grid[r][c], rotation=int(rng.integers(8)))
            for r in range(3)
            for c in range(3)
        ]
        answer = panels[8]
        images = [_render_cached(p, cfg.image_size) for p in panels]
        cand_attrs = [answer]
        cand_imgs = [images[8]]
        seen = {images[8].tobytes()}
        ok = True
        for _ in range(7):
            for _try in range(50):
                attribute = governed[int(rng.integers(len(governed)))]
                violating = [v for v in DOMAINS[attribute] if v != answer.get(attribute)]
                value = int(rng.choice(violating))
                d = answer.with_value(attribute, value)
                d = replace(d, rotation=int(rng.integers(8)))
                img = _render_cached(d, cfg.image_size)
                if img.tobytes() not in seen:
                    break
            else:
                ok = False
                break
            seen.add(img.tobytes())
            cand_attrs.append(d)
            cand_imgs.append(img)
        if not ok:
            continue
        order = rng.permutation(8)
        answer_index = int(np.flatnonzero(order == 0)[0])
        puzzle = Puzzle(
            context=np.stack(images[:8]),
            candidates=np.stack([cand_imgs[i] for i in order]),
            answer_index=answer_index,
            rules=rules,
            seed=int(seed),
            context_attrs=panels[:8],
            candidate_attrs=[cand_attrs[i] for i in order],
        )
        if validate_puzzle(puzzle, check_render=False):
            return puzzle
    raise GenerationExhausted(f"no valid puzzle after {MAX_RETRIES} attempts (seed={seed})")


def validate_puzzle(p: Puzzle, check_render: bool = True) -> bool:
    """Brute-force oracle: rows 1-2 satisfy every rule and exactly one candidate
    completes row 3, at ``answer_index``."""
    if len(p.context_attrs) != 8 or len(p.candidate_attrs) != 8:
        return False
    if p.context.shape[0] != 8 or p.candidates.shape[0] != 8:
        return False
    if check_render:
        size = p.image_size
        for attrs, img in zip(p.context_attrs + p.candidate_attrs, list(p.context) + list(p.candidates)):
            if not np.array_equal(_render_cached(attrs, size), img):
                return False
    ctx = p.context_attrs
    for rule in p.rules:
        a = rule.attribute
        for r in range(2):
            if not row_satisfies(rule, [ctx[3 * r + c].get(a) for c in range(3)]):
                return False
    hits = [
        j
        for j, cand in enumerate(p.candidate_attrs)
        if all(
            row_satisfies(rule, [ctx[6].get(rule.attribute), ctx[7].get(rule.attribute), cand.get(rule.attribute)])
            for rule in p.rules
        )
    ]
    return hits == [p.answer_index]


def puzzle_seed(dataset_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(dataset_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _gen_one(args):
    seed, cfg = args
    return generate_puzzle(seed, cfg)


def generate_dataset(count: int, seed: int, cfg: GenConfig = GenConfig(), workers: int = 1) -> list[Puzzle]:
    """Per-puzzle seeds derive from (seed, index), so output is independent of ``workers``."""
    jobs = [(puzzle_seed(seed, i), cfg) for i in range(count)]
    if workers <= 1:
        return [_gen_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_gen_one, jobs, chunksize=64))


def rule_histogram(puzzles: Iterable[Puzzle]) -> dict[str, int]:
    hist = Counter(r.kind for p in puzzles for r in p.rules)
    return {k: hist[k] for k in KINDS if hist[k]}


def write_dataset(
    puzzles: Sequence[Puzzle], path: str | Path, split: str = "train", seed: int = 0
) -> Path:
    """Write ``manifest.json`` + ``puzzles.bin`` into directory ``path``."""
    if not puzzles:
        raise ValueError("cannot write an empty dataset")
    size = puzzles[0].image_size
    if any(p.image_size != size for p in puzzles):
        raise ValueError("puzzles have mixed image sizes")
    if split not in FULL_SPLITS:
        raise ValueError(f"unknown split {split!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    with open(path / BLOB_NAME, "wb") as f:
        f.write(BLOB_MAGIC + struct.pack("<HH", BLOB_VERSION, size))
        for p in puzzles:
            f.write(np.ascontiguousarray(p.context, dtype=np.uint8).tobytes())
            f.write(np.ascontiguousarray(p.candidates, dtype=np.uint8).tobytes())
            meta = json.dumps(p.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
            f.write(struct.pack("<BH", p.answer_index, len(meta)))
            f.write(meta)

    manifest = {
        "version": FORMAT_VERSION,
        "count": len(puzzles),
        "image_size": size,
        "rule_histogram": rule_histogram(puzzles),
        "split": split,
        "seed": int(seed),
        "blob": BLOB_NAME,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {manifest.get('version')!r}")
    return manifest


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"expected {n} bytes, got {len(buf)}")
    return buf


def load_dataset(path: str | Path) -> list[Puzzle]:
    path = Path(path)
    manifest = read_manifest(path)
    size = int(manifest["image_size"])
    panel_bytes = 8 * size * size
    puzzles = []
    with open(path / manifest.get("blob", BLOB_NAME), "rb") as f:
        header = f.read(len(BLOB_MAGIC) + 4)
        if len(header) < len(BLOB_MAGIC) + 4 or header[: len(BLOB_MAGIC)] != BLOB_MAGIC:
            raise FormatError("bad blob magic")
        version, blob_size = struct.unpack("<HH", header[len(BLOB_MAGIC):])
        if version != BLOB_VERSION or blob_size != size:
            raise FormatError(f"blob version/size mismatch ({version}, {blob_size})")
        for _ in range(int(manifest["count"])):
            ctx = np.frombuffer(_read_exact(f, panel_bytes), dtype=np.uint8).reshape(8, size, size)
            cand = np.frombuffer(_read_exact(f, panel_bytes), dtype=np.uint8).reshape(8, size, size)
            answer, n_meta = struct.unpack("<BH", _read_exact(f, 3))
            meta = json.loads(_read_exact(f, n_meta).decode("utf-8"))
            puzzles.append(
                Puzzle(
                    context=ctx.copy(),
                    candidates=cand.copy(),
                    answer_index=int(answer),
                    rules=[RuleSpec.from_dict(r) for r in meta["rules"]],
                    seed=int(meta["seed"]),
                    context_attrs=[PanelAttributes.from_list(a) for a in meta["context_attrs"]],
                    candidate_attrs=[PanelAttributes.from_list(a) for a in meta["candidate_attrs"]],
                )
            )
        if f.read(1):
            raise FormatError("trailing bytes after last record")
    return puzzles


def dataset_digest(path: str | Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for name in (MANIFEST_NAME, BLOB_NAME):
        h.update((path / name).read_bytes())
    return h.hexdigest()


def puzzles_to_arrays(puzzles: Sequence[Puzzle]) -> tuple[np.ndarray, np.ndarray]:
    """Stack into ``[N, 16, H, W]`` uint8 panels (context then candidates) and ``[N]`` answers."""
    panels = np.stack([np.concatenate([p.context, p.candidates]) for p in puzzles])
    answers = np.array([p.answer_index for p in puzzles], dtype=np.int64)
    return panels, answers
