"""Synthetic prompt-describable image world and its scoring oracles.

Scenes are 16x16x3 grids in [-1, 1]: a subject glyph (disc / square /
cross / triangle, optionally vertically stretched or striped) drawn in a
designated central-left area, plus an optional context decoration (grass,
snow, night, ball, pens) in regions disjoint from the glyph area.

Every vocabulary attribute has a pure detector returning a score in
[0, 1]:

- class nouns: normalized mask correlation against a template bank for
  the class's glyph shape (including its stretched variant and the
  triangle, so modifier-transformed renders still count as the class);
- "triangular": mask correlation against the triangle template;
- "tall": bounding-box aspect ratio of the glyph mask;
- "striped": color contrast between even and odd glyph rows;
- contexts: mean color of the context's region matched against its
  palette color.

The reward for a prompt is the arithmetic mean of the detectors named by
the prompt (identifier token stripped). All constants are exported in a
JSON manifest whose digest is embedded in checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .vocab import (
    ATTRIBUTES,
    CLASS_NOUNS,
    CONTEXTS,
    MODIFIERS,
    PromptTokens,
    WORD_TO_ID,
    WORDS,
)

HEIGHT, WIDTH, CHANNELS = 16, 16, 3
IMAGE_SHAPE = (HEIGHT, WIDTH, CHANNELS)

# Designated subject area (row/col slices) and context regions; the glyph
# must stay inside the area, contexts never touch it.
AREA_ROWS = (4, 11)
AREA_COLS = (3, 11)
BAND_ROWS = (11, 16)          # grass / snow fill
NIGHT_PROBE = ((5, 11), (12, 16))  # always-background patch used by the night detector
BALL_CENTER = (2, 12)
BALL_RADIUS = 2
PEN_COLS = (1, 3, 5)
PEN_ROWS = (0, 3)

BG_NEUTRAL = (-0.15, -0.15, -0.15)
NIGHT_BG = (-0.85, -0.85, -0.8)
CONTEXT_COLORS = {
    "grass": (-0.5, 0.7, -0.5),
    "snow": (0.92, 0.92, 0.92),
    "night": NIGHT_BG,
    "ball": (0.9, -0.6, -0.6),
    "pens": (0.9, 0.75, -0.5),
}
CLASS_COLORS = {
    "plushie": (0.2, 0.4, 0.9),
    "cup": (0.9, 0.2, 0.8),
    "pot": (0.6, 0.35, -0.3),
}
CLASS_SHAPES = {"plushie": "disc", "cup": "square", "pot": "cross"}
# Held-out unique subject: a triangle-shaped plushie in a color never
# used during pretraining.
RARE_COLOR = (-0.2, 0.9, 0.9)

NORMAL_RADII = (2, 2)
TALL_RADII = (3, 1)
STRIPE_FACTOR = 0.25
MASK_THRESHOLD = 0.25
COLOR_MATCH_SCALE = 0.9
STRIPE_SCALE = 0.4
ASPECT_SCALE = 0.8
FEATURE_HALF = 3  # subject feature crop is (2*FEATURE_HALF+1)^2


class OutOfBoundsError(ValueError):
    """Glyph would leave its designated area."""


class NullPromptError(ValueError):
    """The oracle was given the null prompt."""


def glyph_cells(shape: str, ry: int, rx: int) -> frozenset:
    """Lattice offsets (dr, dc) of a glyph centered at the origin."""
    cells = set()
    for dr in range(-ry, ry + 1):
        for dc in range(-rx, rx + 1):
            if shape == "disc":
                inside = (dr / ry) ** 2 + (dc / rx) ** 2 <= 1.0 + 1e-9
            elif shape == "square":
                inside = True
            elif shape == "cross":
                inside = dr == 0 or dc == 0
            elif shape == "triangle":
                inside = abs(dc) <= rx * (dr + ry) / (2.0 * ry) + 1e-9
            else:
                raise ValueError(f"unknown shape {shape!r}")
            if inside:
                cells.add((dr, dc))
    return frozenset(cells)


@dataclass(frozen=True)
class SubjectSpec:
    """Symbolic subject description."""

    class_id: str
    shape: str
    color: tuple[float, float, float]
    size: int = 2
    tall: bool = False
    striped: bool = False

    def __post_init__(self):
        if self.class_id not in CLASS_NOUNS:
            raise ValueError(f"unknown class {self.class_id!r}")
        if self.shape not in ("disc", "square", "cross", "triangle"):
            raise ValueError(f"unknown shape {self.shape!r}")
        for bg in (BG_NEUTRAL, NIGHT_BG):
            if max(abs(c - b) for c, b in zip(self.color, bg)) < 0.5:
                raise ValueError("subject color too close to a background color")

    def radii(self) -> tuple[int, int]:
        return TALL_RADII if self.tall else (self.size, self.size)


@dataclass(frozen=True)
class SceneSpec:
    """A subject placed in a context."""

    subject: SubjectSpec
    context: str | None = None
    position: tuple[int, int] = (0, 0)  # offset from the area center

    def __post_init__(self):
        if self.context is not None and self.context not in CONTEXTS:
            raise ValueError(f"unknown context {self.context!r}")


AREA_CENTER = ((AREA_ROWS[0] + AREA_ROWS[1] - 1) // 2, (AREA_COLS[0] + AREA_COLS[1] - 1) // 2)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Deterministic rasterization of a scene."""
    bg = NIGHT_BG if spec.context == "night" else BG_NEUTRAL
    img = np.empty(IMAGE_SHAPE)
    img[:] = bg
    if spec.context in ("grass", "snow"):
        img[BAND_ROWS[0]:BAND_ROWS[1], :] = CONTEXT_COLORS[spec.context]
    elif spec.context == "ball":
        cr, cc = BALL_CENTER
        for r in range(HEIGHT):
            for c in range(WIDTH):
                if (r - cr) ** 2 + (c - cc) ** 2 <= BALL_RADIUS ** 2:
                    img[r, c] = CONTEXT_COLORS["ball"]
    elif spec.context == "pens":
        for c in PEN_COLS:
            img[PEN_ROWS[0]:PEN_ROWS[1] + 1, c] = CONTEXT_COLORS["pens"]

    ry, rx = spec.subject.radii()
    cells = glyph_cells(spec.subject.shape, ry, rx)
    cr = AREA_CENTER[0] + spec.position[0]
    cc = AREA_CENTER[1] + spec.position[1]
    top = min(dr for dr, _ in cells)
    color = np.array(spec.subject.color)
    for dr, dc in cells:
        r, c = cr + dr, cc + dc
        if not (AREA_ROWS[0] <= r < AREA_ROWS[1] and AREA_COLS[0] <= c < AREA_COLS[1]):
            raise OutOfBoundsError(f"glyph pixel ({r}, {c}) outside the subject area")
        px = color
        if spec.subject.striped and (dr - top) % 2 == 1:
            px = color * STRIPE_FACTOR
        img[r, c] = px
    return img


# ---------------------------------------------------------------------------
# glyph extraction


def _area(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[AREA_ROWS[0]:AREA_ROWS[1], AREA_COLS[0]:AREA_COLS[1]]


def glyph_mask(image: np.ndarray) -> np.ndarray:
    """Boolean mask of subject-area pixels deviating from the area background."""
    area = _area(image)
    bg = np.median(area.reshape(-1, CHANNELS), axis=0)
    dev = np.max(np.abs(area - bg), axis=2)
    return dev > MASK_THRESHOLD


def _mask_cells(mask: np.ndarray) -> frozenset:
    """Mask pixels as offsets from the rounded mask centroid."""
    rs, cs = np.nonzero(mask)
    if rs.size == 0:
        return frozenset()
    cr = int(round(rs.mean()))
    cc = int(round(cs.mean()))
    return frozenset(zip((rs - cr).tolist(), (cs - cc).tolist()))


def _centered(cells: frozenset) -> frozenset:
    if not cells:
        return cells
    rs = np.array([r for r, _ in cells])
    cs = np.array([c for _, c in cells])
    cr = int(round(rs.mean()))
    cc = int(round(cs.mean()))
    return frozenset((r - cr, c - cc) for r, c in cells)


def _ncc(cells: frozenset, template: frozenset) -> float:
    if not cells or not template:
        return 0.0
    inter = len(cells & template)
    return inter / np.sqrt(len(cells) * len(template))


def _template_bank(shape: str) -> list[frozenset]:
    bank = [
        _centered(glyph_cells(shape, *NORMAL_RADII)),
        _centered(glyph_cells(shape, *TALL_RADII)),
    ]
    if shape != "triangle":
        bank.append(_centered(glyph_cells("triangle", *NORMAL_RADII)))
    return bank


_CLASS_BANKS = {name: _template_bank(shape) for name, shape in CLASS_SHAPES.items()}
_TRIANGLE_TEMPLATE = _centered(glyph_cells("triangle", *NORMAL_RADII))


# ---------------------------------------------------------------------------
# attribute detectors


def _detect_class(image: np.ndarray, class_id: str) -> float:
    cells = _centered(_mask_cells(glyph_mask(image)))
    score = max((_ncc(cells, t) for t in _CLASS_BANKS[class_id]), default=0.0)
    return float(np.clip(score, 0.0, 1.0))


def _detect_triangular(image: np.ndarray) -> float:
    cells = _centered(_mask_cells(glyph_mask(image)))
    return float(np.clip(_ncc(cells, _TRIANGLE_TEMPLATE), 0.0, 1.0))


def _detect_tall(image: np.ndarray) -> float:
    mask = glyph_mask(image)
    rs, cs = np.nonzero(mask)
    if rs.size == 0:
        return 0.0
    h = rs.max() - rs.min() + 1
    w = cs.max() - cs.min() + 1
    return float(np.clip((h / w - 1.0) / ASPECT_SCALE, 0.0, 1.0))


def _detect_striped(image: np.ndarray) -> float:
    mask = glyph_mask(image)
    rs, cs = np.nonzero(mask)
    if rs.size == 0:
        return 0.0
    area = _area(image)
    top = rs.min()
    even = (rs - top) % 2 == 0
    if even.all() or (~even).all():
        return 0.0
    mean_even = area[rs[even], cs[even]].mean(axis=0)
    mean_odd = area[rs[~even], cs[~even]].mean(axis=0)
    dist = float(np.max(np.abs(mean_even - mean_odd)))
    return float(np.clip(dist / STRIPE_SCALE, 0.0, 1.0))


def _detect_context(image: np.ndarray, context: str) -> float:
    img = np.asarray(image)
    if context in ("grass", "snow"):
        region = img[BAND_ROWS[0]:BAND_ROWS[1], :]
        mean = region.reshape(-1, CHANNELS).mean(axis=0)
    elif context == "night":
        (r0, r1), (c0, c1) = NIGHT_PROBE
        mean = img[r0:r1, c0:c1].reshape(-1, CHANNELS).mean(axis=0)
    elif context == "ball":
        cr, cc = BALL_CENTER
        px = [
            img[r, c]
            for r in range(HEIGHT)
            for c in range(WIDTH)
            if (r - cr) ** 2 + (c - cc) ** 2 <= BALL_RADIUS ** 2
        ]
        mean = np.mean(px, axis=0)
    elif context == "pens":
        px = [img[r, c] for c in PEN_COLS for r in range(PEN_ROWS[0], PEN_ROWS[1] + 1)]
        mean = np.mean(px, axis=0)
    else:
        raise ValueError(f"unknown context {context!r}")
    dist = float(np.max(np.abs(mean - np.array(CONTEXT_COLORS[context]))))
    return float(np.clip(1.0 - dist / COLOR_MATCH_SCALE, 0.0, 1.0))


def detect(image: np.ndarray, attribute: str) -> float:
    """Score one vocabulary attribute on an image."""
    if attribute in CLASS_NOUNS:
        return _detect_class(image, attribute)
    if attribute == "triangular":
        return _detect_triangular(image)
    if attribute == "tall":
        return _detect_tall(image)
    if attribute == "striped":
        return _detect_striped(image)
    if attribute in CONTEXTS:
        return _detect_context(image, attribute)
    raise ValueError(f"no detector for {attribute!r}")


# ---------------------------------------------------------------------------
# oracles


def text_embed(prompt: PromptTokens) -> np.ndarray:
    """Indicator vector over attributes named by the prompt (id ignored)."""
    if prompt.is_null:
        raise NullPromptError("cannot embed the null prompt")
    vec = np.zeros(len(ATTRIBUTES))
    for word in prompt.without_identifier().words():
        vec[ATTRIBUTES.index(word)] = 1.0
    return vec


def image_embed(image: np.ndarray) -> np.ndarray:
    """All attribute detector scores as a vector."""
    return np.array([detect(image, a) for a in ATTRIBUTES])


def reward(image: np.ndarray, prompt: PromptTokens, strip_identifier: bool = True) -> float:
    """Image-text alignment: mean detector score over prompt attributes."""
    if prompt.is_null:
        raise NullPromptError("cannot score the null prompt")
    scored = prompt.without_identifier() if strip_identifier else prompt
    if len(scored) == 0:
        raise NullPromptError("prompt names no attributes")
    attrs = sorted({WORDS[t] for t in scored.tokens}, key=ATTRIBUTES.index)
    return float(np.mean([detect(image, a) for a in attrs]))


def subject_features(image: np.ndarray) -> np.ndarray:
    """Translation-invariant glyph feature vector (zero mean, unit norm)."""
    mask = glyph_mask(image)
    side = 2 * FEATURE_HALF + 1
    n_feat = side * side * CHANNELS
    rs, cs = np.nonzero(mask)
    if rs.size == 0:
        return np.zeros(n_feat)
    cr = int(round(rs.mean())) + AREA_ROWS[0]
    cc = int(round(cs.mean())) + AREA_COLS[0]
    img = np.asarray(image)
    crop = img[cr - FEATURE_HALF:cr + FEATURE_HALF + 1, cc - FEATURE_HALF:cc + FEATURE_HALF + 1]
    v = crop.reshape(-1).astype(np.float64).copy()
    v -= v.mean()
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.zeros(n_feat)
    return v / n


# ---------------------------------------------------------------------------
# pretraining distribution


PRETRAIN_MODIFIERS = (None, "triangular", "striped", "tall")
PRETRAIN_CONTEXTS = (None,) + CONTEXTS
# The held-out subject combination, never emitted during pretraining.
RESERVED_COMBO = ("plushie", "triangular")


def sample_pretrain_example(rng: np.random.Generator) -> tuple[np.ndarray, PromptTokens]:
    """Draw a (rendered scene, matching prompt) pretraining pair."""
    class_id = CLASS_NOUNS[rng.integers(len(CLASS_NOUNS))]
    modifier = PRETRAIN_MODIFIERS[rng.integers(len(PRETRAIN_MODIFIERS))]
    if (class_id, modifier) == RESERVED_COMBO:
        modifier = None
    context = PRETRAIN_CONTEXTS[rng.integers(len(PRETRAIN_CONTEXTS))]
    subject = SubjectSpec(
        class_id=class_id,
        shape="triangle" if modifier == "triangular" else CLASS_SHAPES[class_id],
        color=CLASS_COLORS[class_id],
        tall=(modifier == "tall"),
        striped=(modifier == "striped"),
    )
    image = render_scene(SceneSpec(subject, context))
    words = []
    if modifier:
        words.append(modifier)
    words.append(class_id)
    if context:
        words.append(context)
    tokens = PromptTokens(tuple(WORD_TO_ID[w] for w in words))
    return image, tokens


REFERENCE_OFFSETS = ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0), (1, 1))


def rare_subject() -> SubjectSpec:
    """The unique held-out subject used for personalization."""
    return SubjectSpec(class_id="plushie", shape="triangle", color=RARE_COLOR)


def reference_images(n: int) -> list[np.ndarray]:
    """n context-free renders of the rare subject at shifted positions."""
    if not 1 <= n <= len(REFERENCE_OFFSETS):
        raise ValueError(f"n must be in [1, {len(REFERENCE_OFFSETS)}]")
    subj = rare_subject()
    return [render_scene(SceneSpec(subj, None, off)) for off in REFERENCE_OFFSETS[:n]]


# ---------------------------------------------------------------------------
# manifest


def manifest() -> dict:
    """All world constants, for bit-exact reproduction of fixtures."""
    return {
        "image_shape": list(IMAGE_SHAPE),
        "area_rows": list(AREA_ROWS),
        "area_cols": list(AREA_COLS),
        "band_rows": list(BAND_ROWS),
        "night_probe": [list(NIGHT_PROBE[0]), list(NIGHT_PROBE[1])],
        "ball_center": list(BALL_CENTER),
        "ball_radius": BALL_RADIUS,
        "pen_cols": list(PEN_COLS),
        "pen_rows": list(PEN_ROWS),
        "bg_neutral": list(BG_NEUTRAL),
        "night_bg": list(NIGHT_BG),
        "context_colors": {k: list(v) for k, v in CONTEXT_COLORS.items()},
        "class_colors": {k: list(v) for k, v in CLASS_COLORS.items()},
        "class_shapes": dict(CLASS_SHAPES),
        "rare_color": list(RARE_COLOR),
        "normal_radii": list(NORMAL_RADII),
        "tall_radii": list(TALL_RADII),
        "stripe_factor": STRIPE_FACTOR,
        "mask_threshold": MASK_THRESHOLD,
        "color_match_scale": COLOR_MATCH_SCALE,
        "stripe_scale": STRIPE_SCALE,
        "aspect_scale": ASPECT_SCALE,
        "feature_half": FEATURE_HALF,
        "reserved_combo": list(RESERVED_COMBO),
        "attributes": list(ATTRIBUTES),
    }


def manifest_digest() -> str:
    blob = json.dumps(manifest(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
