"""Synthetic moving-shape video generator.

Scenes contain textured target objects (discs, squares, triangles) and
distractors that share the targets' textures, all moving along smooth
splines in front of a textured background.  Occlusion events steer a pair
of entities together so their silhouettes overlap mid-event.  Output is
deterministic in the scenario seed: frames as P6 pixmaps, index masks as
P5 graymaps, and a key=value meta file.

The shape families double as a category split: discs and squares are the
training family, triangles are held out as the unseen family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pnm import write_pgm, write_ppm

TRAIN_SHAPES = ("disc", "square")
UNSEEN_SHAPES = ("triangle",)


@dataclass
class SyntheticScenario:
    seed: int
    size: tuple = (64, 64)             # (height, width)
    num_objects: int = 1
    num_frames: int = 24
    shape_family: str = "train"        # train | unseen | all
    shapes: tuple = ()                 # explicit per-object override
    num_distractors: int = 1
    occlusion_events: tuple = ()       # ((start, end), ...); () = one auto event
    drift_rate: float = 0.01           # appearance drift per frame
    split: str = "train"               # meta tag: train | seen | unseen


@dataclass
class _Entity:
    shape: str
    radius: float
    texture: int
    control: np.ndarray        # (4, 2) spline control points, (y, x)
    rot_speed: float
    z: float
    is_target: bool
    target_id: int = 0


def _family_shapes(family: str) -> tuple:
    if family == "train":
        return TRAIN_SHAPES
    if family == "unseen":
        return UNSEEN_SHAPES
    if family == "all":
        return TRAIN_SHAPES + UNSEEN_SHAPES
    raise ConfigError(f"unknown shape family {family!r}")


def _catmull_rom(points: np.ndarray, t: float) -> np.ndarray:
    """Smooth interpolation through the control points at t in [0, 1]."""
    n = len(points) - 1
    s = t * n
    i = min(int(s), n - 1)
    u = s - i
    p0 = points[max(i - 1, 0)]
    p1 = points[i]
    p2 = points[i + 1]
    p3 = points[min(i + 2, n)]
    return 0.5 * (
        (2 * p1)
        + (-p0 + p2) * u
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u * u
        + (-p0 + 3 * p1 - 3 * p2 + p3) * u * u * u
    )


def _texture(tex_id: int, ys: np.ndarray, xs: np.ndarray, t: int, drift: float) -> np.ndarray:
    """Procedural RGB texture, deterministic in its id; drifts over time."""
    trng = np.random.default_rng(1000 + tex_id)
    base = trng.uniform(0.25, 0.9, size=3)
    angle = trng.uniform(0, np.pi)
    period = trng.uniform(4.0, 9.0)
    phase = trng.uniform(0, 2 * np.pi) + drift * t * 2 * np.pi
    kind = tex_id % 3
    if kind == 0:
        wave = np.sin((xs * np.cos(angle) + ys * np.sin(angle)) * 2 * np.pi / period + phase)
    elif kind == 1:
        wave = np.sign(np.sin(xs * 2 * np.pi / period + phase) * np.sin(ys * 2 * np.pi / period))
    else:
        wave = np.cos(np.hypot(ys - ys.mean(), xs - xs.mean()) * 2 * np.pi / period + phase)
    shade = 0.5 + 0.5 * wave
    color_drift = 1.0 + drift * t * trng.uniform(-1.0, 1.0, size=3)
    rgb = base[None, None, :] * (0.55 + 0.45 * shade[:, :, None]) * color_drift[None, None, :]
    return np.clip(rgb, 0.0, 1.0)


def _shape_mask(shape: str, ys, xs, center, radius: float, angle: float) -> np.ndarray:
    dy = ys - center[0]
    dx = xs - center[1]
    if shape != "disc" and angle:
        c, s = math.cos(angle), math.sin(angle)
        dy, dx = c * dy - s * dx, s * dy + c * dx
    if shape == "disc":
        return dy * dy + dx * dx <= radius * radius
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= radius
    if shape == "triangle":
        return _triangle(dy, dx, radius)
    raise ConfigError(f"unknown shape {shape!r}")


def _triangle(dy, dx, radius: float) -> np.ndarray:
    # apex at (-r, 0), base corners at (r/2, +-r*sqrt(3)/2)
    apex = np.array([-radius, 0.0])
    left = np.array([radius / 2.0, -radius * math.sqrt(3) / 2.0])
    right = np.array([radius / 2.0, radius * math.sqrt(3) / 2.0])

    def half_plane(a, b):
        return (b[0] - a[0]) * (dx - a[1]) - (b[1] - a[1]) * (dy - a[0])

    d1 = half_plane(apex, left)
    d2 = half_plane(left, right)
    d3 = half_plane(right, apex)
    return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)


def _build_entities(scn: SyntheticScenario, rng: np.random.Generator) -> list[_Entity]:
    h, w = scn.size
    total = scn.num_objects + scn.num_distractors
    shapes = list(scn.shapes) if scn.shapes else []
    family = _family_shapes(scn.shape_family)
    while len(shapes) < scn.num_objects:
        shapes.append(family[len(shapes) % len(family)])
    target_textures = [int(rng.integers(0, 10_000)) for _ in range(scn.num_objects)]

    # spread the initial positions over distinct cells so every object is
    # fully visible in the annotated first frame
    cells = max(2, math.ceil(math.sqrt(total)))
    cell_ids = rng.permutation(cells * cells)[:total]
    min_side = min(h, w)
    entities = []
    for i in range(total):
        is_target = i < scn.num_objects
        radius = float(rng.uniform(0.10, 0.16) * min_side)
        if 2 * radius >= min_side:
            raise ConfigError(f"object radius {radius:.1f} does not fit frame {scn.size}")
        margin = radius + 2
        cy_cell, cx_cell = divmod(int(cell_ids[i]), cells)
        start = np.array([
            np.clip((cy_cell + 0.5) * h / cells + rng.uniform(-3, 3), margin, h - margin),
            np.clip((cx_cell + 0.5) * w / cells + rng.uniform(-3, 3), margin, w - margin),
        ])
        control = [start]
        for _ in range(3):
            control.append(np.array([
                rng.uniform(margin, h - margin),
                rng.uniform(margin, w - margin),
            ]))
        if is_target:
            shape = shapes[i]
            texture = target_textures[i]
        else:
            shape = family[int(rng.integers(len(family)))]
            texture = target_textures[int(rng.integers(scn.num_objects))]
        entities.append(_Entity(
            shape=shape,
            radius=radius,
            texture=texture,
            control=np.stack(control),
            rot_speed=float(rng.uniform(-0.05, 0.05)) if shape != "disc" else 0.0,
            z=float(rng.random()),
            is_target=is_target,
            target_id=i + 1 if is_target else 0,
        ))
    return entities


def _occlusion_schedule(scn: SyntheticScenario, total_entities: int,
                        rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """(start, end, mover, anchor) tuples; mover is steered over anchor."""
    events = []
    intervals = scn.occlusion_events
    if not intervals and total_entities >= 2 and scn.num_frames >= 8:
        third = scn.num_frames // 3
        intervals = ((third, min(2 * third, scn.num_frames - 2)),)
    for start, end in intervals:
        if total_entities < 2:
            raise ConfigError("occlusion events need at least two scene entities")
        mover = int(rng.integers(1, total_entities))
        anchor = int(rng.integers(0, mover))
        events.append((int(start), int(end), mover, anchor))
    return events


def generate(scenario: SyntheticScenario, out_dir) -> Path:
    """Render the scenario to ``out_dir`` (frames/, masks/, meta.txt)."""
    if scenario.num_objects < 1:
        raise ConfigError("a scenario needs at least one target object")
    if scenario.num_frames < 2:
        raise ConfigError("a scenario needs at least two frames")
    h, w = scenario.size
    rng = np.random.default_rng(scenario.seed)
    entities = _build_entities(scenario, rng)
    events = _occlusion_schedule(scenario, len(entities), rng)
    bg_texture = int(rng.integers(0, 10_000))

    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    order = sorted(range(len(entities)), key=lambda i: entities[i].z)
    for t in range(scenario.num_frames):
        u = t / max(1, scenario.num_frames - 1)
        centers = [_catmull_rom(e.control, u) for e in entities]
        for start, end, mover, anchor in events:
            if start <= t <= end:
                span = max(1, end - start)
                pull = math.sin(math.pi * (t - start) / span) ** 2
                centers[mover] = centers[mover] + pull * (centers[anchor] - centers[mover])

        frame = _texture(bg_texture, ys, xs, t, scenario.drift_rate * 0.2)
        frame = frame + rng.normal(0.0, 0.01, size=frame.shape)
        vis = np.zeros((h, w), dtype=np.int32)
        for idx in order:
            e = entities[idx]
            mask = _shape_mask(e.shape, ys, xs, centers[idx], e.radius, e.rot_speed * t)
            tex = _texture(e.texture, ys, xs, t, scenario.drift_rate)
            frame = np.where(mask[:, :, None], tex, frame)
            vis[mask] = idx + 1

        gt = np.zeros((h, w), dtype=np.uint8)
        for idx, e in enumerate(entities):
            if e.is_target:
                gt[vis == idx + 1] = e.target_id
        write_ppm(out_dir / "frames" / f"{t:05d}.ppm",
                  (np.clip(frame, 0.0, 1.0) * 255).round().astype(np.uint8))
        write_pgm(out_dir / "masks" / f"{t:05d}.pgm", gt)

    meta = [
        f"size = {h}x{w}",
        f"objects = {scenario.num_objects}",
        f"split = {scenario.split}",
        f"frames = {scenario.num_frames}",
        f"seed = {scenario.seed}",
        f"shapes = {','.join(e.shape for e in entities if e.is_target)}",
    ]
    (out_dir / "meta.txt").write_text("\n".join(meta) + "\n")
    return out_dir


def generate_corpus(root, base_seed: int, num_train: int, num_seen: int,
                    num_unseen: int, size=(64, 64), num_frames: int = 24,
                    num_objects: int = 1, num_distractors: int = 1) -> Path:
    """Write a train/eval corpus with the seen/unseen shape-family split."""
    root = Path(root)
    specs = (
        [("train", "train", f"train_{i:03d}", i) for i in range(num_train)]
        + [("train", "seen", f"seen_{i:03d}", 10_000 + i) for i in range(num_seen)]
        + [("unseen", "unseen", f"unseen_{i:03d}", 20_000 + i) for i in range(num_unseen)]
    )
    for family, split, name, offset in specs:
        sub = "train" if split == "train" else "eval"
        scenario = SyntheticScenario(
            seed=base_seed * 100_000 + offset,
            size=size,
            num_objects=num_objects,
            num_frames=num_frames,
            shape_family=family,
            num_distractors=num_distractors,
            split=split,
        )
        generate(scenario, root / sub / name)
    return root
