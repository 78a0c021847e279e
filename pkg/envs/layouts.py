""" Grid layouts: construction, seeded generation, text files and hashing """
import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from utils.config import bucket_of
from utils.errors import ConfigError

UNREACHABLE = -1


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def forward(self):
        return _FORWARD[self]

    @property
    def right(self):
        return _RIGHT[self]


_FORWARD = {Heading.N: (-1, 0), Heading.E: (0, 1), Heading.S: (1, 0), Heading.W: (0, -1)}
_RIGHT = {Heading.N: (0, 1), Heading.E: (1, 0), Heading.S: (0, -1), Heading.W: (-1, 0)}


@dataclass(frozen=True, eq=False)
class GridLayout:
    """Occupancy grid (True = blocked) with a goal object, distractors and a start pose"""
    occupancy: np.ndarray
    goal_cells: frozenset
    start_cell: tuple
    start_heading: Heading = Heading.E
    goal_class: int = 0
    distractors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        occupancy = np.asarray(self.occupancy, dtype=bool)
        occupancy.setflags(write=False)
        object.__setattr__(self, 'occupancy', occupancy)
        object.__setattr__(self, 'goal_cells', frozenset(tuple(int(v) for v in c) for c in self.goal_cells))
        object.__setattr__(self, 'start_cell', tuple(int(v) for v in self.start_cell))
        object.__setattr__(self, 'start_heading', Heading(self.start_heading))
        object.__setattr__(self, 'distractors', tuple((tuple(int(v) for v in c), int(k)) for c, k in self.distractors))

        if occupancy.ndim != 2 or occupancy.size == 0:
            raise ConfigError(f'occupancy must be a non-empty 2-D grid, got shape {occupancy.shape}')
        if not self.goal_cells:
            raise ConfigError('layout has no goal cell')
        for cell in (self.start_cell, *self.goal_cells, *(c for c, _ in self.distractors)):
            if not self.inside(cell):
                raise ConfigError(f'cell {cell} lies outside the {self.height}x{self.width} grid')
            if self.blocked(cell):
                raise ConfigError(f'cell {cell} is blocked')

    @property
    def height(self):
        return self.occupancy.shape[0]

    @property
    def width(self):
        return self.occupancy.shape[1]

    @property
    def start_pose(self):
        return self.start_cell, self.start_heading

    def inside(self, cell):
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def blocked(self, cell):
        return not self.inside(cell) or bool(self.occupancy[cell])

    def neighbours(self, cell):
        r, c = cell
        for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
            nxt = (r + dr, c + dc)
            if not self.blocked(nxt):
                yield nxt

    def object_class(self, cell):
        """Object class shown at a free cell, or None"""
        if cell in self.goal_cells:
            return self.goal_class
        for c, k in self.distractors:
            if c == cell:
                return k
        return None


def geodesic_field(layout):
    """Multi-source BFS from every goal cell over the 4-connected free cells"""
    dist = np.full(layout.occupancy.shape, UNREACHABLE, dtype=np.int64)
    queue = deque()
    for goal in sorted(layout.goal_cells):
        dist[goal] = 0
        queue.append(goal)
    while queue:
        cell = queue.popleft()
        for nxt in layout.neighbours(cell):
            if dist[nxt] == UNREACHABLE:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    dist.setflags(write=False)
    return dist


def layout_hash(layout):
    h = hashlib.sha1()
    h.update(np.asarray(layout.occupancy.shape, dtype=np.int64).tobytes())
    h.update(np.packbits(layout.occupancy).tobytes())
    return h.hexdigest()


def generate_layout(rng, height, width, density=0.2, n_object_classes=1, min_start_distance=2,
                    max_tries=1000):
    """Random obstacles, one goal object and a start pose, rejected until the goal is reachable"""
    for _ in range(max_tries):
        occupancy = rng.random((height, width)) < density
        free = np.argwhere(~occupancy)
        if len(free) < 2 + n_object_classes:
            continue
        picks = rng.permutation(len(free))
        goal = tuple(free[picks[0]])
        goal_class = int(rng.integers(n_object_classes))
        others = [k for k in range(n_object_classes) if k != goal_class]
        distractors = [(tuple(free[picks[1 + n]]), k) for n, k in enumerate(others)]
        layout = GridLayout(occupancy, frozenset([goal]), goal, Heading.N, goal_class, tuple(distractors))
        dist = geodesic_field(layout)

        candidates = [tuple(c) for c in free[picks[1 + len(others):]] if dist[tuple(c)] >= min_start_distance]
        if not candidates:
            continue
        start = candidates[int(rng.integers(len(candidates)))]
        heading = Heading(int(rng.integers(4)))
        return GridLayout(occupancy, frozenset([goal]), start, heading, goal_class, tuple(distractors))
    raise ConfigError(f'no reachable {height}x{width} layout at density {density} after {max_tries} tries')


def generate_layouts(n, seed, size_range=(11, 15), density=0.2, n_object_classes=1, exclude_hashes=()):
    """Deterministic set of n layouts; layouts whose hash is in exclude_hashes are rejected"""
    rng = np.random.default_rng(seed)
    exclude = set(exclude_hashes)
    layouts = []
    rejected = 0
    while len(layouts) < n:
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        layout = generate_layout(rng, size, size, density, n_object_classes)
        key = layout_hash(layout)
        if key in exclude:
            rejected += 1
            continue
        exclude.add(key)
        layouts.append(layout)
    if rejected:
        logging.info(f'Rejected {rejected} layouts colliding with an excluded hash')
    return layouts


def optimal_length(layout):
    return int(geodesic_field(layout)[layout.start_cell])


def generate_bucketed_layouts(per_bucket, buckets, seed, size_range=(15, 30), density=0.2, n_object_classes=1,
                              exclude_hashes=(), max_draws=20000):
    """
    Deterministic set holding exactly per_bucket layouts in every optimal-length bucket,
    in draw order. Draws past a full bucket (or outside every bucket) are discarded.
    """
    rng = np.random.default_rng(seed)
    exclude = set(exclude_hashes)
    counts = [0] * len(buckets)
    layouts = []
    for _ in range(max_draws):
        if min(counts) >= per_bucket:
            return layouts
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        layout = generate_layout(rng, size, size, density, n_object_classes)
        b = bucket_of(optimal_length(layout), buckets)
        if b is None or counts[b] >= per_bucket:
            continue
        key = layout_hash(layout)
        if key in exclude:
            continue
        exclude.add(key)
        counts[b] += 1
        layouts.append(layout)
    if min(counts) >= per_bucket:
        return layouts
    raise ConfigError(f'held-out buckets {list(buckets)} reached only {counts} of {per_bucket} layouts each '
                      f'after {max_draws} draws on {size_range[0]}-{size_range[1]} grids')


def parse_layout(text, goal_class=0):
    lines = [line.rstrip('\n') for line in text.strip().splitlines()]
    if not lines:
        raise ConfigError('empty layout file')
    header = lines[0].split()
    if len(header) not in (2, 3):
        raise ConfigError(f'layout header must be "rows cols [heading]", got {lines[0]!r}')
    rows, cols = int(header[0]), int(header[1])
    heading = Heading[header[2].upper()] if len(header) == 3 else Heading.E
    grid = lines[1:1 + rows]
    if len(grid) != rows or any(len(row) != cols for row in grid):
        raise ConfigError(f'layout body does not match header {rows}x{cols}')

    occupancy = np.zeros((rows, cols), dtype=bool)
    goals, starts = [], []
    for r, row in enumerate(grid):
        for c, ch in enumerate(row):
            if ch == '#':
                occupancy[r, c] = True
            elif ch == 'S':
                starts.append((r, c))
            elif ch == 'G':
                goals.append((r, c))
            elif ch != '.':
                raise ConfigError(f'unknown layout character {ch!r} at ({r}, {c})')
    if len(starts) != 1:
        raise ConfigError(f'layout needs exactly one start cell, found {len(starts)}')
    return GridLayout(occupancy, frozenset(goals), starts[0], heading, goal_class)


def format_layout(layout):
    rows = []
    for r in range(layout.height):
        row = []
        for c in range(layout.width):
            if (r, c) == layout.start_cell:
                row.append('S')
            elif (r, c) in layout.goal_cells:
                row.append('G')
            else:
                row.append('#' if layout.occupancy[r, c] else '.')
        rows.append(''.join(row))
    header = f'{layout.height} {layout.width} {layout.start_heading.name}'
    return '\n'.join([header] + rows) + '\n'


def load_layout(path):
    return parse_layout(Path(path).read_text(encoding='utf-8'))


def load_layout_dir(directory):
    paths = sorted(Path(directory).glob('*.txt'))
    if not paths:
        raise ConfigError(f'no layout files (*.txt) in {directory}')
    return [load_layout(p) for p in paths]
