"""Binary view-selection algebra.

Selections are boolean masks over V camera views (vector) or L levels by V
views (matrix). rotate() moves the bit at column c to column (c+k) mod V and
is a group action of Z_V.

Token positional indices are canonical: they come from the unrotated pattern,
so rotating changes which physical views feed the tokens while the token
identities stay fixed. That frame choice is what makes rotation-averaged
inference invariant to how the input stack happens to be oriented, via

    apply_selection(rotate_stack(s, r), sel, k)
        == apply_selection(s, sel, (k + r) mod V)

which holds exactly, token for token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, ValidationError

DEFAULT_VIEWS = 24
DEFAULT_LEVELS = 5


def _freeze(bits: np.ndarray) -> np.ndarray:
    raw = np.asarray(bits)
    if raw.dtype != bool and not np.isin(raw, (0, 1)).all():
        raise ValidationError("selection bits must be 0 or 1")
    out = raw.astype(bool)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class SelectionVector:
    bits: np.ndarray

    def __post_init__(self):
        bits = _freeze(self.bits)
        if bits.ndim != 1:
            raise ShapeError(f"selection vector must be 1-d, got shape {bits.shape}")
        if not bits.any():
            raise ValidationError("empty selection: at least one view must be set")
        object.__setattr__(self, "bits", bits)

    @property
    def n_views(self) -> int:
        return self.bits.size

    @property
    def views(self) -> int:
        """Number of selected views (popcount)."""
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, SelectionVector) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))


@dataclass(frozen=True, eq=False)
class SelectionMatrix:
    bits: np.ndarray

    def __post_init__(self):
        bits = _freeze(self.bits)
        if bits.ndim != 2:
            raise ShapeError(f"selection matrix must be 2-d, got shape {bits.shape}")
        if not bits.any():
            raise ValidationError("empty selection: at least one bit must be set")
        object.__setattr__(self, "bits", bits)

    @property
    def n_levels(self) -> int:
        return self.bits.shape[0]

    @property
    def n_views(self) -> int:
        return self.bits.shape[1]

    @property
    def views(self) -> int:
        """Total selected (level, view) pairs across the whole matrix."""
        return int(self.bits.sum())

    def row(self, level: int) -> np.ndarray:
        return self.bits[level]

    def __eq__(self, other):
        return isinstance(other, SelectionMatrix) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))


Selection = SelectionVector | SelectionMatrix


def _wrap_like(sel: Selection, bits: np.ndarray) -> Selection:
    return SelectionVector(bits) if isinstance(sel, SelectionVector) else SelectionMatrix(bits)


def rotate(sel: Selection, k: int) -> Selection:
    """Move every set bit from column c to column (c+k) mod V.

    For matrices the same k applies to all rows; columns rotate together.
    """
    if not 0 <= k < sel.n_views:
        raise ValidationError(f"rotation {k} out of range [0, {sel.n_views})")
    return _wrap_like(sel, np.roll(sel.bits, k, axis=-1))


def enumerate_rotations(sel: Selection) -> list[tuple[int, Selection]]:
    """All V rotations in k-ascending order; periodic patterns repeat."""
    return [(k, rotate(sel, k)) for k in range(sel.n_views)]


def distinct_rotation_count(sel: Selection) -> int:
    """The pattern's period: the number of distinct rotated selections.

    Always a divisor of V, because the shifts fixing the pattern form a
    subgroup of Z_V.
    """
    v = sel.n_views
    for p in range(1, v + 1):
        if v % p == 0 and np.array_equal(np.roll(sel.bits, p, axis=-1), sel.bits):
            return p
    return v


def stride_pattern(n: int, views: int = DEFAULT_VIEWS) -> SelectionVector:
    """Columns {0, n, 2n, ...} below V. stride 1 selects every view."""
    if not 1 <= n <= views:
        raise ValidationError(f"stride {n} out of range [1, {views}]")
    bits = np.zeros(views, dtype=bool)
    bits[np.arange(0, views, n)] = True
    return SelectionVector(bits)


def all_views_pattern(views: int = DEFAULT_VIEWS) -> SelectionVector:
    return stride_pattern(1, views)


def first_view_pattern(views: int = DEFAULT_VIEWS) -> SelectionVector:
    bits = np.zeros(views, dtype=bool)
    bits[0] = True
    return SelectionVector(bits)


def structured_matrix(stride: int, row_shift: int, levels: int = DEFAULT_LEVELS,
                      views: int = DEFAULT_VIEWS) -> SelectionMatrix:
    """Stacked stride patterns, row l rotated right by l * row_shift."""
    if not 0 <= row_shift < views:
        raise ValidationError(f"row shift {row_shift} out of range [0, {views})")
    base = stride_pattern(stride, views)
    rows = [np.roll(base.bits, (lv * row_shift) % views) for lv in range(levels)]
    return SelectionMatrix(np.stack(rows))


def random_pattern(rng: np.random.Generator, shape, density: float) -> Selection:
    """Independent Bernoulli(density) bits; all-zero draws are redrawn.

    shape is an int V for a vector or a (levels, views) pair for a matrix.
    """
    if not 0.0 < density < 1.0:
        raise ValidationError(f"density must be in (0, 1), got {density}")
    while True:
        bits = rng.random(shape) < density
        if bits.any():
            break
    if np.isscalar(shape) or isinstance(shape, (int, np.integer)):
        return SelectionVector(bits)
    return SelectionMatrix(bits) if len(shape) == 2 else SelectionVector(bits)


def rotate_stack(stack: np.ndarray, r: int) -> np.ndarray:
    """Rotate a feature stack along its view axis (second-to-last).

    Defined so that the canonical-frame equivariance in the module docstring
    holds exactly: the rotated stack shows at view v what the original showed
    at view (v+r) mod V.
    """
    return np.roll(stack, -r, axis=-2)


@dataclass(frozen=True, eq=False)
class SelectedTokenSet:
    """Ordered tokens produced by applying a (selection, rotation) pair.

    pe_indices are the canonical positions of the set bits, strictly
    increasing; physical_views records which stack columns actually fed each
    token after the rotation.
    """

    features: np.ndarray
    pe_indices: np.ndarray
    levels: np.ndarray
    physical_views: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def apply_selection(stack: np.ndarray, sel: Selection, k: int, level: int = 0) -> SelectedTokenSet:
    """Gather tokens for the canonical set bits, reading rotated views.

    Vector mode takes a (views, dim) level slice; the token for canonical
    column c reads stack[(c+k) mod V] and keeps pe_index c. Matrix mode takes
    the full (levels, views, dim) stack; the token for bit (l, c) reads
    stack[l, (c+k) mod V] and keeps pe_index l*V + c. Any integer k is
    reduced mod V.
    """
    stack = np.asarray(stack)
    if isinstance(sel, SelectionVector):
        if stack.ndim != 2 or stack.shape[0] != sel.n_views:
            raise ShapeError(
                f"vector selection over {sel.n_views} views needs a (views, dim) "
                f"slice, got shape {stack.shape}"
            )
        v = sel.n_views
        cols = np.flatnonzero(sel.bits)
        phys = (cols + k) % v
        return SelectedTokenSet(
            features=stack[phys],
            pe_indices=cols,
            levels=np.full(cols.size, level),
            physical_views=phys,
        )
    if stack.ndim != 3 or stack.shape[:2] != sel.bits.shape:
        raise ShapeError(
            f"matrix selection of shape {sel.bits.shape} needs a matching "
            f"(levels, views, dim) stack, got shape {stack.shape}"
        )
    v = sel.n_views
    lv, cols = np.nonzero(sel.bits)
    phys = (cols + k) % v
    return SelectedTokenSet(
        features=stack[lv, phys],
        pe_indices=lv * v + cols,
        levels=lv,
        physical_views=phys,
    )


def serialize(sel: Selection) -> str:
    """One line of '0'/'1' per row; a vector is a single line."""
    bits = np.atleast_2d(sel.bits)
    return "\n".join("".join("1" if b else "0" for b in row) for row in bits) + "\n"


def parse_selection(text: str, views: int = DEFAULT_VIEWS) -> Selection:
    """Inverse of serialize. One line gives a vector, several give a matrix."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("no selection lines found")
    rows = []
    for i, ln in enumerate(lines):
        if len(ln) != views:
            raise FormatError(
                f"selection line {i + 1} has {len(ln)} characters, expected {views}"
            )
        if set(ln) - {"0", "1"}:
            raise FormatError(f"selection line {i + 1} has characters other than 0/1")
        rows.append([c == "1" for c in ln])
    if len(rows) == 1:
        return SelectionVector(np.array(rows[0]))
    return SelectionMatrix(np.array(rows))


def save_selection(sel: Selection, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(sel))


def load_selection(path, views: int = DEFAULT_VIEWS) -> Selection:
    with open(path, "r", encoding="utf-8") as f:
        return parse_selection(f.read(), views=views)
