"""Image geometry: directional strip masks, window extraction, compositing.

The expansion loop grows a canvas along one axis, one window at a time.  All
operations here are pure functions over numpy arrays; nothing mutates its
inputs.  Masked pixels are set to a fixed mid-gray fill so masked windows are
valid images in their own right.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from PIL import Image

from .validation import (
    GeometryError,
    ValidationError,
    check_image,
    check_non_negative,
    check_positive,
    check_ratio,
    check_square_image,
)

MASK_FILL = 0.5


class Direction(str, Enum):
    TOP = "top"
    BOTTOM = "bottom"
    LEFT = "left"
    RIGHT = "right"

    @property
    def axis(self) -> int:
        """0 for vertical growth (top/bottom), 1 for horizontal (left/right)."""
        return 0 if self in (Direction.TOP, Direction.BOTTOM) else 1

    @property
    def at_start(self) -> bool:
        """True when the strip sits at the low-index edge of its axis."""
        return self in (Direction.TOP, Direction.LEFT)

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(
                f"direction must be one of {[d.value for d in cls]}, got {value!r}"
            ) from None


def masked_width(extent: int, ratio) -> int:
    """Width of the masked strip for a (kept, masked) ratio, rounded half-up.

    Computed in exact integer arithmetic: floor(extent * masked / total + 1/2).
    """
    kept, masked = check_ratio(ratio)
    extent = check_positive(extent, "extent")
    total = kept + masked
    width = (2 * extent * masked + total) // (2 * total)
    if width >= extent:
        raise GeometryError(
            f"ratio {ratio} leaves no kept pixels on an extent of {extent}"
        )
    return width


def _strip_slices(shape, direction: Direction, width: int):
    """(masked, kept) slice pairs for a strip of `width` at the named edge."""
    h, w = shape[:2]
    full = slice(None)
    if direction.axis == 0:
        if direction.at_start:
            masked, kept = (slice(0, width), full), (slice(width, h), full)
        else:
            masked, kept = (slice(h - width, h), full), (slice(0, h - width), full)
    else:
        if direction.at_start:
            masked, kept = (full, slice(0, width)), (full, slice(width, w))
        else:
            masked, kept = (full, slice(w - width, w)), (full, slice(0, w - width))
    return masked, kept


@dataclass(frozen=True)
class MaskedImage:
    """A window with one axis-aligned strip flagged for generation.

    `mask` is 1 where content is to be generated and 0 where it is kept; the
    masked strip is flush against the edge named by `direction` and already
    filled with ``MASK_FILL`` in `image`.  `ratio` records the (kept, masked)
    pixel widths along the direction's axis; the masked width may be zero only
    for the degenerate no-shift case.
    """

    image: np.ndarray
    mask: np.ndarray
    direction: Direction
    ratio: tuple[int, int]

    def __post_init__(self):
        check_image(self.image)
        if self.mask.shape != self.image.shape[:2]:
            raise GeometryError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )

    @property
    def masked_extent(self) -> int:
        """Masked strip width in pixels along the direction's axis."""
        return int(self.mask.any(axis=1 - self.direction.axis).sum())

    def masked_slices(self):
        return _strip_slices(self.image.shape, self.direction, self.masked_extent)[0]

    def kept_slices(self):
        return _strip_slices(self.image.shape, self.direction, self.masked_extent)[1]


@dataclass
class Canvas:
    """A growing image plus the bookkeeping of how it grew."""

    image: np.ndarray
    base_window: int
    shift: int
    steps_taken: int = 0
    plan: list[Direction] = field(default_factory=list)

    @classmethod
    def from_image(cls, image, shift: int) -> "Canvas":
        img = check_square_image(image, "local image")
        check_non_negative(shift, "shift")
        return cls(image=img.copy(), base_window=img.shape[0], shift=int(shift))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def extent(self, axis: int) -> int:
        return self.image.shape[axis]


def canvas_extent(base: int, shift: int, steps: int) -> int:
    """Canvas size along the expansion axis after `steps` shift-and-compose steps."""
    check_positive(base, "base")
    check_non_negative(shift, "shift")
    check_non_negative(steps, "steps")
    return base + steps * shift


def make_training_masks(image, ratio=(1, 1)) -> list[MaskedImage]:
    """Mask a square image at each of the four edges, one window per direction.

    Returns windows in Direction enum order (top, bottom, left, right).  The
    unmasked region of each window is a bit-exact crop of the input.
    """
    img = check_square_image(image)
    width = masked_width(img.shape[0], ratio)
    out = []
    for direction in Direction:
        out.append(mask_edge(img, direction, width, check_ratio(ratio)))
    return out


def mask_edge(image, direction: Direction, width: int, ratio) -> MaskedImage:
    """Fill a `width`-wide strip at the named edge and flag it in the mask."""
    img = check_image(image)
    direction = Direction.parse(direction)
    if width < 0 or width >= img.shape[direction.axis]:
        raise GeometryError(
            f"strip width {width} out of range for extent {img.shape[direction.axis]}"
        )
    masked_sl, _ = _strip_slices(img.shape, direction, width)
    filled = img.copy()
    filled[masked_sl] = MASK_FILL
    mask = np.zeros(img.shape[:2], dtype=np.uint8)
    mask[masked_sl] = 1
    return MaskedImage(image=filled, mask=mask, direction=direction, ratio=tuple(ratio))


def extract_unmasked(m: MaskedImage) -> np.ndarray:
    """The kept strip as a standalone image (the visual-encoder input in training)."""
    _, kept_sl = _strip_slices(m.image.shape, m.direction, m.masked_extent)
    return m.image[kept_sl].copy()


def build_step_input(canvas: Canvas, direction) -> MaskedImage:
    """Masked window for the next expansion step.

    The kept strip is the outermost (base_window - shift)-wide slice of the
    canvas edge; the masked strip (shift wide) lies beyond the current canvas
    in the given direction.
    """
    direction = Direction.parse(direction)
    base = canvas.base_window
    shift = canvas.shift
    if canvas.extent(1 - direction.axis) != base:
        raise GeometryError(
            f"canvas cross-extent {canvas.extent(1 - direction.axis)} does not match "
            f"base window {base}; cannot expand {direction.value}"
        )
    if shift > base:
        raise GeometryError(f"shift {shift} exceeds base window {base}")
    kept_width = base - shift
    if kept_width < 1:
        raise GeometryError("shift leaves no kept pixels in the step window")

    window = np.full((base, base, canvas.image.shape[2]), MASK_FILL, dtype=canvas.image.dtype)
    masked_sl, kept_sl = _strip_slices(window.shape, direction, shift)
    window[kept_sl] = _edge_slice(canvas.image, direction, kept_width)
    mask = np.zeros((base, base), dtype=np.uint8)
    mask[masked_sl] = 1
    return MaskedImage(image=window, mask=mask, direction=direction, ratio=(kept_width, shift))


def _edge_slice(image: np.ndarray, direction: Direction, width: int) -> np.ndarray:
    """The `width`-wide slice of `image` flush against the `direction` edge."""
    h, w = image.shape[:2]
    if direction.axis == 0:
        return image[:width] if direction.at_start else image[h - width:]
    return image[:, :width] if direction.at_start else image[:, w - width:]


def edge_window(canvas: Canvas, direction) -> np.ndarray:
    """The most recent base_window-square slice at the expanding edge."""
    direction = Direction.parse(direction)
    if canvas.extent(direction.axis) < canvas.base_window:
        raise GeometryError("canvas is smaller than its base window")
    return _edge_slice(canvas.image, direction, canvas.base_window).copy()


def composite(canvas: Canvas, generated, direction) -> Canvas:
    """Grow the canvas by `shift` pixels, taking only the new strip from `generated`.

    Pixels already on the canvas are preserved bit-exactly.
    """
    direction = Direction.parse(direction)
    gen = check_image(generated, "generated")
    base = canvas.base_window
    if gen.shape[0] != base or gen.shape[1] != base:
        raise GeometryError(
            f"generated window must be {base}x{base}, got {gen.shape[0]}x{gen.shape[1]}"
        )
    if canvas.extent(1 - direction.axis) != base:
        raise GeometryError("canvas cross-extent does not match its base window")

    shift = canvas.shift
    new_strip = _edge_slice(gen, direction, shift)
    parts = (new_strip, canvas.image) if direction.at_start else (canvas.image, new_strip)
    grown = np.concatenate(parts, axis=direction.axis) if shift > 0 else canvas.image.copy()
    return Canvas(
        image=grown,
        base_window=base,
        shift=shift,
        steps_taken=canvas.steps_taken + 1,
        plan=[*canvas.plan, direction],
    )


def mean_resize(image, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic resize by adaptive block averaging.

    Each output cell averages the input block [floor(i*H/oh), ceil((i+1)*H/oh))
    x [floor(j*W/ow), ceil((j+1)*W/ow)); blocks are never empty, so this works
    for both down- and upsampling.
    """
    img = check_image(image)
    out_h = check_positive(out_h, "out_h")
    out_w = check_positive(out_w, "out_w")
    h, w = img.shape[:2]
    out = np.empty((out_h, out_w, img.shape[2]), dtype=img.dtype)
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -((-(j + 1) * w) // out_w)
            out[i, j] = img[r0:r1, c0:c1].mean(axis=(0, 1))
    return out


def to_uint8(image) -> np.ndarray:
    """Quantize a float image in [0, 1] to 8-bit, rounding half away from zero."""
    img = check_image(image)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32)) / 255.0


def image_digest(image) -> str:
    """Content hash of the 8-bit quantization, stable across save/load."""
    raw = to_uint8(image)
    h = hashlib.sha256()
    h.update(np.asarray(raw.shape, dtype=np.int64).tobytes())
    h.update(raw.tobytes())
    return h.hexdigest()


def save_png(image, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))
