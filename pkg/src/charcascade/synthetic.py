"""Seeded synthetic data: seven-segment digit glyphs, textured clutter, plate frames.

Used by the tests and the desk-scale experiments in place of a real
carriage-number dataset.
"""

from __future__ import annotations

import numpy as np

from .dataset import Annotation, Box
from .features import DIGIT_APERTURE, Aperture
from .imaging import Rect

SEGMENTS = {
    "0": "abcdef", "1": "bc", "2": "abged", "3": "abgcd", "4": "fgbc",
    "5": "afgcd", "6": "afgedc", "7": "abc", "8": "abcdefg", "9": "abcdfg",
}
_SS = 4  # supersampling factor


def _segment_mask(seg: str, u: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    left, right, top, mid, bot = u <= t, u >= 1 - t, v <= t, np.abs(v - 0.5) <= t / 2, v >= 1 - t
    upper, lower = v <= 0.5 + t / 2, v >= 0.5 - t / 2
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    m = {
        "a": top, "d": bot, "g": mid,
        "f": left & upper, "b": right & upper,
        "e": left & lower, "c": right & lower,
    }[seg]
    return m & inside


def glyph_coverage(digit: str, w: int, h: int, rng: np.random.Generator | None = None,
                   box: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """Ink coverage in [0, 1] of a seven-segment ``digit`` on a ``w x h`` canvas.

    ``box`` is the glyph's (x, y, w, h) in pixels; with ``rng`` the box,
    stroke width and slant are jittered.
    """
    if box is None:
        box = (0.18 * w, 0.1 * h, 0.64 * w, 0.8 * h)
    bx, by, bw, bh = box
    thick, slant = 0.2, 0.0
    if rng is not None:
        bx += rng.uniform(-0.06, 0.06) * w
        by += rng.uniform(-0.04, 0.04) * h
        bw *= rng.uniform(0.9, 1.1)
        bh *= rng.uniform(0.93, 1.05)
        thick = rng.uniform(0.15, 0.26)
        slant = rng.uniform(-0.12, 0.12)
    ys, xs = np.mgrid[0:h * _SS, 0:w * _SS]
    px = (xs + 0.5) / _SS
    py = (ys + 0.5) / _SS
    v = (py - by) / bh
    u = (px - bx - slant * (1 - v) * bh) / bw
    # keep strokes of similar pixel thickness horizontally and vertically
    tu = thick * min(1.0, bh / bw) * 0.5
    ink = np.zeros(u.shape, dtype=bool)
    for seg in SEGMENTS[digit]:
        if seg in "adg":
            ink |= _segment_mask(seg, u, v, thick * 0.5)
        else:
            ink |= _segment_mask(seg, u, v, tu * 2)
    return ink.reshape(h, _SS, w, _SS).mean(axis=(1, 3))


def _box_blur(img: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return img
    pad = np.pad(img, k // 2 + 1, mode="reflect")
    c = pad.cumsum(0).cumsum(1)
    c = np.pad(c, ((1, 0), (1, 0)))
    h, w = img.shape
    o = k // 2 + 1 - k // 2
    s = c[o + k:o + k + h, o + k:o + k + w] - c[o:o + h, o + k:o + k + w] \
        - c[o + k:o + k + h, o:o + w] + c[o:o + h, o:o + w]
    return s / (k * k)


def texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth random texture, float, roughly zero mean."""
    n = rng.normal(0, 1, (h, w))
    out = _box_blur(n, int(rng.integers(1, 6))) * rng.uniform(8, 40)
    gy, gx = np.mgrid[0:h, 0:w]
    out += rng.uniform(-1, 1) * gx * 30 / max(w, 1) + rng.uniform(-1, 1) * gy * 30 / max(h, 1)
    return out


def _finish(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = img * rng.uniform(0.6, 1.3) + rng.uniform(-40, 40)
    img = img + rng.normal(0, rng.uniform(2, 8), img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def positive_patch(rng: np.random.Generator, aperture: Aperture = DIGIT_APERTURE,
                   digits: str = "0123456789") -> np.ndarray:
    d = digits[int(rng.integers(len(digits)))]
    w, h = aperture.width, aperture.height
    cov = glyph_coverage(d, w, h, rng)
    ground = rng.uniform(150, 230)
    ink = rng.uniform(20, ground - 70)
    img = ground + 0.5 * texture(rng, h, w) * rng.uniform(0, 0.6)
    img = img * (1 - cov) + ink * cov
    return _finish(img, rng)


def negative_patch(rng: np.random.Generator, aperture: Aperture = DIGIT_APERTURE,
                   digits: str = "0123456789", fragments: float = 0.0) -> np.ndarray:
    """Textured clutter: smooth noise, half the time crossed by random bars.

    A ``fragments`` share instead shows a glyph pushed well off-center (as
    neighbors look inside a number plate).
    """
    w, h = aperture.width, aperture.height
    kind = rng.random()
    base = rng.uniform(60, 220)
    img = base + texture(rng, h, w)
    if kind >= fragments and rng.random() < 0.5:
        pass
    elif kind >= fragments:
        # random dark / light bars
        for _ in range(int(rng.integers(1, 5))):
            t = int(rng.integers(1, 4))
            level = rng.uniform(-120, 60)
            if rng.random() < 0.5:
                y0 = int(rng.integers(0, h - t + 1))
                x0 = int(rng.integers(0, w))
                x1 = int(rng.integers(x0 + 1, w + 1))
                img[y0:y0 + t, x0:x1] += level
            else:
                x0 = int(rng.integers(0, w - t + 1))
                y0 = int(rng.integers(0, h))
                y1 = int(rng.integers(y0 + 1, h + 1))
                img[y0:y1, x0:x0 + t] += level
    else:
        # a glyph pushed well off-center, as neighbors appear in a number plate
        d = digits[int(rng.integers(len(digits)))]
        dx = rng.choice([-1, 1]) * rng.uniform(0.45, 0.8) * w
        dy = rng.uniform(-0.3, 0.3) * h
        cov = glyph_coverage(d, w, h, rng, (0.18 * w + dx, 0.1 * h + dy, 0.64 * w, 0.8 * h))
        ground = rng.uniform(150, 230)
        img = (ground + 0.3 * texture(rng, h, w)) * (1 - cov) + rng.uniform(20, ground - 70) * cov
    return _finish(img, rng)


def bars_vs_noise(seed: int = 0, n_pos: int = 2000, n_neg: int = 20000,
                  aperture: Aperture = DIGIT_APERTURE, digits: str = "0123456789",
                  fragments: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Aperture-sized positive glyph patches and textured-noise negatives."""
    rng = np.random.default_rng(seed)
    pos = np.stack([positive_patch(rng, aperture, digits) for _ in range(n_pos)])
    neg = np.stack([negative_patch(rng, aperture, digits, fragments) for _ in range(n_neg)])
    return pos, neg


# -- whole frames -----------------------------------------------------------------------


def clutter_frame(seed: int, width: int = 160, height: int = 120) -> np.ndarray:
    """Negative-only frame of the same textured noise and bars, for mining."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(60, 220) + texture(rng, height, width) * rng.uniform(1, 2)
    for _ in range(int(rng.integers(10, 40))):
        t = int(rng.integers(1, 5))
        level = rng.uniform(-120, 60)
        if rng.random() < 0.5:
            y0, x0 = int(rng.integers(0, height - t)), int(rng.integers(0, width))
            img[y0:y0 + t, x0:x0 + int(rng.integers(4, 60))] += level
        else:
            y0, x0 = int(rng.integers(0, height)), int(rng.integers(0, width - t))
            img[y0:y0 + int(rng.integers(4, 60)), x0:x0 + t] += level
    return _finish(img, rng)


def background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    img = rng.uniform(60, 160) + texture(rng, h, w)
    for _ in range(int(rng.integers(0, 6))):
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        img[y0:y0 + int(rng.integers(2, 30)), x0:x0 + int(rng.integers(2, 60))] += rng.uniform(-60, 60)
    return img


def paste_digits(img: np.ndarray, rng: np.random.Generator | None, text: str, x: int, y: int,
                 dw: int, dh: int, gap: int, ink: float, ground: float) -> list[Box]:
    boxes = []
    for i, d in enumerate(text):
        cx = x + i * (dw + gap)
        cov = glyph_coverage(d, dw, dh, rng)
        region = img[y:y + dh, cx:cx + dw]
        region[...] = region * (1 - cov) + ink * cov
        boxes.append(Box(Rect(cx, y, dw, dh), d))
    return boxes


def plate_frame(seed: int, width: int = 320, height: int = 240, text: str | None = None,
                plate: Rect | None = None, image_id: str | None = None) -> tuple[np.ndarray, Annotation]:
    """Frame with one light number plate of dark digits on clutter.

    The annotation holds the ``number`` box and one box per digit.
    """
    rng = np.random.default_rng(seed)
    if text is None:
        text = "".join(str(d) for d in rng.integers(0, 10, 8))
    if plate is None:
        pw = int(rng.integers(108, min(width, 220)))
        ph = max(6, round(pw / 3))
        plate = Rect(int(rng.integers(0, width - pw + 1)), int(rng.integers(0, height - ph + 1)), pw, ph)
    img = background(rng, width, height)
    ground = rng.uniform(170, 235)
    img[plate.y:plate.y1, plate.x:plate.x1] = ground + 0.3 * texture(rng, plate.h, plate.w)
    n = len(text)
    dh = max(8, int(plate.h * 0.7))
    dw = max(4, dh // 2)
    gap = max(1, (plate.w - n * dw) // (n + 1))
    x0 = plate.x + max(0, (plate.w - n * dw - (n - 1) * gap) // 2)
    y0 = plate.y + (plate.h - dh) // 2
    boxes = [Box(plate, "number")]
    boxes += paste_digits(img, rng, text, x0, y0, dw, dh, gap, rng.uniform(20, ground - 80), ground)
    img = np.clip(np.floor(img + rng.normal(0, 3, img.shape) + 0.5), 0, 255).astype(np.uint8)
    return img, Annotation(image_id or f"frame{seed:05d}", boxes)


def digit_strip(seed: int, text: str, width: int = 240, height: int = 76,
                digit_size: tuple[int, int] = (24, 48)) -> tuple[np.ndarray, Annotation]:
    """A normalized plate strip containing ``text`` as evenly spaced digits."""
    rng = np.random.default_rng(seed)
    ground = rng.uniform(170, 230)
    img = ground + 0.3 * texture(rng, height, width)
    dw, dh = digit_size
    n = len(text)
    gap = max(2, (width - n * dw) // (n + 1))
    x0 = (width - n * dw - (n - 1) * gap) // 2
    y0 = (height - dh) // 2
    boxes = paste_digits(img, None, text, x0, y0, dw, dh, gap, rng.uniform(20, 70), ground)
    img = np.clip(np.floor(img + rng.normal(0, 3, img.shape) + 0.5), 0, 255).astype(np.uint8)
    return img, Annotation(f"strip{seed:05d}", boxes)


def glyph_task(seed: int = 0, n_pos: int = 2000, n_neg: int = 20000, glyphs: str = "8",
               n_mining: int = 50, aperture: Aperture = DIGIT_APERTURE) -> dict:
    """The desk-scale glyph-strokes-vs-noise task, split 3:1 by patch.

    Returns ``train_pos``, ``train_neg``, ``test_pos``, ``test_neg`` patch
    stacks and ``mining``, a list of negative-only clutter frames for
    bootstrapping. ``glyphs`` lists the seven-segment digits drawn as
    positives; the default "8" lights every stroke.
    """
    from .dataset import split_3to1

    pos, neg = bars_vs_noise(seed, n_pos, n_neg, aperture, glyphs)
    ss = np.random.SeedSequence(seed).spawn(3)
    p_tr, p_te = split_3to1(list(range(n_pos)), int(ss[0].generate_state(1)[0]))
    n_tr, n_te = split_3to1(list(range(n_neg)), int(ss[1].generate_state(1)[0]))
    frame_seed = int(ss[2].generate_state(1)[0])
    mining = [clutter_frame(frame_seed + i) for i in range(n_mining)]
    return {"train_pos": pos[p_tr], "train_neg": neg[n_tr], "test_pos": pos[p_te],
            "test_neg": neg[n_te], "mining": mining}
