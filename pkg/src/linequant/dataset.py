"""Synthetic text-line corpora: rendering, augmentation, storage, batching.

Lines are grayscale float arrays in [0, 1] (ink bright on dark background),
height-normalized to 48 pixels. Corpora are written as one binary PGM per
line plus a JSON Lines manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError, LabelError, RenderingError

LINE_HEIGHT = 48
PATCH_STRIDE = 8
MIN_WIDTH = 8

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
_N_SPECIALS = 3


class Alphabet:
    """Bijective character <-> id mapping with reserved PAD/BOS/EOS ids."""

    def __init__(self, chars: str):
        if not chars:
            raise DataError("alphabet must contain at least one character")
        if len(set(chars)) != len(chars):
            raise DataError("alphabet characters must be unique")
        self.chars = chars
        self._to_id = {c: i + _N_SPECIALS for i, c in enumerate(chars)}
        self._to_char = {i + _N_SPECIALS: c for i, c in enumerate(chars)}

    @property
    def vocab_size(self) -> int:
        return _N_SPECIALS + len(self.chars)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[c] for c in text]
        except KeyError as exc:
            raise LabelError(f"character {exc.args[0]!r} is not in the alphabet") from None

    def decode(self, ids) -> str:
        return "".join(self._to_char[i] for i in ids if i >= _N_SPECIALS)

    def __contains__(self, char: str) -> bool:
        return char in self._to_id

    def __len__(self) -> int:
        return len(self.chars)


# ---------------------------------------------------------------------------
# glyph atlas and rendering


@dataclasses.dataclass(frozen=True)
class RenderJitter:
    """Per-render perturbation magnitudes; all zero means deterministic strokes."""

    slant: float = 0.0       # max horizontal shear, px per vertical px
    spacing: int = 0         # max +- advance perturbation, px
    thickness: float = 0.0   # max blend toward a 1px-dilated stroke

    @classmethod
    def none(cls) -> "RenderJitter":
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.slant == 0.0 and self.spacing == 0 and self.thickness == 0.0


def _draw_segment(canvas: np.ndarray, x0, y0, x1, y1, thickness, intensity) -> None:
    h, w = canvas.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    if length2 < 1e-9:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length2, 0.0, 1.0)
    px, py = x0 + t * dx, y0 + t * dy
    dist = np.sqrt((xs - px) ** 2 + (ys - py) ** 2)
    stroke = np.clip(thickness - dist, 0.0, 1.0) * intensity
    np.maximum(canvas, stroke, out=canvas)


class GlyphAtlas:
    """Procedural monospace glyphs: fixed random strokes per character."""

    def __init__(self, glyphs: dict[str, np.ndarray], glyph_width: int,
                 glyph_height: int, jitter: RenderJitter, seed: int):
        self.glyphs = glyphs
        self.glyph_width = glyph_width
        self.glyph_height = glyph_height
        self.jitter = jitter
        self.seed = seed

    @classmethod
    def synthetic(cls, chars: str, seed: int, glyph_width: int = 24,
                  glyph_height: int = 32, jitter: RenderJitter | None = None) -> "GlyphAtlas":
        glyphs = {}
        for c in chars:
            rng = np.random.default_rng([seed, ord(c)])
            g = np.zeros((glyph_height, glyph_width), dtype=np.float64)
            n_strokes = int(rng.integers(3, 6))
            for _ in range(n_strokes):
                x0, x1 = rng.uniform(2, glyph_width - 3, size=2)
                y0, y1 = rng.uniform(2, glyph_height - 3, size=2)
                _draw_segment(g, x0, y0, x1, y1,
                              thickness=rng.uniform(1.4, 2.4),
                              intensity=rng.uniform(0.75, 1.0))
            glyphs[c] = g.astype(np.float32)
        return cls(glyphs, glyph_width, glyph_height, jitter or RenderJitter.none(), seed)


def _dilate(image: np.ndarray) -> np.ndarray:
    out = image.copy()
    np.maximum(out[1:, :], image[:-1, :], out=out[1:, :])
    np.maximum(out[:-1, :], image[1:, :], out=out[:-1, :])
    np.maximum(out[:, 1:], image[:, :-1], out=out[:, 1:])
    np.maximum(out[:, :-1], image[:, 1:], out=out[:, :-1])
    return out


def _shear(image: np.ndarray, slant: float) -> np.ndarray:
    h, w = image.shape
    out = np.zeros_like(image)
    center = h / 2.0
    for y in range(h):
        shift = slant * (y - center)
        lo = int(np.floor(shift))
        frac = shift - lo
        row = np.zeros(w, dtype=image.dtype)
        src = image[y]
        for offset, weight in ((lo, 1.0 - frac), (lo + 1, frac)):
            if weight == 0.0:
                continue
            if offset >= 0:
                row[offset:] += weight * src[:w - offset] if offset else weight * src
            else:
                row[:offset] += weight * src[-offset:]
        out[y] = row
    return out


def render_line(text: str, font: GlyphAtlas, height: int = LINE_HEIGHT,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize text with a glyph atlas into a height x W float image.

    Deterministic for a fixed (text, font, rng seed). The canvas width is the
    sum of glyph advances rounded up to the patch stride, so every pixel
    column belongs to a complete patch.
    """
    if not text:
        raise RenderingError("cannot render an empty line")
    missing = [c for c in text if c not in font.glyphs]
    if missing:
        raise RenderingError(f"no glyph for character {missing[0]!r}")
    if font.glyph_height > height:
        raise RenderingError(
            f"glyph height {font.glyph_height} exceeds line height {height}"
        )
    jit = font.jitter
    if rng is None:
        rng = np.random.default_rng(0)

    advances = []
    for _ in text:
        adv = font.glyph_width
        if jit.spacing:
            adv += int(rng.integers(-jit.spacing, jit.spacing + 1))
        advances.append(max(adv, 2))
    width = max(sum(advances), MIN_WIDTH)
    width = ((width + PATCH_STRIDE - 1) // PATCH_STRIDE) * PATCH_STRIDE

    canvas = np.zeros((height, width), dtype=np.float32)
    top = (height - font.glyph_height) // 2
    x = 0
    for c, adv in zip(text, advances):
        g = font.glyphs[c]
        gw = min(g.shape[1], width - x)
        if gw > 0:
            region = canvas[top:top + font.glyph_height, x:x + gw]
            np.maximum(region, g[:, :gw], out=region)
        x += adv

    if jit.slant:
        canvas = _shear(canvas, rng.uniform(-jit.slant, jit.slant))
    if jit.thickness:
        blend = rng.uniform(0.0, jit.thickness)
        if blend > 0.0:
            canvas = canvas + blend * (_dilate(canvas) - canvas)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def normalize_height(image: np.ndarray, target: int = LINE_HEIGHT) -> np.ndarray:
    """Bilinear resize to the target height, preserving aspect ratio.

    The scaled width is rounded to the nearest integer and clamped to the
    minimum width of one patch stride.
    """
    h, w = image.shape
    if h < 1:
        raise DataError("image height must be >= 1")
    if h == target:
        return image
    new_w = max(MIN_WIDTH, int(round(w * target / h)))
    return _bilinear_resize(image, target, new_w)


def _bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - fx) + image[np.ix_(y0, x1)] * fx
    bot = image[np.ix_(y1, x0)] * (1 - fx) + image[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation (fine-tuning only)


@dataclasses.dataclass(frozen=True)
class AugmentationConfig:
    """Magnitudes for the fine-tuning augmentations; zeros are the identity."""

    noise_sigma: float = 0.0
    gamma: float = 0.0          # log-range of the exponent
    blur: int = 0               # max box/line kernel extent
    shear: float = 0.0          # max horizontal shear
    shift: float = 0.0          # max vertical shift, px
    occlusion: float = 0.0      # expected masked strips per 100 px
    brightness: float = 0.0

    def __post_init__(self):
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 0:
                raise DataError(f"augmentation magnitude {field.name} must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls()

    @property
    def is_identity(self) -> bool:
        return self == AugmentationConfig()

    @classmethod
    def default(cls) -> "AugmentationConfig":
        return cls(noise_sigma=0.03, gamma=0.15, blur=2, shear=0.05,
                   shift=1.5, occlusion=0.3, brightness=0.08)


def augment(image: np.ndarray, config: AugmentationConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Apply the configured perturbations; output clamped to [0, 1]."""
    if config.is_identity:
        return image
    out = image.astype(np.float32)
    h, w = out.shape

    if config.brightness:
        out = out + rng.uniform(-config.brightness, config.brightness)
    if config.gamma:
        exponent = float(np.exp(rng.uniform(-config.gamma, config.gamma)))
        out = np.clip(out, 0.0, 1.0) ** exponent
    if config.blur:
        extent = int(rng.integers(1, config.blur + 1))
        if extent > 1:
            kernel = np.ones(extent, dtype=np.float32) / extent
            axis = int(rng.integers(0, 2))  # 0: motion-like along x, 1: along y
            out = _convolve1d(out, kernel, axis=1 - axis)
    if config.shear or config.shift:
        slant = rng.uniform(-config.shear, config.shear) if config.shear else 0.0
        dy = rng.uniform(-config.shift, config.shift) if config.shift else 0.0
        out = _shear(out, slant)
        if dy:
            out = _vshift(out, dy)
    if config.noise_sigma:
        out = out + rng.normal(0.0, config.noise_sigma, size=out.shape).astype(np.float32)
    if config.occlusion:
        expected = config.occlusion * w / 100.0
        n_strips = int(rng.poisson(expected))
        for _ in range(n_strips):
            x0 = int(rng.integers(0, max(w - 3, 1)))
            sw = int(rng.integers(3, 13))
            out[:, x0:x0 + sw] = 0.5
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _convolve1d(image: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    pad = len(kernel) // 2
    widths = [(0, 0), (0, 0)]
    widths[axis] = (pad, len(kernel) - 1 - pad)
    padded = np.pad(image, widths, mode="edge")
    out = np.zeros_like(image)
    for i, kv in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + image.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def _vshift(image: np.ndarray, dy: float) -> np.ndarray:
    lo = int(np.floor(dy))
    frac = dy - lo
    out = np.zeros_like(image)
    for offset, weight in ((lo, 1.0 - frac), (lo + 1, frac)):
        if weight == 0.0:
            continue
        if offset >= 0:
            out[offset:] += weight * image[:image.shape[0] - offset] if offset else weight * image
        else:
            out[:offset] += weight * image[-offset:]
    return out


# ---------------------------------------------------------------------------
# corpus generation and storage


@dataclasses.dataclass(frozen=True)
class CorpusSpec:
    alphabet: str
    train: int = 0
    val: int = 0
    test: int = 0
    text_len: tuple[int, int] = (3, 8)
    font_seeds: tuple[int, ...] = (11,)
    seed: int = 0
    glyph_width: int = 24
    jitter: RenderJitter = RenderJitter.none()

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise DataError("split sizes must be >= 0")
        if not self.alphabet:
            raise DataError("alphabet must be non-empty")
        if not (1 <= self.text_len[0] <= self.text_len[1]):
            raise DataError(f"invalid text length range {self.text_len}")


@dataclasses.dataclass
class LineSample:
    id: str
    image: np.ndarray
    text: str
    split: str


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255, one image per file."""
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise DataError(f"{path}: not a binary PGM (magic {magic!r})")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float32) / float(maxval)


def make_corpus(spec: CorpusSpec, out_dir: Path) -> Path:
    """Render a corpus to disk; returns the manifest path.

    Regenerating with the same spec produces bit-identical images and
    manifest. Split ids are disjoint by construction.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    alphabet = Alphabet(spec.alphabet)
    fonts = [
        GlyphAtlas.synthetic(spec.alphabet, fs, glyph_width=spec.glyph_width,
                             jitter=spec.jitter)
        for fs in spec.font_seeds
    ]
    manifest_path = out_dir / "manifest.jsonl"
    lo, hi = spec.text_len
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as mf:
        for split_idx, (split, count) in enumerate(
            (("train", spec.train), ("val", spec.val), ("test", spec.test))
        ):
            for i in range(count):
                rng = np.random.default_rng([spec.seed, split_idx, i])
                length = int(rng.integers(lo, hi + 1))
                text = "".join(
                    alphabet.chars[int(rng.integers(0, len(alphabet)))]
                    for _ in range(length)
                )
                font = fonts[int(rng.integers(0, len(fonts)))]
                image = render_line(text, font, rng=rng)
                sample_id = f"{split}_{i:06d}"
                rel = f"images/{sample_id}.pgm"
                write_pgm(out_dir / rel, image)
                record = {"id": sample_id, "image": rel, "text": text, "split": split}
                mf.write(json.dumps(record, ensure_ascii=False) + "\n")
    return manifest_path


def load_manifest(manifest_path: Path, split: str | None = None,
                  with_images: bool = True) -> list[LineSample]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if split is not None and rec["split"] != split:
                continue
            image = read_pgm(base / rec["image"]) if with_images else None
            samples.append(LineSample(rec["id"], image, rec["text"], rec["split"]))
    return samples


def manifest_hash(manifest_path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(manifest_path).read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# batching


@dataclasses.dataclass
class Batch:
    images: np.ndarray        # B x 1 x 48 x W_max, zero padded on the right
    patch_mask: np.ndarray    # B x T_max bool, True at real patch positions
    n_patches: np.ndarray     # B int, floor(width_i / 8)
    target_ids: np.ndarray    # B x L_max int, BOS + chars + EOS, PAD padded
    target_mask: np.ndarray   # B x L_max bool, True at non-PAD positions
    ids: list[str]


def batch(samples: list[LineSample], alphabet: Alphabet,
          augment_config: AugmentationConfig | None = None,
          rng: np.random.Generator | None = None) -> Batch:
    """Collate variable-width lines into padded arrays.

    Images are right padded with 0; padded patch positions are marked False
    in the patch mask and excluded from all losses downstream. Targets are
    BOS + character ids + EOS, right padded with PAD.
    """
    if not samples:
        raise DataError("cannot build an empty batch")
    if augment_config is not None and not augment_config.is_identity and rng is None:
        raise DataError("augmentation requires an rng")

    images = []
    for s in samples:
        img = s.image
        if img.shape[0] != LINE_HEIGHT:
            raise DataError(f"sample {s.id}: height {img.shape[0]} != {LINE_HEIGHT}")
        if augment_config is not None and not augment_config.is_identity:
            img = augment(img, augment_config, rng)
        images.append(img)

    widths = [img.shape[1] for img in images]
    w_max = max(widths)
    t_max = w_max // PATCH_STRIDE
    b = len(samples)

    image_tensor = np.zeros((b, 1, LINE_HEIGHT, w_max), dtype=np.float32)
    patch_mask = np.zeros((b, t_max), dtype=bool)
    n_patches = np.zeros(b, dtype=np.int64)
    encoded = [alphabet.encode(s.text) for s in samples]
    l_max = max(len(e) for e in encoded) + 2
    target_ids = np.full((b, l_max), PAD_ID, dtype=np.int64)
    target_mask = np.zeros((b, l_max), dtype=bool)

    for i, (img, ids) in enumerate(zip(images, encoded)):
        image_tensor[i, 0, :, :img.shape[1]] = img
        n = img.shape[1] // PATCH_STRIDE
        n_patches[i] = n
        patch_mask[i, :n] = True
        framed = [BOS_ID] + ids + [EOS_ID]
        target_ids[i, :len(framed)] = framed
        target_mask[i, :len(framed)] = True

    return Batch(image_tensor, patch_mask, n_patches, target_ids, target_mask,
                 [s.id for s in samples])
