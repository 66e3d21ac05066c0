"""Image ingestion, the two augmentation pipelines, masking, the conv stem,
and synthetic dataset generation.

Images are [H, W, 3] float arrays in [0, 1] everywhere in this module;
every transform maps that range into itself. All randomness comes from
named streams so augmentation is a pure function of (seed, index, view).
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .rng import stream, truncated_normal


class InputError(ValueError):
    """A caller-supplied image or argument violates a precondition."""


class DatasetError(ValueError):
    """A dataset directory is structurally unusable."""


# ---------------------------------------------------------------------------
# PPM / PGM codec (P6 and P5, 8-bit binary)
# ---------------------------------------------------------------------------

def _read_header_token(f):
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise InputError("unexpected end of file in header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path):
    """Decode a binary 8-bit P6 file to float32 [H, W, 3] in [0, 1]."""
    with open(path, "rb") as f:
        try:
            magic = _read_header_token(f)
        except InputError as e:
            raise InputError(f"{path}: {e}") from None
        if magic != b"P6":
            raise InputError(f"{path}: not a P6 file (magic {magic!r})")
        try:
            w = int(_read_header_token(f))
            h = int(_read_header_token(f))
            maxval = int(_read_header_token(f))
        except ValueError as e:
            raise InputError(f"{path}: bad header: {e}") from None
        if maxval != 255:
            raise InputError(f"{path}: only maxval 255 supported, got {maxval}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise InputError(f"{path}: truncated pixel data "
                             f"({len(raw)} of {w * h * 3} bytes)")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0


def write_ppm(path, img):
    img = np.asarray(img)
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def write_pgm(path, gray):
    """Write a 2-d array as binary 8-bit P5, min-max normalized."""
    gray = np.asarray(gray, dtype=np.float64)
    lo, hi = gray.min(), gray.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip(np.rint((gray - lo) * scale), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------

def bilinear_resize(img, out_h, out_w):
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


# ---------------------------------------------------------------------------
# augmentation pipelines
# ---------------------------------------------------------------------------

@dataclass
class AugmentationConfig:
    crop_scale_min: float = 0.08
    crop_scale_max: float = 1.0
    crop_ratio: tuple = (3.0 / 4.0, 4.0 / 3.0)
    p_colorjitter: float = 0.8
    jitter_strengths: tuple = (0.4, 0.4, 0.4, 0.1)
    p_grayscale: float = 0.2
    p_hflip: float = 0.5
    p_blur: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    p_solarize: float = 0.2
    solarize_threshold: float = 0.5
    out_side: int = 32

    def validate(self):
        probs = (self.p_colorjitter, self.p_grayscale, self.p_hflip,
                 self.p_blur, self.p_solarize)
        if any(p < 0 or p > 1 for p in probs):
            raise InputError(f"probabilities must lie in [0,1]: {probs}")
        if self.crop_scale_min > self.crop_scale_max:
            raise InputError("crop_scale_min exceeds crop_scale_max")


_LUMA = np.array([0.299, 0.587, 0.114])


def _grayscale(img):
    g = img @ _LUMA
    return np.repeat(g[:, :, None], 3, axis=2)


def _rgb_to_hsv(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    diff = maxc - minc
    safe = np.where(diff == 0.0, 1.0, diff)
    s = np.where(maxc == 0.0, 0.0, diff / np.where(maxc == 0.0, 1.0, maxc))
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.select(
        [diff == 0.0, maxc == r, maxc == g],
        [0.0, bc - gc, 2.0 + rc - bc],
        default=4.0 + gc - rc,
    )
    h = (h / 6.0) % 1.0
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choose = [
        (v, t, p), (q, v, p), (p, v, t),
        (p, q, v), (t, p, v), (v, p, q),
    ]
    out = np.zeros(h.shape + (3,))
    for idx, (rr, gg, bb) in enumerate(choose):
        m = i == idx
        out[..., 0][m] = rr[m]
        out[..., 1][m] = gg[m]
        out[..., 2][m] = bb[m]
    return out


def random_resized_crop(img, rng, cfg):
    """Crop a random area/aspect patch, then resize to the output side.
    Ten sample attempts, then a clamped center-crop fallback."""
    h, w = img.shape[:2]
    area = h * w
    log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            patch = img[top:top + ch, left:left + cw]
            return bilinear_resize(patch, cfg.out_side, cfg.out_side)
    # fallback: largest centered crop with ratio clamped to the legal range
    in_ratio = w / h
    if in_ratio < cfg.crop_ratio[0]:
        cw, ch = w, min(h, int(round(w / cfg.crop_ratio[0])))
    elif in_ratio > cfg.crop_ratio[1]:
        cw, ch = min(w, int(round(h * cfg.crop_ratio[1]))), h
    else:
        cw, ch = w, h
    top, left = (h - ch) // 2, (w - cw) // 2
    patch = img[top:top + ch, left:left + cw]
    return bilinear_resize(patch, cfg.out_side, cfg.out_side)


def color_jitter(img, rng, strengths):
    """Brightness, contrast, saturation, hue, applied in that fixed order."""
    sb, sc, ss, sh = strengths
    out = img
    f = rng.uniform(max(0.0, 1.0 - sb), 1.0 + sb)
    out = np.clip(out * f, 0.0, 1.0)
    f = rng.uniform(max(0.0, 1.0 - sc), 1.0 + sc)
    mean = (out @ _LUMA).mean()
    out = np.clip(out * f + mean * (1.0 - f), 0.0, 1.0)
    f = rng.uniform(max(0.0, 1.0 - ss), 1.0 + ss)
    out = np.clip(out * f + _grayscale(out) * (1.0 - f), 0.0, 1.0)
    delta = rng.uniform(-sh, sh)
    hh, s, v = _rgb_to_hsv(out)
    out = np.clip(_hsv_to_rgb((hh + delta) % 1.0, s, v), 0.0, 1.0)
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian with reflected borders, radius ceil(2*sigma)."""
    radius = int(math.ceil(2.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    kern /= kern.sum()
    pad = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for o, kv in enumerate(kern):
        out += kv * pad[o:o + img.shape[0]]
    pad = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out2 = np.zeros_like(out)
    for o, kv in enumerate(kern):
        out2 += kv * pad[:, o:o + img.shape[1]]
    return np.clip(out2, 0.0, 1.0).astype(img.dtype)


def solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def _apply_view(img, rng, cfg, with_solarize):
    out = random_resized_crop(img, rng, cfg)
    if rng.uniform() < cfg.p_colorjitter:
        out = color_jitter(out, rng, cfg.jitter_strengths)
    if rng.uniform() < cfg.p_grayscale:
        out = _grayscale(out)
    if rng.uniform() < cfg.p_hflip:
        out = out[:, ::-1].copy()
    if rng.uniform() < cfg.p_blur:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    if with_solarize and rng.uniform() < cfg.p_solarize:
        out = solarize(out, cfg.solarize_threshold)
    return out.astype(np.float32)


def augment_pair(image, cfg, seed, index=0):
    """Two stochastic views of one image: view a without Solarize, view b
    with it. Deterministic in (seed, index, view)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] < 2 or image.shape[1] < 2:
        raise InputError(f"image too small or malformed: shape {image.shape}")
    cfg.validate()
    va = _apply_view(image, stream(seed, "aug", index, 0), cfg, False)
    vb = _apply_view(image, stream(seed, "aug", index, 1), cfg, True)
    return va, vb


def mask_image(image, fraction, seed, index=0):
    """Blacken a union of small random rectangles covering fraction of the
    pixels (exact count, well inside the 2 percent band). Scattered pieces
    occlude area without wiping out any whole region, so every local
    neighborhood keeps some signal. fraction == 0.0 is the documented
    no-op sentinel."""
    if fraction == 0.0:
        return np.asarray(image).copy()
    if not 0.3 <= fraction <= 0.5:
        raise InputError(f"mask fraction {fraction} outside [0.3, 0.5]")
    img = np.asarray(image).copy()
    h, w = img.shape[:2]
    rng = stream(seed, "mask", index)
    target = int(round(fraction * h * w))
    mask = np.zeros((h, w), dtype=bool)
    covered = 0
    # pieces are capped below the downsampled-token footprint (side // 8 at
    # three stride-2 convs) so no single piece can blank a whole token
    hi_h, hi_w = max(3, h // 5), max(3, w // 5)
    for _ in range(1000):
        if covered >= target:
            break
        mh = int(rng.integers(min(3, h), min(hi_h, h) + 1))
        mw = int(rng.integers(min(3, w), min(hi_w, w) + 1))
        top = int(rng.integers(0, h - mh + 1))
        left = int(rng.integers(0, w - mw + 1))
        # the closing rectangle is trimmed row by row (tail row by column)
        # so the covered count lands exactly on the target
        for r in range(top, top + mh):
            row = mask[r, left:left + mw]
            fresh = int((~row).sum())
            if covered + fresh <= target:
                row[:] = True
                covered += fresh
            else:
                for c in range(left, left + mw):
                    if covered == target:
                        break
                    if not mask[r, c]:
                        mask[r, c] = True
                        covered += 1
                break
    if covered < target:
        # pathological draw sequence: finish from a deterministic scan
        flat = mask.reshape(-1)
        for i in np.flatnonzero(~flat):
            if covered == target:
                break
            flat[i] = True
            covered += 1
    img[mask] = 0.0
    return img


# ---------------------------------------------------------------------------
# conv stem + positional embedding
# ---------------------------------------------------------------------------

class StemParams:
    """Stride-2 3x3 conv stack (channels doubling from 16, capped at E),
    1x1 projection to E, a learnable CLS token, and the positional table."""

    def __init__(self, side, n_convs, embed, max_tokens, seed, dtype=np.float32):
        if side % (2 ** n_convs) != 0:
            raise ShapeError(f"side {side} not divisible by stride {2 ** n_convs}")
        self.side = side
        self.n_convs = n_convs
        self.embed = embed
        self.patches = (side // (2 ** n_convs)) ** 2
        self.convs = []
        prev = 3
        for i in range(n_convs):
            out = min(16 * (2 ** i), embed)
            rng = stream(seed, "stem", i)
            w = ad.parameter(truncated_normal(rng, (out, prev, 3, 3), dtype=dtype),
                             name=f"stem.conv{i}.w")
            b = ad.parameter(np.zeros(out, dtype=dtype), name=f"stem.conv{i}.b")
            self.convs.append((w, b))
            prev = out
        rng = stream(seed, "stem", "proj")
        self.proj_w = ad.parameter(truncated_normal(rng, (prev, embed), dtype=dtype),
                                   name="stem.proj.w")
        self.proj_b = ad.parameter(np.zeros(embed, dtype=dtype), name="stem.proj.b")
        self.cls = ad.parameter(truncated_normal(stream(seed, "stem", "cls"),
                                                 (embed,), dtype=dtype),
                                name="stem.cls")
        self.pos = ad.parameter(truncated_normal(stream(seed, "stem", "pos"),
                                                 (max_tokens, embed), dtype=dtype),
                                name="stem.pos")

    def parameters(self):
        out = []
        for w, b in self.convs:
            out += [w, b]
        out += [self.proj_w, self.proj_b, self.cls, self.pos]
        return out


def conv_stem(images, p):
    """images: Tensor [B, 3, S, S] -> TokenSequence [B, P+1, E]."""
    if images.shape[2] != p.side or images.shape[3] != p.side:
        raise ShapeError(f"expected side {p.side}, got {images.shape[2:]}")
    h = images
    for i, (w, b) in enumerate(p.convs):
        h = ad.conv2d(h, w, b, stride=2, pad=1)
        if i < len(p.convs) - 1:
            h = ad.relu(h)
    bsz, ch, side, _ = h.shape
    h = ad.transpose(h, (0, 2, 3, 1))
    h = ad.reshape(h, (bsz, side * side, ch))
    h = ad.linear(h, p.proj_w, p.proj_b)
    cls = ad.add(ad.constant(np.zeros((bsz, 1, p.embed), dtype=h.dtype)),
                 ad.reshape(p.cls, (1, 1, p.embed)))
    return ad.concat([cls, h], axis=1)


def add_positional(tokens, pos_table):
    """out[b,t,:] = in[b,t,:] + pos[t,:], one shared table for both branches."""
    t = tokens.shape[1]
    if pos_table.shape[0] < t:
        raise ShapeError(
            f"positional table has {pos_table.shape[0]} rows, need {t}")
    rows = ad.narrow(pos_table, 0, 0, t)
    return ad.add(tokens, ad.reshape(rows, (1, t, pos_table.shape[1])))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    images: list                       # [H, W, 3] float32 arrays
    labels: np.ndarray                 # int64, evaluation only
    ids: list                          # unique strings, table lookup keys
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)


def _grating(side, angle, period=8.0, amplitude=0.9):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = math.cos(angle) * xx + math.sin(angle) * yy
    stripes = (np.floor(u / (period / 2.0)) % 2).astype(np.float64)
    return (0.5 - amplitude / 2.0) + amplitude * stripes


_TINTS = [
    (1.00, 0.92, 0.84),
    (0.84, 1.00, 0.92),
    (0.92, 0.84, 1.00),
    (1.00, 1.00, 0.88),
    (0.88, 1.00, 1.00),
    (1.00, 0.88, 1.00),
]


def class_template(c, k, side):
    """Deterministic per-class template: an oriented near-binary grating
    with a mild per-class color tint."""
    pattern = _grating(side, math.pi * c / k)
    tint = _TINTS[c % len(_TINTS)]
    return np.stack([pattern * t for t in tint], axis=-1)


def gen_synthetic(k, n_per_class, side, sigma, seed):
    """k template classes plus Gaussian pixel noise, clamped to [0,1]."""
    if k < 2:
        raise InputError(f"need at least 2 classes, got {k}")
    images, labels, ids = [], [], []
    for c in range(k):
        base = class_template(c, k, side)
        rng = stream(seed, "synth", c)
        for i in range(n_per_class):
            img = base + rng.normal(0.0, sigma, size=base.shape) if sigma > 0 else base.copy()
            images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
            labels.append(c)
            ids.append(f"class{c}/{i:05d}")
    return LabeledDataset(images, np.array(labels, dtype=np.int64), ids,
                          [f"class{c}" for c in range(k)])


def gen_confusable(n_per_class, side, sigma, seed, delta=0.12):
    """Two near-identical classes: the same grating, the second with a tiny
    center-patch brightness bump that the noise level drowns out."""
    base = np.stack([_grating(side, 0.0)] * 3, axis=-1)
    second = base.copy()
    c0 = side // 2 - 2
    second[c0:c0 + 4, c0:c0 + 4] = np.clip(second[c0:c0 + 4, c0:c0 + 4] + delta, 0, 1)
    images, labels, ids = [], [], []
    for c, tmpl in enumerate((base, second)):
        rng = stream(seed, "confusable", c)
        for i in range(n_per_class):
            img = tmpl + rng.normal(0.0, sigma, size=tmpl.shape)
            images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
            labels.append(c)
            ids.append(f"class{c}/{i:05d}")
    return LabeledDataset(images, np.array(labels, dtype=np.int64), ids,
                          ["class0", "class1"])


def save_dataset(dataset, directory):
    """Write class-per-subdirectory PPM tree matching load_dataset's layout."""
    for img, label, item_id in zip(dataset.images, dataset.labels, dataset.ids):
        rel = item_id if item_id.endswith(".ppm") else item_id + ".ppm"
        path = os.path.join(directory, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_ppm(path, img)


def load_dataset(directory):
    """One subdirectory per class, PPM files inside; labels follow sorted
    directory order, ids are paths relative to the root."""
    if not os.path.isdir(directory):
        raise DatasetError(f"not a directory: {directory}")
    class_names = sorted(
        d for d in os.listdir(directory)
        if os.path.isdir(os.path.join(directory, d)))
    if not class_names:
        raise DatasetError(f"no class subdirectories under {directory}")
    images, labels, ids = [], [], []
    for label, name in enumerate(class_names):
        files = sorted(os.listdir(os.path.join(directory, name)))
        if not files:
            raise DatasetError(f"empty class directory: {name}")
        for fn in files:
            path = os.path.join(directory, name, fn)
            try:
                images.append(read_ppm(path))
            except InputError:
                raise
            except OSError as e:
                raise InputError(f"{path}: {e}") from None
            labels.append(label)
            ids.append(f"{name}/{fn}")
    return LabeledDataset(images, np.array(labels, dtype=np.int64), ids,
                          class_names)
