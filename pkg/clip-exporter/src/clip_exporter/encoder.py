"""Frozen image encoder.

No pretrained network ships with this package, so the encoder is a fixed
random projection whose weights are derived purely from the model id
string: same id, same weights, on any machine, with no downloads. It
keeps the two properties the export pipeline actually relies on: it is a
pure function of pixel content, and its weights never change. A real
pretrained encoder drops in anywhere an object with ``encode_many`` and
``dim`` is accepted.
"""

import hashlib

import numpy as np

FEATURE_DIM = 512

# side of the square lattice the image is resampled to before projection
_GRID = 16


class EncoderError(ValueError):
    """The encoder cannot be constructed as requested."""


def _resample(img, grid):
    """Bilinear resample [H, W, 3] to [grid, grid, 3]; any H, W >= 1."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    out = np.empty((grid, grid, 3))
    ys = np.clip((np.arange(grid) + 0.5) / grid * h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(grid) + 0.5) / grid * w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(grid, 1, 1)
    fx = (xs - x0).reshape(1, grid, 1)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out


class FrozenEncoder:
    """Deterministic image -> float32[512] map with immutable weights."""

    def __init__(self, model_id):
        if not isinstance(model_id, str) or not model_id:
            raise EncoderError(f"model id must be a non-empty string, "
                               f"got {model_id!r}")
        self.model_id = model_id
        d_in = _GRID * _GRID * 3
        seed = int.from_bytes(
            hashlib.sha256(model_id.encode("utf-8")).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        self._w = rng.standard_normal((d_in, FEATURE_DIM)) / np.sqrt(d_in)
        self._b = 0.1 * rng.standard_normal(FEATURE_DIM)
        self._w.flags.writeable = False
        self._b.flags.writeable = False

    @property
    def dim(self):
        return FEATURE_DIM

    def weight_digest(self):
        """Checksum over all weights; unchanged across any number of calls."""
        h = hashlib.sha256()
        h.update(self._w.tobytes())
        h.update(self._b.tobytes())
        return h.hexdigest()

    def encode(self, img):
        """One image [H, W, 3] in [0, 1] -> float32 [512]."""
        return self.encode_many([img])[0]

    def encode_many(self, images):
        """List of images (sizes may differ) -> float32 [n, 512]."""
        if not images:
            return np.zeros((0, FEATURE_DIM), dtype=np.float32)
        flat = np.stack([_resample(im, _GRID).reshape(-1) - 0.5
                         for im in images])
        return np.tanh(flat @ self._w + self._b).astype(np.float32)
