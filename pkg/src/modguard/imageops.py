"""Image decoding, resizing, cropping and training-time augmentation.

Images are held as ``ImageTensor``: an immutable ``(height, width, 3)``
float64 RGB array with intensities in ``[0, 1]``. Every operation here is a
pure function of its inputs; randomized helpers take an explicit
``numpy.random.Generator`` and never touch global RNG state.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DecodeError, EmptyCrop

PAD_VALUE = 0.5
DETECTOR_SIZE = 300
CLASSIFIER_SIZE = 224

_SUPPORTED_FORMATS = ("PNG", "JPEG")
_SUPPORTED_MODES = ("1", "L", "LA", "P", "PA", "RGB", "RGBA", "RGBX", "YCbCr")


class ImageTensor:
    """Immutable RGB image with intensities in [0, 1]."""

    __slots__ = ("_data",)
    channels = 3

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have positive height and width")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _trusted(cls, arr: np.ndarray) -> "ImageTensor":
        # internal constructor for arrays already known to satisfy the invariants
        obj = cls.__new__(cls)
        arr = np.clip(np.ascontiguousarray(arr, dtype=np.float64), 0.0, 1.0)
        arr.flags.writeable = False
        obj._data = arr
        return obj

    @classmethod
    def full(cls, height: int, width: int, value: float = 0.0) -> "ImageTensor":
        return cls(np.full((height, width, 3), value))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def tobytes(self) -> bytes:
        """Canonical byte form: little-endian float32 intensities, row-major."""
        return self._data.astype("<f4").tobytes()

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    __hash__ = None

    def __repr__(self):
        return f"ImageTensor(height={self.height}, width={self.width})"


@dataclass(frozen=True)
class LetterboxTransform:
    """Mapping between a source image and its letterboxed square."""

    scale: float
    pad_left: int
    pad_top: int
    content_width: int
    content_height: int
    source_width: int
    source_height: int
    target: int

    def to_source(self, xmin, ymin, xmax, ymax):
        """Map normalized letterbox coordinates to normalized source coordinates.

        Results are clipped to [0, 1]; boxes lying in the padding collapse.
        """
        t = self.target
        sx = np.clip((np.asarray(xmin) * t - self.pad_left) / self.content_width, 0.0, 1.0)
        sy = np.clip((np.asarray(ymin) * t - self.pad_top) / self.content_height, 0.0, 1.0)
        ex = np.clip((np.asarray(xmax) * t - self.pad_left) / self.content_width, 0.0, 1.0)
        ey = np.clip((np.asarray(ymax) * t - self.pad_top) / self.content_height, 0.0, 1.0)
        return sx, sy, ex, ey

    def to_target(self, xmin, ymin, xmax, ymax):
        t = self.target
        return (
            (np.asarray(xmin) * self.content_width + self.pad_left) / t,
            (np.asarray(ymin) * self.content_height + self.pad_top) / t,
            (np.asarray(xmax) * self.content_width + self.pad_left) / t,
            (np.asarray(ymax) * self.content_height + self.pad_top) / t,
        )


def decode_image(payload: bytes) -> ImageTensor:
    """Decode a PNG or JPEG byte string into an RGB ``ImageTensor``."""
    try:
        with Image.open(io.BytesIO(payload)) as im:
            if im.format not in _SUPPORTED_FORMATS:
                raise DecodeError(f"unsupported image format {im.format!r}")
            if im.mode not in _SUPPORTED_MODES:
                raise DecodeError(f"unsupported color space {im.mode!r}")
            im.load()
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"malformed image payload: {exc}") from exc
    return ImageTensor._trusted(rgb.astype(np.float64) / 255.0)


def encode_png(img: ImageTensor) -> bytes:
    """Encode as 8-bit RGB PNG (intensities rounded to the nearest k/255)."""
    arr = np.rint(img.data * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def encode_jpeg(img: ImageTensor, quality: int = 95) -> bytes:
    arr = np.rint(img.data * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) resampling matrix for one axis.

    Downscaling averages the exact input area under each output pixel;
    upscaling samples bilinearly at pixel centers with edge clamping.
    """
    if n_in == n_out:
        return np.eye(n_out)
    if n_out < n_in:
        step = n_in / n_out
        lo = np.arange(n_out)[:, None] * step
        hi = lo + step
        i = np.arange(n_in)[None, :]
        overlap = np.minimum(hi, i + 1) - np.maximum(lo, i)
        w = np.clip(overlap, 0.0, None) / step
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        w = np.zeros((n_out, n_in))
        rows = np.arange(n_out)
        np.add.at(w, (rows, i0), 1.0 - frac)
        np.add.at(w, (rows, i1), frac)
    return w / w.sum(axis=1, keepdims=True)


def _resample(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = data.shape
    if (h, w) == (out_h, out_w):
        return data
    wy = _axis_weights(h, out_h)
    wx = _axis_weights(w, out_w)
    tmp = np.tensordot(wy, data, axes=(1, 0))  # (out_h, w, c)
    out = np.tensordot(tmp, wx, axes=(1, 1))  # (out_h, c, out_w)
    return out.transpose(0, 2, 1)


def resize(img: ImageTensor, height: int, width: int) -> ImageTensor:
    """Resize to an exact size: area-average when shrinking, bilinear when growing."""
    if height < 1 or width < 1:
        raise ValueError("target size must be positive")
    return ImageTensor._trusted(_resample(img.data, height, width))


def resize_letterbox(img: ImageTensor, target: int = DETECTOR_SIZE):
    """Aspect-preserving resize into a ``target`` square padded with mid-gray.

    Returns the square image and the ``LetterboxTransform`` needed to map
    boxes back to the source frame.
    """
    if target < 1:
        raise ValueError("target must be positive")
    h, w = img.height, img.width
    scale = min(target / h, target / w)
    cw = min(target, max(1, int(round(w * scale))))
    ch = min(target, max(1, int(round(h * scale))))
    pad_left = (target - cw) // 2
    pad_top = (target - ch) // 2
    canvas = np.full((target, target, 3), PAD_VALUE)
    canvas[pad_top:pad_top + ch, pad_left:pad_left + cw] = _resample(img.data, ch, cw)
    tf = LetterboxTransform(scale, pad_left, pad_top, cw, ch, w, h, target)
    return ImageTensor._trusted(canvas), tf


def resize_antialias(img: ImageTensor, target: int = CLASSIFIER_SIZE) -> ImageTensor:
    """Square resize for the classifier; aspect ratio is not preserved."""
    if target < 1:
        raise ValueError("target must be positive")
    return resize(img, target, target)


def _box_coords(box):
    if hasattr(box, "xmin"):
        return float(box.xmin), float(box.ymin), float(box.xmax), float(box.ymax)
    xmin, ymin, xmax, ymax = (float(v) for v in box)
    return xmin, ymin, xmax, ymax


def crop_region(height: int, width: int, box, margin: float = 0.0):
    """Pixel slice bounds ``(top, bottom, left, right)`` of a margin-expanded box.

    ``margin`` is a fraction of the box size added on every side; the result
    is clamped to the image.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    xmin, ymin, xmax, ymax = _box_coords(box)
    bw, bh = xmax - xmin, ymax - ymin
    x0 = min(max(xmin - margin * bw, 0.0), 1.0)
    x1 = min(max(xmax + margin * bw, 0.0), 1.0)
    y0 = min(max(ymin - margin * bh, 0.0), 1.0)
    y1 = min(max(ymax + margin * bh, 0.0), 1.0)
    left, right = math.floor(x0 * width), math.ceil(x1 * width)
    top, bottom = math.floor(y0 * height), math.ceil(y1 * height)
    return top, bottom, left, right


def crop(img: ImageTensor, box, margin: float = 0.0) -> ImageTensor:
    top, bottom, left, right = crop_region(img.height, img.width, box, margin)
    if bottom <= top or right <= left:
        raise EmptyCrop(f"crop of {_box_coords(box)} with margin {margin} is empty")
    return ImageTensor._trusted(img.data[top:bottom, left:right])


def random_crop(img: ImageTensor, rng: np.random.Generator,
                min_area: float = 0.6, max_area: float = 1.0) -> ImageTensor:
    """Crop a square-proportioned window covering a random area fraction."""
    area = rng.uniform(min_area, max_area)
    side = math.sqrt(area)
    x0 = rng.uniform(0.0, 1.0 - side)
    y0 = rng.uniform(0.0, 1.0 - side)
    return crop(img, (x0, y0, x0 + side, y0 + side), 0.0)


def rotate(img: ImageTensor, degrees: float) -> ImageTensor:
    """Rotate counter-clockwise about the center.

    Multiples of 90 degrees are exact pixel permutations (the frame turns
    with the image); other angles keep the frame, sample bilinearly and fill
    uncovered pixels with mid-gray.
    """
    quarter, rem = divmod(float(degrees), 90.0)
    if rem == 0.0:
        return ImageTensor._trusted(np.rot90(img.data, k=int(quarter) % 4, axes=(0, 1)))
    out = ndimage.rotate(img.data, degrees, axes=(1, 0), reshape=False,
                         order=1, mode="constant", cval=PAD_VALUE)
    return ImageTensor._trusted(out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ``ceil(3 * sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if 2.0 * sigma * sigma == 0.0:  # zero or so small that the variance underflows
        return np.ones(1)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * data.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="edge")
    n = data.shape[axis]
    out = np.zeros_like(data)
    for j, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(img: ImageTensor, sigma: float) -> ImageTensor:
    kernel = gaussian_kernel(sigma)
    if len(kernel) == 1:
        return img
    out = _convolve_axis(img.data, kernel, axis=0)
    out = _convolve_axis(out, kernel, axis=1)
    return ImageTensor._trusted(out)


def augment(img: ImageTensor, rng: np.random.Generator, max_degrees: float = 15.0,
            max_sigma: float = 1.5, blur_prob: float = 0.5) -> ImageTensor:
    """Training-time mix of rotation, random crop and random Gaussian blur."""
    out = rotate(img, rng.uniform(-max_degrees, max_degrees))
    out = random_crop(out, rng)
    if rng.uniform() < blur_prob:
        out = gaussian_blur(out, rng.uniform(0.0, max_sigma))
    return out
