"""
Image data channels and integral images. An input grayscale image is turned into a stack of N
scalar channels (horizontal and vertical gradient magnitudes, gradient orientation and pixel
intensity by default, plus any user supplied extras such as depth maps or segmentation labels),
each paired with its integral image so that the mean of any axis-aligned rectangle is an O(1)
lookup.

Channels and integrals are kept in double precision throughout; nothing is requantized to 8 bits.
"""

import numpy as np
from scipy import ndimage


DEFAULT_CHANNELS = ('grad_x', 'grad_y', 'grad_orientation', 'intensity')

# Short names accepted on the command line and in configs.
CHANNEL_ALIASES = {
    'gx': 'grad_x',
    'gy': 'grad_y',
    'go': 'grad_orientation',
    'gi': 'intensity',
}


def canonical_channel_name(name):
    """
    Resolves a channel alias (``gx``) to its canonical name (``grad_x``). Other names pass through
    unchanged, which is how extra channels are referred to.
    """
    name = str(name).strip()
    return CHANNEL_ALIASES.get(name, name)


def as_gray_image(pixels):
    """
    Validates and converts array-like pixel data into a ``(H, W)`` float64 grayscale image.
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(
            f'A grayscale image must be two-dimensional, but an array of shape {img.shape} was '
            f'provided instead.'
        )
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f'A grayscale image must be at least 1x1, got shape {img.shape}.')
    return img


##################
# INTEGRAL IMAGE #
##################

def build_integral(channel):
    """
    Builds the ``(H + 1, W + 1)`` integral image of a channel. Entry ``(r, c)`` is the sum of
    all channel values with row < r and col < c, so the first row and column are zero.
    """
    channel = np.asarray(channel, dtype=np.float64)
    integral = np.zeros((channel.shape[0] + 1, channel.shape[1] + 1), dtype=np.float64)
    integral[1:, 1:] = channel.cumsum(axis=0).cumsum(axis=1)
    return integral


def _check_rect(integral, rect):
    x, y, width, height = (int(v) for v in rect)
    image_height, image_width = integral.shape[0] - 1, integral.shape[1] - 1
    if width < 1 or height < 1:
        raise ValueError(f'The rectangle {tuple(rect)} has an empty area.')
    if x < 0 or y < 0 or x + width > image_width or y + height > image_height:
        raise ValueError(
            f'The rectangle {tuple(rect)} (x, y, width, height) does not lie inside the '
            f'{image_width}x{image_height} image.'
        )
    return x, y, width, height


def region_sum(integral, rect):
    """
    Sum of the channel values inside ``rect = (x, y, width, height)``, where ``x`` is the left
    column and ``y`` the top row, computed from four integral image lookups.
    """
    x, y, width, height = _check_rect(integral, rect)
    return (integral[y + height, x + width] - integral[y, x + width]
            - integral[y + height, x] + integral[y, x])


def region_mean(integral, rect):
    """
    Mean of the channel values inside ``rect = (x, y, width, height)``.
    """
    _, _, width, height = _check_rect(integral, rect)
    return region_sum(integral, rect) / (width * height)


def grid_sums(integral, row_edges, col_edges):
    """
    Vectorized patch sums over grids of rectangles. ``row_edges`` is ``(K, n + 1)`` and
    ``col_edges`` is ``(K, m + 1)``, one row of ascending pixel boundaries per grid; the result is
    ``(..., K, n, m)`` where the leading axes are those of ``integral`` beyond the last two.
    Bounds are not checked here; callers validate edges first.
    """
    row_edges = np.asarray(row_edges, dtype=np.intp)
    col_edges = np.asarray(col_edges, dtype=np.intp)
    corners = integral[..., row_edges[:, :, None], col_edges[:, None, :]]
    return (corners[..., 1:, 1:] - corners[..., :-1, 1:]
            - corners[..., 1:, :-1] + corners[..., :-1, :-1])


############
# CHANNELS #
############

def sobel_gradients(img):
    """
    Signed Sobel 3x3 responses ``(gx, gy)`` with replicated borders. ``gx`` grows left to right
    and ``gy`` grows top to bottom.
    """
    img = as_gray_image(img)
    gx = ndimage.sobel(img, axis=1, mode='nearest')
    gy = ndimage.sobel(img, axis=0, mode='nearest')
    return gx, gy


def gradient_orientation(gx, gy):
    """
    Maps the gradient angle ``atan2(gy, gx)`` linearly from (-pi, pi] onto [0, 1) as
    ``(pi - angle) / (2 pi)``. A zero gradient has angle 0 and so maps to 0.5.

    Orientation is averaged linearly over patches downstream, so values near the wrap-around
    point are not treated as close to each other.
    """
    # adding 0.0 turns -0.0 into +0.0, which keeps atan2 away from -pi
    angle = np.arctan2(np.asarray(gy) + 0.0, np.asarray(gx) + 0.0)
    return (np.pi - angle) / (2 * np.pi)


class ChannelStack:
    """
    An immutable, ordered stack of ``N`` channel images of one source image, each paired with its
    integral image. ``channels`` is ``(N, H, W)`` and ``integrals`` is ``(N, H + 1, W + 1)``.

    A stack is safe to read from any number of threads.
    """
    def __init__(self, kinds, channels, integrals=None):
        kinds = tuple(canonical_channel_name(k) for k in kinds)
        if len(kinds) < 1:
            raise ValueError('A channel stack needs at least one channel.')
        channels = np.array(channels, dtype=np.float64)
        if channels.ndim != 3 or channels.shape[0] != len(kinds):
            raise ValueError(
                f'Expected a (N, H, W) channel array with N = {len(kinds)}, got shape '
                f'{channels.shape}.'
            )
        if len(set(kinds)) != len(kinds):
            raise ValueError(f'Channel names must be unique, got {kinds}.')
        if integrals is None:
            integrals = np.stack([build_integral(c) for c in channels])

        channels.flags.writeable = False
        integrals = np.array(integrals, dtype=np.float64)
        integrals.flags.writeable = False

        self.kinds = kinds
        self.channels = channels
        self.integrals = integrals

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]

    def __len__(self):
        return len(self.kinds)

    def __repr__(self):
        return f'ChannelStack(kinds={self.kinds}, width={self.width}, height={self.height})'

    def index(self, kind):
        kind = canonical_channel_name(kind)
        if kind not in self.kinds:
            raise ValueError(
                f'The channel {kind!r} is not in this stack, which holds {list(self.kinds)}.'
            )
        return self.kinds.index(kind)

    def channel(self, kind):
        return self.channels[self.index(kind)]

    def integral(self, kind):
        return self.integrals[self.index(kind)]

    def region_mean(self, kind, rect):
        return region_mean(self.integral(kind), rect)

    def region_means(self, kind, rects):
        """
        Vectorized ``region_mean`` over a ``(R, 4)`` array of ``(x, y, width, height)`` rects.
        """
        rects = np.asarray(rects, dtype=np.intp).reshape(-1, 4)
        x, y, width, height = rects.T
        if ((width < 1) | (height < 1)).any():
            raise ValueError('Every rectangle must have a nonempty area.')
        outside = (x < 0) | (y < 0) | (x + width > self.width) | (y + height > self.height)
        if outside.any():
            raise ValueError(
                f'The rectangle {tuple(rects[outside][0])} (x, y, width, height) does not lie '
                f'inside the {self.width}x{self.height} image.'
            )
        integral = self.integral(kind)
        sums = (integral[y + height, x + width] - integral[y, x + width]
                - integral[y + height, x] + integral[y, x])
        return sums / (width * height)

    def select(self, kinds):
        """
        Returns a stack holding only the requested channels, in the requested order. The
        integral images are reused, not recomputed.
        """
        idxs = [self.index(kind) for kind in kinds]
        return ChannelStack(
            [self.kinds[i] for i in idxs], self.channels[idxs], self.integrals[idxs]
        )


def compute_channels(img, extras=None):
    """
    Computes the channel stack of a grayscale image. The default channels come first, in the
    order ``grad_x, grad_y, grad_orientation, intensity``:

    * ``grad_x`` and ``grad_y`` are the absolute Sobel 3x3 responses.
    * ``grad_orientation`` is the normalized gradient angle, see ``gradient_orientation``.
    * ``intensity`` is the input pixel values.

    ``extras`` is an optional list of ``(name, channel_image)`` pairs (or a dict), appended in
    registration order. Every extra must have the same dimensions as the image.
    """
    img = as_gray_image(img)
    gx, gy = sobel_gradients(img)

    kinds = list(DEFAULT_CHANNELS)
    channels = [np.abs(gx), np.abs(gy), gradient_orientation(gx, gy), img]

    if extras is None:
        extras = []
    elif isinstance(extras, dict):
        extras = list(extras.items())

    for name, extra in extras:
        extra = np.asarray(extra, dtype=np.float64)
        if extra.shape != img.shape:
            raise ValueError(
                f'The extra channel {name!r} has shape {extra.shape}, but the image has shape '
                f'{img.shape}. Extra channels must match the image dimensions.'
            )
        kinds.append(canonical_channel_name(name))
        channels.append(extra)

    return ChannelStack(kinds, np.stack(channels))


def select_channels(stack, kinds):
    """
    Sub-stack holding the requested channels (names or aliases) in the requested order.
    """
    return stack.select([canonical_channel_name(k) for k in kinds])


__all__ = [
    'DEFAULT_CHANNELS', 'CHANNEL_ALIASES', 'canonical_channel_name', 'as_gray_image',
    'build_integral', 'region_sum', 'region_mean', 'grid_sums', 'sobel_gradients',
    'gradient_orientation', 'ChannelStack', 'compute_channels', 'select_channels'
]
