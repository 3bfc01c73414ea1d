"""The four networks of the motion-refinement pipeline.

RegistrationNet bundles a per-frame encoder (image pair -> latent motion
features) with a skip-connected decoder (latents -> initial velocity).
NoisePredictor estimates the smoothed noise injected at a given diffusion
step, conditioned on the step through a sinusoidal embedding.
MotionDecoder reconstructs dense displacement sequences from refined
latents alone, modulated by pooled latent statistics and aware of image
coordinates so smooth global motions are cheap to represent.

Frames are handled per the temporal contract: the registration nets treat
frames as batch items (no cross-frame mixing); the diffusion-stage nets
fold frames into channels so convolutions mix motion across time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import ParameterStore
from .tensor import (
    Tensor,
    add,
    avgpool2,
    concat_channels,
    constant,
    conv2d,
    linear,
    nearest_upsample2,
    no_grad,
    relu,
    reshape,
    scale_shift,
)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    base_channels: int = 16
    latent_channels: int = 16
    num_down: int = 2
    time_embed_dim: int = 16

    def __post_init__(self):
        for field in ("in_channels", "base_channels", "latent_channels", "num_down", "time_embed_dim"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be a positive integer")


@dataclass(frozen=True)
class LatentFeatures:
    """Per-frame latent motion features plus grid provenance.

    values has shape (T, C, h, w) where h = height / 2**factor and
    w = width / 2**factor on the originating image grid.
    """

    values: np.ndarray
    height: int
    width: int
    factor: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 4:
            raise ValueError(f"latent features must be (T, C, h, w), got shape {v.shape}")
        scale = 2**self.factor
        if v.shape[2] * scale != self.height or v.shape[3] * scale != self.width:
            raise ValueError(
                f"latent spatial dims {v.shape[2:]} inconsistent with "
                f"{self.height}x{self.width} at downsample factor {self.factor}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("latent features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def sinusoidal_embedding(step: int, dim: int) -> np.ndarray:
    """Classic sin/cos positional code of an integer step, shape (dim,)."""
    if dim < 2 or dim % 2:
        raise ValueError("time_embed_dim must be an even integer >= 2")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = step * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (c_in * 9))
    return rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))


def _kaiming_linear(rng: np.random.Generator, f_in: int, f_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / f_in)
    return rng.uniform(-bound, bound, size=(f_in, f_out))


class _Net:
    def __init__(self, store: ParameterStore | None, prefix: str):
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix

    def _add(self, name: str, values) -> Tensor:
        return self.store.add(f"{self.prefix}.{name}", values)

    def _get(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def _conv(self, x, name: str, biased: bool = True) -> Tensor:
        w = self._get(f"{name}.w")
        b = self._get(f"{name}.b") if biased else None
        return conv2d(x, w, b)


class RegistrationNet(_Net):
    """Encoder/decoder pair mapping image pairs to initial velocities.

    The encoder runs per frame: input (T, 2, H, W) where channel 0 is the
    source frame and channel 1 the target frame.  Skip activations from
    the last encode are kept for the decoder.
    """

    def __init__(self, config: UNetConfig, store: ParameterStore | None = None,
                 prefix: str = "reg", seed: int = 0):
        super().__init__(store, prefix)
        self.config = config
        self.last_skips: list[Tensor] | None = None
        rng = np.random.default_rng(seed)
        b, c, k = config.base_channels, config.latent_channels, config.num_down

        self._add("enc.in.w", _kaiming_conv(rng, b, config.in_channels))
        self._add("enc.in.b", np.zeros(b))
        for i in range(k):
            ch = b * 2**i
            self._add(f"enc.refine{i}.w", _kaiming_conv(rng, ch, ch))
            self._add(f"enc.refine{i}.b", np.zeros(ch))
            self._add(f"enc.down{i}.w", _kaiming_conv(rng, 2 * ch, ch))
            self._add(f"enc.down{i}.b", np.zeros(2 * ch))
        self._add("enc.latent.w", _kaiming_conv(rng, c, b * 2**k))
        self._add("enc.latent.b", np.zeros(c))

        self._add("dec.in.w", _kaiming_conv(rng, b * 2**k, c))
        self._add("dec.in.b", np.zeros(b * 2**k))
        for i in reversed(range(k)):
            ch = b * 2**i
            self._add(f"dec.up{i}.w", _kaiming_conv(rng, ch, 2 * ch))
            self._add(f"dec.up{i}.b", np.zeros(ch))
            self._add(f"dec.fuse{i}.w", _kaiming_conv(rng, ch, 2 * ch))
            self._add(f"dec.fuse{i}.b", np.zeros(ch))
        self._add("dec.out.w", np.zeros((2, b, 3, 3)))

    def encode(self, pairs) -> tuple[Tensor, list[Tensor]]:
        pairs = pairs if isinstance(pairs, Tensor) else constant(pairs)
        t, cin, h, w = pairs.values.shape
        if cin != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {cin}")
        if h % 2**self.config.num_down or w % 2**self.config.num_down:
            raise ValueError(
                f"spatial dims {h}x{w} not divisible by 2^{self.config.num_down}"
            )
        x = relu(self._conv(pairs, "enc.in"))
        skips = []
        for i in range(self.config.num_down):
            x = relu(self._conv(x, f"enc.refine{i}"))
            skips.append(x)
            x = avgpool2(x)
            x = relu(self._conv(x, f"enc.down{i}"))
        z = self._conv(x, "enc.latent")
        self.last_skips = skips
        return z, skips

    def decode(self, z, skips: list[Tensor] | None = None) -> Tensor:
        z = z if isinstance(z, Tensor) else constant(z)
        if skips is None:
            skips = self.last_skips
        if skips is None:
            raise ValueError("no stored encoder skips; run encode first")
        if len(skips) != self.config.num_down:
            raise ValueError(f"expected {self.config.num_down} skip tensors, got {len(skips)}")
        x = relu(self._conv(z, "dec.in"))
        for i in reversed(range(self.config.num_down)):
            x = nearest_upsample2(x)
            x = relu(self._conv(x, f"dec.up{i}"))
            skip = skips[i]
            if skip.values.shape[2:] != x.values.shape[2:] or skip.values.shape[0] != x.values.shape[0]:
                raise ValueError(
                    f"stored skip shape {skip.values.shape} incompatible with "
                    f"decoder activation {x.values.shape}"
                )
            x = concat_channels([x, skip])
            x = relu(self._conv(x, f"dec.fuse{i}"))
        return conv2d(x, self._get("dec.out.w"))

    def forward(self, pairs) -> Tensor:
        z, skips = self.encode(pairs)
        return self.decode(z, skips)


class NoisePredictor(_Net):
    """Estimates the smoothed noise component of a noisy latent stack.

    Frames are folded into channels so convolutions mix motion across
    time; the step index enters every stage through a sinusoidal
    embedding mapped to per-channel scale and shift.
    """

    def __init__(self, config: UNetConfig, num_frames: int,
                 store: ParameterStore | None = None, prefix: str = "eps", seed: int = 1):
        super().__init__(store, prefix)
        self.config = config
        self.num_frames = num_frames
        rng = np.random.default_rng(seed)
        hid, k, d = config.base_channels, config.num_down, config.time_embed_dim
        tc = num_frames * config.latent_channels

        self._add("in.w", _kaiming_conv(rng, hid, tc))
        self._add("in.b", np.zeros(hid))
        self._add_film(rng, "film0", d, hid)
        for i in range(k):
            ch = hid * 2**i
            self._add(f"down{i}.w", _kaiming_conv(rng, 2 * ch, ch))
            self._add(f"down{i}.b", np.zeros(2 * ch))
            self._add_film(rng, f"film{i + 1}", d, 2 * ch)
            self._add(f"up{i}.w", _kaiming_conv(rng, ch, 2 * ch))
            self._add(f"up{i}.b", np.zeros(ch))
        self._add("out.w", np.zeros((tc, hid, 3, 3)))

    def _add_film(self, rng, name: str, d: int, ch: int) -> None:
        self._add(f"{name}.sw", _kaiming_linear(rng, d, ch))
        self._add(f"{name}.sb", np.zeros(ch))
        self._add(f"{name}.tw", _kaiming_linear(rng, d, ch))
        self._add(f"{name}.tb", np.zeros(ch))

    def _film(self, x, name: str, emb: Tensor) -> Tensor:
        s = linear(emb, self._get(f"{name}.sw"), self._get(f"{name}.sb"))
        t = linear(emb, self._get(f"{name}.tw"), self._get(f"{name}.tb"))
        return scale_shift(x, s, t)

    def forward(self, z_noisy, step: int) -> Tensor:
        if step < 1:
            raise ValueError(f"diffusion step must be >= 1, got {step}")
        z_noisy = z_noisy if isinstance(z_noisy, Tensor) else constant(z_noisy)
        t, c, h, w = z_noisy.values.shape
        if t != self.num_frames or c != self.config.latent_channels:
            raise ValueError(
                f"expected latents ({self.num_frames}, {self.config.latent_channels}, h, w), "
                f"got {z_noisy.values.shape}"
            )
        emb = constant(sinusoidal_embedding(step, self.config.time_embed_dim)[None, :])
        x = reshape(z_noisy, (1, t * c, h, w))
        x = relu(self._conv(x, "in"))
        x = self._film(x, "film0", emb)
        stack = [x]
        for i in range(self.config.num_down):
            x = avgpool2(x)
            x = relu(self._conv(x, f"down{i}"))
            x = self._film(x, f"film{i + 1}", emb)
            stack.append(x)
        for i in reversed(range(self.config.num_down)):
            x = nearest_upsample2(x)
            x = self._conv(x, f"up{i}")
            x = relu(add(x, stack[i]))
        out = conv2d(x, self._get("out.w"))
        return reshape(out, (t, c, h, w))


class MotionDecoder(_Net):
    """Reconstructs dense displacement sequences from latents alone.

    No encoder skips: the only inputs are the refined latents.  Pooled
    latent statistics modulate every stage (per-channel scale and shift),
    and two fixed coordinate channels join before the head so smooth
    position-dependent motion does not have to be synthesized from
    upsampled noise.  Output (T, 2, H, W) holds (x, y) displacement in
    pixels per frame.
    """

    def __init__(self, config: UNetConfig, num_frames: int, height: int, width: int,
                 store: ParameterStore | None = None, prefix: str = "mot", seed: int = 2):
        super().__init__(store, prefix)
        self.config = config
        self.num_frames = num_frames
        self.height = height
        self.width = width
        k = config.num_down
        if height % 2**k or width % 2**k:
            raise ValueError(f"spatial dims {height}x{width} not divisible by 2^{k}")
        rng = np.random.default_rng(seed)
        hid = config.base_channels
        tc = num_frames * config.latent_channels

        self._add("in.w", _kaiming_conv(rng, hid * 2**k, tc))
        self._add("in.b", np.zeros(hid * 2**k))
        self._add_film(rng, "film_in", tc, hid * 2**k)
        for i in range(k):
            ch = hid * 2 ** (k - i)
            self._add(f"up{i}.w", _kaiming_conv(rng, ch // 2, ch))
            self._add(f"up{i}.b", np.zeros(ch // 2))
            self._add_film(rng, f"film{i}", tc, ch // 2)
        self._add("head.w", _kaiming_conv(rng, hid, hid + 2))
        self._add("head.b", np.zeros(hid))
        self._add_film(rng, "film_head", tc, hid)
        self._add("out.w", np.zeros((2 * num_frames, hid, 3, 3)))

        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        coords = np.stack(
            [2 * xs / (width - 1) - 1, 2 * ys / (height - 1) - 1]
        )[None]
        self._coords = coords

    def _add_film(self, rng, name: str, d: int, ch: int) -> None:
        self._add(f"{name}.sw", _kaiming_linear(rng, d, ch))
        self._add(f"{name}.sb", np.zeros(ch))
        self._add(f"{name}.tw", _kaiming_linear(rng, d, ch))
        self._add(f"{name}.tb", np.zeros(ch))

    def _film(self, x, name: str, pooled: Tensor) -> Tensor:
        s = linear(pooled, self._get(f"{name}.sw"), self._get(f"{name}.sb"))
        t = linear(pooled, self._get(f"{name}.tw"), self._get(f"{name}.tb"))
        return scale_shift(x, s, t)

    def forward(self, z) -> Tensor:
        values = z.values if isinstance(z, (Tensor, LatentFeatures)) else np.asarray(z)
        z = z if isinstance(z, Tensor) else constant(values)
        t, c, h, w = z.values.shape
        if t != self.num_frames or c != self.config.latent_channels:
            raise ValueError(
                f"expected latents ({self.num_frames}, {self.config.latent_channels}, h, w), "
                f"got {z.values.shape}"
            )
        if h * 2**self.config.num_down != self.height or w * 2**self.config.num_down != self.width:
            raise ValueError(
                f"latent dims {h}x{w} do not upsample to {self.height}x{self.width} "
                f"in {self.config.num_down} steps"
            )
        tc = t * c
        x = reshape(z, (1, tc, h, w))
        mean_w = constant(np.full((h * w, 1), 1.0 / (h * w)))
        pooled = reshape(linear(reshape(x, (tc, h * w)), mean_w), (1, tc))

        x = relu(self._conv(x, "in"))
        x = self._film(x, "film_in", pooled)
        for i in range(self.config.num_down):
            x = nearest_upsample2(x)
            x = relu(self._conv(x, f"up{i}"))
            x = self._film(x, f"film{i}", pooled)
        x = concat_channels([x, constant(self._coords)])
        x = relu(self._conv(x, "head"))
        x = self._film(x, "film_head", pooled)
        out = conv2d(x, self._get("out.w"))
        return reshape(out, (self.num_frames, 2, self.height, self.width))


def encoder_forward(net: RegistrationNet, image_pairs: np.ndarray) -> LatentFeatures:
    """Frozen encoder pass: (T, 2, H, W) image pairs -> latent features.

    Stores the skip activations on the network for a following decoder
    pass over the same input.
    """
    pairs = np.asarray(image_pairs, dtype=np.float64)
    with no_grad():
        z, _ = net.encode(pairs)
    return LatentFeatures(z.values, pairs.shape[2], pairs.shape[3], net.config.num_down)


def velocity_decoder_forward(net: RegistrationNet, z: LatentFeatures) -> np.ndarray:
    """Frozen decoder pass using the skips stored by encoder_forward."""
    if net.last_skips is None:
        raise ValueError("no stored encoder skips; run encoder_forward first")
    with no_grad():
        v = net.decode(constant(z.values), net.last_skips)
    return v.values


def epsilon_forward(net: NoisePredictor, z_noisy, step: int) -> Tensor:
    return net.forward(z_noisy, step)


def motion_decoder_forward(net: MotionDecoder, z) -> Tensor:
    return net.forward(z)
