"""Parameterized models for both halves of the pipeline.

The shape side: a convolutional encoder feeding a fully connected warp
predictor (noise is mixed into the encoded feature by addition), two decoders
that reconstruct the input image and the injected noise from the predicted
warp parameters, and a patch discriminator over glyph shapes.

The texture side: a pair of encoder/residual/decoder generators mapping
between the clean-glyph and photographic domains, plus one patch
discriminator per domain.

Predictor outputs are squashed into a plausible warp range before use:
control offsets 0.2*tanh, rotation (pi/6)*tanh, scale exp(0.3*tanh), shifts
0.3*tanh, so an all-zero raw output decodes to the identity warp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OFFSET_RANGE = 0.2
ROTATION_RANGE = math.pi / 6
LOG_SCALE_RANGE = 0.3
SHIFT_RANGE = 0.3


@dataclass(frozen=True)
class Mode:
    """Forward-pass mode: batch-norm statistics source and bookkeeping."""

    training: bool = True
    update_stats: bool = True


TRAIN = Mode(training=True, update_stats=True)
FROZEN = Mode(training=True, update_stats=False)  # aux forwards during training
EVAL = Mode(training=False, update_stats=False)


@dataclass(frozen=True)
class NetConfig:
    """Widths and sizes for one build of the model pair.

    ``channel_mult`` scales every convolutional width uniformly (1.0 is the
    published full scale, 0.25 the desk scale). Image sizes must be square
    and either a multiple of 16 (four upsampling stages in the image decoder)
    or exactly 8 (a reduced three-stage decoder used by the tiny test nets).
    """

    image_size: int = 64
    n_ctrl: int = 4
    channel_mult: float = 1.0
    ttg_base: int = 32

    def __post_init__(self) -> None:
        s = self.image_size
        if s != 8 and (s < 16 or s % 16 != 0):
            raise ValueError(
                f"image size must be a multiple of 16 (or exactly 8 for tiny nets); "
                f"the pooling/upsampling chains require it, got {s}"
            )
        if self.n_ctrl < 2:
            raise ValueError("control grid needs n_ctrl >= 2")
        if self.channel_mult <= 0:
            raise ValueError("channel_mult must be positive")

    def scaled(self, width: int) -> int:
        return max(1, round(width * self.channel_mult))

    @property
    def theta_len(self) -> int:
        return 2 * self.n_ctrl * self.n_ctrl + 4

    @property
    def feature_len(self) -> int:
        # three pooling stages in the encoder; the flattened conv output is
        # the predictor's working width (1024 at full scale on 64x64 input)
        side = self.image_size // 8
        return self.scaled(16) * side * side

    @property
    def noise_dim(self) -> int:
        return self.feature_len

    @property
    def decoder_stages(self) -> int:
        return 3 if self.image_size == 8 else 4

    @property
    def decoder_seed_side(self) -> int:
        return self.image_size // (2 ** self.decoder_stages)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Module:
    """Minimal container: parameter/state discovery by attribute walk."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((path, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(path))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{path}.{i}"))
        return out

    def named_state(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Module):
                out.extend(val.named_state(path))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_state(f"{path}.{i}"))
            elif isinstance(val, np.ndarray) and key.startswith("running_"):
                out.append((path, val))
        return out

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()


def _trunc_normal(rng: np.random.Generator, shape, sigma: float, dtype) -> np.ndarray:
    vals = rng.normal(0.0, sigma, size=shape)
    for _ in range(4):
        bad = np.abs(vals) > 2 * sigma
        if not bad.any():
            break
        vals[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
    return np.clip(vals, -2 * sigma, 2 * sigma).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        bound = math.sqrt(6.0 / in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        out = ad.matmul(x, ad.transpose(self.weight))
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.stride, self.pad = stride, pad
        self.weight = Tensor(_trunc_normal(rng, (out_ch, in_ch, kernel, kernel), 0.02, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.stride, self.pad = stride, pad
        self.weight = Tensor(_trunc_normal(rng, (in_ch, out_ch, kernel, kernel), 0.02, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, width: int, dtype=np.float32, momentum: float = 0.9):
        self.momentum = momentum
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=mode.training, update_stats=mode.update_stats, momentum=self.momentum,
        )


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return ad.relu(x) - slope * ad.relu(-x)


def range_squash(x: Tensor) -> Tensor:
    """Map unbounded activations into [0, 1]."""
    return 0.5 * (ad.tanh(x) + 1.0)


# ---------------------------------------------------------------------------
# shape-side nets
# ---------------------------------------------------------------------------

class GlyphEncoder(Module):
    """Four conv blocks (pooling on the first three) flattened to a feature row."""

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        widths = [cfg.scaled(c) for c in (64, 128, 64, 16)]
        ins = [1] + widths[:-1]
        self.convs = [Conv2d(i, o, 3, 1, 1, rng, dtype, bias=False) for i, o in zip(ins, widths)]
        self.norms = [BatchNorm(o, dtype) for o in widths]
        self.feature_len = cfg.feature_len

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = ad.relu(norm(conv(h), mode))
            if i < 3:
                h = ad.max_pool2d(h)
        return ad.reshape(h, (h.shape[0], self.feature_len))


class WarpPredictor(Module):
    """Fully connected head mapping noisy features to raw warp parameters."""

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        w = cfg.feature_len
        self.hidden = [Linear(w, w, rng, dtype, bias=False) for _ in range(3)]
        self.norms = [BatchNorm(w, dtype) for _ in range(3)]
        self.head = Linear(w, cfg.theta_len, rng, dtype)

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = x
        for lin, norm in zip(self.hidden, self.norms):
            h = ad.relu(norm(lin(h), mode))
        return self.head(h)


class ImageDecoder(Module):
    """Inverse of encoder+predictor: warp parameters back to an image."""

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        t = cfg.theta_len
        w = cfg.feature_len
        self.seed_ch = cfg.scaled(64)
        self.seed_side = cfg.decoder_seed_side
        seed = self.seed_ch * self.seed_side ** 2
        dims = [(t, t), (t, w), (w, w), (w, seed)]
        self.fcs = [Linear(i, o, rng, dtype, bias=False) for i, o in dims]
        self.fc_norms = [BatchNorm(o, dtype) for _, o in dims[:-1]]
        up_widths = [cfg.scaled(c) for c in (64, 128, 64)][-(cfg.decoder_stages - 1):] + [1]
        ins = [self.seed_ch] + up_widths[:-1]
        self.ups = [ConvTranspose2d(i, o, 4, 2, 1, rng, dtype, bias=False) for i, o in zip(ins, up_widths)]
        self.up_norms = [BatchNorm(o, dtype) for o in up_widths]

    def __call__(self, theta: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = theta
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = ad.relu(self.fc_norms[i](h, mode))
        h = ad.reshape(h, (h.shape[0], self.seed_ch, self.seed_side, self.seed_side))
        for up, norm in zip(self.ups, self.up_norms):
            h = ad.relu(norm(up(h), mode))
        return h


class NoiseDecoder(Module):
    """The fully connected part of the image decoder, ending at the noise width."""

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        t = cfg.theta_len
        w = cfg.feature_len
        dims = [(t, t), (t, w), (w, w), (w, cfg.noise_dim)]
        self.fcs = [Linear(i, o, rng, dtype, bias=False) for i, o in dims[:-1]] + [Linear(*dims[-1], rng, dtype)]
        self.norms = [BatchNorm(o, dtype) for _, o in dims[:-1]]

    def __call__(self, theta: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = theta
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = ad.relu(self.norms[i](h, mode))
        return h


class PatchDiscriminator(Module):
    """Strided conv stack; the patch map is averaged to one score per sample.

    Depth adapts to the input size so the final map never collapses below 2x2.
    """

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32):
        n_down = 3 if cfg.image_size >= 64 else 2
        widths = [cfg.scaled(c) for c in (64, 128, 256)][:n_down]
        ins = [1] + widths[:-1]
        self.convs = [Conv2d(i, o, 4, 2, 1, rng, dtype, bias=(n == 0)) for n, (i, o) in enumerate(zip(ins, widths))]
        self.norms = [None] + [BatchNorm(w, dtype) for w in widths[1:]]
        map_side = cfg.image_size // (2 ** n_down)
        self.head = Conv2d(widths[-1], 1, 4 if map_side >= 4 else 3, 1, 1, rng, dtype)

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            if norm is not None:
                h = norm(h, mode)
            h = leaky_relu(h)
        return ad.mean_axes(self.head(h), (1, 2, 3))


# ---------------------------------------------------------------------------
# texture-side nets
# ---------------------------------------------------------------------------

class ResidualBlock(Module):
    def __init__(self, width: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(width, width, 3, 1, 1, rng, dtype, bias=False)
        self.norm1 = BatchNorm(width, dtype)
        self.conv2 = Conv2d(width, width, 3, 1, 1, rng, dtype, bias=False)
        self.norm2 = BatchNorm(width, dtype)

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = ad.relu(self.norm1(self.conv1(x), mode))
        h = self.norm2(self.conv2(h), mode)
        return x + h


class TextureGenerator(Module):
    """encoder / two residual blocks / decoder, output squashed into [0, 1]."""

    def __init__(self, cfg: NetConfig, rng, dtype=np.float32, n_residual: int = 2):
        base = cfg.scaled(cfg.ttg_base)
        self.head = Conv2d(1, base, 3, 1, 1, rng, dtype, bias=False)
        self.head_norm = BatchNorm(base, dtype)
        self.down = Conv2d(base, 2 * base, 3, 2, 1, rng, dtype, bias=False)
        self.down_norm = BatchNorm(2 * base, dtype)
        self.blocks = [ResidualBlock(2 * base, rng, dtype) for _ in range(n_residual)]
        self.up = ConvTranspose2d(2 * base, base, 4, 2, 1, rng, dtype, bias=False)
        self.up_norm = BatchNorm(base, dtype)
        self.tail = Conv2d(base, 1, 3, 1, 1, rng, dtype)

    def __call__(self, x: Tensor, mode: Mode = TRAIN) -> Tensor:
        h = ad.relu(self.head_norm(self.head(x), mode))
        h = ad.relu(self.down_norm(self.down(h), mode))
        for block in self.blocks:
            h = block(h, mode)
        h = ad.relu(self.up_norm(self.up(h), mode))
        return range_squash(self.tail(h))


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

@dataclass
class GtgNets:
    """Shape half: encoder, warp predictor, both reconstructors, discriminator."""

    encoder: GlyphEncoder
    predictor: WarpPredictor
    recon_image: ImageDecoder
    recon_noise: NoiseDecoder
    disc: PatchDiscriminator
    n_ctrl: int

    def generator_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, mod in (("encoder", self.encoder), ("predictor", self.predictor),
                          ("recon_image", self.recon_image), ("recon_noise", self.recon_noise)):
            out.extend(mod.named_params(f"gtg.{name}"))
        return out

    def disc_params(self) -> list[tuple[str, Tensor]]:
        return self.disc.named_params("gtg.disc")

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.generator_params() + self.disc_params()

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, mod in (("encoder", self.encoder), ("predictor", self.predictor),
                          ("recon_image", self.recon_image), ("recon_noise", self.recon_noise),
                          ("disc", self.disc)):
            out.extend(mod.named_state(f"gtg.{name}"))
        return out


@dataclass
class TtgNets:
    """Texture half: one generator and one patch discriminator per domain."""

    gen_photo: TextureGenerator   # clean glyph -> photographic
    gen_clean: TextureGenerator   # photographic -> clean glyph
    disc_photo: PatchDiscriminator
    disc_clean: PatchDiscriminator

    def generator_params(self) -> list[tuple[str, Tensor]]:
        return (self.gen_photo.named_params("ttg.gen_photo")
                + self.gen_clean.named_params("ttg.gen_clean"))

    def disc_params(self) -> list[tuple[str, Tensor]]:
        return (self.disc_photo.named_params("ttg.disc_photo")
                + self.disc_clean.named_params("ttg.disc_clean"))

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.generator_params() + self.disc_params()

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, mod in (("gen_photo", self.gen_photo), ("gen_clean", self.gen_clean),
                          ("disc_photo", self.disc_photo), ("disc_clean", self.disc_clean)):
            out.extend(mod.named_state(f"ttg.{name}"))
        return out


def build_default_nets(cfg: NetConfig, rng: np.random.Generator, dtype=np.float32) -> tuple[GtgNets, TtgNets]:
    gtg = GtgNets(
        encoder=GlyphEncoder(cfg, rng, dtype),
        predictor=WarpPredictor(cfg, rng, dtype),
        recon_image=ImageDecoder(cfg, rng, dtype),
        recon_noise=NoiseDecoder(cfg, rng, dtype),
        disc=PatchDiscriminator(cfg, rng, dtype),
        n_ctrl=cfg.n_ctrl,
    )
    ttg = TtgNets(
        gen_photo=TextureGenerator(cfg, rng, dtype),
        gen_clean=TextureGenerator(cfg, rng, dtype),
        disc_photo=PatchDiscriminator(cfg, rng, dtype),
        disc_clean=PatchDiscriminator(cfg, rng, dtype),
    )
    return gtg, ttg


def decode_warp_params(raw: Tensor, n_ctrl: int) -> Tensor:
    """Squash raw predictor output into actual warp parameters.

    Layout matches geometry.WarpParams.flatten(): 2N^2 control offsets, then
    rotation, scale, shift_u, shift_v. Zero raw input decodes to the identity.
    """
    k2 = 2 * n_ctrl * n_ctrl
    if raw.data.ndim != 2 or raw.data.shape[1] != k2 + 4:
        raise ad.AutodiffError(f"expected raw params of width {k2 + 4}, got {raw.data.shape}")
    offsets = OFFSET_RANGE * ad.tanh(ad.slice_cols(raw, 0, k2))
    rotation = ROTATION_RANGE * ad.tanh(ad.slice_cols(raw, k2, k2 + 1))
    scale = ad.exp(LOG_SCALE_RANGE * ad.tanh(ad.slice_cols(raw, k2 + 1, k2 + 2)))
    shift = SHIFT_RANGE * ad.tanh(ad.slice_cols(raw, k2 + 2, k2 + 4))
    return ad.concat([offsets, rotation, scale, shift], axis=1)


def gtg_forward(
    nets: GtgNets,
    x: Tensor | np.ndarray,
    z: Tensor | np.ndarray,
    mode: Mode = TRAIN,
    tps_reg: float = 1e-6,
):
    """One shape-generator pass: encode, mix noise, predict, warp, reconstruct.

    Returns (theta, warped, image_recon, noise_recon); theta is the squashed
    parameter tensor feeding both the sampler and the reconstructors.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not isinstance(z, Tensor):
        z = Tensor(z)
    feat = nets.encoder(x, mode)
    if z.data.shape != feat.data.shape:
        raise ad.AutodiffError(
            f"noise shape {z.data.shape} does not match encoded feature shape {feat.data.shape}"
        )
    raw = nets.predictor(feat + z, mode)
    theta = decode_warp_params(raw, nets.n_ctrl)
    size = x.data.shape[2]
    grid = ad.warp_grid(theta, nets.n_ctrl, size, x.data.shape[3], tps_reg)
    warped = ad.grid_sample(x, grid)
    image_recon = nets.recon_image(theta, mode)
    noise_recon = nets.recon_noise(theta, mode)
    return theta, warped, image_recon, noise_recon
