"""Network architectures and architecture arithmetic.

* ``ResnetGenerator``: 7x7 conv, two stride-2 downsampling convs, N residual
  blocks, two stride-2 transposed convs, 7x7 output conv. Reflection padding,
  non-affine instance norm. Used for G1 (A->B), G2 (B->A) and the segmentor S.
* ``PatchDiscriminator``: five 4x4 conv blocks, strides 2,2,2,1,1, emitting a
  map of raw real/fake logits; each unit sees a 70x70 input patch.
* ``UNet``: 5-level encoder/decoder with same-padded 3x3 conv pairs,
  nearest upsample + 2x2 conv on the way up and a 1x1 sigmoid head.

Every network has an analytic parameter tally computed from its config alone,
which the tests hold against ``count_parameters``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

# published totals: G1+G2+D1+D2 of the synthesis network, and the U-Net
REFERENCE_ESSNET_PARAMS = 28_256_644
REFERENCE_UNET_PARAMS = 31_031_685


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    n_res_blocks: int = 9
    norm: str = "instance"
    final_activation: str = "tanh"

    def __post_init__(self):
        if self.n_res_blocks < 1:
            raise ValueError("n_res_blocks must be >= 1")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.final_activation not in ("tanh", "logits"):
            raise ValueError(f"unknown final_activation {self.final_activation!r}")


def segmentor_config(cfg: GeneratorConfig) -> GeneratorConfig:
    """Same trunk as ``cfg`` with a 2-class logit head."""
    return replace(cfg, out_channels=2, final_activation="logits")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    base_width: int = 64
    n_blocks: int = 5
    kernel: int = 4
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.n_blocks != 5:
            raise ValueError("the patch discriminator has exactly 5 blocks")
        if len(self.strides) != self.n_blocks:
            raise ValueError("need one stride per block")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w, 1)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 5
    base_width: int = 64
    # Extra 3x3 conv to 2 channels ahead of the 1x1 head, as in the common
    # Keras U-Net; off by default so the conv census stays at 23.
    head_conv: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth)]


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    if "strides" in d:
        d["strides"] = list(d["strides"])
    return d


# ---------------------------------------------------------------------------
# generator / segmentor


def _norm(kind: str, ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch) if kind == "instance" else nn.Identity()


class ResnetBlock(nn.Module):
    def __init__(self, ch: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            _norm(norm, ch),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.config = cfg
        w, norm = cfg.base_width, cfg.norm
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.in_channels, w, 7),
            _norm(norm, w),
            nn.ReLU(True),
        ]
        ch = w
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(norm, ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResnetBlock(ch, norm) for _ in range(cfg.n_res_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(norm, ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, cfg.out_channels, 7)]
        if cfg.final_activation == "tanh":
            layers.append(nn.Tanh())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"generator input H and W must be divisible by 4, got {h}x{w}")
        return self.net(x)


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> ResnetGenerator:
    net = ResnetGenerator(cfg)
    net.apply(_gan_init)
    return net


def build_segmentor(cfg: GeneratorConfig = GeneratorConfig()) -> ResnetGenerator:
    if cfg.out_channels != 2 or cfg.final_activation != "logits":
        cfg = segmentor_config(cfg)
    return build_generator(cfg)


# ---------------------------------------------------------------------------
# patch discriminator


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def discriminator_output_size(cfg: DiscriminatorConfig, size: int) -> int:
    for s in cfg.strides:
        size = conv_output_size(size, cfg.kernel, s, 1)
    return size


def min_discriminator_input(cfg: DiscriminatorConfig) -> int:
    size = 1
    while discriminator_output_size(cfg, size) < 1:
        size += 1
    return size


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.config = cfg
        layers = []
        ch = cfg.in_channels
        last = cfg.n_blocks - 1
        for i, (out, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            layers.append(nn.Conv2d(ch, out, cfg.kernel, stride=stride, padding=1))
            if i == last:
                break
            if i > 0:
                layers.append(nn.InstanceNorm2d(out))
            layers.append(nn.LeakyReLU(cfg.leaky_slope, True))
            ch = out
        self.net = nn.Sequential(*layers)
        self._min_size = min_discriminator_input(cfg)

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self._min_size:
            rf = receptive_field(self.config)[0]
            raise ShapeError(
                f"discriminator input {h}x{w} too small: need at least {self._min_size}x{self._min_size} "
                f"(receptive field {rf}x{rf}); use a larger input"
            )
        return self.net(x)


def build_patch_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> PatchDiscriminator:
    net = PatchDiscriminator(cfg)
    net.apply(_gan_init)
    return net


def receptive_field_of(layers: Sequence[tuple[int, int]]) -> int:
    """Receptive field of a conv stack given (kernel, stride) per layer, input side first."""
    r = 1
    for k, s in reversed(list(layers)):
        r = r * s + (k - s)
    return r


def receptive_field(cfg: DiscriminatorConfig) -> tuple[int, int]:
    r = receptive_field_of([(cfg.kernel, s) for s in cfg.strides])
    return r, r


def _gan_init(m: nn.Module):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# U-Net


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(True),
        )


class UpConv(nn.Module):
    """Nearest x2 upsample, then a 2x2 conv padded right/bottom to keep the size."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 2)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.conv(F.pad(x, (0, 1, 0, 1))))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.config = cfg
        widths = cfg.widths
        self.down = nn.ModuleList()
        ch = cfg.in_channels
        for w in widths:
            self.down.append(DoubleConv(ch, w))
            ch = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(UpConv(ch, w))
            self.dec.append(DoubleConv(2 * w, w))
            ch = w
        head = []
        if cfg.head_conv:
            head += [nn.Conv2d(ch, 2, 3, padding=1), nn.ReLU(True)]
            ch = 2
        head.append(nn.Conv2d(ch, cfg.out_channels, 1))
        self.head = nn.Sequential(*head)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def logits(self, x):
        factor = 2 ** (self.config.depth - 1)
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise ShapeError(f"U-Net input H and W must be divisible by {factor}, got {h}x{w}")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_unet(cfg: UNetConfig = UNetConfig()) -> UNet:
    return UNet(cfg)


# ---------------------------------------------------------------------------
# parameter arithmetic


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def conv_layer_census(model: nn.Module) -> int:
    return sum(isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) for m in model.modules())


def _conv(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def generator_param_tally(cfg: GeneratorConfig) -> list[tuple[str, int]]:
    w = cfg.base_width
    rows = [("enc.conv7", _conv(cfg.in_channels, w, 7))]
    rows += [("enc.down1", _conv(w, 2 * w, 3)), ("enc.down2", _conv(2 * w, 4 * w, 3))]
    for i in range(cfg.n_res_blocks):
        rows.append((f"res{i}", 2 * _conv(4 * w, 4 * w, 3)))
    rows += [("dec.up1", _conv(4 * w, 2 * w, 3)), ("dec.up2", _conv(2 * w, w, 3))]
    rows.append(("dec.conv7", _conv(w, cfg.out_channels, 7)))
    return rows


def discriminator_param_tally(cfg: DiscriminatorConfig) -> list[tuple[str, int]]:
    rows, cin = [], cfg.in_channels
    for i, w in enumerate(cfg.widths):
        rows.append((f"block{i + 1}", _conv(cin, w, cfg.kernel)))
        cin = w
    return rows


def unet_param_tally(cfg: UNetConfig) -> list[tuple[str, int]]:
    widths = cfg.widths
    rows, cin = [], cfg.in_channels
    for i, w in enumerate(widths):
        rows += [(f"down{i}.conv1", _conv(cin, w, 3)), (f"down{i}.conv2", _conv(w, w, 3))]
        cin = w
    for j, w in enumerate(reversed(widths[:-1])):
        rows.append((f"up{j}.conv2x2", _conv(cin, w, 2)))
        rows += [(f"dec{j}.conv1", _conv(2 * w, w, 3)), (f"dec{j}.conv2", _conv(w, w, 3))]
        cin = w
    if cfg.head_conv:
        rows.append(("head.conv3x3", _conv(cin, 2, 3)))
        cin = 2
    rows.append(("head.conv1x1", _conv(cin, cfg.out_channels, 1)))
    return rows


def tally(rows: list[tuple[str, int]]) -> int:
    return sum(n for _, n in rows)


def unet_conv_census(cfg: UNetConfig) -> int:
    return len(unet_param_tally(cfg))


@dataclass
class ParameterReconciliation:
    essnet_cyclegan: int
    segmentor: int
    essnet_total: int
    essnet_reference: int
    unet: int
    unet_reference: int
    notes: list[str] = field(default_factory=list)

    def relative_diff(self, ours: int, ref: int) -> float:
        return (ours - ref) / ref


def reconcile_parameter_counts(
    gen: GeneratorConfig = GeneratorConfig(),
    disc: DiscriminatorConfig = DiscriminatorConfig(),
    unet: UNetConfig = UNetConfig(),
) -> ParameterReconciliation:
    """Compare our tallies to the published totals and itemize the differences."""
    g = tally(generator_param_tally(gen))
    s = tally(generator_param_tally(segmentor_config(gen)))
    d = tally(discriminator_param_tally(disc))
    u = tally(unet_param_tally(unet))
    rec = ParameterReconciliation(
        essnet_cyclegan=2 * g + 2 * d,
        segmentor=s,
        essnet_total=2 * g + s + 2 * d,
        essnet_reference=REFERENCE_ESSNET_PARAMS,
        unet=u,
        unet_reference=REFERENCE_UNET_PARAMS,
    )
    rec.notes.append(
        f"synthesis network: G1 {g:,} + G2 {g:,} + D1 {d:,} + D2 {d:,} = {rec.essnet_cyclegan:,} "
        f"(reference {REFERENCE_ESSNET_PARAMS:,}, diff {rec.essnet_cyclegan - REFERENCE_ESSNET_PARAMS:+,})"
    )
    rec.notes.append(
        f"segmentor S adds {s:,} (same trunk, 2-channel head) -> {rec.essnet_total:,}; "
        "the reference total matches the four adversarial networks without S"
    )
    keras = replace(unet, head_conv=not unet.head_conv)
    ours_rows, other_rows = dict(unet_param_tally(unet)), dict(unet_param_tally(keras))
    rec.notes.append(
        f"U-Net ({unet_conv_census(unet)} convs): {u:,} vs reference {REFERENCE_UNET_PARAMS:,} "
        f"(diff {u - REFERENCE_UNET_PARAMS:+,})"
    )
    for name in sorted(set(ours_rows) | set(other_rows)):
        a, b = ours_rows.get(name, 0), other_rows.get(name, 0)
        if a != b:
            label = "head_conv=True" if keras.head_conv else "head_conv=False"
            rec.notes.append(f"  {name}: {a:,} here vs {b:,} with {label}")
    rec.notes.append(
        f"  head_conv={keras.head_conv} layout totals {tally(unet_param_tally(keras)):,} "
        f"with {unet_conv_census(keras)} convs"
    )
    return rec


# ---------------------------------------------------------------------------
# per-layer summary


@dataclass
class LayerRow:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    params: int


def summarize(model: nn.Module, input_shape: tuple[int, ...]) -> list[LayerRow]:
    rows: list[LayerRow] = []
    hooks = []
    for name, m in model.named_modules():
        if next(m.children(), None) is not None:
            continue
        if isinstance(m, (nn.ReLU, nn.LeakyReLU, nn.Identity)):
            continue

        def hook(mod, inp, out, name=name):
            n = sum(p.numel() for p in mod.parameters())
            rows.append(LayerRow(name, type(mod).__name__, tuple(out.shape), n))

        hooks.append(m.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(torch.zeros(input_shape))
    finally:
        for h in hooks:
            h.remove()
    return rows


def format_summary(rows: list[LayerRow], title: str = "") -> str:
    out = [title] if title else []
    out.append(f"{'layer':<28} {'type':<18} {'output shape':<22} {'params':>12}")
    for r in rows:
        out.append(f"{r.name:<28} {r.kind:<18} {str(r.output_shape):<22} {r.params:>12,}")
    out.append(f"{'total':<70} {sum(r.params for r in rows):>12,}")
    return "\n".join(out)
