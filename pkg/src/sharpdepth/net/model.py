"""Encoder-decoder network predicting a displacement field (or a residual).

Layout::

    depth  --D-DownConv x4-->  d1 d2 d3 d4        (conv, BN, maxpool, leaky relu)
    guide  --G-DownConv x4-->  g1 g2 g3           (same, plain relu)
    d4 --ResUpConv(d3, g3)--ResUpConv(d2, g2)--ResUpConv(d1, g1)--ResUpConv(depth, guide)
       --OutConv (32, 16 with BN+relu, then a bare conv to 2 or 1 channels)

ResUpConv upsamples x2 (bilinear), crops to the skip size, concatenates the
depth skip with the guidance skip refined by a residual 3x3 conv, fuses with
conv-BN-leaky relu, and finishes with a residual conv-BN block. Without
guidance the guidance skips are zeros, so the layer shapes do not change.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import ndgrid as nd
from ..errors import ConfigError

GUIDANCE_CHANNELS = {"rgb": 3, "gray": 1, "binary_edges": 1, "none": 0}


@dataclass
class NetConfig:
    use_guidance: bool = False
    guidance_kind: str = "none"
    encoder_channels: list = field(default_factory=lambda: [32, 64, 128, 256])
    head: str = "displacement"
    input_size: int = 64
    kernel: tuple = (3, 3)
    bn_momentum: float = 0.1
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.encoder_channels = list(self.encoder_channels)
        self.kernel = tuple(self.kernel)
        if len(self.encoder_channels) != 4:
            raise ConfigError("encoder_channels must list 4 stages", got=self.encoder_channels)
        if self.head not in ("displacement", "residual"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.guidance_kind not in GUIDANCE_CHANNELS:
            raise ConfigError(f"unknown guidance kind {self.guidance_kind!r}")
        if self.use_guidance and self.guidance_kind == "none":
            raise ConfigError("guidance requested but guidance_kind is 'none'")
        if not self.use_guidance:
            self.guidance_kind = "none"
        if any(k % 2 == 0 for k in self.kernel):
            raise ConfigError("kernel sizes must be odd", got=list(self.kernel))

    @property
    def out_channels(self):
        return 2 if self.head == "displacement" else 1

    @property
    def guide_channels(self):
        return GUIDANCE_CHANNELS[self.guidance_kind]

    def to_dict(self):
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Conv:
    def __init__(self, name, in_ch, out_ch, kernel, rng):
        self.weight = nd.Grid(nd.xavier_uniform((out_ch, in_ch) + tuple(kernel), rng),
                              requires_grad=True, name=f"{name}.weight")
        self.bias = nd.Grid(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return nd.conv2d(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ConvBN:
    """conv -> batch norm, with the activation left to the caller."""

    def __init__(self, name, in_ch, out_ch, kernel, rng, momentum):
        self.conv = Conv(f"{name}.conv", in_ch, out_ch, kernel, rng)
        self.bn = nd.BNState.create(out_ch, momentum=momentum, name=f"{name}.bn")
        self.name = name

    def __call__(self, x, mode):
        return nd.batchnorm(self.conv(x), self.bn, mode)

    def parameters(self):
        return self.conv.parameters() + [self.bn.gamma, self.bn.beta]

    def buffers(self):
        return {f"{self.name}.bn.running_mean": self.bn.running_mean,
                f"{self.name}.bn.running_var": self.bn.running_var}


class DownConv:
    def __init__(self, name, in_ch, out_ch, cfg, rng, act):
        self.body = ConvBN(name, in_ch, out_ch, cfg.kernel, rng, cfg.bn_momentum)
        self.act = act
        self.slope = cfg.leaky_slope

    def __call__(self, x, mode):
        return nd.activation(nd.maxpool2x2(self.body(x, mode)), self.act, self.slope)


class ResConv:
    """x + BN(conv(x)), then leaky relu."""

    def __init__(self, name, ch, cfg, rng):
        self.body = ConvBN(name, ch, ch, cfg.kernel, rng, cfg.bn_momentum)
        self.slope = cfg.leaky_slope

    def __call__(self, x, mode):
        return nd.leaky_relu(nd.add(x, self.body(x, mode)), self.slope)


class ResUpConv:
    def __init__(self, name, in_ch, depth_skip, guide_skip, out_ch, cfg, rng):
        self.guide_refine = ResConv(f"{name}.guide", guide_skip, cfg, rng) if cfg.use_guidance else None
        self.guide_skip = guide_skip
        self.fuse = ConvBN(f"{name}.fuse", in_ch + depth_skip + guide_skip, out_ch, cfg.kernel, rng, cfg.bn_momentum)
        self.refine = ResConv(f"{name}.res", out_ch, cfg, rng)
        self.slope = cfg.leaky_slope

    def __call__(self, x, depth_skip, guide_skip, mode):
        _, h, w = depth_skip.shape
        up = nd.crop(nd.upsample2x_bilinear(x), h, w)
        if self.guide_refine is not None:
            g = self.guide_refine(guide_skip, mode)
        else:
            g = nd.Grid(np.zeros((self.guide_skip, h, w), dtype=x.dtype))
        y = nd.leaky_relu(self.fuse(nd.concat([up, depth_skip, g]), mode), self.slope)
        return self.refine(y, mode)


class DisplacementNet:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = cfg.encoder_channels
        k = cfg.kernel
        self.depth_enc = [
            DownConv(f"denc{i}", cin, cout, cfg, rng, "leaky_relu")
            for i, (cin, cout) in enumerate(zip([1, c1, c2, c3], [c1, c2, c3, c4]))
        ]
        gc = cfg.guide_channels
        self.guide_enc = []
        if cfg.use_guidance:
            self.guide_enc = [
                DownConv(f"genc{i}", cin, cout, cfg, rng, "relu")
                for i, (cin, cout) in enumerate(zip([gc, c1, c2], [c1, c2, c3]))
            ]
        self.decoder = [
            ResUpConv("dec0", c4, c3, c3, c3, cfg, rng),
            ResUpConv("dec1", c3, c2, c2, c2, cfg, rng),
            ResUpConv("dec2", c2, c1, c1, c1, cfg, rng),
            ResUpConv("dec3", c1, 1, gc, c1, cfg, rng),
        ]
        self.out1 = ConvBN("out1", c1, 32, k, rng, cfg.bn_momentum)
        self.out2 = ConvBN("out2", 32, 16, k, rng, cfg.bn_momentum)
        self.out3 = Conv("out3", 16, cfg.out_channels, k, rng)

    # -- parameter bookkeeping -------------------------------------------------

    def _modules(self):
        for enc in self.depth_enc + self.guide_enc:
            yield enc.body
        for dec in self.decoder:
            if dec.guide_refine is not None:
                yield dec.guide_refine.body
            yield dec.fuse
            yield dec.refine.body
        yield self.out1
        yield self.out2

    def parameters(self):
        params = []
        for m in self._modules():
            params += m.parameters()
        return params + self.out3.parameters()

    def state_dict(self):
        """Ordered name -> array map of parameters and BN running statistics."""
        state = {}
        for m in self._modules():
            for p in m.parameters():
                state[p.name] = p.value
            state.update(m.buffers())
        for p in self.out3.parameters():
            state[p.name] = p.value
        return state

    def bn_states(self):
        return [m.bn for m in self._modules()]

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError("checkpoint does not match network config",
                              missing=sorted(missing), unexpected=sorted(extra))
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}", expected=arr.shape, got=src.shape)
            arr[...] = src

    def zero_output(self):
        """Force the final conv to output exactly zero."""
        self.out3.weight.value[...] = 0
        self.out3.bias.value[...] = 0

    def astype(self, dtype):
        """Cast all parameters and buffers in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.value = p.value.astype(dtype)
        return self

    # -- forward -----------------------------------------------------------------

    def __call__(self, depth, guide=None, mode="train"):
        """Raw head output for a (1, H, W) depth array and optional (Cg, H, W) guide.

        The depth is standardized per image before entering the network.
        """
        depth = np.asarray(depth)
        dtype = self.out3.weight.dtype
        d = depth.astype(np.float64)
        d = ((d - d.mean()) / (d.std() + 1e-6)).astype(dtype)
        x = nd.Grid(d, dtype=dtype)
        feats = []
        h = x
        for enc in self.depth_enc:
            h = enc(h, mode)
            feats.append(h)
        gfeats = [None, None, None]
        g_in = None
        if self.cfg.use_guidance:
            if guide is None:
                raise ConfigError("network expects a guidance image")
            g_in = nd.Grid(np.asarray(guide), dtype=dtype)
            if g_in.shape[0] != self.cfg.guide_channels or g_in.shape[1:] != depth.shape[1:]:
                raise ConfigError("guidance image has the wrong shape",
                                  expected=(self.cfg.guide_channels,) + depth.shape[1:], got=g_in.shape)
            g = g_in
            gfeats = []
            for enc in self.guide_enc:
                g = enc(g, mode)
                gfeats.append(g)
        y = feats[3]
        y = self.decoder[0](y, feats[2], gfeats[2], mode)
        y = self.decoder[1](y, feats[1], gfeats[1], mode)
        y = self.decoder[2](y, feats[0], gfeats[0], mode)
        y = self.decoder[3](y, x, g_in, mode)
        y = nd.relu(self.out1(y, mode))
        y = nd.relu(self.out2(y, mode))
        return self.out3(y)


def build_network(cfg, seed=0):
    return DisplacementNet(cfg, seed)


def count_parameters(net):
    return int(sum(p.value.size for p in net.parameters()))


__all__ = ["NetConfig", "DisplacementNet", "build_network", "count_parameters", "GUIDANCE_CHANNELS"]
