"""BEV fusion, LR neck enhancement, HR restoration and the segmentation decoder.

The pipeline encodes both sensors on a low-resolution grid, fuses and
enhances there, and only then lifts features to the high-resolution grid:
``restore = pixel_shuffle(f(z), s)`` where ``f`` maps ``C`` to ``s^2 C``
channels.  Baseline upsamplers (fixed interpolation, deconvolution) plug in at
the same position for comparison.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bevgrid import BevScope, ConfigError
from .layers import ConvLayer, apply_stack
from .sensors import CameraBackbone, CameraModel, LidarBackbone, lift_splat
from .tensorcore import (MSAParams, Parameter, Tensor, TensorError, add, as_tensor, concat,
                         interp_upsample, msa_layer, pixel_shuffle, relu, transposed_conv2d)

METHODS = ("restore", "nearest", "bilinear", "bicubic", "deconvolution", "none")
FIXED = ("nearest", "bilinear", "bicubic")
GROUPS = ("encoder", "fuser", "neck", "restore", "decoder", "lr_head")
PRE_RESTORE = ("encoder", "fuser", "neck")


@dataclass(frozen=True)
class ArchConfig:
    scale: int = 4
    c_i: int = 8
    c_p: int = 16
    c_f: int = 24
    c: int = 16
    msa_layers: int = 0
    heads: int = 2
    upsample_method: str = "restore"
    restore_width: str = "normal"
    classes: int = 4
    decoder_width: int = 16
    lidar_in: int = 14
    camera_mid: int = 8
    depth_bins: int = 8
    use_camera: bool = True

    def __post_init__(self):
        for name in ("scale", "c_i", "c_p", "c_f", "c", "heads", "classes", "decoder_width",
                     "lidar_in", "camera_mid", "depth_bins"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.msa_layers < 0:
            raise ConfigError("msa_layers must be >= 0")
        if self.upsample_method not in METHODS:
            raise ConfigError(f"unknown upsample method {self.upsample_method!r}")
        if self.restore_width not in ("normal", "small"):
            raise ConfigError(f"unknown restore width {self.restore_width!r}")
        if self.upsample_method == "none" and self.scale != 1:
            raise ConfigError("upsample_method 'none' requires scale 1")
        if self.msa_layers and self.c % self.heads:
            raise ConfigError(f"channels {self.c} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    def replace(self, **kw) -> "ArchConfig":
        return ArchConfig(**{**asdict(self), **kw})


# ----------------------------------------------------------------------
# functional pieces


def fuse(z_p, z_i, layer: ConvLayer) -> Tensor:
    """Channel concat of the two branches, then a 3x3 conv with ReLU."""
    z_p, z_i = as_tensor(z_p), as_tensor(z_i)
    if z_p.shape[:-1] != z_i.shape[:-1]:
        raise TensorError(f"branch grids differ: {z_p.shape[:-1]} vs {z_i.shape[:-1]}")
    return layer(concat([z_p, z_i], axis=-1))


def neck(z, conv1: ConvLayer, conv2: ConvLayer, msa: list[MSAParams], heads: int) -> Tensor:
    """Residual two-conv block followed by ``len(msa)`` self-attention layers."""
    h = conv1(as_tensor(z))
    out = relu(add(h, conv2(h)))
    for p in msa:
        out = msa_layer(out, p, heads)
    return out


def restore(z_lr, s: int, layers: list[ConvLayer]) -> Tensor:
    """``pixel_shuffle(f(z), s)``; the last layer of ``f`` must emit ``s^2 C`` channels."""
    return pixel_shuffle(apply_stack(as_tensor(z_lr), layers), s)


def baseline_upsample(z_lr, s: int, method: str, deconv: tuple[Parameter, Parameter] | None = None,
                      padding: int = 0) -> Tensor:
    """Fixed interpolation, or a stride-``s`` transposed conv with ``padding`` cropped per border."""
    if method in FIXED:
        return interp_upsample(z_lr, s, method)
    if method == "deconvolution":
        if deconv is None:
            raise ConfigError("deconvolution needs kernel parameters")
        w, b = deconv
        return transposed_conv2d(z_lr, w, s, bias=b, padding=padding)
    raise ConfigError(f"{method!r} is not a baseline upsampler")


def equivalent_deconv_kernel(conv_weights, s: int) -> np.ndarray:
    """Stride-``s`` transposed-conv kernel reproducing ``pixel_shuffle(conv(x), s)``.

    For a 1x1 conv, ``K[dy, dx, i, c] = W[0, 0, i, c s^2 + dy s + dx]`` (HWIO).
    A ``k x k`` same-padded conv (odd ``k``) maps to a ``k s x k s`` kernel,
    ``K[(k-1-a) s + dy, (k-1-b) s + dx, i, c] = W[a, b, i, c s^2 + dy s + dx]``,
    used with ``padding = (k // 2) s``.
    """
    w = conv_weights.data if isinstance(conv_weights, (Parameter, Tensor)) else np.asarray(conv_weights)
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0 or w.shape[3] % (s * s):
        raise TensorError(f"expected an odd square kernel with s^2 C outputs, got {w.shape}")
    k, cin, cout = w.shape[0], w.shape[2], w.shape[3] // (s * s)
    wf = w[::-1, ::-1].reshape(k, k, cin, cout, s, s)
    return np.ascontiguousarray(wf.transpose(0, 4, 1, 5, 2, 3).reshape(k * s, k * s, cin, cout))


def deconv_padding(k: int, s: int) -> int:
    return (k // 2) * s


def decode(z_hr, layers: list[ConvLayer]) -> Tensor:
    return apply_stack(as_tensor(z_hr), layers)


# ----------------------------------------------------------------------
# model


def _msa_params(prefix: str, c: int, rng: np.random.Generator) -> MSAParams:
    std = 1.0 / np.sqrt(c)

    def mat(name, gain=1.0):
        return Parameter(f"{prefix}.{name}", rng.standard_normal((c, c)) * std * gain)

    def vec(name):
        return Parameter(f"{prefix}.{name}", np.zeros(c))

    return MSAParams(mat("wq"), vec("bq"), mat("wk"), vec("bk"), mat("wv"), vec("bv"),
                     mat("wo", 0.5), vec("bo"))


class PipelineModel:
    """Grouped parameters and forward passes for the LR-encode / HR-restore pipeline.

    Each group draws its initial weights from its own child generator, so the
    decoder starts identical across upsampling methods for one seed.
    """

    def __init__(self, arch: ArchConfig, seed: int = 0, camera: CameraModel | None = None,
                 lr_scope: BevScope | None = None):
        self.arch = arch
        self.camera = camera
        self.lr_scope = lr_scope
        if arch.use_camera and (camera is None or lr_scope is None):
            raise ConfigError("camera branch needs a camera model and the LR scope")
        if camera is not None and len(camera.depth_bins) != arch.depth_bins:
            raise ConfigError(f"camera has {len(camera.depth_bins)} depth bins, arch expects {arch.depth_bins}")
        rngs = {g: np.random.default_rng([int(seed), k]) for k, g in enumerate(GROUPS)}
        a, s = arch, arch.scale
        r = rngs["encoder"]
        self.lidar = LidarBackbone.build(a.lidar_in, [a.c_p, a.c_p], [1, 1], r)
        self.cam_bb = CameraBackbone.build(a.camera_mid, a.c_i, a.depth_bins, r) if a.use_camera else None
        cin = a.c_p + (a.c_i if a.use_camera else 0)
        self.fuser = ConvLayer("fuser.conv", cin, a.c_f, 3, rng=rngs["fuser"])
        r = rngs["neck"]
        self.neck1 = ConvLayer("neck.conv1", a.c_f, a.c, 3, rng=r)
        self.neck2 = ConvLayer("neck.conv2", a.c, a.c, 3, relu=False, rng=r)
        self.msa = [_msa_params(f"neck.msa{i}", a.c, r) for i in range(a.msa_layers)]
        r = rngs["restore"]
        self.restore_layers: list[ConvLayer] = []
        self.deconv: tuple[Parameter, Parameter] | None = None
        self.deconv_padding = 0
        if a.upsample_method == "restore":
            k2 = 3 if a.restore_width == "normal" else 1
            self.restore_layers = [ConvLayer("restore.conv1", a.c, a.c, 3, rng=r),
                                   ConvLayer("restore.conv2", a.c, s * s * a.c, k2, relu=False, rng=r)]
        elif a.upsample_method == "deconvolution":
            # same trunk as restore; a transposed conv replaces the final conv and the
            # shuffle, sized as the twin of that conv (k s x k s kernel, stride s)
            k2 = 3 if a.restore_width == "normal" else 1
            self.restore_layers = [ConvLayer("restore.conv1", a.c, a.c, 3, rng=r)]
            std = np.sqrt(2.0 / (k2 * k2 * a.c))
            self.deconv = (Parameter("restore.deconv.w", r.standard_normal((k2 * s, k2 * s, a.c, a.c)) * std),
                           Parameter("restore.deconv.b", np.zeros(a.c)))
            self.deconv_padding = deconv_padding(k2, s)
        r = rngs["decoder"]
        self.decoder = [ConvLayer("decoder.conv1", a.c, a.decoder_width, 3, rng=r),
                        ConvLayer("decoder.conv2", a.decoder_width, a.classes, 3, relu=False, rng=r, gain=1.0)]
        r = rngs["lr_head"]
        self.lr_head = [ConvLayer("lr_head.conv1", a.c, a.decoder_width, 3, rng=r),
                        ConvLayer("lr_head.conv2", a.decoder_width, a.classes, 3, relu=False, rng=r, gain=1.0)]

    # -- parameter groups ---------------------------------------------

    def group(self, name: str) -> list[Parameter]:
        if name == "encoder":
            return self.lidar.params + (self.cam_bb.params if self.cam_bb else [])
        if name == "fuser":
            return self.fuser.params
        if name == "neck":
            return self.neck1.params + self.neck2.params + [p for m in self.msa for p in m.all()]
        if name == "restore":
            convs = [p for l in self.restore_layers for p in l.params]
            return convs + (list(self.deconv) if self.deconv is not None else [])
        if name == "decoder":
            return [p for l in self.decoder for p in l.params]
        if name == "lr_head":
            return [p for l in self.lr_head for p in l.params]
        raise KeyError(name)

    @property
    def groups(self) -> dict[str, list[Parameter]]:
        return {g: self.group(g) for g in GROUPS}

    def params(self, groups=GROUPS) -> list[Parameter]:
        return [p for g in groups for p in self.group(g)]

    def set_trainable(self, groups, flag: bool) -> None:
        for p in self.params(groups):
            p.trainable = flag

    def state(self, groups=GROUPS) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params(groups)}

    # -- forward ------------------------------------------------------

    def encode(self, lidar_map, image=None) -> Tensor:
        """Sensor branches and fusion on the LR grid."""
        z_p = self.lidar(lidar_map)
        if self.cam_bb is None:
            return self.fuser(z_p)
        feat, depth = self.cam_bb(image)
        z_i = lift_splat(feat, depth, self.camera, self.lr_scope)
        return fuse(z_p, z_i, self.fuser)

    def lr_features(self, lidar_map, image=None) -> Tensor:
        return neck(self.encode(lidar_map, image), self.neck1, self.neck2, self.msa, self.arch.heads)

    def upsample(self, z_lr) -> Tensor:
        m, s = self.arch.upsample_method, self.arch.scale
        if m == "none":
            return as_tensor(z_lr)
        if m == "restore":
            return restore(z_lr, s, self.restore_layers)
        return baseline_upsample(apply_stack(as_tensor(z_lr), self.restore_layers), s, m, self.deconv,
                                 self.deconv_padding)

    def head_hr(self, z_lr) -> Tensor:
        return decode(self.upsample(z_lr), self.decoder)

    def head_lr(self, z_lr) -> Tensor:
        return decode(z_lr, self.lr_head)

    def __call__(self, lidar_map, image=None) -> Tensor:
        return self.head_hr(self.lr_features(lidar_map, image))
