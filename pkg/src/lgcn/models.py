"""Experiment architectures: the rotated-digit classifier and the
encoder-decoder segmentation/denoising network with summed skips.

Both are assembled from four comparison variants sharing one skeleton:

    real-plain      plain real CNN
    complex-plain   complex CNN, no modulation
    real-static     real static-Gabor modulation, fixed evenly spaced
                    orientations (never updated)
    lgcn            complex, learnable Gabor modulation (classifier:
                    non-cyclic; segnet hidden layers: cyclic)

plus two ablation intermediates, complex-static and real-learnable.
Complex variants scale channel widths by 1/sqrt(2) so total parameter
counts stay within a few percent of the real baseline.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .ctensor import ComplexTensor
from .gabor import GaborParams
from .initschemes import InitStrategy, init_gabor_params
from . import layers as L

VARIANTS = ("lgcn", "complex-static", "real-learnable", "real-static",
            "complex-plain", "real-plain")


class BuildError(ValueError):
    pass


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _variant_flags(variant):
    if variant not in VARIANTS:
        raise BuildError(f"unknown variant {variant!r}; valid: {VARIANTS}")
    complex_w = variant in ("lgcn", "complex-static", "complex-plain")
    modulated = variant not in ("complex-plain", "real-plain")
    learnable = variant in ("lgcn", "real-learnable")
    return complex_w, modulated, learnable


def _scale_width(w, complex_w):
    return max(1, round(w / np.sqrt(2.0))) if complex_w else w


@dataclass
class ClassifierConfig:
    variant: str = "lgcn"
    widths: tuple = (8, 16, 32)        # real-baseline widths per block
    convs_per_block: int = 2
    kernel: int = 3
    U: int = 4
    orientation_pool_per_block: bool = True
    fc_widths: tuple = (64, 32)
    num_classes: int = 10
    in_size: int = 28
    init: dict = field(default_factory=lambda: InitStrategy().to_dict())
    grad_mode: str = "chain"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        _variant_flags(self.variant)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(d["widths"])
        d["fc_widths"] = list(d["fc_widths"])
        return d

    @staticmethod
    def from_dict(d):
        known = set(ClassifierConfig.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise BuildError(f"unknown classifier config keys: {sorted(extra)}")
        d = dict(d)
        for k in ("widths", "fc_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return ClassifierConfig(**d)


@dataclass
class SegNetConfig:
    variant: str = "lgcn"
    task: str = "segmentation"         # or "denoising"
    depth: int = 3
    base_channels: int = 8             # real-baseline width at full resolution
    kernel: int = 3
    U: int = 4
    in_channels: int = 1
    arcsinh_input: bool = False
    init: dict = field(default_factory=lambda: InitStrategy().to_dict())
    grad_mode: str = "chain"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        _variant_flags(self.variant)
        if self.task not in ("segmentation", "denoising"):
            raise BuildError(f"unknown task {self.task!r}")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        known = set(SegNetConfig.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise BuildError(f"unknown segnet config keys: {sorted(extra)}")
        return SegNetConfig(**d)


# ---------------------------------------------------------------------------


class _ModelBase:
    """Shared parameter/state plumbing for both architectures."""

    def params(self):
        out = []
        for i, layer in enumerate(self._all_layers()):
            out.extend(layer.params())
        return out

    def named_params(self):
        out = []
        for i, layer in enumerate(self._all_layers()):
            for p in layer.params():
                out.append((f"{i}.{type(layer).__name__}.{p.name}", p))
        return out

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def param_count(self, trainable_only=True):
        return sum(p.value.size for p in self.params()
                   if p.trainable or not trainable_only)

    def buffers(self):
        out = []
        for i, layer in enumerate(self._all_layers()):
            if isinstance(layer, L.ComplexBatchNorm):
                out.append((f"{i}.run_mean", layer, "run_mean"))
                out.append((f"{i}.run_cov", layer, "run_cov"))
            elif isinstance(layer, L.RealBatchNorm):
                out.append((f"{i}.run_mean", layer, "run_mean"))
                out.append((f"{i}.run_var", layer, "run_var"))
        return out

    def first_modulated_layer(self):
        for layer in self._all_layers():
            if isinstance(layer, (L.GaborConv, L.CyclicGaborConv)):
                return layer
        return None


def _gabor_args(u, strategy, rng, cfg):
    gp = init_gabor_params(u, strategy, rng)
    lam = gp.lambdas[:1] if strategy.shared else gp.lambdas
    sigma = gp.sigmas if gp.sigmas is not None else gp.sigma
    return dict(thetas=gp.thetas, lambdas=lam, sigma=sigma,
                learn_sigma=strategy.learn_sigma, shared_lambda=strategy.shared,
                grad_mode=cfg.grad_mode, aliasing_ok=strategy.aliasing)


def _static_gabor_args(u, cfg):
    # evenly spaced fixed orientations, fixed wavelength
    return dict(thetas=np.linspace(0.0, 2.0 * np.pi, u, endpoint=False),
                lambdas=np.full(u, 3.0), sigma=np.pi,
                learnable_gabor=False, grad_mode=cfg.grad_mode)


class Classifier(_ModelBase):
    """Block classifier: (conv BN act) x n -> orientation pool -> avg pool,
    final block pooled globally, then re/im concatenation into FC layers."""

    def __init__(self, cfg: ClassifierConfig):
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype).type
        complex_w, modulated, learnable = _variant_flags(cfg.variant)
        strategy = InitStrategy.from_dict(cfg.init)
        self.cfg = cfg
        self.hash = config_hash(cfg.to_dict())
        u = cfg.U if modulated else 1
        k = cfg.kernel
        widths = [_scale_width(w, complex_w) for w in cfg.widths]
        seq = [L.ToComplex()]
        c_prev = 1
        size = cfg.in_size
        for b, c in enumerate(widths):
            for j in range(cfg.convs_per_block):
                if modulated:
                    if learnable:
                        ga = _gabor_args(u, strategy, rng, cfg)
                        ga["learnable_gabor"] = True
                    else:
                        ga = _static_gabor_args(u, cfg)
                    seq.append(L.GaborConv(c_prev, c, k, complex_weights=complex_w,
                                           rng=rng, dtype=dtype, **ga))
                    orient = True
                else:
                    seq.append(L.PlainConv(c_prev, c, k, complex_weights=complex_w,
                                           rng=rng, dtype=dtype))
                    orient = False
                if complex_w:
                    seq.append(L.ComplexBatchNorm(c, u if orient else None, dtype=dtype))
                    seq.append(L.CRelu(c, dtype=dtype))
                else:
                    seq.append(L.RealBatchNorm(c, dtype=dtype))
                    seq.append(L.Relu())
                c_prev = c
            if orient and cfg.orientation_pool_per_block:
                seq.append(L.OrientationMaxPool())
            last = b == len(widths) - 1
            if last:
                if orient and not cfg.orientation_pool_per_block:
                    seq.append(L.OrientationMaxPool())
                seq.append(L.GlobalAvgPool())
            else:
                seq.append(L.AvgPool())
                size //= 2
        seq.append(L.ProjectReal())
        n_in = 2 * c_prev
        for w in cfg.fc_widths:
            seq.append(L.Dense(n_in, w, rng=rng, dtype=dtype))
            seq.append(L.Relu())
            n_in = w
        seq.append(L.Dense(n_in, cfg.num_classes, rng=rng, dtype=dtype))
        self.seq = seq

    def _all_layers(self):
        return self.seq

    def forward(self, x, train=False):
        for layer in self.seq:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.seq):
            grad = layer.backward(grad)
        return grad

    def forward_probe(self, x):
        """Eval forward that also reports the mean response magnitude of the
        first modulated layer relative to its input magnitude."""
        target = self.first_modulated_layer()
        mag_in = mag_out = None
        for layer in self.seq:
            before = x
            x = layer.forward(x, train=False)
            if layer is target:
                mag_in = float(np.mean(_magnitude(before)))
                mag_out = float(np.mean(_magnitude(x)))
        ratio = mag_out / mag_in if mag_in else np.nan
        return x, ratio


def _magnitude(x):
    if isinstance(x, ComplexTensor):
        return x.magnitude()
    return np.abs(x)


class _Block:
    """conv -> batchnorm -> activation (-> orientation pool), one unit of SegNet."""

    def __init__(self, conv, bn, act, pool=None):
        self.layers = [conv, bn, act] + ([pool] if pool else [])

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class SegNet(_ModelBase):
    """Encoder-decoder with summed skip connections.

    Downsampling by 2x2 average pooling, upsampling by nearest neighbour.
    Segmentation pools orientations after every hidden block (invariance);
    denoising keeps the orientation axis until the output head
    (equivariance), where hidden layers are cyclic for the lgcn variant.
    """

    def __init__(self, cfg: SegNetConfig):
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype).type
        complex_w, modulated, learnable = _variant_flags(cfg.variant)
        strategy = InitStrategy.from_dict(cfg.init)
        if cfg.task not in ("segmentation", "denoising"):
            raise BuildError(f"unknown task {cfg.task!r}")
        self.cfg = cfg
        self.hash = config_hash(cfg.to_dict())
        self.invariant = cfg.task == "segmentation"
        u = cfg.U if modulated else 1
        k = cfg.kernel
        widths = [_scale_width(cfg.base_channels * 2 ** d, complex_w)
                  for d in range(cfg.depth + 1)]
        self.depth = cfg.depth
        self._oriented_feature_seen = False

        def make_block(c_in, c_out, idx):
            orient = False
            if modulated:
                if learnable:
                    ga = _gabor_args(u, strategy, rng, cfg)
                    ga["learnable_gabor"] = True
                else:
                    ga = _static_gabor_args(u, cfg)
                if cfg.variant == "lgcn" and not self.invariant and idx > 0:
                    conv = L.CyclicGaborConv(c_in, c_out, k, rng=rng, dtype=dtype, **ga)
                    orient = True
                else:
                    conv = L.GaborConv(c_in, c_out, k, complex_weights=complex_w,
                                       rng=rng, dtype=dtype, **ga)
                    orient = True
            else:
                conv = L.PlainConv(c_in, c_out, k, complex_weights=complex_w,
                                   rng=rng, dtype=dtype)
            if complex_w:
                bn = L.ComplexBatchNorm(c_out, u if orient else None, dtype=dtype)
                act = L.CRelu(c_out, dtype=dtype)
            else:
                bn = L.RealBatchNorm(c_out, dtype=dtype)
                act = L.Relu()
            pool = L.OrientationMaxPool() if (orient and self.invariant) else None
            return _Block(conv, bn, act, pool)

        self.to_complex = L.ToComplex()
        self.arcsinh = L.ArcsinhScale(dtype=dtype) if cfg.arcsinh_input else None
        self.arcsinh_sigmoid = L.Sigmoid() if cfg.arcsinh_input else None
        idx = 0
        self.enc = []
        c_prev = cfg.in_channels
        for d in range(cfg.depth + 1):
            self.enc.append(make_block(c_prev, widths[d], idx))
            idx += 1
            c_prev = widths[d]
        self.downs = [L.AvgPool() for _ in range(cfg.depth)]
        self.ups = [L.NearestUpsample() for _ in range(cfg.depth)]
        self.dec = []
        for d in range(cfg.depth - 1, -1, -1):
            self.dec.append(make_block(widths[d + 1], widths[d], idx))
            idx += 1
        # head: pool leftover orientations, flatten to real channels, 1x1 conv
        self.head_pool = L.OrientationMaxPool() if (modulated and not self.invariant) else None
        if complex_w or modulated:
            self.concat = L.ConcatReIm()
            head_in = 2 * widths[0]
        else:
            self.concat = None
            head_in = widths[0]
        self.head = L.RealConv2d(head_in, 1, 1, rng=rng, dtype=dtype)

    def _all_layers(self):
        out = [self.to_complex]
        if self.arcsinh:
            out = [self.arcsinh, self.arcsinh_sigmoid, self.to_complex]
        for b in self.enc:
            out.extend(b.layers)
        out.extend(self.downs)
        out.extend(self.ups)
        for b in self.dec:
            out.extend(b.layers)
        if self.head_pool:
            out.append(self.head_pool)
        if self.concat:
            out.append(self.concat)
        out.append(self.head)
        return out

    def forward(self, x, train=False):
        if x.shape[-1] % (2 ** self.depth) or x.shape[-2] % (2 ** self.depth):
            raise BuildError(
                f"spatial size {x.shape[-2]}x{x.shape[-1]} not divisible by {2 ** self.depth}")
        if self.arcsinh:
            x = self.arcsinh.forward(x, train)
            x = self.arcsinh_sigmoid.forward(x, train)
        z = self.to_complex.forward(x, train)
        skips = []
        for d in range(self.depth):
            z = self.enc[d].forward(z, train)
            skips.append(z)
            z = self.downs[d].forward(z, train)
        z = self.enc[self.depth].forward(z, train)
        self._oriented_feature_seen = z.re.ndim == 5
        for i, d in enumerate(range(self.depth - 1, -1, -1)):
            z = self.ups[i].forward(z, train)
            z = self.dec[i].forward(z, train)
            z = z + skips[d]
        if self.head_pool and z.re.ndim == 5:
            z = self.head_pool.forward(z, train)
        if self.concat:
            if isinstance(z, ComplexTensor) and z.re.ndim == 5:
                raise BuildError("oriented map reached the head without pooling")
            y = self.concat.forward(z, train)
        else:
            y = z.re if isinstance(z, ComplexTensor) else z
            self._head_was_complex = isinstance(z, ComplexTensor)
        return self.head.forward(y, train)

    def backward(self, grad):
        g = self.head.backward(grad)
        if self.concat:
            g = self.concat.backward(g)
        else:
            g = ComplexTensor(g, np.zeros_like(g))
        if self.head_pool is not None and not self.invariant and self._oriented_feature_seen:
            g = self.head_pool.backward(g)
        skip_grads = {}
        # reverse of the decoder loop: iteration i consumed skip depth-1-i
        for i in range(self.depth - 1, -1, -1):
            d = self.depth - 1 - i
            skip_grads[d] = g  # summed skip: gradient flows to both branches
            g = self.dec[i].backward(g)
            g = self.ups[i].backward(g)
        g = self.enc[self.depth].backward(g)
        for d in range(self.depth - 1, -1, -1):
            g = self.downs[d].backward(g)
            g = g + skip_grads[d]
            g = self.enc[d].backward(g)
        gz = self.to_complex.backward(g)
        if self.arcsinh:
            gz = self.arcsinh_sigmoid.backward(gz)
            gz = self.arcsinh.backward(gz)
        return gz


def build_classifier(cfg: ClassifierConfig) -> Classifier:
    return Classifier(cfg)


def build_segnet(cfg: SegNetConfig) -> SegNet:
    return SegNet(cfg)


def build_baselines(cfg: SegNetConfig):
    """The four comparison variants from one config skeleton."""
    out = {}
    for variant in ("real-plain", "complex-plain", "real-static", "lgcn"):
        d = cfg.to_dict()
        d["variant"] = variant
        out[variant] = SegNet(SegNetConfig.from_dict(d))
    return out


# ---------------------------------------------------------------------------
# checkpointing

MAGIC = b"LGCN"
VERSION = 1


class CheckpointError(IOError):
    pass


def _state_entries(model):
    entries = [(name, p.value) for name, p in model.named_params()]
    entries += [(name, getattr(layer, attr)) for name, layer, attr in model.buffers()]
    return entries


def save_checkpoint(path, model, extra=None):
    """Versioned container: JSON manifest + little-endian float32 blobs."""
    entries = _state_entries(model)
    manifest = {
        "version": VERSION,
        "arch": type(model).__name__,
        "config": model.cfg.to_dict(),
        "config_hash": model.hash,
        "params": [{"name": n, "shape": list(v.shape)} for n, v in entries],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for _, v in entries:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Rebuild the model from its manifest and restore all state."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, blen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    manifest = json.loads(raw[12:12 + blen].decode())
    if manifest["arch"] == "Classifier":
        model = Classifier(ClassifierConfig.from_dict(manifest["config"]))
    elif manifest["arch"] == "SegNet":
        model = SegNet(SegNetConfig.from_dict(manifest["config"]))
    else:
        raise CheckpointError(f"unknown architecture {manifest['arch']!r}")
    entries = _state_entries(model)
    names = [n for n, _ in entries]
    if names != [p["name"] for p in manifest["params"]]:
        raise CheckpointError(f"{path}: manifest/model state mismatch")
    off = 12 + blen
    for name, v in entries:
        nbytes = v.size * 4
        if len(raw) < off + nbytes:
            raise CheckpointError(f"{path}: truncated at entry {name} (offset {off})")
        arr = np.frombuffer(raw[off:off + nbytes], dtype="<f4").reshape(v.shape)
        v[...] = arr.astype(v.dtype)
        off += nbytes
    return model, manifest
