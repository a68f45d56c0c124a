"""Dataset plumbing: IDX ingestion, rotation augmentation, synthesized cirrus.

The cirrus generator composes three layers -- an inverted-noise background B,
a Gabor-friendly cloud layer C (GMM envelope filled with Perlin textures),
and smooth bright regions R -- into gamma*B + gamma*C + R, normalized to
[0, 1].  The segmentation mask is the thresholded envelope; the denoising
target is gamma*B + R pushed through the same normalization.
"""

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "IdxFormatError", "CirrusError", "load_idx", "rotate_sample",
    "rotated_dataset", "gradient_noise", "gmm_envelope",
    "CirrusConfig", "Sample", "gen_cirrus_sample", "gen_cirrus_dataset",
    "save_cirrus_dataset", "load_cirrus_dataset", "CIRRUS_VARIANTS",
]

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

CIRRUS_VARIANTS = ("fixed-orientation", "random-orientation", "random+artefacts")


class IdxFormatError(ValueError):
    """IDX file does not match the expected binary layout."""


class CirrusError(RuntimeError):
    """Cirrus generation failed (degenerate sample after bounded retries)."""


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_exact(f, n, path, what):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(
            f"{path}: truncated while reading {what} at byte offset "
            f"{f.tell() - len(buf)} (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into (images [N,1,H,W] in [0,1],
    labels [N] int64).  Big-endian throughout, per the format."""
    with open(images_path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, images_path, "magic"))
        if magic != IDX_MAGIC_IMAGES:
            raise IdxFormatError(
                f"{images_path}: bad magic at byte offset 0: expected "
                f"{IDX_MAGIC_IMAGES:#010x}, got {magic:#010x}")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, images_path, "dims"))
        raw = _read_exact(f, n * h * w, images_path, f"{n} images")
        trailing = f.read(1)
    if trailing:
        raise IdxFormatError(
            f"{images_path}: {len(trailing)}+ unexpected trailing bytes at "
            f"byte offset {16 + n * h * w}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    images = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, labels_path, "magic"))
        if magic != IDX_MAGIC_LABELS:
            raise IdxFormatError(
                f"{labels_path}: bad magic at byte offset 0: expected "
                f"{IDX_MAGIC_LABELS:#010x}, got {magic:#010x}")
        m, = struct.unpack(">I", _read_exact(f, 4, labels_path, "count"))
        labels = np.frombuffer(_read_exact(f, m, labels_path, f"{m} labels"),
                               dtype=np.uint8).astype(np.int64)
    if m != n:
        raise IdxFormatError(
            f"count mismatch: {images_path} holds {n} images but "
            f"{labels_path} holds {m} labels")
    return images, labels


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------

def rotate_sample(image, angle):
    """Rotate a square image about its center by `angle` radians
    (counter-clockwise), bilinear interpolation, zeros outside.

    Exact multiples of pi/2 take a lattice-permutation fast path, so right
    angles introduce no interpolation error at all.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"rotate_sample needs a square image, got {h}x{w}")

    quarter = angle / (np.pi / 2.0)
    if abs(quarter - round(quarter)) < 1e-12:
        out = np.rot90(image, k=int(round(quarter)) % 4, axes=(1, 2)).copy()
        return out[0] if squeeze else out

    ctr = (h - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    yc, xc = ys - ctr, xs - ctr
    cos, sin = np.cos(angle), np.sin(angle)
    # inverse map: rotate output coordinates by -angle into the source frame
    src_y = cos * yc + sin * xc + ctr
    src_x = -sin * yc + cos * xc + ctr

    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy = src_y - y0
    fx = src_x - x0

    out = np.zeros_like(image)
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            ys_c = np.clip(yy, 0, h - 1)
            xs_c = np.clip(xx, 0, w - 1)
            out += image[:, ys_c, xs_c] * (wgt * inside)
    return out[0] if squeeze else out


def rotated_dataset(images, labels, rng, angles=None):
    """Rotate every image by a uniform random angle in [0, 2pi).

    Returns (rotated images, labels, angles); pass `angles` to reproduce a
    specific draw.
    """
    n = images.shape[0]
    if angles is None:
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    angles = np.asarray(angles, dtype=np.float64)
    out = np.empty_like(images, dtype=np.float64)
    for i in range(n):
        out[i] = rotate_sample(images[i], angles[i])
    return out, labels, angles


# ---------------------------------------------------------------------------
# Perlin gradient noise
# ---------------------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lattice_noise(x, y, perm, grads):
    """Classic gradient noise at real coordinates (x, y) in lattice units."""
    xi = np.floor(x).astype(np.int64)
    yi = np.floor(y).astype(np.int64)
    xf = x - xi
    yf = y - yi
    u = _fade(xf)
    v = _fade(yf)

    def corner(dx, dy):
        h = perm[(perm[(xi + dx) & 255] + ((yi + dy) & 255)) & 255]
        g = grads[h]
        return g[..., 0] * (xf - dx) + g[..., 1] * (yf - dy)

    n00 = corner(0, 0)
    n10 = corner(1, 0)
    n01 = corner(0, 1)
    n11 = corner(1, 1)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


def gradient_noise(size, rng, base_period=32.0, octaves=4, persistence=0.5,
                   theta=0.0, anisotropy=1.0):
    """Fractal Perlin noise on a size x size grid, rescaled to [0, 1].

    `anisotropy` > 1 stretches the noise along direction `theta`, which is
    how the streak texture is produced (slow variation along the streaks,
    fast across them).
    """
    perm = rng.permutation(256)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=256)
    grads = np.stack([np.cos(phase), np.sin(phase)], axis=-1)
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    cos, sin = np.cos(theta), np.sin(theta)
    along = (cos * xs + sin * ys) / anisotropy
    across = -sin * xs + cos * ys
    # random offset so octaves do not share lattice corners with each other
    total = np.zeros((size, size))
    amp, freq, norm = 1.0, 1.0 / base_period, 0.0
    for _ in range(octaves):
        off = rng.uniform(0.0, 256.0, size=2)
        total += amp * _lattice_noise(along * freq + off[0],
                                      across * freq + off[1], perm, grads)
        norm += amp
        amp *= persistence
        freq *= 2.0
    total /= norm
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.zeros_like(total)
    return (total - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# GMM envelopes
# ---------------------------------------------------------------------------

def gmm_envelope(size, centers, stds, weights):
    """Sum of isotropic Gaussian bumps, peak-normalized to 1."""
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    env = np.zeros((size, size))
    for (cy, cx), s, w in zip(centers, stds, weights):
        env += w * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * s * s))
    peak = env.max()
    return env / peak if peak > 0 else env


# ---------------------------------------------------------------------------
# cirrus generation
# ---------------------------------------------------------------------------

@dataclass
class CirrusConfig:
    variant: str = "fixed-orientation"
    size: int = 128
    gamma: float = 0.4
    gmm_components: tuple = (4, 6)          # inclusive component-count range
    gmm_std_frac: tuple = (0.08, 0.25)      # component std as fraction of size
    perlin_octaves: int = 4
    perlin_period_frac: float = 0.25        # base lattice period / size
    streak_anisotropy: float = 8.0
    bright_components: tuple = (1, 3)
    bright_std_frac: tuple = (0.15, 0.35)
    bright_peak: float = 0.6
    star_count: tuple = (40, 80)
    star_std: tuple = (1.0, 3.0)
    halo_radius: float = 8.0
    halo_width: float = 2.0
    halo_brightness: float = 0.25
    mask_threshold: float = 0.10            # fraction of envelope peak
    n_samples: int = 300
    split: tuple = (160, 40, 100)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in CIRRUS_VARIANTS:
            raise ValueError(
                f"unknown cirrus variant {self.variant!r}; "
                f"expected one of {CIRRUS_VARIANTS}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if sum(self.split) != self.n_samples:
            raise ValueError(
                f"split {self.split} does not sum to n_samples={self.n_samples}")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @staticmethod
    def from_dict(d):
        known = set(CirrusConfig.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown cirrus config keys: {sorted(extra)}")
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return CirrusConfig(**d)


@dataclass
class Sample:
    image: np.ndarray            # [1,H,W] float32 in [0,1]
    mask: np.ndarray             # [H,W] uint8 in {0,1}
    denoise_target: np.ndarray   # [H,W] float32 in [0,1]
    orientation: float           # streak orientation, radians
    variant: str
    seed: int


def _global_orientation(cfg):
    """Variant 1's single dataset-wide streak orientation, derived from the
    dataset seed so it is stable across runs."""
    return float(np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0xC1A0])).uniform(0.0, np.pi))


def _draw_cirrus(cfg, rng, orientation):
    size = cfg.size
    # B: |N(0,1)| speckle, inverted (negated and shifted back to >= 0)
    speckle = np.abs(rng.standard_normal((size, size)))
    background = speckle.max() - speckle
    background /= max(background.max(), 1e-12)

    # C: GMM cloud envelope filled with cloud + streak Perlin textures
    k = rng.integers(cfg.gmm_components[0], cfg.gmm_components[1] + 1)
    centers = rng.uniform(0.0, size, size=(k, 2))
    stds = rng.uniform(cfg.gmm_std_frac[0] * size,
                       cfg.gmm_std_frac[1] * size, size=k)
    weights = rng.uniform(0.5, 1.0, size=k)
    envelope = gmm_envelope(size, centers, stds, weights)

    period = cfg.perlin_period_frac * size
    cloud = gradient_noise(size, rng, base_period=period,
                           octaves=cfg.perlin_octaves)
    streaks = gradient_noise(size, rng, base_period=period / 2.0,
                             octaves=cfg.perlin_octaves, theta=orientation,
                             anisotropy=cfg.streak_anisotropy)
    clouds = envelope * (0.5 * cloud + 0.5 * streaks)

    # R: a few broad, smooth bright regions
    kb = rng.integers(cfg.bright_components[0], cfg.bright_components[1] + 1)
    bc = rng.uniform(0.0, size, size=(kb, 2))
    bs = rng.uniform(cfg.bright_std_frac[0] * size,
                     cfg.bright_std_frac[1] * size, size=kb)
    bw = rng.uniform(0.5, 1.0, size=kb)
    bright = cfg.bright_peak * gmm_envelope(size, bc, bs, bw)

    if cfg.variant == "random+artefacts":
        bright = bright + _draw_stars(cfg, rng)

    composite = cfg.gamma * background + cfg.gamma * clouds + bright
    target = cfg.gamma * background + bright
    lo, hi = composite.min(), composite.max()
    scale = max(hi - lo, 1e-12)
    composite = (composite - lo) / scale
    target = np.clip((target - lo) / scale, 0.0, 1.0)

    mask = (envelope >= cfg.mask_threshold).astype(np.uint8)
    return composite, mask, target


def _draw_stars(cfg, rng):
    """Gaussian point sources plus annular halos of uniform brightness.

    Halo radius and width are fixed by config; both star and halo brightness
    scale with the star's std, so bigger stars carry bigger haloes.
    """
    size = cfg.size
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    art = np.zeros((size, size))
    n = rng.integers(cfg.star_count[0], cfg.star_count[1] + 1)
    for _ in range(n):
        cy, cx = rng.uniform(0.0, size, size=2)
        s = rng.uniform(cfg.star_std[0], cfg.star_std[1])
        amp = s / cfg.star_std[1]
        r2 = (ys - cy) ** 2 + (xs - cx) ** 2
        art += amp * np.exp(-r2 / (2.0 * s * s))
        r = np.sqrt(r2)
        ring = np.abs(r - cfg.halo_radius) <= cfg.halo_width / 2.0
        art += cfg.halo_brightness * amp * ring
    return art


MAX_RETRIES = 16


def gen_cirrus_sample(config: CirrusConfig, seed) -> Sample:
    """Generate one sample; pure function of (config, seed).

    Degenerate draws (mask almost empty or almost full) are regenerated from
    a derived sub-seed, up to MAX_RETRIES times.
    """
    if config.variant == "fixed-orientation":
        orientation = _global_orientation(config)
    else:
        orientation = None
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        theta = (orientation if orientation is not None
                 else float(rng.uniform(0.0, np.pi)))
        composite, mask, target = _draw_cirrus(config, rng, theta)
        frac = mask.mean()
        if 0.05 < frac < 0.95:
            return Sample(image=composite[None].astype(np.float32),
                          mask=mask, denoise_target=target.astype(np.float32),
                          orientation=theta, variant=config.variant, seed=seed)
    raise CirrusError(
        f"seed {seed}: mask fraction stayed outside (0.05, 0.95) after "
        f"{MAX_RETRIES} retries")


def _sample_seeds(config):
    """Per-sample seeds: a documented split of the dataset seed, so sample i
    is identical no matter which other samples are generated."""
    root = np.random.SeedSequence(config.seed)
    return [int(s.generate_state(1)[0]) for s in root.spawn(config.n_samples)]


def gen_cirrus_dataset(config: CirrusConfig):
    """All samples plus the train/val/test split (by index)."""
    seeds = _sample_seeds(config)
    samples = [gen_cirrus_sample(config, s) for s in seeds]
    n_tr, n_va, n_te = config.split
    split = {
        "train": list(range(0, n_tr)),
        "val": list(range(n_tr, n_tr + n_va)),
        "test": list(range(n_tr + n_va, n_tr + n_va + n_te)),
    }
    return samples, split


def save_cirrus_dataset(out_dir, config: CirrusConfig):
    """Generate and persist: one flat .f32 file per array + a JSON manifest."""
    samples, split = gen_cirrus_dataset(config)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        np.ascontiguousarray(s.image, dtype="<f4").tofile(
            os.path.join(out_dir, stem + ".image.f32"))
        s.mask.astype("<u1").tofile(os.path.join(out_dir, stem + ".mask.u8"))
        np.ascontiguousarray(s.denoise_target, dtype="<f4").tofile(
            os.path.join(out_dir, stem + ".target.f32"))
        records.append({"index": i, "stem": stem, "seed": s.seed,
                        "orientation": s.orientation, "variant": s.variant})
    manifest = {
        "format": "lgcn-cirrus-v1",
        "config": config.to_dict(),
        "split": split,
        "samples": records,
    }
    if config.variant == "fixed-orientation":
        manifest["global_orientation"] = _global_orientation(config)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_cirrus_dataset(in_dir):
    """Read a persisted dataset back into Sample objects + split dict."""
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "lgcn-cirrus-v1":
        raise CirrusError(f"{in_dir}: not a cirrus dataset manifest")
    cfg = CirrusConfig.from_dict(manifest["config"])
    size = cfg.size
    samples = []
    for rec in manifest["samples"]:
        stem = os.path.join(in_dir, rec["stem"])
        image = np.fromfile(stem + ".image.f32", dtype="<f4").reshape(1, size, size)
        mask = np.fromfile(stem + ".mask.u8", dtype="<u1").reshape(size, size)
        target = np.fromfile(stem + ".target.f32", dtype="<f4").reshape(size, size)
        samples.append(Sample(image=image, mask=mask, denoise_target=target,
                              orientation=rec["orientation"],
                              variant=rec["variant"], seed=rec["seed"]))
    return samples, manifest["split"], cfg
