"""Dataset pipeline: file formats, manifests, synthetic scenes, batching.

A dataset is a directory with a `manifest.txt` and, per sample, an
all-in-focus RGB image, a metric depth map (float PFM or scaled 16-bit
PNG), and optionally a precomputed defocused image named
`<image stem>_defocused<ext>`. When the defocused file is absent it is
synthesized on load with the manifest's thin-lens camera.

The manifest is a plain-text header of `key value` lines, a blank line,
then one `id image depth [split]` line per sample. Depth maps are stored
in meters; batches normalize depth to the unit interval by the manifest
range and center-scale RGB inputs by the manifest mean and std.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import optics
from .optics import ThinLensCamera

__all__ = [
    "DataError",
    "Sample",
    "ManifestEntry",
    "DatasetManifest",
    "SceneConfig",
    "read_pfm",
    "write_pfm",
    "read_image_png",
    "write_image_png",
    "read_depth_png",
    "write_depth_png",
    "load_sample",
    "flip_horizontal",
    "augment",
    "batch_arrays",
    "batches",
    "synthesize_scene",
    "synth_dataset",
]

SPLITS = ("train", "val", "test")
DEFOCUS_SUFFIX = "_defocused"


class DataError(Exception):
    """A dataset file or manifest is missing, malformed, or inconsistent."""


# ---------------------------------------------------------------------------
# PFM (portable float map)


def write_pfm(path, array: np.ndarray) -> None:
    """Write a [H,W] or [H,W,3] float32 array as little-endian PFM."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        magic = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataError(f"PFM needs [H,W] or [H,W,3] data, got shape {array.shape}")
    h, w = array.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(array).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file back to float32, [H,W] or [H,W,3]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        match = re.compile(rb"\s*(\S+)\s").match(blob, pos)
        if match is None:
            raise DataError(f"{path}: truncated PFM header")
        tokens.append(match.group(1))
        pos = match.end()
    magic, w_tok, h_tok, scale_tok = tokens
    if magic not in (b"Pf", b"PF"):
        raise DataError(f"{path}: bad PFM magic {magic!r}")
    channels = 3 if magic == b"PF" else 1
    try:
        w, h = int(w_tok), int(h_tok)
        scale = float(scale_tok)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PFM header") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise DataError(f"{path}: invalid PFM dimensions {w}x{h} or scale {scale}")
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * channels * 4
    payload = blob[pos:]
    if len(payload) != expected:
        raise DataError(
            f"{path}: PFM payload has {len(payload)} byte(s), expected {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.ascontiguousarray(np.flipud(data.reshape(shape)))


# ---------------------------------------------------------------------------
# PNG images and depth maps


def write_image_png(path, image: np.ndarray) -> None:
    """Write a [3,H,W] float image in [0,1] as 8-bit RGB PNG."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected [3,H,W] image, got shape {image.shape}")
    u8 = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def read_image_png(path) -> np.ndarray:
    """Read an RGB PNG into a [3,H,W] float32 array in [0,1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0


def write_depth_png(path, depth_m: np.ndarray, depth_scale: float) -> None:
    """Write metric depth as 16-bit PNG with `depth_scale` meters per unit."""
    if depth_scale <= 0:
        raise DataError(f"depth_scale must be positive, got {depth_scale}")
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2:
        raise DataError(f"expected [H,W] depth, got shape {depth_m.shape}")
    units = np.rint(depth_m / depth_scale)
    if units.min() < 0 or units.max() > 65535:
        raise DataError(
            f"depth range [{depth_m.min()}, {depth_m.max()}] m does not fit 16 bits "
            f"at scale {depth_scale}"
        )
    Image.fromarray(units.astype(np.uint16)).save(path)


def read_depth_png(path, depth_scale: float) -> np.ndarray:
    """Read a 16-bit depth PNG back to meters."""
    if depth_scale <= 0:
        raise DataError(f"depth_scale must be positive, got {depth_scale}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot read depth image ({exc})") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: depth PNG must be single-channel, got shape {arr.shape}")
    return (arr.astype(np.float32)) * np.float32(depth_scale)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image: str
    depth: str
    split: str = "train"


_REQUIRED_KEYS = ("depth_min_m", "depth_max_m")
_OPTIONAL_KEYS = (
    "seed",
    "depth_scale",
    "defocus_levels",
    "rgb_mean",
    "rgb_std",
    "camera_focal_length_m",
    "camera_aperture_m",
    "camera_focus_distance_m",
    "camera_coc_to_pixel",
)


@dataclass
class DatasetManifest:
    """Dataset description: depth range, camera, normalization, entries."""

    root: Path
    depth_min_m: float
    depth_max_m: float
    camera: ThinLensCamera = field(default_factory=ThinLensCamera)
    seed: int = 0
    depth_scale: float | None = None
    defocus_levels: int = 16
    rgb_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    rgb_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if not 0 < self.depth_min_m < self.depth_max_m:
            raise DataError(
                f"need 0 < depth_min_m < depth_max_m, got "
                f"{self.depth_min_m}, {self.depth_max_m}"
            )
        if self.defocus_levels < 1:
            raise DataError(f"defocus_levels must be positive, got {self.defocus_levels}")
        if any(s <= 0 for s in self.rgb_std):
            raise DataError(f"rgb_std must be positive, got {self.rgb_std}")
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(
                    f"entry {e.sample_id!r} has unknown split {e.split!r}; "
                    f"expected one of {SPLITS}"
                )
            if e.sample_id in seen:
                raise DataError(f"duplicate sample id {e.sample_id!r}")
            seen.add(e.sample_id)

    def ids(self, split: str | None = None) -> list[str]:
        if split is not None and split not in SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
        return sorted(
            e.sample_id for e in self.entries if split is None or e.split == split
        )

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.sample_id == sample_id:
                return e
        raise DataError(f"no sample {sample_id!r} in manifest")

    @property
    def depth_span_m(self) -> float:
        return self.depth_max_m - self.depth_min_m

    def normalize_depth(self, depth_m: np.ndarray) -> np.ndarray:
        return (np.asarray(depth_m) - self.depth_min_m) / self.depth_span_m

    def denormalize_depth(self, unit: np.ndarray) -> np.ndarray:
        return np.asarray(unit, dtype=np.float64) * self.depth_span_m + self.depth_min_m

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.txt"
        lines = [
            f"depth_min_m {self.depth_min_m!r}",
            f"depth_max_m {self.depth_max_m!r}",
            f"seed {self.seed}",
            f"defocus_levels {self.defocus_levels}",
            f"rgb_mean {','.join(repr(v) for v in self.rgb_mean)}",
            f"rgb_std {','.join(repr(v) for v in self.rgb_std)}",
            f"camera_focal_length_m {self.camera.focal_length_m!r}",
            f"camera_aperture_m {self.camera.aperture_m!r}",
            f"camera_focus_distance_m {self.camera.focus_distance_m!r}",
            f"camera_coc_to_pixel {self.camera.coc_to_pixel!r}",
        ]
        if self.depth_scale is not None:
            lines.append(f"depth_scale {self.depth_scale!r}")
        lines.append("")
        for e in self.entries:
            lines.append(f"{e.sample_id} {e.image} {e.depth} {e.split}")
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.txt"
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        header: dict[str, str] = {}
        entries: list[ManifestEntry] = []
        in_header = True
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line:
                in_header = False
                continue
            if line.startswith("#"):
                continue
            fields = line.split()
            if in_header:
                if len(fields) != 2:
                    raise DataError(
                        f"{path}:{lineno}: header line needs 'key value', got {raw!r}"
                    )
                key, value = fields
                if key not in _REQUIRED_KEYS + _OPTIONAL_KEYS:
                    raise DataError(f"{path}:{lineno}: unknown manifest key {key!r}")
                if key in header:
                    raise DataError(f"{path}:{lineno}: duplicate manifest key {key!r}")
                header[key] = value
            else:
                if len(fields) not in (3, 4):
                    raise DataError(
                        f"{path}:{lineno}: entry needs 'id image depth [split]', "
                        f"got {raw!r}"
                    )
                entries.append(ManifestEntry(*fields))
        missing = [k for k in _REQUIRED_KEYS if k not in header]
        if missing:
            raise DataError(f"{path}: missing manifest key(s) {missing}")

        def fget(key, default=None):
            if key not in header:
                return default
            try:
                return float(header[key])
            except ValueError as exc:
                raise DataError(f"{path}: key {key!r} is not a number: {header[key]!r}") from exc

        def triple(key, default):
            if key not in header:
                return default
            parts = header[key].split(",")
            if len(parts) != 3:
                raise DataError(f"{path}: key {key!r} needs three comma-separated values")
            try:
                return tuple(float(p) for p in parts)
            except ValueError as exc:
                raise DataError(f"{path}: key {key!r} is not numeric: {header[key]!r}") from exc

        try:
            camera = ThinLensCamera(
                focal_length_m=fget("camera_focal_length_m", 0.07),
                aperture_m=fget("camera_aperture_m", 0.0448),
                focus_distance_m=fget("camera_focus_distance_m", 1.0),
                coc_to_pixel=fget("camera_coc_to_pixel", 1000.0),
            )
        except ValueError as exc:
            raise DataError(f"{path}: invalid camera: {exc}") from exc
        return cls(
            root=path.parent,
            depth_min_m=fget("depth_min_m"),
            depth_max_m=fget("depth_max_m"),
            camera=camera,
            seed=int(fget("seed", 0)),
            depth_scale=fget("depth_scale", None),
            defocus_levels=int(fget("defocus_levels", 16)),
            rgb_mean=triple("rgb_mean", (0.5, 0.5, 0.5)),
            rgb_std=triple("rgb_std", (0.5, 0.5, 0.5)),
            entries=entries,
        )


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """One scene: sharp image, metric depth, defocused image, all [.,H,W]."""

    sample_id: str
    aif: np.ndarray
    depth_m: np.ndarray
    defocused: np.ndarray


def _defocused_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.stem + DEFOCUS_SUFFIX + image_path.suffix)


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """Read one sample, validating depth against the declared range."""
    entry = manifest.entry(sample_id)
    image_path = manifest.root / entry.image
    depth_path = manifest.root / entry.depth
    aif = read_image_png(image_path)

    if depth_path.suffix.lower() == ".pfm":
        depth = read_pfm(depth_path)
        if depth.ndim != 2:
            raise DataError(f"{depth_path}: depth PFM must be grayscale")
        tolerance = 1e-5
    elif depth_path.suffix.lower() == ".png":
        if manifest.depth_scale is None:
            raise DataError(
                f"{depth_path}: PNG depth needs a depth_scale key in the manifest"
            )
        depth = read_depth_png(depth_path, manifest.depth_scale)
        tolerance = manifest.depth_scale / 2 + 1e-5
    else:
        raise DataError(f"{depth_path}: unsupported depth format {depth_path.suffix!r}")

    if depth.shape != aif.shape[1:]:
        raise DataError(
            f"{sample_id!r}: depth {depth.shape} does not match image plane "
            f"{aif.shape[1:]}"
        )
    lo, hi = manifest.depth_min_m - tolerance, manifest.depth_max_m + tolerance
    outside = (depth < lo) | (depth > hi)
    if outside.any():
        raise DataError(
            f"{sample_id!r}: {int(outside.sum())} depth value(s) outside declared "
            f"range [{manifest.depth_min_m}, {manifest.depth_max_m}] m, "
            f"observed [{depth.min()}, {depth.max()}]"
        )

    defocused_path = _defocused_path(image_path)
    if defocused_path.exists():
        defocused = read_image_png(defocused_path)
        if defocused.shape != aif.shape:
            raise DataError(
                f"{sample_id!r}: defocused image {defocused.shape} does not match "
                f"{aif.shape}"
            )
    else:
        defocused = optics.defocus_image(
            aif, depth, manifest.camera, manifest.defocus_levels
        ).astype(np.float32)
    return Sample(sample_id, aif, depth, defocused)


def flip_horizontal(sample: Sample) -> Sample:
    """Mirror all three maps along width; applying it twice is the identity."""
    return Sample(
        sample.sample_id,
        np.ascontiguousarray(sample.aif[:, :, ::-1]),
        np.ascontiguousarray(sample.depth_m[:, ::-1]),
        np.ascontiguousarray(sample.defocused[:, :, ::-1]),
    )


def augment(sample: Sample, rng: np.random.Generator, flip_prob: float = 0.5) -> Sample:
    """Random horizontal flip applied jointly to image, depth, and input."""
    if not 0 <= flip_prob <= 1:
        raise ValueError(f"flip_prob must lie in [0,1], got {flip_prob}")
    if rng.random() < flip_prob:
        return flip_horizontal(sample)
    return sample


def batch_arrays(
    samples: list[Sample], manifest: DatasetManifest
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into network arrays.

    Returns (x, depth_gt, aif_gt): x is the defocused input center-scaled
    by the manifest RGB statistics, depth_gt is normalized to [0,1] by the
    manifest range, aif_gt stays in display range [0,1]. All float32.
    """
    if not samples:
        raise DataError("cannot batch zero samples")
    shape = samples[0].aif.shape
    for s in samples:
        if s.aif.shape != shape:
            raise DataError(
                f"cannot batch mixed extents: {s.sample_id!r} is {s.aif.shape}, "
                f"expected {shape}"
            )
    mean = np.asarray(manifest.rgb_mean, dtype=np.float32)[:, None, None]
    std = np.asarray(manifest.rgb_std, dtype=np.float32)[:, None, None]
    x = np.stack([(s.defocused - mean) / std for s in samples]).astype(np.float32)
    depth = np.stack(
        [manifest.normalize_depth(s.depth_m)[None] for s in samples]
    ).astype(np.float32)
    aif = np.stack([s.aif for s in samples]).astype(np.float32)
    return x, depth, aif


def batches(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    seed: int,
    epoch: int,
    loader=None,
) -> list[list[Sample]]:
    """Deterministically shuffled batches of samples for one epoch.

    The permutation depends only on (seed, epoch). The final short batch
    is kept.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    ids = manifest.ids(split)
    if not ids:
        raise DataError(f"split {split!r} has no samples")
    loader = loader or (lambda sid: load_sample(manifest, sid))
    order = np.random.default_rng([seed, 0xBA7C, epoch]).permutation(len(ids))
    out = []
    for start in range(0, len(ids), batch_size):
        chunk = order[start : start + batch_size]
        out.append([loader(ids[i]) for i in chunk])
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    """Procedural scene knobs: textured fronto-parallel planes."""

    height: int = 64
    width: int = 64
    depth_min_m: float = 0.5
    depth_max_m: float = 3.0
    camera: ThinLensCamera = field(default_factory=ThinLensCamera)
    min_regions: int = 2
    max_regions: int = 5
    include_focus_plane: bool = True
    defocus_levels: int = 16

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"scene extent {self.height}x{self.width} is too small")
        if not 0 < self.depth_min_m < self.depth_max_m:
            raise ValueError(
                f"need 0 < depth_min_m < depth_max_m, got "
                f"{self.depth_min_m}, {self.depth_max_m}"
            )
        if not 1 <= self.min_regions <= self.max_regions:
            raise ValueError(
                f"need 1 <= min_regions <= max_regions, got "
                f"{self.min_regions}, {self.max_regions}"
            )
        if self.include_focus_plane and not (
            self.depth_min_m <= self.camera.focus_distance_m <= self.depth_max_m
        ):
            raise ValueError(
                f"focus distance {self.camera.focus_distance_m} m lies outside the "
                f"scene depth range [{self.depth_min_m}, {self.depth_max_m}] m"
            )


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Random checkerboard or two-color gradient patch, [3,h,w] in [0,1]."""
    c0 = rng.uniform(0.05, 0.95, 3)
    c1 = rng.uniform(0.05, 0.95, 3)
    kind = rng.integers(0, 2)
    if kind == 0:
        cell = int(rng.integers(3, 9))
        yy, xx = np.mgrid[0:h, 0:w]
        checker = ((yy // cell + xx // cell) % 2).astype(np.float64)
        tex = c0[:, None, None] * (1 - checker) + c1[:, None, None] * checker
    else:
        axis = rng.integers(0, 2)
        ramp = np.linspace(0.0, 1.0, h if axis == 0 else w)
        plane = ramp[:, None] * np.ones((1, w)) if axis == 0 else np.ones((h, 1)) * ramp[None, :]
        tex = c0[:, None, None] * (1 - plane) + c1[:, None, None] * plane
    return tex


def synthesize_scene(cfg: SceneConfig, seed: int) -> Sample:
    """Compose textured planes at random depths and defocus the result.

    Depth values always stay inside the configured range; when
    `include_focus_plane` is set one region sits exactly at the focus
    distance so part of the defocused image is pixel-sharp.
    """
    rng = np.random.default_rng([seed, 0x5CE2E])
    h, w = cfg.height, cfg.width
    aif = _texture(rng, h, w)
    depth = np.full((h, w), rng.uniform(cfg.depth_min_m, cfg.depth_max_m))

    n_regions = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    focus_idx = rng.integers(0, n_regions) if cfg.include_focus_plane else -1
    for r in range(n_regions):
        rh = int(rng.integers(h // 4, h // 2 + 1))
        rw = int(rng.integers(w // 4, w // 2 + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        if r == focus_idx:
            d = cfg.camera.focus_distance_m
        else:
            d = rng.uniform(cfg.depth_min_m, cfg.depth_max_m)
        aif[:, top : top + rh, left : left + rw] = _texture(rng, rh, rw)
        depth[top : top + rh, left : left + rw] = d

    aif32 = aif.astype(np.float32)
    depth32 = depth.astype(np.float32)
    defocused = optics.defocus_image(
        aif32, depth32, cfg.camera, cfg.defocus_levels
    ).astype(np.float32)
    return Sample(f"scene_{seed:06d}", aif32, depth32, defocused)


def synth_dataset(
    out_dir,
    count: int,
    cfg: SceneConfig,
    seed: int = 0,
    split: str = "train",
) -> DatasetManifest:
    """Generate scenes, write them and a manifest under `out_dir`.

    Per sample: `<id>.png` (sharp), `<id>_defocused.png`, `<id>_depth.pfm`.
    Same (seed, config) produces byte-identical files.
    """
    if count < 1:
        raise DataError(f"count must be positive, got {count}")
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        sample = synthesize_scene(cfg, seed + i)
        image_name = f"{sample.sample_id}.png"
        depth_name = f"{sample.sample_id}_depth.pfm"
        write_image_png(out_dir / image_name, sample.aif)
        write_image_png(
            _defocused_path(out_dir / image_name), sample.defocused
        )
        write_pfm(out_dir / depth_name, sample.depth_m)
        entries.append(ManifestEntry(sample.sample_id, image_name, depth_name, split))
    manifest = DatasetManifest(
        root=out_dir,
        depth_min_m=cfg.depth_min_m,
        depth_max_m=cfg.depth_max_m,
        camera=cfg.camera,
        seed=seed,
        defocus_levels=cfg.defocus_levels,
        entries=entries,
    )
    manifest.save()
    return manifest
