"""Dataset IO, the random-dot generator, crops and the evaluation metrics.

Disparity files:

- PFM: ``Pf`` header (single channel), ``<width> <height>``, scale (negative
  means little-endian), float32 rows stored bottom to top.
- KITTI PNG: 16-bit greyscale, disparity = raw / 256, raw 0 marks pixels
  without ground truth.

Dataset root layouts:

- SceneFlow: ``frames_finalpass/<SPLIT>/**/left/*.png`` (right images under
  ``right/``) and ``disparity/<SPLIT>/**/left/*.pfm``.
- KITTI 2015: ``image_2``, ``image_3``, ``disp_occ_0`` and ``obj_map``.
- KITTI 2012: ``colored_0``, ``colored_1`` and ``disp_occ``.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import png
import torch
from torch.utils.data import Dataset

from ghost_stereo_types import (
    BadMagic,
    BitDepthError,
    ConfigError,
    DisparityRangeError,
    EmptyMaskError,
    ModelConfig,
    ShapeError,
    StereoSample,
    TruncatedPayload,
    validate_sample,
)

PathLike = Union[str, Path]

KITTI_SCALE = 256.0
D1_ABS_THRESHOLD = 3.0
D1_REL_THRESHOLD = 0.05
BAD_THRESHOLDS = (1.0, 2.0, 3.0)

_PFM_DIMS_RE = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")

# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def read_pfm(path: PathLike) -> np.ndarray:
    """Read a single-channel PFM into a top-row-first ``[H, W]`` float32 array."""
    with open(path, "rb") as f:
        magic = f.readline().rstrip()
        if magic != b"Pf":
            raise BadMagic(f"{path}: expected single-channel PFM header 'Pf', got {magic[:8]!r}")
        dims = _PFM_DIMS_RE.match(f.readline())
        if dims is None:
            raise BadMagic(f"{path}: malformed PFM dimensions line")
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise BadMagic(f"{path}: malformed PFM scale line") from exc
        payload = f.read()
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    expected = width * height * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayload(f"{path}: PFM payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return np.flipud(data).astype(np.float32)


def write_pfm(path: PathLike, disparity: np.ndarray, *, little_endian: bool = True) -> None:
    data = np.asarray(disparity, dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError(f"PFM writer takes an [H, W] map, got shape {data.shape}")
    height, width = data.shape
    dtype = np.dtype("<f4") if little_endian else np.dtype(">f4")
    scale = -1.0 if little_endian else 1.0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n{scale}\n".encode("ascii"))
        f.write(np.flipud(data).astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# PNG (KITTI disparity, masks, RGB images)
# ---------------------------------------------------------------------------


def _read_png_rows(path: PathLike) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        width, height, rows, info = png.Reader(file=f).read()
        dtype = np.uint16 if info["bitdepth"] > 8 else np.uint8
        data = np.vstack([np.asarray(row, dtype=dtype) for row in rows])
    planes = info.get("planes", 1)
    return data.reshape(height, width, planes), info


def read_kitti_disparity(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(disparity, valid)``: ``raw / 256`` and ``raw != 0``."""
    raw, info = _read_png_rows(path)
    if info["bitdepth"] != 16 or raw.shape[2] != 1:
        raise BitDepthError(
            f"{path}: KITTI disparity must be 16-bit single channel, got {info['bitdepth']}-bit "
            f"with {raw.shape[2]} plane(s)"
        )
    raw = raw[..., 0]
    return (raw.astype(np.float32) / KITTI_SCALE), raw != 0


def write_kitti_disparity(path: PathLike, disparity: np.ndarray) -> None:
    """Encode ``round(d * 256)``; non-finite or non-positive values become 0 (invalid)."""
    data = np.asarray(disparity, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"KITTI writer takes an [H, W] map, got shape {data.shape}")
    finite = np.isfinite(data) & (data > 0)
    raw = np.where(finite, np.round(np.where(finite, data, 0.0) * KITTI_SCALE), 0)
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        png.Writer(width=raw.shape[1], height=raw.shape[0], greyscale=True, bitdepth=16).write(f, raw.tolist())


def read_mask_png(path: PathLike) -> np.ndarray:
    """Any non-zero pixel is set (KITTI ``obj_map`` foreground)."""
    data, _ = _read_png_rows(path)
    return data[..., 0] != 0


def read_image(path: PathLike) -> torch.Tensor:
    """RGB PNG as a ``[3, H, W]`` float tensor in ``[0, 1]``."""
    with open(path, "rb") as f:
        width, height, rows, _ = png.Reader(file=f).asRGBA8()
        data = np.vstack([np.asarray(row, dtype=np.uint8) for row in rows]).reshape(height, width, 4)
    return torch.from_numpy(data[..., :3].astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def write_image(path: PathLike, image: Union[torch.Tensor, np.ndarray]) -> None:
    """Write ``[3, H, W]`` floats in ``[0, 1]`` or ``[H, W, 3]`` uint8 as RGB PNG."""
    if isinstance(image, torch.Tensor):
        data = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    else:
        data = np.asarray(image, dtype=np.uint8)
    height, width = data.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        png.Writer(width=width, height=height, greyscale=False, bitdepth=8).write(
            f, data.reshape(height, width * 3).tolist()
        )


def colorize(disparity: np.ndarray, max_disparity: float) -> np.ndarray:
    """``[H, W, 3]`` uint8 visualization; greyscale when matplotlib is missing."""
    scaled = np.clip(np.nan_to_num(disparity) / max(max_disparity, 1e-6), 0.0, 1.0)
    try:
        from matplotlib import colormaps
    except ModuleNotFoundError:
        grey = (scaled * 255.0 + 0.5).astype(np.uint8)
        return np.repeat(grey[..., None], 3, axis=2)
    rgba = colormaps["magma"](scaled)
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def save_prediction(stem: PathLike, disparity: np.ndarray, *, max_disparity: Optional[float] = None) -> list[Path]:
    """Write ``<stem>.pfm`` and ``<stem>.png``; plus ``<stem>_color.png`` when ``max_disparity`` is given."""
    stem = Path(stem)
    written = [stem.with_suffix(".pfm"), stem.with_suffix(".png")]
    write_pfm(written[0], disparity)
    write_kitti_disparity(written[1], disparity)
    if max_disparity is not None:
        color = stem.with_name(stem.name + "_color.png")
        write_image(color, colorize(disparity, max_disparity))
        written.append(color)
    return written


# ---------------------------------------------------------------------------
# Synthetic random-dot stereo
# ---------------------------------------------------------------------------


def random_disparity_field(height: int, width: int, seed: int, *, num_objects: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-constant integer field in ``[1, width // 8]`` and its foreground mask.

    A constant background plane carries the lower half of the range and
    ``num_objects`` rectangles the upper half.
    """
    top = width // 8
    if top < 2:
        raise DisparityRangeError(f"width {width} is too small for a synthetic disparity field")
    rng = np.random.default_rng(seed)
    field = np.full((height, width), float(rng.integers(1, top // 2 + 1)), dtype=np.float32)
    fg = np.zeros((height, width), dtype=bool)
    for _ in range(num_objects):
        h = int(rng.integers(height // 4, height // 2 + 1))
        w = int(rng.integers(width // 4, width // 2 + 1))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        field[y:y + h, x:x + w] = float(rng.integers(top // 2 + 1, top + 1))
        fg[y:y + h, x:x + w] = True
    return field, fg


def make_random_dot_pair(
    height: int,
    width: int,
    disparity_field: np.ndarray,
    seed: int,
    *,
    obj_mask: Optional[np.ndarray] = None,
) -> StereoSample:
    """Warp a random RGB texture (the right view) into the left view.

    ``left(y, x) = right(y, x - d(y, x))``. Pixels with ``x < d`` see nothing
    in the right view: they get fresh texture and are masked invalid.
    """
    field = np.asarray(disparity_field, dtype=np.float32)
    if field.shape != (height, width):
        raise ShapeError(f"disparity field {field.shape} does not match {(height, width)}")
    if not np.isfinite(field).all() or (field < 0).any() or (field > width / 8).any():
        raise DisparityRangeError(f"disparity field must lie in [0, {width / 8:g}]")
    if not np.array_equal(field, np.round(field)):
        raise DisparityRangeError("disparity field must be integer valued")
    rng = np.random.default_rng(seed)
    right = rng.random((3, height, width), dtype=np.float32)
    fill = rng.random((3, height, width), dtype=np.float32)
    d = field.astype(np.int64)
    cols = np.arange(width)[None, :] - d
    visible = cols >= 0
    rows = np.broadcast_to(np.arange(height)[:, None], (height, width))
    left = np.where(visible[None], right[:, rows, np.clip(cols, 0, None)], fill)
    return StereoSample(
        left=torch.from_numpy(np.ascontiguousarray(left)),
        right=torch.from_numpy(right),
        gt_disparity=torch.from_numpy(field.copy()),
        valid_mask=torch.from_numpy(visible.copy()),
        obj_mask=None if obj_mask is None else torch.from_numpy(np.asarray(obj_mask, dtype=bool)),
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def random_crop(sample: StereoSample, crop_height: int, crop_width: int, seed: int) -> StereoSample:
    """Crop the same window out of every tensor of the sample."""
    h, w = sample.size
    if crop_height > h or crop_width > w:
        raise ShapeError(f"crop {crop_height}x{crop_width} exceeds sample size {h}x{w}")
    rng = np.random.default_rng(seed)
    y = int(rng.integers(0, h - crop_height + 1))
    x = int(rng.integers(0, w - crop_width + 1))

    def cut(t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        return None if t is None else t[..., y:y + crop_height, x:x + crop_width]

    return replace(
        sample,
        left=cut(sample.left),
        right=cut(sample.right),
        gt_disparity=cut(sample.gt_disparity),
        valid_mask=cut(sample.valid_mask),
        obj_mask=cut(sample.obj_mask),
    )


def item_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _masked_error(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mask = mask.bool()
    if not mask.any():
        raise EmptyMaskError("no valid pixels to evaluate")
    return (pred[mask].double() - gt[mask].double()).abs(), gt[mask].double()


def epe(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    """Mean absolute disparity error over ``mask``."""
    err, _ = _masked_error(pred, gt, mask)
    return float(err.mean())


def d1(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, region_mask: Optional[torch.Tensor] = None) -> float:
    """Percentage of pixels whose error exceeds both 3 px and 5% of the ground truth."""
    mask = mask.bool()
    if region_mask is not None:
        mask = mask & region_mask.bool()
    err, ref = _masked_error(pred, gt, mask)
    outliers = (err > D1_ABS_THRESHOLD) & (err > D1_REL_THRESHOLD * ref.abs())
    return 100.0 * float(outliers.double().mean())


def bad_tau(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, tau: float) -> float:
    err, _ = _masked_error(pred, gt, mask)
    return 100.0 * float((err > tau).double().mean())


@dataclass(frozen=True)
class MetricReport:
    epe: float
    d1_all: float
    bad_1: float
    bad_2: float
    bad_3: float
    num_valid_pixels: int
    d1_bg: Optional[float] = None
    d1_fg: Optional[float] = None

    def __post_init__(self) -> None:
        if self.epe < 0 or self.num_valid_pixels < 0:
            raise ConfigError("metric report has negative epe or pixel count")
        for name in ("d1_all", "d1_bg", "d1_fg", "bad_1", "bad_2", "bad_3"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise ConfigError(f"metric {name}={value} is not a percentage")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricReport":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown metric report keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def evaluate(
    pred: torch.Tensor,
    gt: torch.Tensor,
    mask: torch.Tensor,
    obj_mask: Optional[torch.Tensor] = None,
) -> MetricReport:
    """Full metric suite; D1 bg/fg only when a foreground mask is given and the region is non-empty."""
    mask = mask.bool()
    d1_bg = d1_fg = None
    if obj_mask is not None:
        fg = obj_mask.bool()
        if (mask & ~fg).any():
            d1_bg = d1(pred, gt, mask, ~fg)
        if (mask & fg).any():
            d1_fg = d1(pred, gt, mask, fg)
    return MetricReport(
        epe=epe(pred, gt, mask),
        d1_all=d1(pred, gt, mask),
        bad_1=bad_tau(pred, gt, mask, BAD_THRESHOLDS[0]),
        bad_2=bad_tau(pred, gt, mask, BAD_THRESHOLDS[1]),
        bad_3=bad_tau(pred, gt, mask, BAD_THRESHOLDS[2]),
        num_valid_pixels=int(mask.sum()),
        d1_bg=d1_bg,
        d1_fg=d1_fg,
    )


def channel_statistics(dataset: Sequence[StereoSample]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over every left and right image."""
    total = torch.zeros(3, dtype=torch.float64)
    total_sq = torch.zeros(3, dtype=torch.float64)
    count = 0
    for i in range(len(dataset)):
        sample = dataset[i]
        for image in (sample.left, sample.right):
            flat = image.double().reshape(3, -1)
            total += flat.sum(dim=1)
            total_sq += (flat * flat).sum(dim=1)
            count += flat.shape[1]
    if count == 0:
        raise EmptyMaskError("cannot compute channel statistics of an empty dataset")
    mean = total / count
    std = (total_sq / count - mean * mean).clamp_min(1e-12).sqrt()
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def collate_samples(samples: Sequence[StereoSample]) -> StereoSample:
    """Stack samples into a batch; optional fields survive only if every sample has them."""

    def stack(name: str) -> Optional[torch.Tensor]:
        values = [getattr(s, name) for s in samples]
        if any(v is None for v in values):
            return None
        return torch.stack(values)

    return StereoSample(
        left=stack("left"),
        right=stack("right"),
        gt_disparity=stack("gt_disparity"),
        valid_mask=stack("valid_mask"),
        obj_mask=stack("obj_mask"),
    )


class StereoDataset(Dataset):
    """Base class: loads, crops (seeded per epoch and index) and validates samples."""

    def __init__(self, config: ModelConfig, *, crop: Optional[Sequence[int]] = None, seed: int = 0):
        self.config = config
        self.crop = tuple(crop) if crop else None
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def load(self, index: int) -> StereoSample:
        raise NotImplementedError

    def __getitem__(self, index: int) -> StereoSample:
        sample = self.load(index)
        if self.crop is not None:
            sample = random_crop(sample, self.crop[0], self.crop[1], item_seed(self.seed, self.epoch, index))
        return validate_sample(sample, self.config)


class SyntheticStereoDataset(StereoDataset):
    def __init__(
        self,
        config: ModelConfig,
        num_pairs: int,
        size: Sequence[int],
        *,
        crop: Optional[Sequence[int]] = None,
        seed: int = 0,
    ):
        super().__init__(config, crop=crop, seed=seed)
        self.num_pairs = num_pairs
        self.height, self.width = int(size[0]), int(size[1])

    def __len__(self) -> int:
        return self.num_pairs

    def load(self, index: int) -> StereoSample:
        if not 0 <= index < self.num_pairs:
            raise IndexError(index)
        pair_seed = int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])
        field, fg = random_disparity_field(self.height, self.width, pair_seed)
        return make_random_dot_pair(self.height, self.width, field, pair_seed + 1, obj_mask=fg)


class SceneFlowDataset(StereoDataset):
    def __init__(
        self,
        config: ModelConfig,
        root: PathLike,
        split: str = "TRAIN",
        *,
        crop: Optional[Sequence[int]] = None,
        seed: int = 0,
    ):
        super().__init__(config, crop=crop, seed=seed)
        self.root = Path(root)
        images = self.root / "frames_finalpass" / split
        self.items = []
        for left in sorted(images.rglob("left/*.png")):
            rel = left.relative_to(self.root / "frames_finalpass")
            right = left.parent.parent / "right" / left.name
            disp = (self.root / "disparity" / rel).with_suffix(".pfm")
            if right.is_file() and disp.is_file():
                self.items.append((left, right, disp))
        if not self.items:
            raise ConfigError(f"no SceneFlow finalpass samples under {images}")

    def __len__(self) -> int:
        return len(self.items)

    def load(self, index: int) -> StereoSample:
        left, right, disp = self.items[index]
        return StereoSample(
            left=read_image(left),
            right=read_image(right),
            gt_disparity=torch.from_numpy(read_pfm(disp).copy()),
        )


_KITTI_LAYOUTS = (
    # (left dir, right dir, disparity dir, object map dir)
    ("image_2", "image_3", "disp_occ_0", "obj_map"),
    ("colored_0", "colored_1", "disp_occ", None),
)


class KittiDataset(StereoDataset):
    """KITTI 2012 and/or 2015 training sets, concatenated across roots."""

    def __init__(
        self,
        config: ModelConfig,
        roots: Union[PathLike, Sequence[PathLike]],
        *,
        crop: Optional[Sequence[int]] = None,
        seed: int = 0,
    ):
        super().__init__(config, crop=crop, seed=seed)
        if isinstance(roots, (str, Path)):
            roots = [roots]
        self.items = []
        for root in roots:
            self.items.extend(self._index_root(Path(root)))
        if not self.items:
            raise ConfigError(f"no KITTI samples under {', '.join(str(r) for r in roots)}")

    @staticmethod
    def _index_root(root: Path) -> list[tuple[Path, Path, Path, Optional[Path]]]:
        for left_dir, right_dir, disp_dir, obj_dir in _KITTI_LAYOUTS:
            if not (root / left_dir).is_dir() or not (root / disp_dir).is_dir():
                continue
            items = []
            for disp in sorted((root / disp_dir).glob("*_10.png")):
                obj = root / obj_dir / disp.name if obj_dir else None
                items.append((root / left_dir / disp.name, root / right_dir / disp.name, disp,
                              obj if obj is not None and obj.is_file() else None))
            return items
        return []

    def __len__(self) -> int:
        return len(self.items)

    def load(self, index: int) -> StereoSample:
        left, right, disp, obj = self.items[index]
        gt, valid = read_kitti_disparity(disp)
        return StereoSample(
            left=read_image(left),
            right=read_image(right),
            gt_disparity=torch.from_numpy(gt),
            valid_mask=torch.from_numpy(valid),
            obj_mask=None if obj is None else torch.from_numpy(read_mask_png(obj)),
        )


DATASET_FORMATS = ("synthetic", "sceneflow", "kitti")
