"""Frame / attention-map datasets.

Two sources produce the same `Sample`s:

- a directory laid out as `root/frames/<id>.png`, `root/maps/<id>.png` and
  optionally `root/fixations/<id>.txt` (one "row col" pair per line, in
  source map pixels)
- a seeded generator of short clips with moving colored blobs over a
  smooth texture, whose ground truth is a Gaussian mixture on the blob
  nearest to the vertical center line
"""

import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from .errors import (
    ConfigError,
    EmptyDatasetError,
    EmptyFixationError,
    MissingPairError,
    ShapeError,
    ZeroMapError,
)
from .metrics import FixationSet, fixations_from_map
from .utils import validate_dataset_structure, warn

DATASET_KINDS = ("directory", "synthetic")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    root: str | None = None
    split: str = "train"
    input_side: int = 64
    fixation_threshold: float = 0.75
    seed: int = 0
    n_samples: int = 500
    n_val_samples: int = 100
    n_blobs: int = 3
    # blob and ground truth sigma as a fraction of the frame side
    sigma_range: tuple[float, float] = (0.04, 0.09)
    clip_length: int = 10
    texture_seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(
                "dataset kind must be one of %s, got %s"
                % (DATASET_KINDS, self.kind)
            )
        if self.split not in SPLITS:
            raise ConfigError(
                "split must be one of %s, got %s" % (SPLITS, self.split)
            )
        if self.kind == "directory" and not self.root:
            raise ConfigError("a directory dataset needs a root")
        if self.n_samples < 1 or self.n_val_samples < 1:
            raise ConfigError("synthetic datasets need n_samples >= 1")
        if self.n_blobs < 1 or self.clip_length < 1:
            raise ConfigError("n_blobs and clip_length must be >= 1")
        low, high = self.sigma_range
        if not 0 < low <= high:
            raise ConfigError(
                "sigma_range must satisfy 0 < low <= high, got %s"
                % (self.sigma_range,)
            )

    @property
    def size(self) -> int:
        """number of synthetic samples in this split"""
        return self.n_samples if self.split == "train" else self.n_val_samples


@dataclass
class Sample:
    """one frame; `gt_map` is max-normalized to [0, 1]"""

    image: torch.Tensor
    gt_map: np.ndarray
    fixations: FixationSet
    id: str


@dataclass
class Batch:
    images: torch.Tensor
    maps: torch.Tensor
    masks: torch.Tensor
    ids: list[str]

    def __len__(self):
        return len(self.ids)

    def to(self, device) -> "Batch":
        return Batch(
            self.images.to(device),
            self.maps.to(device),
            self.masks.to(device),
            self.ids,
        )


def validate_sample(sample: Sample, side: int) -> Sample:
    if tuple(sample.image.shape) != (3, side, side):
        raise ShapeError(
            "sample %s image has shape %s, expected (3, %d, %d)"
            % (sample.id, tuple(sample.image.shape), side, side)
        )
    if sample.gt_map.shape != (side, side):
        raise ShapeError(
            "sample %s map has shape %s, expected (%d, %d)"
            % (sample.id, sample.gt_map.shape, side, side)
        )
    if not sample.gt_map.max() > 0:
        raise ZeroMapError("sample %s has an all-zero map" % sample.id)
    if len(sample.fixations) == 0:
        raise EmptyFixationError("sample %s has no fixations" % sample.id)
    return sample


class InMemoryDataset:
    def __init__(self, samples: list[Sample], name: str = "dataset"):
        self.samples = samples
        self.name = name

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


def _load_map(path: str, side: int) -> np.ndarray:
    with Image.open(path) as img:
        resized = img.convert("L").resize((side, side), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


def load_frame(path: str, side: int) -> torch.Tensor:
    with Image.open(path) as img:
        resized = img.convert("RGB").resize((side, side), Image.BILINEAR)
    array = np.asarray(resized, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def read_fixation_file(
    path: str, source_shape: tuple[int, int], side: int
) -> FixationSet:
    """reads "row col" lines given in source pixels and rescales them onto
    the S x S grid, dropping points that collapse onto the same pixel"""
    height, width = source_shape
    with open(path) as f:
        text = f.read()
    if not text.strip():
        return FixationSet(points=(), frame_shape=(side, side))
    coords = np.loadtxt(path, dtype=np.float64, ndmin=2)
    points = []
    for row, col in coords:
        r = min(side - 1, max(0, int(row * side / height)))
        c = min(side - 1, max(0, int(col * side / width)))
        if (r, c) not in points:
            points.append((r, c))
    return FixationSet(points=tuple(points), frame_shape=(side, side))


class DirectoryDataset:
    """paired frames and maps under `root`, indexed eagerly and loaded
    lazily; samples whose map is all zero are dropped with a warning"""

    def __init__(self, root: str, side: int, fixation_threshold: float = 0.75):
        validate_dataset_structure(root, ["frames", "maps"])
        self.root = root
        self.name = os.path.basename(os.path.normpath(root))
        self.side = side
        self.fixation_threshold = fixation_threshold
        frames = self._stems("frames")
        maps = self._stems("maps")
        unpaired = sorted(frames ^ maps)
        if unpaired:
            stem = unpaired[0]
            have, missing = (
                ("frame", "map") if stem in frames else ("map", "frame")
            )
            raise MissingPairError(
                "%s has a %s but no %s under %s"
                % (stem, have, missing, root)
            )
        self._ids = []
        for stem in sorted(frames):
            with Image.open(self._path("maps", stem)) as img:
                peak = np.asarray(img.convert("L")).max()
            if peak == 0:
                warn("rejecting %s, its attention map is all zero" % stem)
                continue
            self._ids.append(stem)

    def _stems(self, component: str) -> set[str]:
        return {
            os.path.splitext(name)[0]
            for name in os.listdir(os.path.join(self.root, component))
            if name.lower().endswith(".png")
        }

    def _path(self, component: str, stem: str, ext: str = ".png") -> str:
        return os.path.join(self.root, component, stem + ext)

    def __len__(self):
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def __getitem__(self, index: int) -> Sample:
        stem = self._ids[index]
        raw = _load_map(self._path("maps", stem), self.side)
        if not raw.max() > 0:
            raise ZeroMapError("map of %s is all zero after resizing" % stem)
        gt_map = raw / raw.max()
        fixation_path = self._path("fixations", stem, ".txt")
        if os.path.exists(fixation_path):
            with Image.open(self._path("maps", stem)) as img:
                source_shape = (img.height, img.width)
            fixations = read_fixation_file(
                fixation_path, source_shape, self.side
            )
            if len(fixations) == 0:
                warn(
                    "fixation file of %s is empty, thresholding its map" % stem
                )
                fixations = fixations_from_map(
                    gt_map, self.fixation_threshold
                )
        else:
            fixations = fixations_from_map(gt_map, self.fixation_threshold)
        sample = Sample(
            image=load_frame(self._path("frames", stem), self.side),
            gt_map=gt_map,
            fixations=fixations,
            id=stem,
        )
        return validate_sample(sample, self.side)


def _gaussian(side: int, center: np.ndarray, sigma: float) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def center_bias_map(side: int, sigma_frac: float = 0.2) -> np.ndarray:
    """fixed isotropic Gaussian centered in the frame, max-normalized"""
    center = np.array([(side - 1) / 2.0, (side - 1) / 2.0])
    return _gaussian(side, center, sigma_frac * side)


def _texture(rng: np.random.Generator, side: int) -> np.ndarray:
    noise = rng.random((side, side, 3))
    smooth = gaussian_filter(noise, sigma=(side / 32.0, side / 32.0, 0))
    smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-12)
    return 0.25 + 0.3 * smooth


def attended_blob(centers: np.ndarray, side: int) -> int:
    """index of the blob nearest to the vertical center line, ties broken by
    lowest index"""
    return int(np.argmin(np.abs(centers[:, 1] - (side - 1) / 2.0)))


def _synth_clip(
    spec: DatasetSpec, rng: np.random.Generator, clip: int, length: int
) -> list[Sample]:
    side = spec.input_side
    background = _texture(rng, side)
    low, high = spec.sigma_range
    sigmas = rng.uniform(low, high, spec.n_blobs) * side
    colors = rng.uniform(0.5, 1.0, (spec.n_blobs, 3))
    colors[np.arange(spec.n_blobs), rng.integers(0, 3, spec.n_blobs)] = 0.05
    start = rng.uniform(0.15 * side, 0.85 * side, (spec.n_blobs, 2))
    velocity = rng.uniform(-1.5, 1.5, (spec.n_blobs, 2)) * side / 64.0
    samples = []
    for t in range(length):
        centers = np.clip(start + t * velocity, 0, side - 1)
        frame = background.copy()
        for center, sigma, color in zip(centers, sigmas, colors):
            alpha = _gaussian(side, center, sigma)[..., None]
            frame = (1 - alpha) * frame + alpha * color
        target = attended_blob(centers, side)
        center, sigma = centers[target], sigmas[target]
        gt_map = _gaussian(side, center, sigma) + 0.5 * _gaussian(
            side, center, 2.0 * sigma
        )
        gt_map /= gt_map.max()
        samples.append(
            Sample(
                image=torch.from_numpy(
                    np.ascontiguousarray(frame.transpose(2, 0, 1))
                ).float(),
                gt_map=gt_map,
                fixations=fixations_from_map(gt_map, spec.fixation_threshold),
                id="%s_%04d_%02d" % (spec.split, clip, t),
            )
        )
    return samples


def synth_generate(spec: DatasetSpec, seed: int | None = None) -> InMemoryDataset:
    """generates `spec.size` frames in clips of `spec.clip_length` in which
    blobs move with constant velocity. Equal (spec, seed) pairs give
    identical datasets; each split draws from its own stream.

    Parameters
    ----------
    spec : DatasetSpec
        generator parameters
    seed : int, optional
        overrides `spec.seed`

    Returns
    -------
    InMemoryDataset
        the generated samples
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(
        [seed, spec.texture_seed, SPLITS.index(spec.split)]
    )
    samples = []
    clip = 0
    with tqdm(
        total=spec.size, desc="generating %s" % spec.split, leave=False
    ) as progress:
        while len(samples) < spec.size:
            length = min(spec.clip_length, spec.size - len(samples))
            samples.extend(_synth_clip(spec, rng, clip, length))
            progress.update(length)
            clip += 1
    return InMemoryDataset(
        [validate_sample(s, spec.input_side) for s in samples],
        name="synthetic_%s" % spec.split,
    )


def load_dataset(spec: DatasetSpec):
    """builds the dataset a spec describes.

    Raises
    ------
    MissingPairError
        if a frame has no map or vice versa
    EmptyDatasetError
        if no usable sample remains
    """
    if spec.kind == "synthetic":
        ds = synth_generate(spec)
    else:
        ds = DirectoryDataset(
            spec.root, spec.input_side, spec.fixation_threshold
        )
    if len(ds) == 0:
        raise EmptyDatasetError("dataset %s holds no usable samples" % ds.name)
    return ds


def collate(samples: list[Sample]) -> Batch:
    return Batch(
        images=torch.stack([s.image for s in samples]),
        maps=torch.stack(
            [torch.from_numpy(s.gt_map).float() for s in samples]
        ).unsqueeze(1),
        masks=torch.stack(
            [torch.from_numpy(s.fixations.to_mask()) for s in samples]
        ).unsqueeze(1),
        ids=[s.id for s in samples],
    )


def epoch_order(n: int, seed: int, shuffle: bool, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_bounds(
    n: int, batch_size: int, merge_singleton: bool = False
) -> list[tuple[int, int]]:
    """start and stop positions of the batches of one epoch over `n`
    samples. With `merge_singleton` a trailing batch of one sample is folded
    into the batch before it."""
    bounds = [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]
    if merge_singleton and len(bounds) > 1 and n - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def batch_iter(
    ds,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epoch: int = 0,
    start: int = 0,
    merge_singleton: bool = False,
):
    """yields the batches of one epoch in a seeded order, the last one
    possibly partial.

    Parameters
    ----------
    ds : dataset
        anything with __len__ and __getitem__ returning Samples
    batch_size : int
        samples per batch
    seed : int, optional
        shuffling seed, by default 0
    shuffle : bool, optional
        shuffle the order, by default True; False keeps dataset order
    epoch : int, optional
        epoch index mixed into the seed, by default 0
    start : int, optional
        number of leading batches to skip, used when resuming
    merge_singleton : bool, optional
        fold a trailing single-sample batch into the previous one, by
        default False

    Raises
    ------
    ConfigError
        if batch_size < 1
    EmptyDatasetError
        if the dataset is empty
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1, got %s" % batch_size)
    if len(ds) == 0:
        raise EmptyDatasetError("cannot iterate over an empty dataset")
    order = epoch_order(len(ds), seed, shuffle, epoch)
    bounds = batch_bounds(len(order), batch_size, merge_singleton)
    for lo, hi in bounds[start:]:
        yield collate([ds[int(i)] for i in order[lo:hi]])


def write_synthetic_directory(ds, root: str) -> str:
    """writes `ds` as frames/maps PNGs plus fixation text files under
    `root`, the layout `DirectoryDataset` reads."""
    for component in ("frames", "maps", "fixations"):
        os.makedirs(os.path.join(root, component), exist_ok=True)
    for i in range(len(ds)):
        sample = ds[i]
        frame = sample.image.permute(1, 2, 0).numpy()
        Image.fromarray(
            np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8), "RGB"
        ).save(os.path.join(root, "frames", sample.id + ".png"))
        Image.fromarray(
            np.round(np.clip(sample.gt_map, 0, 1) * 255).astype(np.uint8), "L"
        ).save(os.path.join(root, "maps", sample.id + ".png"))
        np.savetxt(
            os.path.join(root, "fixations", sample.id + ".txt"),
            np.array(sample.fixations.points, dtype=np.int64).reshape(-1, 2),
            fmt="%d",
        )
    return root
