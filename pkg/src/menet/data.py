"""BraTS-style data pipeline: cases, normalization, one-hot labels,
patch tiling/stitching and synthetic phantom cases.

Volumes are indexed (x, y, z) as they come off disk. Network patches
use the (batch, depth, height, width, channel) layout with the z axis
first, so a (128, 128, 64) patch of a (240, 240, 155) volume becomes a
(1, 64, 128, 128, 4) tensor.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ExtentTooSmall,
    GridMismatch,
    MissingLabels,
    PatchTooLarge,
    ShapeMismatch,
    UnknownLabelCode,
    ValidationError,
)
from .nifti import Volume, read_nifti

MODALITY_KEYS = ("FLAIR", "T1", "T1CE", "T2")
LABEL_CODES = (0, 1, 2, 4)
CHANNEL_CODES = np.array(LABEL_CODES, dtype=np.int64)

DEFAULT_PATCH_EXTENT = (128, 128, 64)
DEFAULT_PATCH_STRIDES = (28, 28, 15)


@dataclass
class MultiModalCase:
    """Four co-registered modality volumes plus an optional label volume."""

    case_id: str
    modalities: dict[str, Volume]
    labels: Volume | None = None

    def __post_init__(self):
        if set(self.modalities) != set(MODALITY_KEYS):
            raise ValidationError(
                f"case {self.case_id}: need modalities {MODALITY_KEYS}"
            )
        extents = {v.extent for v in self.modalities.values()}
        if self.labels is not None:
            extents.add(self.labels.extent)
            _check_label_codes(self.labels.data)
        if len(extents) != 1:
            raise ShapeMismatch(f"case {self.case_id}: mixed extents {extents}")

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.modalities[MODALITY_KEYS[0]].extent

    @property
    def voxel_spacing(self) -> tuple[float, float, float]:
        return self.modalities[MODALITY_KEYS[0]].spacing


def _check_label_codes(labels: np.ndarray):
    codes = np.unique(labels)
    bad = set(int(c) for c in codes) - set(LABEL_CODES)
    if bad:
        raise UnknownLabelCode(f"label codes {sorted(bad)} outside {LABEL_CODES}")


def zscore_normalize(volume: Volume) -> Volume:
    """Standardize to zero mean, unit population std; constant volumes map to zeros."""
    data = np.asarray(volume.data, dtype=np.float64)
    mu = data.mean()
    sigma = data.std()
    if sigma == 0.0:
        out = np.zeros_like(data)
    else:
        out = (data - mu) / sigma
    return Volume(out, volume.spacing, volume.orientation)


def normalize_case(case: MultiModalCase) -> MultiModalCase:
    return MultiModalCase(
        case.case_id,
        {k: zscore_normalize(v) for k, v in case.modalities.items()},
        case.labels,
    )


def one_hot_encode(labels: np.ndarray) -> np.ndarray:
    """{0,1,2,4}-coded labels -> one binary channel per class (trailing axis)."""
    _check_label_codes(labels)
    out = np.zeros(labels.shape + (len(LABEL_CODES),), dtype=np.float64)
    for channel, code in enumerate(LABEL_CODES):
        out[..., channel] = labels == code
    return out


def decode_one_hot(onehot: np.ndarray) -> np.ndarray:
    """Inverse of one_hot_encode via per-voxel argmax."""
    return CHANNEL_CODES[np.argmax(onehot, axis=-1)]


def channels_to_codes(channel_map: np.ndarray) -> np.ndarray:
    """Map class-channel indices 0..3 back to label codes 0/1/2/4."""
    return CHANNEL_CODES[channel_map]


@dataclass(frozen=True)
class PatchGrid:
    """Origins tiling a volume; overlaps are averaged on reassembly."""

    volume_extent: tuple[int, int, int]
    patch_extent: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    if patch > extent:
        raise PatchTooLarge(f"patch {patch} exceeds volume extent {extent}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    last = extent - patch
    xs = list(range(0, last + 1, stride))
    if xs[-1] != last:
        # snap the final origin onto the boundary; keep both when the snap
        # would open a gap behind it
        if len(xs) >= 2 and xs[-2] + patch >= last:
            xs[-1] = last
        else:
            xs.append(last)
    return xs


def make_patch_grid(volume_extent, patch_extent, strides) -> PatchGrid:
    per_axis = [
        _axis_origins(e, p, s)
        for e, p, s in zip(volume_extent, patch_extent, strides)
    ]
    origins = tuple(itertools.product(*per_axis))
    return PatchGrid(tuple(volume_extent), tuple(patch_extent), origins)


def _to_patch_axes(a: np.ndarray) -> np.ndarray:
    """(x, y, z[, c]) -> (z, x, y[, c])"""
    return np.moveaxis(a, 2, 0)


def _from_patch_axes(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, 0, 2)


def extract_patches(case: MultiModalCase, grid: PatchGrid, require_labels: bool = True):
    """Crop every grid patch; yields (input, target) pairs of
    (1, d, h, w, 4) tensors, target None when labels are absent."""
    if case.extent != grid.volume_extent:
        raise GridMismatch(f"grid built for {grid.volume_extent}, case is {case.extent}")
    if require_labels and case.labels is None:
        raise MissingLabels(f"case {case.case_id} has no label volume")
    stacked = np.stack(
        [np.asarray(case.modalities[k].data, dtype=np.float64) for k in MODALITY_KEYS],
        axis=-1,
    )
    onehot = None if case.labels is None else one_hot_encode(case.labels.data)
    px, py, pz = grid.patch_extent
    out = []
    for ox, oy, oz in grid.origins:
        crop = stacked[ox:ox + px, oy:oy + py, oz:oz + pz]
        inp = _to_patch_axes(crop)[None]
        tgt = None
        if onehot is not None:
            tgt = _to_patch_axes(onehot[ox:ox + px, oy:oy + py, oz:oz + pz])[None]
        out.append((inp, tgt))
    return out


def stitch_patches(grid: PatchGrid, patch_probs) -> tuple[np.ndarray, np.ndarray]:
    """Reassemble per-patch probability maps into a volume.

    Overlaps are averaged arithmetically per channel, then every voxel
    is renormalized to sum to 1. Returns (probabilities (x,y,z,c),
    argmax channel map (x,y,z)).
    """
    patch_probs = list(patch_probs)
    if len(patch_probs) != len(grid.origins):
        raise GridMismatch(
            f"{len(patch_probs)} patches for {len(grid.origins)} origins"
        )
    px, py, pz = grid.patch_extent
    channels = patch_probs[0].shape[-1]
    acc = np.zeros(grid.volume_extent + (channels,))
    count = np.zeros(grid.volume_extent)
    for (ox, oy, oz), probs in zip(grid.origins, patch_probs):
        arr = np.asarray(probs)
        if arr.ndim == 5:
            if arr.shape[0] != 1:
                raise GridMismatch(f"expected batch 1, got {arr.shape}")
            arr = arr[0]
        if arr.shape != (pz, px, py, channels):
            raise GridMismatch(f"patch shape {arr.shape} vs extent {grid.patch_extent}")
        arr = _from_patch_axes(arr)
        acc[ox:ox + px, oy:oy + py, oz:oz + pz] += arr
        count[ox:ox + px, oy:oy + py, oz:oz + pz] += 1.0
    if np.any(count == 0):
        raise GridMismatch("grid does not cover the volume")
    mean = acc / count[..., None]
    mean /= mean.sum(axis=-1, keepdims=True)
    return mean, np.argmax(mean, axis=-1)


# -- synthetic phantom -----------------------------------------------

# per-modality mean intensity for background / edema / enhancing / core
_PHANTOM_INTENSITY = {
    "FLAIR": (1.0, 2.2, 1.8, 1.5),
    "T1": (1.0, 0.7, 0.9, 0.5),
    "T1CE": (1.0, 0.9, 2.5, 0.6),
    "T2": (1.0, 2.0, 1.6, 2.4),
}
_PHANTOM_NOISE = 0.05
# relative ellipsoid semi-axes: edema > enhancing shell > necrotic core
_PHANTOM_RADII = (0.27, 0.19, 0.11)


def make_phantom(seed: int, extent=(32, 32, 16)) -> MultiModalCase:
    """Deterministic nested-ellipsoid case with realistic class imbalance.

    Labels: necrotic core (1) inside an enhancing shell (4) inside an
    edema shell (2); everything else background. The tumor occupies
    well under 10% of the volume.
    """
    extent = tuple(int(e) for e in extent)
    if any(e < 16 for e in extent):
        raise ExtentTooSmall(f"phantom extent {extent} must be >= 16 per axis")
    rng = np.random.default_rng(seed)
    coords = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extent),
                         indexing="ij")
    center = [(e - 1) / 2.0 for e in extent]
    # squared normalized radius for each nesting level
    r2 = []
    for frac in _PHANTOM_RADII:
        semi = [max(frac * e, 1.5) for e in extent]
        r2.append(sum(((c - mu) / a) ** 2 for c, mu, a in zip(coords, center, semi)))
    labels = np.zeros(extent, dtype=np.uint8)
    labels[r2[0] <= 1.0] = 2
    labels[r2[1] <= 1.0] = 4
    labels[r2[2] <= 1.0] = 1

    region = np.zeros(extent, dtype=np.int64)  # 0 bg, 1 edema, 2 enhancing, 3 core
    region[labels == 2] = 1
    region[labels == 4] = 2
    region[labels == 1] = 3
    modalities = {}
    for key in MODALITY_KEYS:
        means = np.array(_PHANTOM_INTENSITY[key])
        img = means[region] + rng.normal(0.0, _PHANTOM_NOISE, extent)
        modalities[key] = Volume(img)
    return MultiModalCase(f"phantom{seed:04d}", modalities, Volume(labels))


# -- manifests --------------------------------------------------------

_MODALITY_SUFFIXES = ("_flair", "_t1ce", "_t1", "_t2", "_seg", "_pred")


def case_id_from_path(path) -> str:
    stem = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
            break
    low = stem.lower()
    for suffix in _MODALITY_SUFFIXES:
        if low.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


@dataclass(frozen=True)
class CaseFiles:
    case_id: str
    modality_paths: dict[str, Path]
    label_path: Path | None = None


def read_manifest(path) -> list[CaseFiles]:
    """One case per line: FLAIR, T1, T1CE, T2 paths (tab-separated),
    optionally followed by the label path. Relative paths resolve
    against the manifest location."""
    path = Path(path)
    base = path.parent
    cases = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ValidationError(
                f"{path}:{lineno}: expected 4 or 5 tab-separated paths, got {len(fields)}"
            )
        paths = [base / f if not Path(f).is_absolute() else Path(f) for f in fields]
        cases.append(CaseFiles(
            case_id_from_path(paths[0]),
            dict(zip(MODALITY_KEYS, paths[:4])),
            paths[4] if len(fields) == 5 else None,
        ))
    return cases


def load_case(files: CaseFiles) -> MultiModalCase:
    modalities = {k: read_nifti(p) for k, p in files.modality_paths.items()}
    labels = None
    if files.label_path is not None:
        labels = read_nifti(files.label_path)
        labels.data = np.rint(np.asarray(labels.data)).astype(np.uint8)
    return MultiModalCase(files.case_id, modalities, labels)
