"""Loading and validation of segmentation model outputs.

Three on-disk artifacts make up a dataset:

* softmax tensors: NPY version 1.0 files, little-endian float32, C order,
  shape (H, W, K). Every pixel's K values must lie in [0, 1] and sum to 1
  within a tolerance.
* label masks: 8-bit single-channel PNG, pixel values are class ids in
  0..K-1 with 255 reserved for "ignore".
* a manifest: JSON document naming the dataset, its class registry and the
  tensor/label file pair of every sample.

Loaders raise :class:`FormatError` for broken containers,
:class:`SchemaError` for well-formed data that contradicts the registry,
:class:`ValidationError` for value constraints and :class:`DataIOError`
for missing files. Loaded arrays are marked read-only so they can be
shared across threads safely.
"""
from __future__ import annotations

import json
import tokenize
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format
from PIL import Image, UnidentifiedImageError

from .errors import DataIOError, FormatError, SchemaError, ValidationError
from ._util import sha256_hex

IGNORE_PNG_VALUE = 255
DEFAULT_SUM_TOLERANCE = 1e-4
MANIFEST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered class table: index position is the class id.

    :param class_names: name per class id, ids are 0..K-1 by position.
    :param ignore_id: label value that marks unlabeled pixels; must not be
        a valid class id.
    """

    class_names: tuple[str, ...]
    ignore_id: int = 255

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValidationError(f"registry needs at least 2 classes, got {len(self.class_names)}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("registry class names must be unique")
        if 0 <= self.ignore_id < len(self.class_names):
            raise ValidationError(
                f"ignore_id {self.ignore_id} collides with valid class ids 0..{len(self.class_names) - 1}"
            )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def from_pairs(cls, pairs, ignore_id: int) -> "ClassRegistry":
        """Build from (id, name) pairs; ids must be exactly 0..K-1."""
        pairs = list(pairs)
        ids = [int(i) for i, _ in pairs]
        if sorted(ids) != list(range(len(pairs))):
            raise SchemaError(f"class ids must be contiguous 0..{len(pairs) - 1}, got {sorted(ids)}")
        names = [None] * len(pairs)
        for i, name in pairs:
            names[int(i)] = str(name)
        return cls(class_names=tuple(names), ignore_id=int(ignore_id))

    def to_dict(self) -> dict:
        return {
            "ignore_id": self.ignore_id,
            "classes": [{"id": i, "name": n} for i, n in enumerate(self.class_names)],
        }


@dataclass(frozen=True, eq=False)
class SoftmaxTensor:
    """One image's per-pixel class probabilities, shape (H, W, K) float32."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMask:
    """One image's ground-truth class ids, shape (H, W) int32.

    Unlabeled pixels carry the registry's ignore id (on disk they are 255).
    """

    data: np.ndarray
    ignore_id: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def labeled(self) -> np.ndarray:
        """Boolean (H, W) mask of pixels that carry a real label."""
        return self.data != self.ignore_id


@dataclass(frozen=True)
class SampleEntry:
    sample_id: str
    tensor_path: Path
    label_path: Path
    width: int
    height: int


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    location_tag: str
    registry: ClassRegistry
    samples: tuple[SampleEntry, ...]
    source_path: Path | None = None
    content_hash: str | None = None


# ---------------------------------------------------------------------------
# NPY softmax tensors


def _read_npy_header(fh, path):
    """Return (shape, fortran_order, dtype) of an NPY v1.0 stream or raise."""
    try:
        version = npy_format.read_magic(fh)
    except ValueError as exc:
        raise FormatError(f"{path}: not an NPY file: {exc}") from exc
    if version != (1, 0):
        raise FormatError(f"{path}: NPY version {version} unsupported, expected (1, 0)")
    try:
        shape, fortran_order, dtype = npy_format.read_array_header_1_0(fh)
    except (ValueError, SyntaxError, TypeError, tokenize.TokenError) as exc:
        # numpy parses the header dict with a tokenizer; on fuzzed bytes that
        # can leak TokenError/SyntaxError instead of ValueError
        raise FormatError(f"{path}: malformed NPY header: {exc}") from exc
    return shape, fortran_order, dtype


def peek_tensor_shape(path: Path | str) -> tuple[int, int, int]:
    """Read (H, W, K) from the NPY header without loading pixel data."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataIOError(f"cannot open tensor file {path}: {exc}") from exc
    with fh:
        shape, fortran_order, dtype = _read_npy_header(fh, path)
    _check_tensor_schema(shape, fortran_order, dtype, path)
    return shape


def _check_tensor_schema(shape, fortran_order, dtype, path):
    if dtype != np.dtype("<f4"):
        raise SchemaError(f"{path}: tensor dtype must be little-endian float32, got {dtype}")
    if fortran_order:
        raise SchemaError(f"{path}: tensor must be C-ordered, got fortran_order=True")
    if len(shape) != 3:
        raise SchemaError(f"{path}: tensor must be 3-dimensional (H, W, K), got shape {shape}")


def load_softmax_tensor(
    path: Path | str,
    registry: ClassRegistry,
    *,
    sum_tolerance: float = DEFAULT_SUM_TOLERANCE,
) -> SoftmaxTensor:
    """Load and validate one softmax tensor.

    Checks, in order: the NPY v1.0 container, the dtype/order/rank schema,
    K against the registry, that all values lie in [0, 1], and that each
    pixel's values sum to 1 within ``sum_tolerance``. The first offending
    pixel is named in the :class:`ValidationError`.
    """
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataIOError(f"cannot open tensor file {path}: {exc}") from exc
    with fh:
        shape, fortran_order, dtype = _read_npy_header(fh, path)
        _check_tensor_schema(shape, fortran_order, dtype, path)
        if shape[2] != registry.n_classes:
            raise SchemaError(
                f"{path}: tensor has K={shape[2]} but registry defines {registry.n_classes} classes"
            )
        count = int(np.prod(shape))
        raw = fh.read(count * 4)
        if len(raw) < count * 4:
            raise FormatError(
                f"{path}: truncated tensor payload, expected {count * 4} bytes, got {len(raw)}"
            )
    data = np.frombuffer(raw, dtype="<f4", count=count).reshape(shape)

    bad = ~np.isfinite(data) | (data < 0.0) | (data > 1.0)
    if bad.any():
        r, c, k = np.argwhere(bad)[0]
        raise ValidationError(
            f"{path}: value {data[r, c, k]!r} at pixel ({r}, {c}) channel {k} outside [0, 1]"
        )
    sums = data.sum(axis=2, dtype=np.float64)
    off = np.abs(sums - 1.0) > sum_tolerance
    if off.any():
        r, c = np.argwhere(off)[0]
        raise ValidationError(
            f"{path}: pixel ({r}, {c}) probabilities sum to {sums[r, c]!r}, "
            f"outside 1 +/- {sum_tolerance}"
        )
    data = data.view()
    data.flags.writeable = False
    return SoftmaxTensor(data=data)


def write_softmax_tensor(path: Path | str, data: np.ndarray | SoftmaxTensor) -> None:
    """Write an (H, W, K) float32 array as an NPY v1.0 file."""
    if isinstance(data, SoftmaxTensor):
        data = data.data
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise SchemaError(f"tensor must be 3-dimensional (H, W, K), got shape {arr.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


# ---------------------------------------------------------------------------
# PNG label masks


def peek_mask_size(path: Path | str) -> tuple[int, int]:
    """Return (height, width) from the PNG header."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            w, h = im.size
            return h, w
    except FileNotFoundError as exc:
        raise DataIOError(f"cannot open label file {path}: {exc}") from exc
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image: {exc}") from exc


def load_label_mask(path: Path | str, registry: ClassRegistry) -> LabelMask:
    """Load an 8-bit single-channel PNG label mask.

    On disk, values are class ids 0..K-1 or 255 (= unlabeled). 255 maps to
    the registry's ignore id in memory; anything else outside the registry
    is a :class:`SchemaError`.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise SchemaError(f"{path}: label mask must be PNG, got {im.format}")
            if im.mode != "L":
                raise SchemaError(f"{path}: label mask must be 8-bit single-channel (mode L), got mode {im.mode}")
            raw = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DataIOError(f"cannot open label file {path}: {exc}") from exc
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image: {exc}") from exc

    unknown = (raw >= registry.n_classes) & (raw != IGNORE_PNG_VALUE)
    if unknown.any():
        r, c = np.argwhere(unknown)[0]
        raise SchemaError(
            f"{path}: label value {int(raw[r, c])} at pixel ({r}, {c}) is not a class id "
            f"in 0..{registry.n_classes - 1} and not {IGNORE_PNG_VALUE}"
        )
    data = raw.astype(np.int32)
    data[raw == IGNORE_PNG_VALUE] = registry.ignore_id
    data.flags.writeable = False
    return LabelMask(data=data, ignore_id=registry.ignore_id)


def write_label_mask(path: Path | str, mask: LabelMask | np.ndarray, registry: ClassRegistry) -> None:
    """Write a label mask as 8-bit single-channel PNG, ignore id -> 255."""
    data = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    if data.ndim != 2:
        raise SchemaError(f"label mask must be 2-dimensional, got shape {data.shape}")
    if registry.n_classes > IGNORE_PNG_VALUE:
        raise ValidationError(
            f"cannot encode {registry.n_classes} classes in an 8-bit mask with {IGNORE_PNG_VALUE} reserved"
        )
    ignore = data == registry.ignore_id
    valid = (data >= 0) & (data < registry.n_classes)
    if not np.all(ignore | valid):
        bad = data[~(ignore | valid)]
        raise SchemaError(f"label value {int(bad.flat[0])} is neither a class id nor the ignore id")
    out = np.where(ignore, np.uint8(IGNORE_PNG_VALUE), data.astype(np.uint8))
    Image.fromarray(out, mode="L").save(Path(path), format="PNG")


def validate_pair(tensor: SoftmaxTensor, mask: LabelMask) -> None:
    """Reject tensor/mask pairs whose spatial dimensions differ."""
    if (tensor.height, tensor.width) != (mask.height, mask.width):
        raise SchemaError(
            f"tensor is {tensor.height}x{tensor.width} but label mask is {mask.height}x{mask.width}"
        )


# ---------------------------------------------------------------------------
# Manifests


def _require(mapping: dict, key: str, kind, where: str):
    if key not in mapping:
        raise SchemaError(f"{where}: missing required field '{key}'")
    value = mapping[key]
    if not isinstance(value, kind):
        raise SchemaError(f"{where}: field '{key}' must be {kind.__name__}, got {type(value).__name__}")
    return value


def load_manifest(path: Path | str, *, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a dataset manifest.

    Sample paths are resolved relative to the manifest's directory. When
    ``check_files`` is set (the default), every referenced tensor and label
    file must exist and their headers must agree with the registry and with
    each other; failures name the offending sample id.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot open manifest {path}: {exc}") from exc
    content_hash = sha256_hex(raw)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: manifest root must be a JSON object")
    schema = _require(doc, "schema", int, str(path))
    if schema != MANIFEST_SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported manifest schema {schema}, expected {MANIFEST_SCHEMA_VERSION}")
    name = _require(doc, "name", str, str(path))
    location_tag = _require(doc, "location_tag", str, str(path))

    reg_doc = _require(doc, "registry", dict, str(path))
    ignore_id = _require(reg_doc, "ignore_id", int, f"{path}: registry")
    classes = _require(reg_doc, "classes", list, f"{path}: registry")
    pairs = []
    for i, cls in enumerate(classes):
        if not isinstance(cls, dict):
            raise SchemaError(f"{path}: registry class #{i} must be an object")
        pairs.append((_require(cls, "id", int, f"{path}: class #{i}"), _require(cls, "name", str, f"{path}: class #{i}")))
    try:
        registry = ClassRegistry.from_pairs(pairs, ignore_id)
    except (SchemaError, ValidationError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc

    samples_doc = _require(doc, "samples", list, str(path))
    base = path.parent
    seen: set[str] = set()
    samples: list[SampleEntry] = []
    for i, s in enumerate(samples_doc):
        if not isinstance(s, dict):
            raise SchemaError(f"{path}: sample #{i} must be an object")
        sid = _require(s, "id", str, f"{path}: sample #{i}")
        if sid in seen:
            raise SchemaError(f"{path}: duplicate sample id '{sid}'")
        seen.add(sid)
        tensor_path = base / _require(s, "tensor", str, f"{path}: sample '{sid}'")
        label_path = base / _require(s, "label", str, f"{path}: sample '{sid}'")
        if check_files:
            try:
                h, w, k = peek_tensor_shape(tensor_path)
                if k != registry.n_classes:
                    raise SchemaError(
                        f"tensor has K={k} but registry defines {registry.n_classes} classes"
                    )
                mh, mw = peek_mask_size(label_path)
                if (mh, mw) != (h, w):
                    raise SchemaError(f"tensor is {h}x{w} but label mask is {mh}x{mw}")
            except (DataIOError, FormatError, SchemaError) as exc:
                raise type(exc)(f"{path}: sample '{sid}': {exc}") from exc
        else:
            h = w = 0
        samples.append(SampleEntry(sample_id=sid, tensor_path=tensor_path, label_path=label_path, width=w, height=h))

    return DatasetManifest(
        name=name,
        location_tag=location_tag,
        registry=registry,
        samples=tuple(samples),
        source_path=path,
        content_hash=content_hash,
    )


def manifest_to_dict(manifest: DatasetManifest, base: Path | None = None) -> dict:
    """Manifest as a JSON-ready dict with paths relative to ``base``."""
    def rel(p: Path) -> str:
        return str(p.relative_to(base)) if base is not None else str(p)

    return {
        "schema": MANIFEST_SCHEMA_VERSION,
        "name": manifest.name,
        "location_tag": manifest.location_tag,
        "registry": manifest.registry.to_dict(),
        "samples": [
            {"id": s.sample_id, "tensor": rel(s.tensor_path), "label": rel(s.label_path)}
            for s in manifest.samples
        ],
    }
