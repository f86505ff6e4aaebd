"""Minimal NIfTI-1 (.nii, little-endian, uncompressed) reader/writer and atlas manifests.

Only axis-aligned single-file images are handled: dims from ``dim[1..3]``,
spacing from ``pixdim[1..3]`` and origin from the ``qoffset`` fields. Label
legends are stored next to the image as ``<name>.labels.json``.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .volume import LabelMap, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
}


class NiftiError(Exception):
    """Base class for NIfTI read failures."""


class BadMagicError(NiftiError):
    pass


class EndiannessError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


class UnsupportedGeometryError(NiftiError):
    pass


class ManifestError(Exception):
    pass


class LegendConflictError(ManifestError):
    pass


def legend_path(path):
    path = str(path)
    stem = path[:-4] if path.endswith(".nii") else path
    return stem + ".labels.json"


def _pack_header(dims, spacing, origin, datatype):
    bitpix = _DTYPES[datatype].itemsize * 8
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 1, 1)  # qform_code, sform_code: scanner
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, origin[0], origin[1], origin[2])
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], origin[2])
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _label_datatype(data):
    hi = int(data.max()) if data.size else 0
    if hi <= 255:
        return DT_UINT8
    if hi <= 32767:
        return DT_INT16
    raise ValueError(f"label id {hi} does not fit int16")


def write_nifti(image, path):
    """Write a Volume (float32) or LabelMap (uint8/int16 plus legend sidecar)."""
    if isinstance(image, LabelMap):
        datatype = _label_datatype(image.data)
    elif isinstance(image, Volume):
        datatype = DT_FLOAT32
    else:
        raise TypeError(f"cannot write {type(image).__name__} as NIfTI")
    header = _pack_header(image.dims, image.spacing, image.origin, datatype)
    payload = np.asarray(image.data).astype(_DTYPES[datatype]).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")
        fh.write(payload)
    if isinstance(image, LabelMap):
        with open(legend_path(path), "w") as fh:
            json.dump({str(k): v for k, v in image.legend.items()}, fh, indent=2, sort_keys=True)


def read_header(raw):
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise EndiannessError("big-endian NIfTI headers are not supported")
        raise BadMagicError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    magic = bytes(raw[344:348])
    if magic != b"n+1\x00":
        raise BadMagicError(f"unsupported magic {magic!r}; only single-file 'n+1' is read")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise DimensionError(f"dim[0] = {dim[0]}; only 3-D images are supported")
    if min(dim[1:4]) < 1:
        raise DimensionError(f"invalid dims {dim[1:4]}")
    datatype, _bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} is not uint8/int16/float32")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    qform_code, sform_code = struct.unpack_from("<hh", raw, 252)
    quat = struct.unpack_from("<3f", raw, 256)
    qoffset = struct.unpack_from("<3f", raw, 268)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)
    if qform_code > 0:
        if any(q != 0.0 for q in quat):
            raise UnsupportedGeometryError("rotated qform orientations are not supported")
        origin = tuple(float(v) for v in qoffset)
    elif sform_code > 0:
        if np.any(srow[:, :3] - np.diag(np.diag(srow[:, :3]))):
            raise UnsupportedGeometryError("oblique sform orientations are not supported")
        origin = tuple(float(v) for v in srow[:, 3])
    else:
        origin = (0.0, 0.0, 0.0)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if min(spacing) <= 0:
        raise DimensionError(f"non-positive voxel spacing {spacing}")
    return {
        "dims": tuple(int(d) for d in dim[1:4]),
        "datatype": datatype,
        "spacing": spacing,
        "origin": origin,
        "vox_offset": int(vox_offset),
        "scl_slope": float(slope),
        "scl_inter": float(inter),
    }


def read_nifti(path, as_labels=None):
    """Read a NIfTI-1 file.

    Returns a LabelMap when a legend sidecar exists (or ``as_labels`` is
    true), a Volume otherwise. Volume intensities are rescaled by
    ``scl_slope``/``scl_inter`` when the slope is non-zero.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr = read_header(raw)
    dtype = _DTYPES[hdr["datatype"]]
    count = int(np.prod(hdr["dims"]))
    start = max(hdr["vox_offset"], HEADER_SIZE)
    if len(raw) < start + count * dtype.itemsize:
        raise TruncatedFileError(
            f"{path}: payload needs {count * dtype.itemsize} bytes after offset {start}, "
            f"file has {max(len(raw) - start, 0)}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(hdr["dims"], order="F")

    sidecar = legend_path(path)
    if as_labels is None:
        as_labels = os.path.exists(sidecar)
    if as_labels:
        if os.path.exists(sidecar):
            with open(sidecar) as fh:
                legend = {int(k): v for k, v in json.load(fh).items()}
        else:
            legend = {int(v): ("background" if v == 0 else f"label_{v}") for v in np.unique(arr)}
        return LabelMap(arr.astype(np.int32), hdr["spacing"], hdr["origin"], legend)

    data = arr.astype(np.float64)
    if hdr["scl_slope"] != 0.0:
        data = data * hdr["scl_slope"] + hdr["scl_inter"]
    return Volume(data, hdr["spacing"], hdr["origin"])


def read_volume(path):
    return read_nifti(path, as_labels=False)


def read_labels(path):
    return read_nifti(path, as_labels=True)


@dataclass
class AtlasEntry:
    id: str
    image: str
    labels: str
    legend: dict


@dataclass
class TargetEntry:
    id: str
    image: str
    ground_truth: str = None
    substructures: dict = field(default_factory=dict)


@dataclass
class AtlasManifest:
    """Atlas set plus one or more targets; all paths are absolute after loading."""

    atlases: list
    targets: list
    path: str = None

    @property
    def legend(self):
        merged = {}
        for a in self.atlases:
            merged.update(a.legend)
        return dict(sorted(merged.items()))

    @property
    def target(self):
        return self.targets[0]


def _resolve(base, p, what):
    if not isinstance(p, str) or not p:
        raise ManifestError(f"{what}: expected a file path, got {p!r}")
    full = p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))
    if not os.path.isfile(full):
        raise ManifestError(f"{what}: file not found: {full}")
    return full


def _legend_from(entry, labels_path):
    if "legend" in entry:
        return {int(k): str(v) for k, v in entry["legend"].items()}
    sidecar = legend_path(labels_path)
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            return {int(k): str(v) for k, v in json.load(fh).items()}
    raise ManifestError(f"no legend given for {labels_path} and no sidecar {sidecar}")


def load_manifest(path):
    """Parse and probe an atlas manifest.

    Schema::

        {"atlases": [{"id": "a0", "image": "a0.nii", "labels": "a0_labels.nii",
                      "legend": {"0": "background", "1": "vertebra", "2": "rib"}}],
         "target":  {"id": "t0", "image": "t.nii", "ground_truth": "gt.nii",
                     "substructures": {"VB": "vb.nii", "TP": "tp.nii"}}}

    ``"targets": [...]`` may replace ``"target"`` for multi-case suites.
    ``legend`` may be omitted when a ``.labels.json`` sidecar exists.
    Relative paths are taken from the manifest's directory.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON ({exc})") from None
    base = os.path.dirname(os.path.abspath(path))

    raw_atlases = doc.get("atlases")
    if not raw_atlases:
        raise ManifestError(f"{path}: no atlases listed")
    atlases = []
    seen = {}
    for n, entry in enumerate(raw_atlases):
        aid = str(entry.get("id", f"atlas_{n:02d}"))
        image = _resolve(base, entry.get("image"), f"atlas {aid} image")
        labels = _resolve(base, entry.get("labels"), f"atlas {aid} labels")
        legend = _legend_from(entry, labels)
        for k, name in legend.items():
            if k in seen and seen[k][0] != name:
                raise LegendConflictError(
                    f"label {k} is {seen[k][0]!r} in atlas {seen[k][1]} but {name!r} in atlas {aid}")
            seen.setdefault(k, (name, aid))
        atlases.append(AtlasEntry(aid, image, labels, legend))

    raw_targets = doc.get("targets")
    if raw_targets is None:
        raw_targets = [doc["target"]] if "target" in doc else []
    if not raw_targets:
        raise ManifestError(f"{path}: no target listed")
    targets = []
    for n, entry in enumerate(raw_targets):
        tid = str(entry.get("id", f"case_{n:02d}"))
        image = _resolve(base, entry.get("image"), f"target {tid} image")
        gt = entry.get("ground_truth")
        gt = _resolve(base, gt, f"target {tid} ground truth") if gt else None
        subs = {str(name): _resolve(base, p, f"target {tid} substructure {name}")
                for name, p in (entry.get("substructures") or {}).items()}
        targets.append(TargetEntry(tid, image, gt, subs))
    return AtlasManifest(atlases, targets, os.path.abspath(path))


def write_manifest(manifest_doc, path):
    with open(path, "w") as fh:
        json.dump(manifest_doc, fh, indent=2, sort_keys=True)
