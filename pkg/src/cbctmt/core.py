"""Volume containers, file I/O, resampling and phantom synthesis.

Voxel convention shared by every module: the flat value array is x-fastest,
i.e. voxel (i, j, k) = (x, y, z) lives at index ``i + nx*j + nx*ny*k``.
``Volume3.as_array()`` exposes the same buffer as a (nz, ny, nx) C-ordered
view, so ``arr[z, y, x]`` addresses voxel (x, y, z). Voxel (0, 0, 0) is
centred at ``origin`` (mm); the grid is immutable after construction.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Phantom attenuation constants (fixed, arbitrary mid-range values chosen to
# give non-trivial contrast for both reconstruction and segmentation).
BODY_VALUE = 0.2
LIVER_VALUE = 0.45
TUMOR_VALUE = 0.7

LABEL_BACKGROUND = 0
LABEL_LIVER = 1
LABEL_TUMOR = 2


class DataError(Exception):
    """Malformed file, inconsistent metadata, or invalid user data."""


def _vec3(v, kind=float):
    t = tuple(kind(x) for x in v)
    if len(t) != 3:
        raise ValueError("expected 3 components")
    return t


@dataclass(frozen=True)
class Volume3:
    """A 3D scalar field with physical spacing and origin."""

    dims: tuple          # (nx, ny, nz)
    spacing: tuple       # mm per voxel, per axis
    origin: tuple        # mm position of voxel (0,0,0) centre
    values: np.ndarray   # flat float32, x-fastest

    def __post_init__(self):
        object.__setattr__(self, "dims", _vec3(self.dims, int))
        object.__setattr__(self, "spacing", _vec3(self.spacing))
        object.__setattr__(self, "origin", _vec3(self.origin))
        v = np.ascontiguousarray(self.values, dtype=np.float32).ravel()
        object.__setattr__(self, "values", v)
        nx, ny, nz = self.dims
        if nx < 1 or ny < 1 or nz < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if v.size != nx * ny * nz:
            raise ValueError(f"value count {v.size} != {nx}*{ny}*{nz}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume values must be finite")

    def as_array(self):
        """(nz, ny, nx) view of the flat buffer; arr[z, y, x]."""
        nx, ny, nz = self.dims
        return self.values.reshape(nz, ny, nx)

    def with_values(self, arr_zyx):
        return replace(self, values=np.asarray(arr_zyx, dtype=np.float32).ravel())


@dataclass(frozen=True)
class LabelVolume:
    """Integer-labelled mask on the same grid convention as Volume3."""

    dims: tuple
    spacing: tuple
    origin: tuple
    labels: np.ndarray   # flat uint8, values in {0, 1, 2}

    def __post_init__(self):
        object.__setattr__(self, "dims", _vec3(self.dims, int))
        object.__setattr__(self, "spacing", _vec3(self.spacing))
        object.__setattr__(self, "origin", _vec3(self.origin))
        lab = np.ascontiguousarray(self.labels, dtype=np.uint8).ravel()
        object.__setattr__(self, "labels", lab)
        nx, ny, nz = self.dims
        if lab.size != nx * ny * nz:
            raise ValueError(f"label count {lab.size} != {nx}*{ny}*{nz}")
        if lab.size and int(lab.max()) > LABEL_TUMOR:
            raise ValueError("labels must be in {0, 1, 2}")

    def as_array(self):
        nx, ny, nz = self.dims
        return self.labels.reshape(nz, ny, nx)


@dataclass(frozen=True)
class VolumeMeta:
    """Sidecar metadata; round-trips losslessly through the .json file."""

    dims: tuple
    spacing: tuple
    origin: tuple
    encoding: str              # "f32le" | "u8"
    provenance: str = ""

    def to_json(self):
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "origin_mm": list(self.origin),
            "encoding": self.encoding,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d):
        try:
            return cls(
                dims=_vec3(d["dims"], int),
                spacing=_vec3(d["spacing_mm"]),
                origin=_vec3(d["origin_mm"]),
                encoding=str(d["encoding"]),
                provenance=str(d.get("provenance", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad volume sidecar: {exc}") from exc


def _vol_paths(path):
    p = Path(path)
    if p.suffix == ".vol":
        return p, p.with_suffix(".json")
    return p.with_suffix(".vol"), p.with_suffix(".json")


def save_volume(volume, path, provenance=""):
    """Write ``<name>.vol`` raw payload plus ``<name>.json`` sidecar."""
    raw_path, meta_path = _vol_paths(path)
    if isinstance(volume, LabelVolume):
        payload = volume.labels.astype("<u1").tobytes()
        encoding = "u8"
    elif isinstance(volume, Volume3):
        payload = volume.values.astype("<f4").tobytes()
        encoding = "f32le"
    else:
        raise TypeError(f"cannot save {type(volume).__name__}")
    meta = VolumeMeta(volume.dims, volume.spacing, volume.origin, encoding, provenance)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload)
    meta_path.write_text(json.dumps(meta.to_json(), indent=1))


def load_volume(path):
    """Read a volume pair written by :func:`save_volume`.

    Returns a Volume3 for "f32le" payloads and a LabelVolume for "u8".
    """
    raw_path, meta_path = _vol_paths(path)
    if not raw_path.exists():
        raise DataError(f"missing payload file: {raw_path}")
    if not meta_path.exists():
        raise DataError(f"missing sidecar file: {meta_path}")
    meta = VolumeMeta.from_json(json.loads(meta_path.read_text()))
    payload = raw_path.read_bytes()
    n = meta.dims[0] * meta.dims[1] * meta.dims[2]
    if meta.encoding == "f32le":
        values = np.frombuffer(payload, dtype="<f4")
        if values.size != n:
            raise DataError(f"{raw_path}: payload has {values.size} elements, dims imply {n}")
        return Volume3(meta.dims, meta.spacing, meta.origin, values)
    if meta.encoding == "u8":
        labels = np.frombuffer(payload, dtype="<u1")
        if labels.size != n:
            raise DataError(f"{raw_path}: payload has {labels.size} elements, dims imply {n}")
        return LabelVolume(meta.dims, meta.spacing, meta.origin, labels)
    raise DataError(f"{meta_path}: unknown encoding tag {meta.encoding!r}")


def load_meta(path):
    _, meta_path = _vol_paths(path)
    if not meta_path.exists():
        raise DataError(f"missing sidecar file: {meta_path}")
    return VolumeMeta.from_json(json.loads(meta_path.read_text()))


def _pad_even(arr):
    # replicate the trailing edge on odd axes so 2x2x2 blocks tile exactly
    pads = [(0, d % 2) for d in arr.shape]
    if any(p[1] for p in pads):
        arr = np.pad(arr, pads, mode="edge")
    return arr


def _blocks(arr):
    nz, ny, nx = arr.shape
    b = arr.reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2)
    return b.transpose(0, 2, 4, 1, 3, 5).reshape(nz // 2, ny // 2, nx // 2, 8)


def downsample2(volume):
    """Halve each axis by averaging 2x2x2 blocks; spacing doubles.

    Odd axes are first padded by edge replication; block means are taken in
    float64 so the global mean of an even-dimensioned volume is preserved.
    """
    arr = _pad_even(volume.as_array().astype(np.float64))
    out = _blocks(arr).mean(axis=3)
    new_origin = tuple(o + 0.5 * s for o, s in zip(volume.origin, volume.spacing))
    return Volume3(
        dims=(out.shape[2], out.shape[1], out.shape[0]),
        spacing=tuple(2.0 * s for s in volume.spacing),
        origin=new_origin,
        values=out.astype(np.float32).ravel(),
    )


def downsample2_labels(mask):
    """Majority label per 2x2x2 block; ties go to the larger label so rare
    foreground (tumor > liver > background) survives downscaling."""
    arr = _pad_even(mask.as_array())
    blk = _blocks(arr)
    counts = np.stack([(blk == lab).sum(axis=3) for lab in (0, 1, 2)], axis=-1)
    winner = (2 - np.argmax(counts[..., ::-1], axis=-1)).astype(np.uint8)
    new_origin = tuple(o + 0.5 * s for o, s in zip(mask.origin, mask.spacing))
    return LabelVolume(
        dims=(winner.shape[2], winner.shape[1], winner.shape[0]),
        spacing=tuple(2.0 * s for s in mask.spacing),
        origin=new_origin,
        labels=winner.ravel(),
    )


def normalize_intensity(volume, window_lo, window_hi):
    """Linear map window_lo -> 0, window_hi -> 1, clamped to [0, 1]."""
    if not window_hi > window_lo:
        raise ValueError(f"window must satisfy hi > lo, got [{window_lo}, {window_hi}]")
    v = (volume.values.astype(np.float64) - window_lo) / (window_hi - window_lo)
    return replace(volume, values=np.clip(v, 0.0, 1.0).astype(np.float32))


def centered_origin(dims, spacing=(1.0, 1.0, 1.0)):
    """Origin that puts the grid centre at (0, 0, 0) mm."""
    return tuple(-(n - 1) / 2.0 * s for n, s in zip(dims, spacing))


def _ellipsoid_mask(grids, center, semi):
    gx, gy, gz = grids
    q = (
        ((gx - center[0]) / semi[0]) ** 2
        + ((gy - center[1]) / semi[1]) ** 2
        + ((gz - center[2]) / semi[2]) ** 2
    )
    return q <= 1.0


def make_phantom(dims, seed):
    """Deterministic nested-ellipsoid phantom standing in for a clinical scan.

    A "body" ellipsoid (value 0.2) contains one "liver" ellipsoid (0.45)
    holding 1-3 "tumor" ellipsoids (0.7). The mask marks liver (incl. tumors)
    as 1 and tumors as 2. Grid spacing is 1 mm, centred on the isocenter.
    """
    dims = _vec3(dims, int)
    if min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    nx, ny, nz = dims
    spacing = (1.0, 1.0, 1.0)
    origin = centered_origin(dims, spacing)
    rng = np.random.default_rng(seed)

    xs = origin[0] + np.arange(nx) * spacing[0]
    ys = origin[1] + np.arange(ny) * spacing[1]
    zs = origin[2] + np.arange(nz) * spacing[2]
    gx = xs[None, None, :]
    gy = ys[None, :, None]
    gz = zs[:, None, None]
    half = np.array([nx, ny, nz]) / 2.0  # mm half-extents

    body_c = rng.uniform(-0.04, 0.04, 3) * half
    body_s = rng.uniform(0.70, 0.82, 3) * half
    body = _ellipsoid_mask((gx, gy, gz), body_c, body_s)

    # liver strictly inside the body: shrink until the voxel mask is contained
    liver_c = body_c + rng.uniform(-0.22, 0.22, 3) * body_s
    liver_s = rng.uniform(0.38, 0.52, 3) * body_s
    for _ in range(32):
        liver = _ellipsoid_mask((gx, gy, gz), liver_c, liver_s)
        if not np.any(liver & ~body):
            break
        liver_s = liver_s * 0.92
        liver_c = body_c + (liver_c - body_c) * 0.9
    else:
        raise RuntimeError("could not nest liver inside body")

    n_tumors = int(rng.integers(1, 4))
    tumor = np.zeros_like(liver)
    for _ in range(n_tumors):
        for _try in range(64):
            tc = liver_c + rng.uniform(-0.55, 0.55, 3) * liver_s
            ts = np.maximum(rng.uniform(0.10, 0.28, 3) * liver_s, 1.3)
            cand = _ellipsoid_mask((gx, gy, gz), tc, ts)
            if np.any(cand) and not np.any(cand & ~liver):
                tumor |= cand
                break
        # a draw that never fits is skipped; at least one tumor is enforced below
    if not np.any(tumor):
        ts = np.maximum(0.18 * liver_s, 1.3)
        tumor = _ellipsoid_mask((gx, gy, gz), liver_c, ts) & liver

    values = np.zeros((nz, ny, nx), dtype=np.float32)
    values[body] = BODY_VALUE
    values[liver] = LIVER_VALUE
    values[tumor] = TUMOR_VALUE
    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    labels[liver] = LABEL_LIVER
    labels[tumor] = LABEL_TUMOR

    vol = Volume3(dims, spacing, origin, values.ravel())
    mask = LabelVolume(dims, spacing, origin, labels.ravel())
    return vol, mask
