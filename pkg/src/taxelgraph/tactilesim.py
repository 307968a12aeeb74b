"""Synthetic grasp scenes: taxel pad layouts, a proximity contact model and datasets.

Contact is geometric, not physical. A taxel's pressure falls off linearly
with its signed distance to the object surface and reaches zero at the
layout's activation radius. A grasp closes every pad along its normal until
it touches the object, then presses in by a random compliance depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .pointset import DEFAULT_THRESHOLD, PointSet

DATA_MAGIC = "TAXELGRAPH-DATA"
DATA_VERSION = "v1"


class DatasetFormatError(ValueError):
    """Malformed, truncated or version-mismatched dataset file."""


# -- layouts -----------------------------------------------------------------

@dataclass(frozen=True)
class Pad:
    """Rectangular taxel array; taxel (r, c) sits at origin + c*pitch*u + r*pitch*v.

    ``normal`` points from the pad towards the objects it can touch.
    ``count`` truncates the row-major taxel list (irregular palms).
    ``travel`` caps how far the pad closes during a grasp (None: layout default).
    """

    name: str
    origin: tuple
    u: tuple
    v: tuple
    normal: tuple
    rows: int
    cols: int
    pitch: float
    count: int | None = None
    travel: float | None = None

    @property
    def n_taxels(self) -> int:
        return self.rows * self.cols if self.count is None else self.count

    def taxel_positions(self, offset: float = 0.0) -> np.ndarray:
        r, c = np.divmod(np.arange(self.n_taxels), self.cols)
        o = np.asarray(self.origin) + offset * np.asarray(self.normal)
        return o + np.outer(c * self.pitch, self.u) + np.outer(r * self.pitch, self.v)


@dataclass(frozen=True)
class HandLayout:
    layout_id: str
    pads: tuple
    activation_radius: float
    max_close: float = 0.03
    object_radius: float = 0.015
    squeeze: tuple = (1e-4, 5e-4)
    pose_box: tuple = ((-0.01, 0.01), (-0.006, 0.006), (0.008, 0.02))

    @property
    def total_taxels(self) -> int:
        return sum(p.n_taxels for p in self.pads)

    def pad_slices(self) -> list[slice]:
        out, start = [], 0
        for p in self.pads:
            out.append(slice(start, start + p.n_taxels))
            start += p.n_taxels
        return out

    def rest_positions(self) -> np.ndarray:
        return np.concatenate([p.taxel_positions() for p in self.pads])

    def positions(self, offsets: Sequence[float] | None = None) -> np.ndarray:
        offsets = np.zeros(len(self.pads)) if offsets is None else offsets
        return np.concatenate([p.taxel_positions(o) for p, o in zip(self.pads, offsets)])

    def with_radius(self, activation_radius: float) -> "HandLayout":
        return replace(self, activation_radius=activation_radius)


def _pad(name, origin, u, v, rows, cols, pitch, count=None, travel=None):
    u, v = np.asarray(u, float), np.asarray(v, float)
    n = np.cross(u, v)
    return Pad(name, tuple(map(float, origin)), tuple(u), tuple(v), tuple(n), rows, cols, pitch, count, travel)


def desk_layout(activation_radius: float = 5.0e-4) -> HandLayout:
    """Two facing 6x6 jaw pads plus a 4x4 palm (88 taxels), 4 mm pitch."""
    p = 0.004
    jaw_y0, jaw_z0 = -2.5 * p, 0.004
    pads = (
        # left jaw at x=-0.03 facing +x: u=+y, v=+z gives normal +x
        _pad("jaw_left", (-0.03, jaw_y0, jaw_z0), (0, 1, 0), (0, 0, 1), 6, 6, p),
        # right jaw facing -x: u=+z, v=+y gives normal -x
        _pad("jaw_right", (0.03, jaw_y0, jaw_z0), (0, 0, 1), (0, 1, 0), 6, 6, p),
        _pad("palm", (-1.5 * p, -1.5 * p, -0.004), (1, 0, 0), (0, 1, 0), 4, 4, p, travel=0.0),
    )
    return HandLayout("desk88", pads, activation_radius)


def paper_layout(activation_radius: float = 2.2e-4) -> HandLayout:
    """653-taxel hand: four 12x6 fingertips, seven 6x6 phalange pads, a 113-taxel palm.

    Fingers stand on a ring around the z axis facing inwards; the thumb
    carries one phalange pad instead of two.
    """
    p = 0.004
    pads = []
    ring = 0.05
    for f, az in enumerate((0.0, 90.0, 180.0, 270.0)):
        a = math.radians(az)
        radial = np.array([math.cos(a), math.sin(a), 0.0])
        tangent = np.array([-math.sin(a), math.cos(a), 0.0])
        z_axis = np.array([0.0, 0.0, 1.0])
        # u=tangent, v=z gives normal = tangent x z = radial; we need inward, so flip u
        u = -tangent
        n_phal = 1 if f == 3 else 2
        z = 0.004
        for k in range(n_phal):
            origin = ring * radial + 2.5 * p * tangent + z * z_axis
            pads.append(_pad(f"finger{f}_phalange{k}", origin, u, z_axis, 6, 6, p))
            z += 6 * p + 0.002
        origin = ring * radial + 2.5 * p * tangent + z * z_axis
        pads.append(_pad(f"finger{f}_tip", origin, u, z_axis, 12, 6, p))
    pads.append(_pad("palm", (-5 * p, -5 * p, -0.004), (1, 0, 0), (0, 1, 0), 11, 11, p, count=113, travel=0.0))
    return HandLayout("allegro653", tuple(pads), activation_radius, max_close=0.05, object_radius=0.025,
                      pose_box=((-0.01, 0.01), (-0.01, 0.01), (0.02, 0.05)))


LAYOUTS = {"desk88": desk_layout, "allegro653": paper_layout}


def get_layout(layout_id: str) -> HandLayout:
    try:
        return LAYOUTS[layout_id]()
    except KeyError:
        raise ValueError(f"unknown layout {layout_id!r}; expected one of {sorted(LAYOUTS)}") from None


# -- objects -----------------------------------------------------------------

OBJECT_KINDS = ("sphere", "cube", "cylinder")
LABEL_DIMS = {"sphere": 3, "cube": 4, "cylinder": 4}


def _rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


@dataclass(frozen=True)
class ObjectSpec:
    """Rigid object pose.

    ``angle_deg`` is the cube's rotation about the grasp (x) axis in
    [0, 90], or the cylinder axis direction in the y-z plane measured from
    +y in [0, 180). Spheres ignore it.
    """

    shape: str
    position: tuple
    size: float
    height: float = 0.0
    angle_deg: float = 0.0

    def __post_init__(self):
        if self.shape not in OBJECT_KINDS:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.shape == "cube" and not 0.0 <= self.angle_deg <= 90.0:
            raise ValueError("cube rotation must lie in [0, 90] degrees")
        if not np.all(np.isfinite(self.position)):
            raise ValueError("object position must be finite")

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.position)
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=1) - self.size
        if self.shape == "cube":
            q = np.abs(p @ _rot_x(self.angle_deg)) - self.size / 2
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(q.max(axis=1), 0.0)
        a = math.radians(self.angle_deg)
        axis = np.array([0.0, math.cos(a), math.sin(a)])
        along = p @ axis
        radial = np.linalg.norm(p - np.outer(along, axis), axis=1)
        d = np.stack([radial - self.size, np.abs(along) - self.height / 2], axis=1)
        return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)

    def label(self) -> np.ndarray:
        pos = np.asarray(self.position, dtype=np.float64)
        if self.shape == "sphere":
            return pos.copy()
        return np.append(pos, self.angle_deg)


# -- contact model -----------------------------------------------------------

def pressures_from_distance(sd: np.ndarray, activation_radius: float) -> np.ndarray:
    return np.clip((activation_radius - sd) / activation_radius, 0.0, 1.0)


def contact_pressures(positions: np.ndarray, obj: ObjectSpec, activation_radius: float,
                      noise_fraction: float = 0.0, rng=None) -> np.ndarray:
    pr = pressures_from_distance(obj.signed_distance(positions), activation_radius)
    if noise_fraction > 0:
        rng = np.random.default_rng(rng)
        pr = np.clip(pr * rng.uniform(1 - noise_fraction, 1 + noise_fraction, size=pr.shape), 0.0, 1.0)
    return pr


@dataclass
class ContactFrame:
    points: PointSet
    raw: np.ndarray
    positions: np.ndarray


def contact_frame(layout: HandLayout, obj: ObjectSpec, noise_fraction: float = 0.0, rng=None,
                  offsets: Sequence[float] | None = None,
                  threshold: float = DEFAULT_THRESHOLD) -> ContactFrame:
    """Activated taxels and the full pressure vector for an object against the layout.

    ``offsets`` moves each pad along its normal (a closed grasp).
    """
    pos = layout.positions(offsets)
    raw = contact_pressures(pos, obj, layout.activation_radius, noise_fraction, rng)
    active = np.flatnonzero(raw >= threshold)
    return ContactFrame(PointSet(active, pos[active], raw[active]), raw, pos)


def close_grasp(layout: HandLayout, obj: ObjectSpec, squeeze) -> np.ndarray:
    """Per-pad closing travel: advance until touching, then press ``squeeze`` deeper."""
    squeeze = np.broadcast_to(np.asarray(squeeze, dtype=np.float64), (len(layout.pads),))
    offsets = np.zeros(len(layout.pads))
    for i, pad in enumerate(layout.pads):
        limit = layout.max_close if pad.travel is None else pad.travel
        d = 0.0
        for _ in range(60):
            gap = obj.signed_distance(pad.taxel_positions(d)).min()
            if gap < 1e-9 or d > limit:
                break
            d += gap
        offsets[i] = min(d + squeeze[i], limit)
    return offsets


def single_contact_counts(layout: HandLayout, n: int = 1000, seed=0, radius: float | None = None) -> np.ndarray:
    """Activated-taxel counts for random noiseless sphere presses on single pads.

    The sphere is centered over a uniform point of a random pad's interior
    (one pitch away from its border) and pressed in by a depth drawn from
    ``layout.squeeze``.
    """
    rng = np.random.default_rng(seed)
    radius = layout.object_radius if radius is None else radius
    counts = np.empty(n, dtype=np.int64)
    for t in range(n):
        pad = layout.pads[rng.integers(len(layout.pads))]
        pos = pad.taxel_positions()
        r, c = divmod(pad.n_taxels - 1, pad.cols)
        su = rng.uniform(1, max(1.0, pad.cols - 2)) * pad.pitch
        sv = rng.uniform(1, max(1.0, r - 1)) * pad.pitch
        depth = rng.uniform(*layout.squeeze)
        center = (np.asarray(pad.origin) + su * np.asarray(pad.u) + sv * np.asarray(pad.v)
                  + (radius - depth) * np.asarray(pad.normal))
        sd = np.linalg.norm(pos - center, axis=1) - radius
        counts[t] = int(np.sum(pressures_from_distance(sd, layout.activation_radius) >= DEFAULT_THRESHOLD))
    return counts


def calibrate_activation_radius(layout: HandLayout, n: int = 1000, seed=0, target=(4.0, 5.0),
                                lo: float = 1e-5, hi: float = 5e-3) -> float:
    """Bisect the activation radius until the median single-contact count lies in ``target``."""
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        med = float(np.median(single_contact_counts(layout.with_radius(mid), n, seed)))
        if target[0] <= med <= target[1]:
            return mid
        if med < target[0]:
            lo = mid
        else:
            hi = mid
    raise RuntimeError("activation radius calibration did not converge")


# -- datasets -----------------------------------------------------------------

@dataclass
class GraspSample:
    frame: PointSet
    label: np.ndarray
    raw: np.ndarray


@dataclass
class DatasetFile:
    layout_id: str
    object_kind: str
    d_out: int
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def frames(self) -> list[PointSet]:
        return [s.frame for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64).reshape(len(self.samples), self.d_out)

    @property
    def raw(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0))
        return np.array([s.raw for s in self.samples], dtype=np.float64)

    def subset(self, idx) -> "DatasetFile":
        return DatasetFile(self.layout_id, self.object_kind, self.d_out, [self.samples[i] for i in idx])


def sample_object(layout: HandLayout, kind: str, rng: np.random.Generator) -> ObjectSpec:
    box = layout.pose_box
    pos = tuple(float(rng.uniform(*b)) for b in box)
    if kind == "sphere":
        return ObjectSpec("sphere", pos, layout.object_radius)
    if kind == "cube":
        return ObjectSpec("cube", pos, 1.6 * layout.object_radius, angle_deg=float(rng.uniform(0.0, 90.0)))
    if kind == "cylinder":
        return ObjectSpec("cylinder", pos, 0.8 * layout.object_radius, height=3 * layout.object_radius,
                          angle_deg=float(rng.uniform(0.0, 180.0)))
    raise ValueError(f"unknown object kind {kind!r}")


def grasp_sample(layout: HandLayout, kind: str, seed, noise_fraction: float = 0.1) -> GraspSample:
    rng = np.random.default_rng(seed)
    obj = sample_object(layout, kind, rng)
    squeeze = rng.uniform(*layout.squeeze, size=len(layout.pads))
    offsets = close_grasp(layout, obj, squeeze)
    cf = contact_frame(layout, obj, noise_fraction, rng, offsets)
    return GraspSample(cf.points, obj.label(), cf.raw)


def generate_grasp_dataset(layout: HandLayout, object_kind: str, n: int, seed=0,
                           noise_fraction: float = 0.1) -> DatasetFile:
    """``n`` power grasps at uniformly random in-range poses.

    Sample ``i`` draws from its own stream seeded by ``(seed, i)``, so any
    subset can be regenerated independently.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if object_kind not in OBJECT_KINDS:
        raise ValueError(f"unknown object kind {object_kind!r}")
    samples = [grasp_sample(layout, object_kind, (int(seed), i), noise_fraction) for i in range(n)]
    return DatasetFile(layout.layout_id, object_kind, LABEL_DIMS[object_kind], samples)


def pose_ranges(layout: HandLayout, kind: str) -> list[tuple[float, float]]:
    ranges = [tuple(b) for b in layout.pose_box]
    if kind == "cube":
        ranges.append((0.0, 90.0))
    elif kind == "cylinder":
        ranges.append((0.0, 180.0))
    return ranges


# -- dataset file I/O ----------------------------------------------------------

def _f(v) -> str:
    return repr(float(v))


def write_dataset(ds: DatasetFile, path) -> None:
    lines = [f"{DATA_MAGIC} {DATA_VERSION} {ds.layout_id} {ds.object_kind} {ds.d_out} {len(ds.samples)}"]
    for s in ds.samples:
        lines.append(f"S {len(s.frame)}")
        for tid, pos, pr in zip(s.frame.ids, s.frame.positions, s.frame.pressures):
            lines.append(f"T {int(tid)} {_f(pos[0])} {_f(pos[1])} {_f(pos[2])} {_f(pr)}")
        lines.append("L " + " ".join(_f(v) for v in s.label))
        lines.append("R " + " ".join(_f(v) for v in s.raw))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> DatasetFile:
    """Parse a dataset file; any defect raises :class:`DatasetFormatError`."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DatasetFormatError("empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != DATA_MAGIC:
        raise DatasetFormatError("missing TAXELGRAPH-DATA header")
    if head[1] != DATA_VERSION:
        raise DatasetFormatError(f"unsupported version {head[1]}")
    layout_id, kind = head[2], head[3]
    try:
        d_out, n = int(head[4]), int(head[5])
    except ValueError:
        raise DatasetFormatError("bad header counts") from None
    samples, i = [], 1

    def take(tag):
        nonlocal i
        if i >= len(lines):
            raise DatasetFormatError(f"truncated: expected '{tag}' record at line {i + 1}")
        parts = lines[i].split()
        if not parts or parts[0] != tag:
            raise DatasetFormatError(f"line {i + 1}: expected '{tag}' record")
        i += 1
        try:
            return [float(x) for x in parts[1:]]
        except ValueError:
            raise DatasetFormatError(f"line {i}: non-numeric field") from None

    n_taxels = None
    for _ in range(n):
        (n_active,) = take("S")
        rows = [take("T") for _ in range(int(n_active))]
        if any(len(r) != 5 for r in rows):
            raise DatasetFormatError("taxel record must have 5 fields")
        label = np.array(take("L"))
        raw = np.array(take("R"))
        if len(label) != d_out:
            raise DatasetFormatError(f"label has {len(label)} values, header says {d_out}")
        if n_taxels is None:
            n_taxels = len(raw)
        elif len(raw) != n_taxels:
            raise DatasetFormatError("raw vectors differ in length")
        arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
        frame = PointSet(arr[:, 0].astype(np.int64), arr[:, 1:4], arr[:, 4])
        samples.append(GraspSample(frame, label, raw))
    if any(line.strip() for line in lines[i:]):
        raise DatasetFormatError("trailing data after the declared samples")
    return DatasetFile(layout_id, kind, d_out, samples)
