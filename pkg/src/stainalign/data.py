"""Domain types for aligned multi-stain patch-embedding bags.

A ``PatchBag`` holds one stain's per-patch embeddings for one slide together
with integer grid coordinates. An ``AlignedCase`` groups the bags of one
tissue sample; row i of every stain's bag refers to the same tissue location.
``CaseSet`` is the dataset-level manifest view with optional labels and
survival annotations.

Bag files use the ``.cseb`` format (little-endian):

    magic "CSEB" | version u16 (=1) | stain u8 | pad u8
    | slide_id_len u16 + UTF-8 bytes | N u32 | D u32
    | N x (row u32, col u32) | N*D float32 row-major
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

BAG_MAGIC = b"CSEB"
BAG_VERSION = 1

__all__ = [
    "StainId", "PatchBag", "AlignedCase", "CaseSet",
    "BagFormatError", "ManifestError", "AlignmentError",
    "write_bag", "read_bag", "read_bag_file", "write_bag_file",
    "read_bag_stream", "load_manifest",
]


class BagFormatError(ValueError):
    """Raised for malformed, truncated, or invalid bag bytes."""


class ManifestError(ValueError):
    """Raised when a manifest or its referenced files are invalid."""


class AlignmentError(ManifestError):
    """Raised when bags of one case disagree on size or coordinates."""


class StainId(enum.IntEnum):
    """The five stains. HE is the anchor; the rest are IHC context stains."""

    HE = 0
    HER2 = 1
    KI67 = 2
    ER = 3
    PGR = 4

    @property
    def is_ihc(self) -> bool:
        return self is not StainId.HE

    @classmethod
    def from_name(cls, name: str) -> "StainId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ManifestError(f"unknown stain name {name!r}") from None


IHC_STAINS = tuple(s for s in StainId if s.is_ihc)


@dataclass
class PatchBag:
    """One stain's embedding matrix for one slide, with grid coordinates.

    ``coords`` is an (N, 2) int array of (row, col) grid positions;
    ``embeddings`` is (N, D) float32. Construction coerces dtypes but defers
    full invariant checking to :meth:`validate` so tests can build invalid
    bags and assert that writers reject them.
    """

    slide_id: str
    stain: StainId
    coords: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        self.stain = StainId(self.stain)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (N, 2), got {self.coords.shape}")
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be (N, D), got {self.embeddings.shape}")

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        n, d = self.embeddings.shape
        if n < 1:
            raise ValueError(f"bag {self.slide_id}: empty bag")
        if d < 1:
            raise ValueError(f"bag {self.slide_id}: zero-width embeddings")
        if self.coords.shape[0] != n:
            raise ValueError(
                f"bag {self.slide_id}: {self.coords.shape[0]} coords for {n} patches"
            )
        if np.any(self.coords < 0) or np.any(self.coords > 0xFFFFFFFF):
            raise ValueError(f"bag {self.slide_id}: coordinate out of u32 range")
        if len({(int(r), int(c)) for r, c in self.coords}) != n:
            raise ValueError(f"bag {self.slide_id}: duplicate grid coordinates")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError(f"bag {self.slide_id}: non-finite embedding value")

    def freeze(self) -> "PatchBag":
        self.coords.setflags(write=False)
        self.embeddings.setflags(write=False)
        return self

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.stain == other.stain
            and self.coords.shape == other.coords.shape
            and bool(np.all(self.coords == other.coords))
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )


def write_bag(bag: PatchBag, sink: BinaryIO) -> int:
    """Serialize ``bag`` to ``sink``; returns the byte count.

    The bag is validated and encoded fully before any byte reaches the sink,
    so an invalid bag writes nothing.
    """
    bag.validate()
    sid = bag.slide_id.encode("utf-8")
    if len(sid) > 0xFFFF:
        raise ValueError(f"slide_id too long ({len(sid)} bytes)")
    n, d = bag.embeddings.shape
    parts = [
        BAG_MAGIC,
        struct.pack("<HBB", BAG_VERSION, int(bag.stain), 0),
        struct.pack("<H", len(sid)),
        sid,
        struct.pack("<II", n, d),
        bag.coords.astype("<u4").tobytes(),
        bag.embeddings.astype("<f4").tobytes(),
    ]
    blob = b"".join(parts)
    sink.write(blob)
    return len(blob)


def _read_exact(source: BinaryIO, count: int, what: str) -> bytes:
    buf = source.read(count)
    if len(buf) != count:
        raise BagFormatError(f"truncated bag file while reading {what}")
    return buf


def read_bag(source: BinaryIO) -> PatchBag:
    """Parse one bag from ``source`` and check its invariants."""
    magic = _read_exact(source, 4, "magic")
    if magic != BAG_MAGIC:
        raise BagFormatError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}")
    version, stain_code, _pad = struct.unpack("<HBB", _read_exact(source, 4, "header"))
    if version != BAG_VERSION:
        raise BagFormatError(f"unsupported bag version {version}")
    try:
        stain = StainId(stain_code)
    except ValueError:
        raise BagFormatError(f"unknown stain code {stain_code}") from None
    (sid_len,) = struct.unpack("<H", _read_exact(source, 2, "slide_id length"))
    slide_id = _read_exact(source, sid_len, "slide_id").decode("utf-8")
    n, d = struct.unpack("<II", _read_exact(source, 8, "dimensions"))
    coords = np.frombuffer(
        _read_exact(source, n * 8, "coordinates"), dtype="<u4"
    ).reshape(n, 2).astype(np.int64)
    emb = np.frombuffer(
        _read_exact(source, n * d * 4, "embedding payload"), dtype="<f4"
    ).reshape(n, d)
    bag = PatchBag(slide_id=slide_id, stain=stain, coords=coords, embeddings=emb)
    try:
        bag.validate()
    except ValueError as exc:
        raise BagFormatError(str(exc)) from None
    return bag


def read_bag_stream(source: BinaryIO) -> list[PatchBag]:
    """Read concatenated bags until EOF (used by embedding dumps)."""
    bags = []
    while True:
        probe = source.read(1)
        if not probe:
            return bags
        head = probe + _read_exact(source, 3, "magic")
        if head != BAG_MAGIC:
            raise BagFormatError(f"bad magic {head!r} at stream offset")
        # re-parse from a seamless reader: reuse read_bag body past the magic
        version, stain_code, _pad = struct.unpack("<HBB", _read_exact(source, 4, "header"))
        if version != BAG_VERSION:
            raise BagFormatError(f"unsupported bag version {version}")
        stain = StainId(stain_code)
        (sid_len,) = struct.unpack("<H", _read_exact(source, 2, "slide_id length"))
        slide_id = _read_exact(source, sid_len, "slide_id").decode("utf-8")
        n, d = struct.unpack("<II", _read_exact(source, 8, "dimensions"))
        coords = np.frombuffer(
            _read_exact(source, n * 8, "coordinates"), dtype="<u4"
        ).reshape(n, 2).astype(np.int64)
        emb = np.frombuffer(
            _read_exact(source, n * d * 4, "embedding payload"), dtype="<f4"
        ).reshape(n, d)
        bag = PatchBag(slide_id=slide_id, stain=stain, coords=coords, embeddings=emb)
        bag.validate()
        bags.append(bag)


def write_bag_file(bag: PatchBag, path: Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        return write_bag(bag, f)


def read_bag_file(path: Path) -> PatchBag:
    with open(path, "rb") as f:
        return read_bag(f)


@dataclass
class AlignedCase:
    """The coordinate-aligned stain bags of one tissue sample."""

    case_id: str
    bags: dict[StainId, PatchBag]

    def validate(self, require_ihc: bool = True) -> None:
        if StainId.HE not in self.bags:
            raise AlignmentError(f"case {self.case_id}: missing HE bag")
        he = self.bags[StainId.HE]
        for stain, bag in self.bags.items():
            bag.validate()
            if bag.n_patches != he.n_patches:
                raise AlignmentError(
                    f"case {self.case_id}: stain {stain.name} has {bag.n_patches} "
                    f"patches, HE has {he.n_patches}"
                )
            if bag.dim != he.dim:
                raise AlignmentError(
                    f"case {self.case_id}: stain {stain.name} dim {bag.dim} != HE dim {he.dim}"
                )
            if not np.array_equal(bag.coords, he.coords):
                raise AlignmentError(
                    f"case {self.case_id}: stain {stain.name} coordinates differ from HE"
                )
        if require_ihc and not self.ihc_stains:
            raise AlignmentError(f"case {self.case_id}: no IHC bag present")

    @property
    def he(self) -> PatchBag:
        return self.bags[StainId.HE]

    @property
    def ihc_stains(self) -> tuple[StainId, ...]:
        return tuple(s for s in IHC_STAINS if s in self.bags)

    @property
    def n_patches(self) -> int:
        return self.he.n_patches

    @property
    def dim(self) -> int:
        return self.he.dim

    def freeze(self) -> "AlignedCase":
        for bag in self.bags.values():
            bag.freeze()
        return self


@dataclass
class CaseSet:
    """A loaded dataset: cases plus optional per-case labels and survival."""

    cases: list[AlignedCase]
    labels: Optional[dict[str, int]] = None
    survival: Optional[dict[str, tuple[float, bool]]] = None
    require_ihc: bool = True

    def validate(self) -> None:
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate case_id in case set")
        dims = {c.dim for c in self.cases}
        if len(dims) > 1:
            raise ManifestError(f"cases disagree on embedding dim: {sorted(dims)}")
        for case in self.cases:
            case.validate(require_ihc=self.require_ihc)
        if self.labels is not None:
            missing = [i for i in ids if i not in self.labels]
            if missing:
                raise ManifestError(f"labels missing for cases {missing[:3]}")
            bad = [i for i, v in self.labels.items() if v not in (0, 1)]
            if bad:
                raise ManifestError(f"labels must be 0/1, offending cases {bad[:3]}")
        if self.survival is not None:
            missing = [i for i in ids if i not in self.survival]
            if missing:
                raise ManifestError(f"survival missing for cases {missing[:3]}")
            for cid, (t, _e) in self.survival.items():
                if not (t > 0.0 and np.isfinite(t)):
                    raise ManifestError(f"case {cid}: survival time must be positive")

    def freeze(self) -> "CaseSet":
        for case in self.cases:
            case.freeze()
        return self

    def __len__(self) -> int:
        return len(self.cases)


def load_manifest(path: Path) -> CaseSet:
    """Load a manifest JSON, read every referenced bag, check alignment.

    The manifest holds ``cases``: a list of ``{case_id, bags: {stain: path},
    label?, survival?: {time, event}}``. Relative bag paths resolve against
    the manifest's directory. A top-level ``require_ihc: false`` accepts
    HE-only cases (inference-mode loading).
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None

    base = path.parent
    require_ihc = bool(doc.get("require_ihc", True))
    cases: list[AlignedCase] = []
    labels: dict[str, int] = {}
    survival: dict[str, tuple[float, bool]] = {}
    for entry in doc.get("cases", []):
        case_id = entry["case_id"]
        bags: dict[StainId, PatchBag] = {}
        for stain_name, rel in entry["bags"].items():
            stain = StainId.from_name(stain_name)
            bag_path = base / rel
            if not bag_path.is_file():
                raise ManifestError(
                    f"case {case_id}: bag file {bag_path} does not exist"
                )
            bag = read_bag_file(bag_path)
            if bag.stain != stain:
                raise ManifestError(
                    f"case {case_id}: manifest says {stain.name} but "
                    f"{bag_path.name} encodes {bag.stain.name}"
                )
            bags[stain] = bag
        cases.append(AlignedCase(case_id=case_id, bags=bags))
        if "label" in entry and entry["label"] is not None:
            labels[case_id] = int(entry["label"])
        if "survival" in entry and entry["survival"] is not None:
            surv = entry["survival"]
            survival[case_id] = (float(surv["time"]), bool(surv["event"]))

    case_set = CaseSet(
        cases=cases,
        labels=labels or None,
        survival=survival or None,
        require_ihc=require_ihc,
    )
    case_set.validate()
    return case_set.freeze()
