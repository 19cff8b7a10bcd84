"""Domain types shared by the planners, the simulator and the transport.

A refactored dataset is a list of levels. Receiving levels ``1..i`` lets the
receiver reconstruct the original data with relative L-infinity error at most
``error_bound`` of level ``i``; receiving nothing leaves an error of 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_VERSION = 1

MIB = 1 << 20
GIB = 1 << 30

# Level sizes of the four-level cosmology hierarchy used throughout the
# experiments. Binary units: these reproduce the reported transfer times.
NYX_LEVEL_SIZES = (
    round(668 * MIB),
    round(2.67 * GIB),
    round(5.42 * GIB),
    round(17.99 * GIB),
)
NYX_ERROR_BOUNDS = (0.004, 0.0005, 0.00006, 1e-7)
NYX_MINI_SCALE = 1000


class ModelError(ValueError):
    """Invalid hierarchy, parameters or request."""


class UnsatisfiableBoundError(ModelError):
    """Requested error bound is tighter than the finest level provides."""


class ManifestError(ModelError):
    pass


@dataclass(frozen=True)
class LevelSpec:
    index: int
    size_bytes: int
    error_bound: float
    checksum: str | None = None

    def __post_init__(self):
        if self.index < 1:
            raise ModelError(f"level index must be >= 1, got {self.index}")
        if self.size_bytes < 1:
            raise ModelError(f"level {self.index}: size_bytes must be >= 1")
        if not 0.0 < self.error_bound < 1.0:
            raise ModelError(f"level {self.index}: error_bound must be in (0, 1)")


@dataclass(frozen=True)
class PayloadSource:
    """Where level bytes come from: a seeded PRNG or files on disk."""

    kind: str = "synthetic"
    seed: int = 0
    paths: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ModelError(f"unknown payload source {self.kind!r}")


@dataclass(frozen=True)
class HierarchySpec:
    levels: tuple[LevelSpec, ...]
    payload_source: PayloadSource = field(default_factory=PayloadSource)

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ModelError("hierarchy needs at least one level")
        for pos, lv in enumerate(levels, start=1):
            if lv.index != pos:
                raise ModelError(f"level indices must be 1..L in order, got {lv.index} at {pos}")
        bounds = [lv.error_bound for lv in levels]
        if any(b >= a for a, b in zip(bounds, bounds[1:])):
            raise ModelError(f"error bounds must be strictly decreasing, got {bounds}")
        if self.payload_source.kind == "file" and len(self.payload_source.paths) != len(levels):
            raise ModelError("file payload source needs one path per level")

    @classmethod
    def from_lists(
        cls,
        sizes: Sequence[int],
        error_bounds: Sequence[float],
        payload_source: PayloadSource | None = None,
        checksums: Sequence[str | None] | None = None,
    ) -> "HierarchySpec":
        if len(sizes) != len(error_bounds):
            raise ModelError("sizes and error_bounds differ in length")
        checksums = checksums or [None] * len(sizes)
        levels = tuple(
            LevelSpec(i + 1, int(s), float(e), c)
            for i, (s, e, c) in enumerate(zip(sizes, error_bounds, checksums))
        )
        return cls(levels, payload_source or PayloadSource())

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> list[int]:
        return [lv.size_bytes for lv in self.levels]

    @property
    def error_bounds(self) -> list[float]:
        return [lv.error_bound for lv in self.levels]

    def bound_after(self, levels_received: int) -> float:
        """Error bound achieved with levels ``1..levels_received`` (1.0 for none)."""
        if levels_received <= 0:
            return 1.0
        return self.levels[levels_received - 1].error_bound

    def scaled(self, divisor: int) -> "HierarchySpec":
        """Same error bounds, every size divided (and rounded) by ``divisor``."""
        sizes = [max(1, round(s / divisor)) for s in self.sizes]
        return HierarchySpec.from_lists(sizes, self.error_bounds, self.payload_source)

    def with_checksums(self, checksums: Sequence[str]) -> "HierarchySpec":
        levels = tuple(replace(lv, checksum=c) for lv, c in zip(self.levels, checksums))
        return replace(self, levels=levels)


@dataclass(frozen=True)
class NetworkParams:
    """Link and coding parameters consumed by the reliability formulas.

    ``latency_s`` is the one-way latency of a fragment, ``link_rate`` and
    ``ec_rate`` are in fragments per second, ``loss_rate`` in lost packets per
    second, ``fragment_size`` in bytes and ``group_size`` in fragments.
    """

    latency_s: float = 0.01
    link_rate: float = 19144.0
    ec_rate: float = 319531.0
    loss_rate: float = 19.0
    fragment_size: int = 4096
    group_size: int = 32

    def __post_init__(self):
        for name in ("latency_s", "link_rate", "ec_rate", "fragment_size", "group_size"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if self.loss_rate < 0:
            raise ModelError("loss_rate must be non-negative")
        if self.group_size < 2:
            raise ModelError("group_size must be >= 2")
        if self.group_size > 255:
            raise ModelError("group_size above 255 is not supported by GF(256) coding")

    @property
    def rate(self) -> float:
        return effective_rate(self.ec_rate, self.link_rate)

    def with_loss(self, loss_rate: float) -> "NetworkParams":
        return replace(self, loss_rate=loss_rate)


@dataclass(frozen=True)
class CodingPlan:
    levels_sent: int
    parity_per_level: tuple[int, ...]
    ftg_counts: tuple[int, ...]
    effective_rate: float

    def __post_init__(self):
        object.__setattr__(self, "parity_per_level", tuple(int(m) for m in self.parity_per_level))
        object.__setattr__(self, "ftg_counts", tuple(int(x) for x in self.ftg_counts))
        if self.levels_sent < 1:
            raise ModelError("levels_sent must be >= 1")
        if len(self.parity_per_level) != self.levels_sent or len(self.ftg_counts) != self.levels_sent:
            raise ModelError("plan vectors must have one entry per level sent")

    @classmethod
    def build(
        cls, hierarchy: HierarchySpec, parity: Sequence[int], params: NetworkParams
    ) -> "CodingPlan":
        n, s = params.group_size, params.fragment_size
        parity = tuple(int(m) for m in parity)
        if not 1 <= len(parity) <= hierarchy.num_levels:
            raise ModelError("parity vector length must be in 1..L")
        for m in parity:
            check_parity(n, m)
        counts = tuple(ftg_count(S, n, m, s) for S, m in zip(hierarchy.sizes, parity))
        return cls(len(parity), parity, counts, params.rate)

    def as_dict(self) -> dict:
        return {
            "levels_sent": self.levels_sent,
            "parity_per_level": list(self.parity_per_level),
            "ftg_counts": list(self.ftg_counts),
            "effective_rate": self.effective_rate,
        }


@dataclass(frozen=True)
class DeadlineRequest:
    deadline_s: float

    def __post_init__(self):
        if not self.deadline_s > 0:
            raise ModelError("deadline must be positive")


@dataclass(frozen=True)
class ErrorBoundRequest:
    target_error: float

    def __post_init__(self):
        if not 0.0 < self.target_error <= 1.0:
            raise ModelError("target error must be in (0, 1]")


def check_parity(n: int, m: int) -> None:
    if not 0 <= m <= n // 2:
        raise ModelError(f"parity count {m} outside 0..{n // 2} for group size {n}")


def ftg_count(size_bytes: int, n: int, m: int, s: int) -> int:
    """Fault-tolerant groups needed for ``size_bytes`` with ``n - m`` data fragments each."""
    k = n - m
    return -(-int(size_bytes) // (k * s))


def relative_linf_error(original, reconstructed) -> float:
    d = np.asarray(original, dtype=float).ravel()
    r = np.asarray(reconstructed, dtype=float).ravel()
    if d.shape != r.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {r.shape}")
    if d.size == 0:
        raise ValueError("arrays must be non-empty")
    denom = np.max(np.abs(d))
    if denom == 0:
        raise ZeroDivisionError("relative error undefined for an all-zero original")
    return float(np.max(np.abs(d - r)) / denom)


def required_levels(hierarchy: HierarchySpec, request: ErrorBoundRequest) -> int:
    """Smallest ``l`` whose cumulative error bound meets the request."""
    for lv in hierarchy.levels:
        if lv.error_bound <= request.target_error:
            return lv.index
    raise UnsatisfiableBoundError(
        f"target {request.target_error:g} is below the finest bound "
        f"{hierarchy.levels[-1].error_bound:g}"
    )


def effective_rate(ec_rate: float, link_rate: float) -> float:
    if ec_rate <= 0 or link_rate <= 0:
        raise ModelError("rates must be positive")
    return min(ec_rate, link_rate)


# -- payloads -----------------------------------------------------------------


def synthetic_level_bytes(seed: int, level_index: int, size: int) -> bytes:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(level_index)]))
    return rng.bytes(int(size))


def level_bytes(hierarchy: HierarchySpec, level_index: int, base_dir: str | Path | None = None) -> bytes:
    lv = hierarchy.levels[level_index - 1]
    src = hierarchy.payload_source
    if src.kind == "synthetic":
        return synthetic_level_bytes(src.seed, lv.index, lv.size_bytes)
    path = Path(src.paths[level_index - 1])
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    data = path.read_bytes()
    if len(data) != lv.size_bytes:
        raise ManifestError(f"{path}: expected {lv.size_bytes} bytes, found {len(data)}")
    return data


def checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def nyx_hierarchy(seed: int = 0) -> HierarchySpec:
    return HierarchySpec.from_lists(NYX_LEVEL_SIZES, NYX_ERROR_BOUNDS, PayloadSource("synthetic", seed))


def nyx_mini_hierarchy(seed: int = 0) -> HierarchySpec:
    return nyx_hierarchy(seed).scaled(NYX_MINI_SCALE)


PRESETS = {
    "nyx": nyx_hierarchy,
    "nyx-mini": nyx_mini_hierarchy,
}


# -- manifest -----------------------------------------------------------------


def manifest_dict(hierarchy: HierarchySpec) -> dict:
    src = hierarchy.payload_source
    payload = {"kind": src.kind}
    if src.kind == "synthetic":
        payload["seed"] = src.seed
    else:
        payload["paths"] = list(src.paths)
    return {
        "manifest_version": MANIFEST_VERSION,
        "levels": [
            {
                "index": lv.index,
                "size_bytes": lv.size_bytes,
                "error_bound": lv.error_bound,
                "checksum": lv.checksum,
            }
            for lv in hierarchy.levels
        ],
        "payload": payload,
    }


def manifest_from_dict(doc: dict) -> HierarchySpec:
    try:
        version = doc["manifest_version"]
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest_version {version}")
        levels = tuple(
            LevelSpec(int(e["index"]), int(e["size_bytes"]), float(e["error_bound"]), e.get("checksum"))
            for e in doc["levels"]
        )
        payload = doc.get("payload", {"kind": "synthetic", "seed": 0})
        src = PayloadSource(
            payload.get("kind", "synthetic"),
            int(payload.get("seed", 0)),
            tuple(payload.get("paths", ())),
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: {exc!r}") from exc
    return HierarchySpec(levels, src)


def manifest_hash(hierarchy: HierarchySpec) -> str:
    blob = json.dumps(manifest_dict(hierarchy), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(hierarchy: HierarchySpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest_dict(hierarchy), indent=2) + "\n")


def read_manifest(path: str | Path) -> HierarchySpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return manifest_from_dict(doc)


def attach_checksums(hierarchy: HierarchySpec, base_dir: str | Path | None = None) -> HierarchySpec:
    sums = [checksum(level_bytes(hierarchy, lv.index, base_dir)) for lv in hierarchy.levels]
    return hierarchy.with_checksums(sums)

