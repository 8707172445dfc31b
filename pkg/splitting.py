import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from catalog import Catalog, group_by_identity
from config import RNG_NAME, logger
from errors import (
    EmptyInputError,
    FormatError,
    InfeasibleSplitError,
    SplitPreconditionError,
    UnknownImageError,
)
from storage import atomic_write


class SplitKind(str, Enum):
    CLOSED = "closed"
    OPEN = "open"
    DISJOINT = "disjoint"
    TIME_AWARE = "time-aware"


@dataclass(frozen=True)
class SplitMode:
    kind: SplitKind
    new_identity_fraction: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SplitKind(self.kind))
        if self.kind is SplitKind.OPEN:
            f = self.new_identity_fraction
            if f is None or not 0.0 < f < 1.0:
                raise SplitPreconditionError(f"Open-set fraction must be in (0, 1), got {f}")
        elif self.new_identity_fraction is not None:
            raise SplitPreconditionError("new_identity_fraction only applies to open-set splits")

    @classmethod
    def closed(cls) -> "SplitMode":
        return cls(SplitKind.CLOSED)

    @classmethod
    def open(cls, new_identity_fraction: float) -> "SplitMode":
        return cls(SplitKind.OPEN, new_identity_fraction)

    @classmethod
    def disjoint(cls) -> "SplitMode":
        return cls(SplitKind.DISJOINT)

    @classmethod
    def time_aware(cls) -> "SplitMode":
        return cls(SplitKind.TIME_AWARE)


@dataclass(frozen=True)
class SplitManifest:
    mode: SplitMode
    seed: int
    train_ratio: float
    train_ids: FrozenSet[str]
    test_ids: FrozenSet[str]
    generator: str = RNG_NAME

    def as_dict(self) -> Dict:
        return {
            "mode": self.mode.kind.value,
            "new_identity_fraction": self.mode.new_identity_fraction,
            "seed": self.seed,
            "train_ratio": self.train_ratio,
            "generator": self.generator,
            "train_ids": sorted(self.train_ids),
            "test_ids": sorted(self.test_ids),
        }


@dataclass(frozen=True)
class Violation:
    rule: str
    subjects: Tuple[str, ...]
    detail: str = ""

    def __str__(self) -> str:
        text = f"{self.rule}: {', '.join(self.subjects)}"
        return f"{text} ({self.detail})" if self.detail else text


def _ceil_target(ratio: float, n: int) -> int:
    # 0.6 * 5 evaluates to 3.0000000000000004
    return math.ceil(ratio * n - 1e-9)


def _shuffled(items: Sequence, rng: np.random.Generator) -> list:
    canonical = sorted(items)
    return [canonical[i] for i in rng.permutation(len(canonical))]


def _closed_assign(groups: Dict[str, List[str]], ratio: float, rng: np.random.Generator):
    """Per identity, ceil(ratio*k) images to train; single-image identities stay in train."""
    train, test = [], []
    for identity in sorted(groups):
        ids = _shuffled(groups[identity], rng)
        n_train = _ceil_target(ratio, len(ids))
        train.extend(ids[:n_train])
        test.extend(ids[n_train:])
    return train, test


def _greedy_groups(order: List[Tuple[str, List[str]]], target: int, what: str):
    """Add whole groups to train while that moves the train count towards the target."""
    if len(order) < 2:
        raise InfeasibleSplitError(f"Need at least two {what}s to split, found {len(order)}")
    train_groups, test_groups = [], []
    count = 0
    for key, ids in order:
        if abs(count + len(ids) - target) < abs(count - target):
            train_groups.append((key, ids))
            count += len(ids)
        else:
            test_groups.append((key, ids))
    if not train_groups:
        train_groups.append(test_groups.pop(0))
    if not test_groups:
        test_groups.append(train_groups.pop())
    train = [i for _, ids in train_groups for i in ids]
    test = [i for _, ids in test_groups for i in ids]
    return train, test


def _open_assign(groups: Dict[str, List[str]], ratio: float, fraction: float,
                 rng: np.random.Generator):
    identities = _shuffled(list(groups), rng)
    contributes = [len(groups[i]) - _ceil_target(ratio, len(groups[i])) > 0 for i in identities]

    # n_new = ceil(fraction * |test identities|); |test identities| itself depends on n_new
    n_new = None
    for n in range(1, len(identities)):
        remaining = sum(contributes[n:])
        if n == math.ceil(fraction * (n + remaining) - 1e-9):
            n_new = n
            break
    if n_new is None:
        raise InfeasibleSplitError(
            f"Cannot make {fraction:.3f} of test identities new with {len(identities)} identities")

    new_identities = identities[:n_new]
    closed_groups = {i: groups[i] for i in identities[n_new:]}
    train, test = _closed_assign(closed_groups, ratio, rng)
    for identity in sorted(new_identities):
        test.extend(groups[identity])
    logger.info(f"[Split] Open-set: {n_new} new identities held out of training")
    return train, test


def split(catalog: Catalog, mode: SplitMode, train_ratio: float = 0.8, seed: int = 0) -> SplitManifest:
    """Split a catalog into reference (train) and query (test) image ids.

    Equal inputs always give equal manifests; catalog order does not matter.
    """
    if len(catalog) == 0:
        raise EmptyInputError(f"Catalog '{catalog.name}' is empty")
    if not 0.0 < train_ratio < 1.0:
        raise SplitPreconditionError(f"train_ratio must be in (0, 1), got {train_ratio}")
    if seed < 0 or seed >= 2 ** 64:
        raise SplitPreconditionError(f"seed must be an unsigned 64-bit integer, got {seed}")

    rng = np.random.Generator(np.random.PCG64(seed))
    groups = {k: [r.image_id for r in v] for k, v in group_by_identity(catalog.records).items()}
    target = _ceil_target(train_ratio, len(catalog))

    if mode.kind is SplitKind.CLOSED:
        train, test = _closed_assign(groups, train_ratio, rng)
    elif mode.kind is SplitKind.OPEN:
        train, test = _open_assign(groups, train_ratio, mode.new_identity_fraction, rng)
    elif mode.kind is SplitKind.DISJOINT:
        order = [(i, sorted(groups[i])) for i in _shuffled(list(groups), rng)]
        train, test = _greedy_groups(order, target, "identity")
    else:
        missing = [r.image_id for r in catalog if r.timestamp is None]
        if missing:
            raise SplitPreconditionError(
                f"Time-aware split needs timestamps; {len(missing)} record(s) lack one, e.g. '{missing[0]}'")
        periods: Dict[str, List[str]] = {}
        for r in catalog:
            periods.setdefault(r.timestamp.isoformat(), []).append(r.image_id)
        shuffled = _shuffled(list(periods), rng)
        order = sorted(((d, sorted(periods[d])) for d in shuffled), key=lambda p: -len(p[1]))
        train, test = _greedy_groups(order, target, "period")

    manifest = SplitManifest(mode, seed, train_ratio, frozenset(train), frozenset(test))
    logger.info(f"[Split] {mode.kind.value} split of '{catalog.name}' (ratio={train_ratio}, seed={seed}): "
                f"{len(train)} train / {len(test)} test")
    return manifest


def verify(manifest: SplitManifest, catalog: Catalog) -> List[Violation]:
    """Audit a manifest against the catalog; an empty list means every rule holds."""
    catalog_ids = set(catalog.image_ids)
    unknown = (manifest.train_ids | manifest.test_ids) - catalog_ids
    if unknown:
        raise UnknownImageError(unknown)

    violations: List[Violation] = []
    overlap = manifest.train_ids & manifest.test_ids
    if overlap:
        violations.append(Violation("overlap", tuple(sorted(overlap))))
    uncovered = catalog_ids - manifest.train_ids - manifest.test_ids
    if uncovered:
        violations.append(Violation("coverage", tuple(sorted(uncovered))))

    train_identities = {catalog.get(i).identity for i in manifest.train_ids}
    test_identities = {catalog.get(i).identity for i in manifest.test_ids}
    kind = manifest.mode.kind

    if kind is SplitKind.CLOSED:
        unseen = test_identities - train_identities
        if unseen:
            violations.append(Violation("closed-set", tuple(sorted(unseen)),
                                        "test identities missing from train"))
    elif kind is SplitKind.DISJOINT:
        shared = test_identities & train_identities
        if shared:
            violations.append(Violation("disjoint-set", tuple(sorted(shared)),
                                        "identities on both sides"))
    elif kind is SplitKind.OPEN:
        new = test_identities - train_identities
        expected = math.ceil(manifest.mode.new_identity_fraction * len(test_identities) - 1e-9)
        if len(new) != expected:
            violations.append(Violation("open-set", tuple(sorted(new)),
                                        f"expected {expected} new identities, found {len(new)}"))
    else:
        undated = sorted(r.image_id for r in catalog if r.timestamp is None)
        if undated:
            violations.append(Violation("time-aware", tuple(undated), "records without timestamp"))
        sides: Dict[str, set] = {}
        for r in catalog:
            if r.timestamp is None:
                continue
            side = "train" if r.image_id in manifest.train_ids else "test"
            sides.setdefault(r.timestamp.isoformat(), set()).add(side)
        straddling = sorted(day for day, s in sides.items() if len(s) > 1)
        if straddling:
            violations.append(Violation("time-aware", tuple(straddling), "periods on both sides"))

    for v in violations:
        logger.warning(f"[Split] Violation {v}")
    return violations


def dump_manifest(manifest: SplitManifest) -> str:
    return yaml.safe_dump(manifest.as_dict(), sort_keys=False, default_flow_style=False,
                          allow_unicode=True)


def save_manifest(manifest: SplitManifest, path) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(dump_manifest(manifest))
    logger.info(f"[Split] Manifest written to '{path}'")


def parse_manifest(text: str) -> SplitManifest:
    try:
        doc = yaml.safe_load(text)
        mode = SplitMode(SplitKind(doc["mode"]), doc.get("new_identity_fraction"))
        return SplitManifest(
            mode=mode,
            seed=int(doc["seed"]),
            train_ratio=float(doc["train_ratio"]),
            train_ids=frozenset(str(i) for i in doc.get("train_ids") or []),
            test_ids=frozenset(str(i) for i in doc.get("test_ids") or []),
            generator=str(doc.get("generator", RNG_NAME)),
        )
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Invalid split manifest: {e}") from None


def load_manifest(path) -> SplitManifest:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())
