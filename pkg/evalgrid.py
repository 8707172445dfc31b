"""Hyperparameter grid search over datasets, and aggregation of the resulting runs."""
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from joblib import Parallel, delayed
from sklearn.model_selection import ParameterGrid
from tqdm import tqdm

from catalog import Catalog
from config import DEFAULT_THREADS, TRAIN_EPOCHS, logger
from deep_matcher import build, evaluate, match
from errors import FormatError, GridSpecError, PreconditionError, TrainingDivergedError
from knn_core import EmbeddingMatrix
from metric_losses import ArcFaceConfig, TripletConfig
from splitting import SplitManifest, verify
from storage import atomic_write
from trainer import TrainerConfig, train_head

METHODS = ("arcface", "triplet")
GROUP_BY = ("setting", "dataset", "method")
QUANTILE_METHOD = "linear"

Setting = Dict[str, object]


@dataclass(frozen=True)
class GridSpec:
    """Shared axes apply to every method; each method adds its own axes."""
    shared: Dict[str, list]
    methods: Dict[str, Dict[str, list]] = field(default_factory=lambda: {"arcface": {}})

    def __post_init__(self):
        if not self.methods:
            object.__setattr__(self, "methods", {"arcface": {}})
        for name, axes in self.methods.items():
            if name not in METHODS:
                raise GridSpecError(f"Unknown method '{name}', expected one of {METHODS}")
            clash = set(axes) & set(self.shared)
            if clash:
                raise GridSpecError(f"Axes {sorted(clash)} are both shared and {name}-specific")
            if "method" in axes:
                raise GridSpecError("'method' is reserved")
        for axis, values in self._all_axes():
            if not isinstance(values, (list, tuple)) or len(values) == 0:
                raise GridSpecError(f"Axis '{axis}' must be a non-empty list")

    def _all_axes(self):
        yield from self.shared.items()
        for axes in self.methods.values():
            yield from axes.items()

    @property
    def n_settings(self) -> int:
        shared = math.prod(len(v) for v in self.shared.values())
        return sum(shared * math.prod(len(v) for v in axes.values()) for axes in self.methods.values())

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GridSpec":
        """Top-level lists and a ``shared`` section are shared axes; method sections add their own."""
        if not isinstance(doc, Mapping) or not doc:
            raise GridSpecError("Grid spec must be a non-empty mapping")
        shared: Dict[str, list] = {}
        methods: Dict[str, Dict[str, list]] = {}
        for key, value in doc.items():
            if key == "shared":
                shared.update(value or {})
            elif key in METHODS:
                methods[key] = dict(value or {})
            elif isinstance(value, Mapping):
                raise GridSpecError(f"Unknown section '{key}'")
            else:
                shared[key] = value
        return cls(shared, methods)


def backbone_loss_grid() -> GridSpec:
    """Backbone x learning rate x (ArcFace margin/scale + Triplet mining/margin): 72 settings."""
    return GridSpec(
        shared={"backbone": ["Swin-B", "EfficientNet-B3"], "lr": [0.01, 0.001]},
        methods={
            "arcface": {"margin": [0.25, 0.5, 0.75], "scale": [32, 64, 128]},
            "triplet": {"mining": ["all", "semi", "hard"], "margin": [0.1, 0.2, 0.3]},
        },
    )


def load_grid_spec(path) -> GridSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            return GridSpec.from_dict(yaml.safe_load(fh))
    except yaml.YAMLError as e:
        raise GridSpecError(f"Invalid grid spec '{path}': {e}") from None


def enumerate_settings(spec: GridSpec) -> List[Setting]:
    """Every combination, method by method, axes varied in sorted-name order."""
    grids = [{"method": [name], **spec.shared, **axes} for name, axes in spec.methods.items()]
    settings = [dict(s) for s in ParameterGrid(grids)]
    logger.info(f"[Grid] Enumerated {len(settings)} settings")
    return settings


def setting_key(setting: Mapping) -> str:
    return ",".join(f"{k}={setting[k]}" for k in sorted(setting))


@dataclass(frozen=True)
class RunRecord:
    dataset: str
    setting: Dict[str, object]
    accuracy: Optional[float]
    diverged: bool
    seed: int
    detail: str = ""
    epochs: Optional[int] = None

    def __post_init__(self):
        if self.diverged == (self.accuracy is not None):
            raise PreconditionError("A run record has an accuracy exactly when it did not diverge")

    @property
    def key(self) -> Tuple[str, str]:
        return self.dataset, setting_key(self.setting)

    def to_json(self) -> str:
        return json.dumps({
            "dataset": self.dataset,
            "setting": self.setting,
            "accuracy": self.accuracy,
            "diverged": self.diverged,
            "seed": self.seed,
            "detail": self.detail,
            "epochs": self.epochs,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        try:
            doc = json.loads(line)
            return cls(doc["dataset"], dict(doc["setting"]), doc["accuracy"], bool(doc["diverged"]),
                       int(doc["seed"]), doc.get("detail", ""),
                       None if doc.get("epochs") is None else int(doc["epochs"]))
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"Invalid run record: {e}") from None


@dataclass(frozen=True, eq=False)
class GridDataset:
    name: str
    catalog: Catalog
    features: Union[EmbeddingMatrix, Mapping[str, EmbeddingMatrix]]
    manifest: SplitManifest

    def features_for(self, setting: Mapping) -> EmbeddingMatrix:
        if isinstance(self.features, EmbeddingMatrix):
            return self.features
        backbone = setting.get("backbone")
        if backbone not in self.features:
            raise GridSpecError(f"Dataset '{self.name}' has no features for backbone '{backbone}'")
        return self.features[backbone]


def loss_config_for(setting: Mapping):
    method = setting.get("method", "arcface")
    if method == "arcface":
        return ArcFaceConfig(margin=float(setting.get("margin", 0.5)), scale=float(setting.get("scale", 64)))
    if method == "triplet":
        return TripletConfig(margin=float(setting.get("margin", 0.2)), mining=setting.get("mining", "all"))
    raise GridSpecError(f"Unknown method '{method}'")


def train_and_evaluate(dataset: GridDataset, setting: Setting, seed: int, epochs: int) -> RunRecord:
    """Train a head on the reference split, then 1-NN match the query split."""
    features = dataset.features_for(setting)
    train_ids = sorted(dataset.manifest.train_ids)
    test_ids = sorted(dataset.manifest.test_ids)
    reference = features.select(train_ids)
    query = features.select(test_ids)
    reference_labels = dataset.catalog.labels_for(train_ids)
    query_labels = dataset.catalog.labels_for(test_ids)

    trainer_config = TrainerConfig(lr=float(setting.get("lr", 0.001)), epochs=epochs, seed=seed)
    try:
        head = train_head(reference, reference_labels, loss_config_for(setting), trainer_config)
    except TrainingDivergedError as e:
        logger.warning(f"[Grid] {dataset.name} [{setting_key(setting)}] diverged: {e.reason}")
        return RunRecord(dataset.name, dict(setting), None, True, seed, str(e))

    db = build(head.project(reference), reference_labels)
    predictions = match(db, head.project(query), n_jobs=1)
    accuracy = evaluate(predictions, query_labels)
    return RunRecord(dataset.name, dict(setting), accuracy, False, seed)


Runner = Callable[[GridDataset, Setting, int, int], RunRecord]


def run_grid(spec: Union[GridSpec, Sequence[Setting]], datasets: Sequence[GridDataset],
             runner: Runner = train_and_evaluate, n_jobs: Optional[int] = None, seed: int = 0,
             epochs: int = TRAIN_EPOCHS, records_path=None) -> List[RunRecord]:
    """One record per (dataset, setting), ordered dataset-major in setting order.

    With ``records_path``, finished records are appended as JSON lines and records already
    in the file are not re-run. A file written with another seed or epoch budget is refused.
    """
    settings = enumerate_settings(spec) if isinstance(spec, GridSpec) else [dict(s) for s in spec]
    for ds in datasets:
        violations = verify(ds.manifest, ds.catalog)
        if violations:
            raise PreconditionError(f"Invalid split manifest for dataset '{ds.name}': "
                                    f"{'; '.join(str(v) for v in violations)}")

    jobs = [(ds, s) for ds in datasets for s in settings]
    done: Dict[Tuple[str, str], RunRecord] = {}
    if records_path is not None and Path(records_path).exists():
        done = {r.key: r for r in load_records(records_path)}
        stale = [r for r in done.values() if r.seed != seed or (r.epochs is not None and r.epochs != epochs)]
        if stale:
            raise PreconditionError(
                f"Records in '{records_path}' were run with seed={stale[0].seed}, epochs={stale[0].epochs}; "
                f"this run uses seed={seed}, epochs={epochs}. Use a fresh records file")
    pending = [(ds, s) for ds, s in jobs if (ds.name, setting_key(s)) not in done]
    logger.info(f"[Grid] {len(jobs)} runs ({len(settings)} settings x {len(datasets)} datasets), "
                f"{len(jobs) - len(pending)} already recorded")

    results = (dataclasses.replace(r, epochs=epochs) for r in Parallel(
        n_jobs=n_jobs or DEFAULT_THREADS, backend="threading", return_as="generator",
    )(delayed(runner)(ds, s, seed, epochs) for ds, s in pending))
    if records_path is not None:
        Path(records_path).parent.mkdir(parents=True, exist_ok=True)
        with open(records_path, "a", encoding="utf-8") as fh:
            for record in tqdm(results, total=len(pending), desc="grid", disable=not pending):
                fh.write(record.to_json() + "\n")
                fh.flush()
                done[record.key] = record
    else:
        for record in tqdm(results, total=len(pending), desc="grid", disable=not pending):
            done[record.key] = record

    records = [done[(ds.name, setting_key(s))] for ds, s in jobs]
    n_diverged = sum(r.diverged for r in records)
    logger.info(f"[Grid] Completed {len(records)} runs, {n_diverged} diverged")
    return records


def save_records(records: Sequence[RunRecord], path) -> None:
    with atomic_write(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    logger.info(f"[Grid] Wrote {len(records)} run records to '{path}'")


def load_records(path) -> List[RunRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class AggregateStats:
    n: int
    median: float
    q25: float
    q75: float
    mean: float
    min: float
    max: float
    values: Tuple[float, ...] = ()

    def as_dict(self) -> Dict:
        return {"n": self.n, "min": self.min, "q25": self.q25, "median": self.median,
                "q75": self.q75, "max": self.max, "mean": self.mean, "values": list(self.values)}


def summarize(values: Sequence[float]) -> AggregateStats:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    q25, median, q75 = np.quantile(ordered, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return AggregateStats(
        n=len(ordered),
        median=float(median),
        q25=float(q25),
        q75=float(q75),
        mean=float(np.mean(ordered)),
        min=float(ordered[0]),
        max=float(ordered[-1]),
        values=tuple(float(v) for v in ordered),
    )


def _axis_value(record: RunRecord, axis: str) -> str:
    if axis == "setting":
        return setting_key(record.setting)
    if axis == "dataset":
        return record.dataset
    if axis == "method":
        return str(record.setting.get("method", "arcface"))
    return str(record.setting.get(axis, "-"))


def group_axes(group_by: Union[str, Sequence[str]]) -> Tuple[str, ...]:
    """``"backbone,method"`` or ``("backbone", "method")`` -> ``("backbone", "method")``."""
    axes = tuple(a.strip() for a in group_by.split(",")) if isinstance(group_by, str) else tuple(group_by)
    if not axes or any(not a for a in axes):
        raise PreconditionError(f"group_by needs at least one axis name, got {group_by!r}")
    return axes


def group_key(record: RunRecord, axes: Sequence[str]) -> str:
    """One axis gives its bare value; several give ``axis=value`` pairs joined by commas."""
    if len(axes) == 1:
        return _axis_value(record, axes[0])
    return ",".join(f"{a}={_axis_value(record, a)}" for a in axes)


def check_axes(records: Sequence[RunRecord], axes: Sequence[str]) -> None:
    known = set(GROUP_BY)
    for r in records:
        known.update(r.setting)
    unknown = [a for a in axes if a not in known]
    if records and unknown:
        raise PreconditionError(f"No run has axis {unknown}; known axes are {sorted(known)}")


def aggregate(records: Sequence[RunRecord],
              group_by: Union[str, Sequence[str]] = "setting") -> Dict[str, Optional[AggregateStats]]:
    """Accuracy statistics per group; diverged runs are left out, all-diverged groups map to None.

    ``group_by`` is ``setting``, ``dataset``, ``method`` or any setting axis, alone or combined.
    Runs lacking a grouped axis fall under ``-``.
    """
    axes = group_axes(group_by)
    check_axes(records, axes)
    groups: Dict[str, List[float]] = {}
    excluded: Dict[str, int] = {}
    for r in records:
        key = group_key(r, axes)
        groups.setdefault(key, [])
        if r.diverged:
            excluded[key] = excluded.get(key, 0) + 1
        else:
            groups[key].append(r.accuracy)

    for key, count in sorted(excluded.items()):
        logger.warning(f"[Grid] Excluded {count} diverged run(s) from group '{key}'")
    return {key: (summarize(groups[key]) if groups[key] else None) for key in sorted(groups)}


def export_boxplot(stats_by_group: Mapping[str, Optional[AggregateStats]]) -> Dict:
    """Five-number summaries plus raw values, ready for any plotting tool."""
    return {
        "quantile_method": QUANTILE_METHOD,
        "groups": {key: (s.as_dict() if s is not None else None) for key, s in stats_by_group.items()},
    }
