import csv
import datetime
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from config import logger
from errors import EmptyInputError, IngestionError, SchemaError, UnknownImageError
from storage import atomic_write

CANONICAL_COLUMNS = ("image_id", "identity", "dataset", "timestamp", "payload_ref")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    identity: str
    dataset: str
    timestamp: Optional[datetime.date] = None
    payload_ref: Optional[str] = None


@dataclass(frozen=True)
class CatalogSchema:
    """Maps the logical record fields onto the column names of a metadata file."""
    image_id: str = "image_id"
    identity: str = "identity"
    dataset: Optional[str] = "dataset"
    timestamp: Optional[str] = "timestamp"
    payload_ref: Optional[str] = "payload_ref"


@dataclass(frozen=True)
class Catalog:
    name: str
    records: Tuple[ImageRecord, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for position, record in enumerate(self.records):
            if record.image_id in index:
                raise IngestionError(f"Duplicate image_id '{record.image_id}'",
                                     line=position + 1, image_id=record.image_id)
            if not record.identity:
                raise IngestionError(f"Empty identity for '{record.image_id}'",
                                     line=position + 1, image_id=record.image_id)
            index[record.image_id] = position
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def get(self, image_id: str) -> ImageRecord:
        try:
            return self.records[self._index[image_id]]
        except KeyError:
            raise UnknownImageError([image_id]) from None

    @property
    def image_ids(self) -> List[str]:
        return [r.image_id for r in self.records]

    def identities(self) -> List[str]:
        """Distinct identities in first-seen order."""
        return list(dict.fromkeys(r.identity for r in self.records))

    def labels_for(self, image_ids: Iterable[str]) -> List[str]:
        image_ids = list(image_ids)
        unknown = [i for i in image_ids if i not in self._index]
        if unknown:
            raise UnknownImageError(unknown)
        return [self.records[self._index[i]].identity for i in image_ids]

    def subset(self, image_ids: Iterable[str], name: Optional[str] = None) -> "Catalog":
        wanted = set(image_ids)
        unknown = wanted - set(self._index)
        if unknown:
            raise UnknownImageError(unknown)
        return Catalog(name or self.name, tuple(r for r in self.records if r.image_id in wanted))


@dataclass(frozen=True)
class CatalogStats:
    n_images: int
    n_identities: int
    has_timestamps: bool
    images_per_identity: Dict[str, int]
    n_datasets: int = 1
    date_range: Optional[Tuple[datetime.date, datetime.date]] = None

    def as_dict(self) -> Dict:
        return {
            "n_images": self.n_images,
            "n_identities": self.n_identities,
            "n_datasets": self.n_datasets,
            "has_timestamps": self.has_timestamps,
            "date_range": [d.isoformat() for d in self.date_range] if self.date_range else None,
            "images_per_identity": dict(self.images_per_identity),
        }


def _parse_date(value: str, line: int) -> datetime.date:
    try:
        # Day granularity; a full ISO time part is accepted and dropped
        return datetime.datetime.fromisoformat(value.strip()).date()
    except ValueError:
        raise IngestionError(f"Unparseable timestamp '{value}'", line=line) from None


def _read_records(reader: csv.DictReader, schema: "CatalogSchema", name: str) -> List[ImageRecord]:
    header = reader.fieldnames or []
    for mandatory in (schema.image_id, schema.identity):
        if mandatory not in header:
            raise SchemaError(mandatory)

    def optional_column(column):
        return column if column and column in header else None

    dataset_col = optional_column(schema.dataset)
    timestamp_col = optional_column(schema.timestamp)
    payload_col = optional_column(schema.payload_ref)

    records: List[ImageRecord] = []
    seen: Dict[str, int] = {}
    for line, row in enumerate(reader, start=1):
        image_id = (row.get(schema.image_id) or "").strip()
        identity = (row.get(schema.identity) or "").strip()
        if not image_id:
            raise IngestionError("Empty image_id", line=line)
        if image_id in seen:
            raise IngestionError(
                f"Duplicate image_id '{image_id}' (first seen on line {seen[image_id]})",
                line=line, image_id=image_id)
        if not identity:
            raise IngestionError(f"Empty identity for '{image_id}'", line=line, image_id=image_id)
        seen[image_id] = line

        raw_ts = (row.get(timestamp_col) or "").strip() if timestamp_col else ""
        raw_dataset = (row.get(dataset_col) or "").strip() if dataset_col else ""
        raw_payload = (row.get(payload_col) or "").strip() if payload_col else ""
        records.append(ImageRecord(
            image_id=image_id,
            identity=identity,
            dataset=raw_dataset or name,
            timestamp=_parse_date(raw_ts, line) if raw_ts else None,
            payload_ref=raw_payload or None,
        ))
    return records


def ingest(metadata_file, schema: Optional[CatalogSchema] = None, delimiter: str = ",",
           name: Optional[str] = None) -> Catalog:
    """Read a delimiter-separated metadata file (with header) into a Catalog.

    Data lines are numbered from 1, the header is not counted.
    """
    schema = schema or CatalogSchema()
    path = Path(metadata_file)
    name = name or path.stem
    logger.info(f"[Catalog] Ingesting '{path}' as '{name}'")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        try:
            records = _read_records(reader, schema, name)
        except UnicodeDecodeError as e:
            raise IngestionError(f"'{path}' is not valid UTF-8 (byte {e.start})") from None
        except csv.Error as e:
            raise IngestionError(f"Malformed row: {e}", line=max(reader.line_num - 1, 0)) from None

    catalog = Catalog(name, tuple(records))
    logger.info(f"[Catalog] Loaded {len(catalog)} records, {len(catalog.identities())} identities")
    return catalog


def write_catalog(catalog: Catalog, fh, delimiter: str = ",") -> None:
    writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for r in catalog:
        writer.writerow([
            r.image_id,
            r.identity,
            r.dataset,
            r.timestamp.isoformat() if r.timestamp else "",
            r.payload_ref or "",
        ])


def emit(catalog: Catalog, path, delimiter: str = ",") -> None:
    """Write the catalog in the canonical column layout (ingest() reads it back)."""
    with atomic_write(path, "w") as fh:
        write_catalog(catalog, fh, delimiter)
    logger.info(f"[Catalog] Wrote {len(catalog)} records to '{path}'")


def stats(catalog: Catalog) -> CatalogStats:
    if len(catalog) == 0:
        raise EmptyInputError(f"Catalog '{catalog.name}' is empty")

    histogram = Counter(r.identity for r in catalog)
    dates = [r.timestamp for r in catalog if r.timestamp is not None]
    return CatalogStats(
        n_images=len(catalog),
        n_identities=len(histogram),
        has_timestamps=len(dates) == len(catalog),
        images_per_identity=dict(sorted(histogram.items())),
        n_datasets=len({r.dataset for r in catalog}),
        date_range=(min(dates), max(dates)) if dates else None,
    )


def group_by_identity(records: Sequence[ImageRecord]) -> Dict[str, List[ImageRecord]]:
    groups: Dict[str, List[ImageRecord]] = {}
    for record in records:
        groups.setdefault(record.identity, []).append(record)
    return groups
