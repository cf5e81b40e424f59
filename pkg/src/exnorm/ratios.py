"""Recording, aggregation and export of per-sample important ratios."""

from __future__ import annotations

__all__ = [
    "Grouping",
    "RatioAggregate",
    "RatioRecord",
    "aggregate",
    "concat_vectors",
    "export_aggregates",
    "export_records",
    "export_vectors",
    "read_records",
    "record_ratios",
    "sample_vectors",
]

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import (
    TYPE_CHECKING,
    Any,
    DefaultDict,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import structlog

from exnorm.tensor import Tensor
from exnorm.types import (
    DatasetFormatError,
    EmptyDatasetError,
    ExportError,
    NoExemplarLayersError,
    RatioError,
)

if TYPE_CHECKING:
    from exnorm.data import LabeledSet
    from exnorm.network import Network

RECORD_BATCH = 256
RECORD_COLUMNS = ("epoch", "layer", "sample", "class")
SIMPLEX_TOLERANCE = 1e-6

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class RatioRecord:
    """The ratios one EN layer assigned to one sample."""

    layer: int
    """Index of the EN layer, counted from 0 in network order."""

    sample: int
    label: int
    epoch: int
    ratios: Tuple[float, ...]
    dataset: str = "train"

    def __post_init__(self) -> None:
        total = sum(self.ratios)
        if abs(total - 1.0) > SIMPLEX_TOLERANCE or min(self.ratios) < 0:
            raise RatioError(
                f"Layer {self.layer} sample {self.sample}: ratios "
                f"{self.ratios} are not on the simplex"
            )


class Grouping(Enum):
    """Keys ratios can be averaged by; every grouping includes the layer."""

    LAYER = "layer"
    CLASS = "class"
    EPOCH = "epoch"
    DATASET = "dataset"
    SAMPLE = "sample"

    def key(self, record: RatioRecord) -> Tuple[Any, ...]:
        if self is Grouping.LAYER:
            return (record.layer,)
        if self is Grouping.CLASS:
            return (record.label, record.layer)
        if self is Grouping.EPOCH:
            return (record.epoch, record.layer)
        if self is Grouping.DATASET:
            return (record.dataset, record.layer)
        return (record.sample, record.layer)


@dataclass(frozen=True)
class RatioAggregate:
    grouping: Grouping
    key: Tuple[Any, ...]
    mean: Tuple[float, ...]
    count: int

    def to_dict(self) -> Dict[str, Any]:
        names = {
            Grouping.LAYER: ("layer",),
            Grouping.CLASS: ("class", "layer"),
            Grouping.EPOCH: ("epoch", "layer"),
            Grouping.DATASET: ("dataset", "layer"),
            Grouping.SAMPLE: ("sample", "layer"),
        }[self.grouping]
        data: Dict[str, Any] = dict(zip(names, self.key))
        data["mean"] = list(self.mean)
        data["count"] = self.count
        return data


def record_ratios(
    model: Network,
    data: LabeledSet,
    epoch: int,
    dataset: str = "train",
    batch_size: int = RECORD_BATCH,
) -> List[RatioRecord]:
    """One record per (EN layer, sample), computed in inference mode.

    The ratios are read through each layer's ratio tap; any tap that was
    already installed is restored afterwards.
    """
    layers = model.en_layers()
    if not layers:
        raise NoExemplarLayersError(
            f"{model.arch.name} with {model.norm} has no EN layers"
        )
    index = {layer.name: i for i, layer in enumerate(layers)}
    previous = [layer.ratio_tap for layer in layers]
    captured: Dict[str, np.ndarray] = {}

    def tap(name: str, ratios: np.ndarray) -> None:
        captured[name] = ratios

    records: List[RatioRecord] = []
    model.set_ratio_tap(tap)
    try:
        for ids, images, labels in data.batches(batch_size):
            captured.clear()
            model.forward(Tensor(images), training=False)
            for name, ratios in captured.items():
                for row, sample, label in zip(ratios, ids, labels):
                    records.append(
                        RatioRecord(
                            layer=index[name],
                            sample=int(sample),
                            label=int(label),
                            epoch=epoch,
                            ratios=tuple(float(v) for v in row),
                            dataset=dataset,
                        )
                    )
    finally:
        for layer, old in zip(layers, previous):
            layer.ratio_tap = old
    records.sort(key=lambda r: (r.layer, r.sample))
    logger.debug("Recorded ratios", epoch=epoch, records=len(records))
    return records


def aggregate(
    records: Sequence[RatioRecord], grouping: Grouping = Grouping.LAYER
) -> List[RatioAggregate]:
    """Arithmetic mean of the ratios in each group, sorted by key."""
    if not records:
        raise EmptyDatasetError("Cannot aggregate an empty record set")
    groups: DefaultDict[Tuple[Any, ...], List[RatioRecord]] = defaultdict(
        list
    )
    for record in records:
        groups[grouping.key(record)].append(record)

    result = []
    for key in sorted(groups):
        members = groups[key]
        mean = np.mean([m.ratios for m in members], axis=0)
        result.append(
            RatioAggregate(
                grouping, key, tuple(float(v) for v in mean), len(members)
            )
        )
    return result


def concat_vectors(
    records: Sequence[RatioRecord], layers: Optional[int] = None
) -> np.ndarray:
    """Layer-major concatenation of one sample's ratios over every layer.

    The records must belong to one sample and epoch and cover layers
    0 to L-1 exactly once each.  L is ``layers`` when given, otherwise one
    more than the largest layer index present.
    """
    if not records:
        raise RatioError("No records to concatenate")
    samples = {(r.sample, r.epoch, r.dataset) for r in records}
    if len(samples) != 1:
        raise RatioError(f"Records span several samples: {sorted(samples)}")
    by_layer: Dict[int, RatioRecord] = {}
    for r in records:
        if r.layer in by_layer:
            raise RatioError(f"Duplicate record for layer {r.layer}")
        by_layer[r.layer] = r
    count = max(by_layer) + 1 if layers is None else layers
    missing = sorted(set(range(count)) - set(by_layer))
    extra = sorted(set(by_layer) - set(range(count)))
    if extra:
        raise RatioError(f"Unexpected records for layers {extra}")
    if missing:
        raise RatioError(f"Missing records for layers {missing}")
    return np.concatenate(
        [np.asarray(by_layer[i].ratios) for i in range(len(by_layer))]
    )


def sample_vectors(
    records: Sequence[RatioRecord],
    layers: Optional[int] = None,
    epoch: Optional[int] = None,
) -> Dict[int, np.ndarray]:
    """Concatenated vectors of every sample, for one epoch.

    ``epoch`` defaults to the latest epoch present in ``records``.
    """
    if not records:
        raise EmptyDatasetError("No records to build vectors from")
    if epoch is None:
        epoch = max(r.epoch for r in records)
    by_sample: DefaultDict[int, List[RatioRecord]] = defaultdict(list)
    for r in records:
        if r.epoch == epoch:
            by_sample[r.sample].append(r)
    return {
        s: concat_vectors(rs, layers) for s, rs in sorted(by_sample.items())
    }


def _fmt(value: float) -> str:
    return "%.12g" % value


def export_records(records: Sequence[RatioRecord], path: Path) -> None:
    """CSV with header ``epoch,layer,sample,class,lambda_1..lambda_K``."""
    if not records:
        raise EmptyDatasetError("No records to export")
    k = len(records[0].ratios)
    header = list(RECORD_COLUMNS)
    header += [f"lambda_{i}" for i in range(1, k + 1)]
    try:
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for r in records:
                writer.writerow(
                    [r.epoch, r.layer, r.sample, r.label]
                    + [_fmt(v) for v in r.ratios]
                )
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Exported ratio records", path=str(path), rows=len(records))


def read_records(path: Path, dataset: str = "train") -> List[RatioRecord]:
    """Parse a file written by `export_records`."""
    try:
        with path.open(newline="") as f:
            reader = csv.DictReader(f)
            fields = reader.fieldnames or []
            missing = [c for c in RECORD_COLUMNS if c not in fields]
            columns = [c for c in fields if c.startswith("lambda_")]
            if missing or not columns:
                raise DatasetFormatError(
                    f"{path}: missing columns "
                    f"{', '.join(missing) or 'lambda_1..lambda_K'}"
                )
            return [
                _parse_record(path, row, columns, dataset) for row in reader
            ]
    except OSError as e:
        raise ExportError(f"Cannot read {path}: {e}") from e


def _parse_record(
    path: Path, row: Dict[str, str], columns: List[str], dataset: str
) -> RatioRecord:
    try:
        return RatioRecord(
            layer=int(row["layer"]),
            sample=int(row["sample"]),
            label=int(row["class"]),
            epoch=int(row["epoch"]),
            ratios=tuple(float(row[c]) for c in columns),
            dataset=dataset,
        )
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"{path}: bad record {row}: {e}") from e


def export_aggregates(
    aggregates: Sequence[RatioAggregate], path: Path
) -> None:
    """JSON list of ``{<key fields>, mean, count}`` objects."""
    body = {
        "grouping": aggregates[0].grouping.value if aggregates else None,
        "groups": [a.to_dict() for a in aggregates],
    }
    try:
        path.write_text(json.dumps(body, indent=2) + "\n")
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Exported ratio aggregates", path=str(path))


def export_vectors(vectors: Dict[int, np.ndarray], path: Path) -> None:
    """CSV rows ``sample,v_1..v_LK``, one per sample."""
    if not vectors:
        raise EmptyDatasetError("No vectors to export")
    width = len(next(iter(vectors.values())))
    try:
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["sample"] + [f"v_{i}" for i in range(1, width + 1)]
            )
            for sample, vector in vectors.items():
                writer.writerow([sample] + [_fmt(v) for v in vector])
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Exported ratio vectors", path=str(path), rows=len(vectors))
