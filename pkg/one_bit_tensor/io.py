"""
File formats: tensor text files, observation CSV, ratings CSV ingestion, fit
checkpoints, flat key-value spec files and metrics JSON records.

Every index written to or read from a file is 1-based.
"""
from typing import Dict, List, Optional, Sequence, Union
from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np
import pandas as pd

from one_bit_tensor.tensor_core import Shape, DenseTensor, CpFactorSet, check_shape, check_indices
from one_bit_tensor.observation_model import ObservationSet
from one_bit_tensor.solver import FitResult
from one_bit_tensor.report import RunReport

import logging
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DIMS_PREFIX = "dims:"

CHECKPOINT_FORMAT = "one-bit-tensor-checkpoint"
CHECKPOINT_VERSION = 1


def format_dims(shape: Sequence[int]) -> str:
    return f"{DIMS_PREFIX} " + ",".join(str(n) for n in shape)


def parse_dims(line: str) -> Shape:
    """
    Parse a "dims: N_1,...,N_d" header line.
    """
    line = line.strip()
    if not line.startswith(DIMS_PREFIX):
        raise ValueError(f"parse_dims(): expected a '{DIMS_PREFIX} N_1,...,N_d' header, got '{line}'")
    try:
        return check_shape([int(token) for token in line[len(DIMS_PREFIX):].split(",")])
    except ValueError as ve:
        raise ValueError(f"parse_dims(): malformed dims header '{line}': {ve}")


def parse_shape(text: str) -> Shape:
    """Parse a comma (or 'x') separated list of dimensions, e.g. '20,20,20' or '20x20x20'."""
    return check_shape([int(token) for token in text.replace("x", ",").split(",") if token.strip()])


def _first_line(path: Path) -> str:
    if not path.exists():
        raise FileNotFoundError(f"'{path}' does not exist")
    with path.open() as stream:
        return stream.readline()


def save_tensor(tensor: DenseTensor, path: PathLike):
    """
    Write a dims header line followed by one entry per line, first index fastest.
    """
    np.savetxt(Path(path), tensor.flat(), header=format_dims(tensor.shape), comments="", fmt="%.17g")


def load_tensor(path: PathLike) -> DenseTensor:
    path = Path(path)
    shape = parse_dims(_first_line(path))
    values = np.loadtxt(path, skiprows=1, ndmin=1)
    return DenseTensor.from_flat(shape, values)


def index_columns(order: int) -> List[str]:
    return [f"i_{j + 1}" for j in range(order)]


def save_observations(obs: ObservationSet, path: PathLike):
    """
    Observation CSV: a dims line, a header row i_1,...,i_d,y, then one row per sample.
    """
    path = Path(path)
    frame = pd.DataFrame(obs.indices + 1, columns=index_columns(len(obs.shape)))
    frame["y"] = obs.labels
    with path.open("w") as stream:
        stream.write(format_dims(obs.shape) + "\n")
        frame.to_csv(stream, index=False)


def load_observations(path: PathLike, shape: Optional[Sequence[int]] = None) -> ObservationSet:
    """
    Read an observation CSV; the dims line may be omitted when 'shape' is given.
    """
    path = Path(path)
    first = _first_line(path)
    skip = 0
    if first.strip().startswith(DIMS_PREFIX):
        file_shape = parse_dims(first)
        if shape is not None and check_shape(shape) != file_shape:
            raise ValueError(f"load_observations(): file shape {file_shape} != declared shape {tuple(shape)}")
        shape = file_shape
        skip = 1
    if shape is None:
        raise ValueError(f"load_observations(): '{path}' has no dims line and no shape was given")
    shape = check_shape(shape)
    frame = pd.read_csv(path, skiprows=skip)
    columns = index_columns(len(shape)) + ["y"]
    if list(frame.columns) != columns:
        raise ValueError(f"load_observations(): expected columns {columns}, got {list(frame.columns)}")
    if frame.empty:
        raise ValueError(f"load_observations(): '{path}' has no data rows")
    return ObservationSet(
        shape=shape,
        indices=frame[columns[:-1]].to_numpy(dtype=np.int64) - 1,
        labels=frame["y"].to_numpy(dtype=np.int64)
    )


@dataclass(frozen=True, eq=False)
class RatingsTable:
    """
    Observed real ratings of a tensor: 0-based indices, ratings, and the rating scale maximum.
    """
    shape: Shape
    indices: np.ndarray
    ratings: np.ndarray
    scale_max: float

    def __post_init__(self):
        shape = check_shape(self.shape)
        idx = check_indices(self.indices, shape)
        ratings = np.asarray(self.ratings, dtype=np.float64).ravel()
        if ratings.shape[0] != idx.shape[0]:
            raise ValueError(f"RatingsTable(): {idx.shape[0]} indices but {ratings.shape[0]} ratings")
        if not np.all(np.isfinite(ratings)):
            raise ValueError("RatingsTable(): ratings must be finite")
        if not self.scale_max > 0:
            raise ValueError(f"RatingsTable(): rating scale maximum must be positive, got {self.scale_max}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "ratings", ratings)

    def __len__(self) -> int:
        return int(self.ratings.shape[0])

    def subset(self, positions: Sequence[int]) -> "RatingsTable":
        positions = np.asarray(positions, dtype=np.int64)
        return RatingsTable(
            shape=self.shape,
            indices=self.indices[positions],
            ratings=self.ratings[positions],
            scale_max=self.scale_max
        )


def _is_number(token) -> bool:
    try:
        float(token)
        return True
    except (TypeError, ValueError):
        return False


def ingest_csv(
        path: PathLike,
        shape: Sequence[int],
        scale_max: Optional[float] = None,
        report: Optional[RunReport] = None
) -> RatingsTable:
    """
    Read a ratings CSV with rows i_1,...,i_d,rating (1-based indices, optional header row).

    :param path: PathLike, CSV file
    :param shape: Sequence[int], declared tensor shape
    :param scale_max: Optional[float], rating scale maximum (default: largest absolute rating)
    :param report: Optional[RunReport], receives the duplicated-row warning
    :return: RatingsTable; duplicated indices keep their last row
    """
    path = Path(path)
    shape = check_shape(shape)
    if not path.exists():
        raise FileNotFoundError(f"ingest_csv(): '{path}' does not exist")
    width = len(shape) + 1
    try:
        frame = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise ValueError(f"ingest_csv(): '{path}' has no data rows")
    except pd.errors.ParserError as pe:
        raise ValueError(f"ingest_csv(): malformed row in '{path}': {pe}")

    first_line = 1
    if len(frame) and not all(_is_number(token) for token in frame.iloc[0]):
        # header row
        frame = frame.iloc[1:]
        first_line = 2
    if frame.empty:
        raise ValueError(f"ingest_csv(): '{path}' has no data rows")
    if frame.shape[1] != width:
        raise ValueError(
            f"ingest_csv(): line {first_line} of '{path}' has {frame.shape[1]} columns, expected {width}"
        )

    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    lines = np.arange(values.shape[0]) + first_line
    # NaN marks a missing or non-numeric cell; indices must also be whole numbers
    malformed = ~np.all(np.isfinite(values), axis=1) | np.any(values[:, :-1] != np.round(values[:, :-1]), axis=1)
    if np.any(malformed):
        raise ValueError(f"ingest_csv(): malformed row at line {lines[np.argmax(malformed)]} of '{path}'")
    indices = values[:, :-1].astype(np.int64)
    out_of_range = np.any((indices < 1) | (indices > np.asarray(shape)), axis=1)
    if np.any(out_of_range):
        line = lines[np.argmax(out_of_range)]
        raise ValueError(
            f"ingest_csv(): index {tuple(indices[np.argmax(out_of_range)])} at line {line} " +
            f"of '{path}' is out of range for shape {shape} (indices are 1-based)"
        )

    table = pd.DataFrame(indices - 1, columns=index_columns(len(shape)))
    table["rating"] = values[:, -1]
    duplicated = table.duplicated(subset=index_columns(len(shape)), keep="last")
    if duplicated.any():
        message = f"{int(duplicated.sum())} duplicated index rows in '{path}' (last row wins)"
        logger.warning(f"ingest_csv(): {message}")
        if report is not None:
            report.warning(message)
        table = table[~duplicated.to_numpy()]

    ratings = table["rating"].to_numpy(dtype=np.float64)
    return RatingsTable(
        shape=shape,
        indices=table[index_columns(len(shape))].to_numpy(dtype=np.int64),
        ratings=ratings,
        scale_max=float(scale_max) if scale_max is not None else float(np.max(np.abs(ratings))) or 1.0
    )


def save_ratings(table: RatingsTable, path: PathLike):
    frame = pd.DataFrame(table.indices + 1, columns=index_columns(len(table.shape)))
    frame["rating"] = table.ratings
    frame.to_csv(Path(path), index=False)


def checkpoint_record(result: FitResult) -> Dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "shape": list(result.factors.shape),
        "k": result.factors.k,
        "chosen_r": result.chosen_r,
        "iterations": result.iterations,
        "converged": result.converged,
        "row_modes": result.row_modes,
        "tensor_shape": list(result.tensor_shape) if result.tensor_shape is not None else None,
        "objective_trace": [float(value) for value in result.objective_trace],
        "cv_table": [[float(r), float(score)] for r, score in result.cv_table],
        "factors": [factor.tolist() for factor in result.factors.factors]
    }


def save_checkpoint(result: FitResult, path: PathLike):
    with Path(path).open("w") as stream:
        json.dump(checkpoint_record(result), stream, indent=1)


def load_checkpoint(path: PathLike) -> FitResult:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"load_checkpoint(): '{path}' does not exist")
    with path.open() as stream:
        record: Dict = json.load(stream)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"load_checkpoint(): '{path}' is not a fit checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"load_checkpoint(): unsupported checkpoint version {record.get('version')}")
    factors = CpFactorSet(tuple(np.asarray(factor, dtype=np.float64) for factor in record["factors"]))
    if list(factors.shape) != record["shape"] or factors.k != record["k"]:
        raise ValueError(f"load_checkpoint(): factor matrices of '{path}' disagree with its header")
    return FitResult(
        factors=factors,
        objective_trace=list(record["objective_trace"]),
        chosen_r=float(record["chosen_r"]),
        iterations=int(record["iterations"]),
        converged=bool(record["converged"]),
        row_modes=record.get("row_modes"),
        tensor_shape=tuple(record["tensor_shape"]) if record.get("tensor_shape") else None,
        cv_table=[(r, score) for r, score in record.get("cv_table", [])]
    )


def read_spec_file(path: PathLike) -> Dict[str, str]:
    """
    Parse a flat key-value spec file: one "key: value" or "key = value" per
    line, '#' starts a comment.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"read_spec_file(): '{path}' does not exist")
    entries: Dict[str, str] = dict()
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        separator = min((pos for pos in (line.find(":"), line.find("=")) if pos > 0), default=-1)
        if separator < 0:
            raise ValueError(f"read_spec_file(): line {number} of '{path}' is not a 'key: value' pair")
        key = line[:separator].strip().replace("-", "_")
        entries[key] = line[separator + 1:].strip()
    return entries


def _plain(value):
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def write_metrics_record(record: Dict, path: PathLike):
    """Emit one flat key-value JSON record."""
    with Path(path).open("w") as stream:
        json.dump(_plain(record), stream, indent=2, sort_keys=True)


def read_metrics_record(path: PathLike) -> Dict:
    with Path(path).open() as stream:
        return json.load(stream)
