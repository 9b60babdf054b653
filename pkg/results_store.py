"""
Content-addressed store of measurement cells, the grid runner on top of it,
and the trajectory CSV / JSON exports.
"""
import hashlib
import json
import logging
import os
import re
import sys
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"
TRAJECTORY_COLUMNS = [
    "step", "target", "source", "metric", "value", "stderr",
    "init_loss", "chains_ok", "chains_failed", "negative",
]


class TrajectoryParseError(ValueError):
    """Raised for a malformed trajectory CSV, naming the file and line."""

    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class CellKey:
    config_hash: str
    step: int
    target: str
    source: str
    metric: str

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True)


class ResultsStore:
    """
    One JSON file per completed cell under ``root/cells``.

    Writes go through a single lock and land atomically, so a killed run
    leaves only whole cells behind. A completed cell is never rewritten with
    a different value.
    """

    def __init__(self, root: str):
        self.root = root
        self.cells_dir = os.path.join(root, "cells")
        os.makedirs(self.cells_dir, exist_ok=True)
        self._lock = threading.Lock()

    def path_for(self, key: CellKey) -> str:
        digest = key.digest()
        return os.path.join(self.cells_dir, digest[:2], f"{digest}.json")

    def __contains__(self, key: CellKey) -> bool:
        return os.path.exists(self.path_for(key))

    def get(self, key: CellKey):
        path = self.path_for(key)
        if not os.path.exists(path):
            return None
        with open(path) as f:
            return json.load(f)["value"]

    def put(self, key: CellKey, value) -> bool:
        """
        Persist a completed cell.

        Returns:
            True if written, False if an identical cell already existed.

        Raises:
            ValueError: if the cell exists with a different value.
        """
        payload = canonical_json({"key": key.to_dict(), "value": value, "tool_version": TOOL_VERSION})
        path = self.path_for(key)
        with self._lock:
            if os.path.exists(path):
                with open(path) as f:
                    existing = f.read()
                if existing != payload:
                    raise ValueError(f"cell {key} already stored with a different value")
                return False
            os.makedirs(os.path.dirname(path), exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=".cell_", dir=os.path.dirname(path))
            try:
                with os.fdopen(fd, "w") as f:
                    f.write(payload)
                os.replace(tmp, path)
            except Exception:
                if os.path.exists(tmp):
                    os.remove(tmp)
                raise
        return True

    def keys(self) -> Iterator[CellKey]:
        for dirpath, _, filenames in os.walk(self.cells_dir):
            for name in sorted(filenames):
                if not name.endswith(".json") or name.startswith("."):
                    continue
                with open(os.path.join(dirpath, name)) as f:
                    yield CellKey(**json.load(f)["key"])


def run_grid(keys: Sequence[CellKey], compute: Callable[[CellKey], object],
             store: Optional[ResultsStore] = None, workers: int = 1,
             progress: bool = False) -> List[Tuple[CellKey, object]]:
    """
    Evaluate every cell not already in the store.

    A cell that raises is logged and returned with value None; it is not
    stored, so the next run retries it.
    """
    results = {}
    pending = []
    for key in keys:
        cached = store.get(key) if store is not None else None
        if cached is not None:
            results[key] = cached
        else:
            pending.append(key)
    if len(pending) < len(keys):
        logger.info(f"Reusing {len(keys) - len(pending)} completed cells; {len(pending)} to compute")

    def task(key):
        try:
            value = compute(key)
        except Exception as e:
            logger.error(f"Cell {key.metric} step={key.step} target={key.target} source={key.source} failed: {e}")
            if logger.isEnabledFor(logging.DEBUG):
                import traceback
                logger.debug(traceback.format_exc())
            return key, None
        if store is not None:
            store.put(key, value)
        return key, value

    disable = not progress or not sys.stderr.isatty()
    if workers > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for key, value in tqdm(pool.map(task, pending), total=len(pending), desc="cells", disable=disable):
                results[key] = value
    else:
        for key in tqdm(pending, desc="cells", disable=disable):
            results[key] = task(key)[1]
    return [(key, results[key]) for key in keys]


def failure_fraction(results: Sequence[Tuple[CellKey, object]]) -> float:
    if not results:
        return 0.0
    return sum(1 for _, value in results if value is None) / len(results)


def trajectory_frame(rows: Sequence[dict], config_hash: str, value_column: str = "value") -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=TRAJECTORY_COLUMNS)
    if not frame.empty:
        frame = frame.sort_values(["step", "target", "source", "metric"], kind="mergesort")
    frame["config_hash"] = config_hash
    frame["tool_version"] = TOOL_VERSION
    return frame.rename(columns={"value": value_column}).reset_index(drop=True)


def write_trajectory_csv(rows: Sequence[dict], path: str, config_hash: str, value_column: str = "value") -> str:
    """
    Write rows sorted by (step, target, source, metric).

    LLC exports name the value column ``lambda_hat``; every file carries the
    config hash and tool version on each row.
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame = trajectory_frame(rows, config_hash, value_column)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} trajectory rows to {path}")
    return path


def read_trajectory_csv(path: str) -> pd.DataFrame:
    """
    Parse a trajectory CSV back into the common schema (value column ``value``).

    Raises:
        TrajectoryParseError: naming the first offending line.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise TrajectoryParseError(path, int(match.group(1)) if match else None, str(e)) from None
    except pd.errors.EmptyDataError:
        raise TrajectoryParseError(path, 1, "file is empty") from None
    if "lambda_hat" in frame.columns and "value" not in frame.columns:
        frame = frame.rename(columns={"lambda_hat": "value"})
    missing = [c for c in ("step", "target", "source", "metric", "value") if c not in frame.columns]
    if missing:
        raise TrajectoryParseError(path, 1, f"missing columns {missing}")
    steps, values = [], []
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + 2
        try:
            steps.append(int(row.step))
        except ValueError:
            raise TrajectoryParseError(path, line, f"step '{row.step}' is not an integer") from None
        if row.value == "":
            values.append(float("nan"))
            continue
        try:
            values.append(float(row.value))
        except ValueError:
            raise TrajectoryParseError(path, line, f"value '{row.value}' is not a number") from None
    frame["step"] = pd.Series(steps, dtype="int64")
    frame["value"] = pd.Series(values, dtype="float64")
    return frame


def write_json(path: str, obj, config_hash: str) -> str:
    """Deterministic JSON export with the config hash and tool version embedded."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    document = {"config_hash": config_hash, "tool_version": TOOL_VERSION, **obj}
    with open(path, "w") as f:
        f.write(canonical_json(document))
    return path
