"""
JSON-lines scene dataset codec.

The first line is a metadata object (format tag, config hash, seed); each following line
is one scene with keys ``lidar``, ``radar``, ``image``, ``prompt``, ``weather``, ``boxes``.
Floats are written with their shortest round-tripping decimal text, so reading back gives
bit-identical arrays.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np

from ingestion.scene_generator import SceneSample
from modules.config import WEATHER_CATEGORIES

FORMAT_TAG = "routefuse-scenes/1"
RECORD_KEYS = ("lidar", "radar", "image", "prompt", "weather", "boxes")


class DatasetFormatError(ValueError):
    """Malformed dataset record; names the line number and field"""

    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}, field '{field}': {message}")
        self.line = line
        self.field = field


def scene_to_record(scene: SceneSample) -> Dict[str, Any]:
    return {
        "lidar": scene.lidar.tolist(),
        "radar": scene.radar.tolist(),
        "image": scene.image.tolist(),
        "prompt": scene.prompt.tolist(),
        "weather": int(scene.weather),
        "boxes": scene.boxes.tolist(),
    }


def _array(record: Dict[str, Any], key: str, line: int, width: Optional[int] = None, ndim: int = 2) -> np.ndarray:
    try:
        arr = np.array(record[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(line, key, f"not a numeric array ({exc})") from None
    if width is not None and arr.size == 0:
        return np.zeros((0, width))
    if arr.ndim != ndim or (width is not None and arr.shape[1] != width):
        expected = f"(N, {width})" if width is not None else f"{ndim}-d"
        raise DatasetFormatError(line, key, f"expected shape {expected}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DatasetFormatError(line, key, "non-finite value")
    return arr


def record_to_scene(record: Dict[str, Any], line: int) -> SceneSample:
    if not isinstance(record, dict):
        raise DatasetFormatError(line, "record", "expected a JSON object")
    for key in RECORD_KEYS:
        if key not in record:
            raise DatasetFormatError(line, key, "missing")
    weather = record["weather"]
    if not isinstance(weather, int) or isinstance(weather, bool) or not 0 <= weather < len(WEATHER_CATEGORIES):
        raise DatasetFormatError(line, "weather", f"expected an index 0..{len(WEATHER_CATEGORIES) - 1}, got {weather!r}")
    image = _array(record, "image", line, ndim=3)
    if image.shape[0] != 3:
        raise DatasetFormatError(line, "image", f"expected 3 channels, got shape {image.shape}")
    return SceneSample(
        lidar=_array(record, "lidar", line, width=4),
        radar=_array(record, "radar", line, width=4),
        image=image,
        prompt=_array(record, "prompt", line, ndim=1),
        weather=weather,
        boxes=_array(record, "boxes", line, width=7),
    )


def write_dataset(samples: Iterable[SceneSample], path: Union[str, Path],
                  metadata: Optional[Dict[str, Any]] = None) -> int:
    """
    Write scenes to a JSON-lines file

    Args:
        samples: Scenes to write
        path: Output file path
        metadata: Extra metadata (config hash, seed, split) for the header line

    Returns:
        Number of scenes written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_TAG}
    header.update(metadata or {})
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for scene in samples:
            f.write(json.dumps(scene_to_record(scene), separators=(",", ":")) + "\n")
            count += 1
    return count


def read_metadata(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, "metadata", f"invalid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise DatasetFormatError(1, "format", f"expected format tag {FORMAT_TAG!r}")
    return header


def read_dataset(path: Union[str, Path]) -> Iterator[SceneSample]:
    """
    Stream scenes from a JSON-lines file

    Args:
        path: Dataset file path

    Yields:
        SceneSample per record line
    """
    path = Path(path)
    read_metadata(path)
    with open(path, "r", encoding="utf-8") as f:
        f.readline()
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(line_no, "record", f"invalid JSON ({exc.msg})") from None
            yield record_to_scene(record, line_no)


def load_dataset(path: Union[str, Path]) -> List[SceneSample]:
    return list(read_dataset(path))
