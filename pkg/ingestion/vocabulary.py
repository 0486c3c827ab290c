"""
Frozen weather vocabulary: one unit-norm embedding row per weather category
"""

from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from modules.autodiff import Tensor
from modules.config import WEATHER_CATEGORIES


class WeatherVocabulary:
    """Seven orthonormal-or-loaded category rows in the fixed category order"""

    def __init__(self, matrix: np.ndarray, names: Sequence[str] = WEATHER_CATEGORIES):
        """
        Args:
            matrix: (7, d) array of unit-norm rows
            names: Category names; must equal the fixed category order
        """
        matrix = np.asarray(matrix, dtype=np.float64)
        if tuple(names) != WEATHER_CATEGORIES:
            raise ValueError(f"Vocabulary rows must be ordered {list(WEATHER_CATEGORIES)}, got {list(names)}")
        if matrix.ndim != 2 or matrix.shape[0] != len(WEATHER_CATEGORIES):
            raise ValueError(f"Vocabulary needs exactly {len(WEATHER_CATEGORIES)} rows, got shape {matrix.shape}")
        norms = np.linalg.norm(matrix, axis=1)
        if not np.all(np.abs(norms - 1.0) < 1e-9):
            raise ValueError(f"Vocabulary rows must be unit-norm, got norms {norms.round(6).tolist()}")
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self.names = tuple(names)
        self._tensor = Tensor(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, category: Union[int, str]) -> np.ndarray:
        return self.matrix[self.index(category)]

    def index(self, category: Union[int, str]) -> int:
        if isinstance(category, str):
            return self.names.index(category)
        return int(category)

    def as_tensor(self) -> Tensor:
        """Constant tensor; never receives gradients"""
        return self._tensor

    def cosine_similarity(self, vec: np.ndarray) -> np.ndarray:
        """Cosine similarity of ``vec`` against every category row"""
        vec = np.asarray(vec, dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            return np.zeros(len(self.names))
        return self.matrix @ vec / norm

    @classmethod
    def build(cls, dim: int, seed: int) -> "WeatherVocabulary":
        """
        Seeded Gaussian rows orthonormalised by Gram-Schmidt

        Args:
            dim: Embedding width; must be at least the number of categories
            seed: Generator seed recorded in the run config
        """
        count = len(WEATHER_CATEGORIES)
        if dim < count:
            raise ValueError(f"Vocabulary width {dim} is smaller than the {count} categories")
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(count, dim))
        rows: List[np.ndarray] = []
        for v in raw:
            for u in rows:
                v = v - np.dot(v, u) * u
            rows.append(v / np.linalg.norm(v))
        return cls(np.stack(rows))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WeatherVocabulary":
        """
        Load the text format: one line per category, ``name v1 v2 ... vd``

        Args:
            path: Vocabulary file path
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Vocabulary file not found: {path}")
        names, rows = [], []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad vocabulary value ({exc})") from exc
            names.append(parts[0])
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError(f"{path}: rows have differing widths {sorted(widths)}")
        return cls(np.array(rows), names)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [" ".join([name] + [repr(float(v)) for v in row]) for name, row in zip(self.names, self.matrix)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def load_vocabulary(dim: int, seed: int, path: Optional[Union[str, Path]] = None) -> WeatherVocabulary:
    """Vocabulary from file when a path is configured, otherwise the seeded build"""
    if path:
        vocab = WeatherVocabulary.load(path)
        if vocab.dim != dim:
            raise ValueError(f"Vocabulary width {vocab.dim} does not match token width {dim}")
        return vocab
    return WeatherVocabulary.build(dim, seed)
