"""
Balanced dataset generation pipeline.

Workflow:
1. Build (or load) the weather vocabulary
2. Generate a category-balanced list of scene seeds per split
3. Generate every scene, collecting per-scene failures instead of aborting
4. Write each split as a JSON-lines file headed by the config hash and seed
"""

from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ingestion.dataset_io import write_dataset
from ingestion.scene_generator import SceneSample, generate_scene
from ingestion.vocabulary import WeatherVocabulary, load_vocabulary
from ingestion.weather_profiles import build_profiles
from modules.app_logger import setup_logger
from modules.config import WEATHER_CATEGORIES, RunConfig

logger = setup_logger(name="dataset_pipeline", log_file="dataset_pipeline.log")

SPLIT_CODES = {"train": 0, "test": 1}
DATA_SECTIONS = ("grid", "model", "sim", "data")


def scene_seed(run_seed: int, split: str, index: int) -> int:
    """Stable per-scene seed derived from (run seed, split, index)"""
    state = np.random.SeedSequence([run_seed, SPLIT_CODES[split], index]).generate_state(1)
    return int(state[0])


class DatasetPipeline:
    """Generate balanced 7-category train/test splits for one run config"""

    def __init__(self, config: RunConfig, vocab: Optional[WeatherVocabulary] = None):
        """
        Args:
            config: Resolved run config (grid, sim and data sections are used)
            vocab: Vocabulary; built from the sim seed when omitted
        """
        self.config = config
        self.roi = config.grid.roi()
        self.profiles = build_profiles(config.sim)
        self.vocab = vocab or load_vocabulary(config.model.token_dim, config.sim.vocab_seed,
                                              config.sim.vocab_path or None)

    def generate_split(self, split: str, per_category: int) -> Tuple[List[SceneSample], Dict[str, Any]]:
        """
        Generate ``per_category`` scenes for every weather category

        Args:
            split: 'train' or 'test'
            per_category: Scenes per category

        Returns:
            (scenes, summary) where summary counts scenes per category and lists errors
        """
        sim = self.config.sim
        image_shape = (self.config.model.image_height, self.config.model.image_width)
        summary = {
            "split": split,
            "per_category": {name: 0 for name in WEATHER_CATEGORIES},
            "reduced_cars": 0,
            "errors": [],
        }
        scenes: List[SceneSample] = []
        for i in range(per_category * len(WEATHER_CATEGORIES)):
            category = WEATHER_CATEGORIES[i % len(WEATHER_CATEGORIES)]
            seed = scene_seed(self.config.seed, split, i)
            n_cars = int(np.random.default_rng(seed).integers(sim.min_cars, sim.max_cars + 1))
            try:
                scene = generate_scene(seed, self.roi, self.profiles[category], n_cars, self.vocab, sim, image_shape)
            except Exception as e:
                logger.error(f"{split} scene {i} ({category}) failed: {e}")
                summary["errors"].append({"index": i, "category": category, "error": str(e)})
                continue
            if scene.boxes.shape[0] < n_cars:
                summary["reduced_cars"] += 1
            summary["per_category"][category] += 1
            scenes.append(scene)
        return scenes, summary

    def run(self, out_dir: str) -> Dict[str, Any]:
        """
        Generate and write both splits

        Args:
            out_dir: Output folder for the split files

        Returns:
            Summary of operations (written counts, per-category histogram, errors)
        """
        out = Path(out_dir)
        summary = {
            "written": {},
            "files": {},
            "per_category": {},
            "errors": [],
            "config_hash": self.config.config_hash(DATA_SECTIONS),
            "seed": self.config.seed,
            "timestamp": datetime.now().isoformat(),
        }
        splits = (("train", self.config.data.train_per_category, self.config.data.train_file),
                  ("test", self.config.data.test_per_category, self.config.data.test_file))
        for split, per_category, filename in splits:
            logger.info(f"Generating {split} split: {per_category} scenes per category")
            scenes, split_summary = self.generate_split(split, per_category)
            path = out / filename
            metadata = {"config_hash": summary["config_hash"], "seed": self.config.seed, "split": split}
            summary["written"][split] = write_dataset(scenes, path, metadata)
            summary["files"][split] = str(path)
            summary["per_category"][split] = split_summary["per_category"]
            summary["errors"].extend(split_summary["errors"])
            logger.info(f"Wrote {summary['written'][split]} {split} scenes to {path} "
                        f"({split_summary['reduced_cars']} with fewer cars than requested)")
        return summary
