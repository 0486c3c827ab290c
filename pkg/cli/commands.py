"""
Command implementations behind ``main.py``: gen-data, train, eval, inspect, gradcheck.

Every command takes a resolved RunConfig and writes its artefacts (with the resolved config
and seed) into an output folder.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd

from ingestion.dataset_io import load_dataset
from ingestion.dataset_pipeline import DatasetPipeline, scene_seed
from ingestion.scene_generator import SceneSample, generate_scene
from ingestion.vocabulary import WeatherVocabulary, load_vocabulary
from ingestion.weather_profiles import build_profiles
from modules.app_logger import setup_logger
from modules.checkpoint import load_model
from modules.config import WEATHER_CATEGORIES, RunConfig
from modules.evaluation import EvalReport, evaluate_detections
from modules.gradcheck import GradcheckReport, gradcheck_model
from modules.model import RoutedFusionDetector, routing_rows
from modules.run_logger import category_means, write_routing_report
from modules.trainer import Trainer, TrainResult

logger = setup_logger()

PathLike = Union[str, Path]


def _vocabulary(config: RunConfig) -> WeatherVocabulary:
    return load_vocabulary(config.model.token_dim, config.sim.vocab_seed, config.sim.vocab_path or None)


def resolve_split(data: PathLike, split: str, config: RunConfig) -> Path:
    """A dataset file, or the split file inside a gen-data output folder"""
    path = Path(data)
    if path.is_dir():
        path = path / (config.data.train_file if split == "train" else config.data.test_file)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    return path


def _trained_model(config: RunConfig, ckpt: PathLike) -> RoutedFusionDetector:
    model = RoutedFusionDetector(config)
    load_model(model, ckpt)
    return model


def write_run_config(config: RunConfig, out_dir: PathLike) -> Path:
    """resolved_config.ini and seed.txt, as the trainer writes them"""
    out = Path(out_dir)
    path = config.write(out / "resolved_config.ini")
    (out / "seed.txt").write_text(f"{config.seed}\n", encoding="utf-8")
    return path


def cmd_gen_data(config: RunConfig, out_dir: PathLike) -> Dict[str, Any]:
    out = Path(out_dir)
    pipeline = DatasetPipeline(config, _vocabulary(config))
    summary = pipeline.run(str(out))
    write_run_config(config, out)
    print(f"Wrote {summary['written'].get('train', 0)} train and {summary['written'].get('test', 0)} "
          f"test scenes to {out}")
    if summary["errors"]:
        print(f"{len(summary['errors'])} scenes failed; see the dataset_pipeline log")
    return summary


def cmd_train(config: RunConfig, data: PathLike, out_dir: PathLike) -> TrainResult:
    vocab = _vocabulary(config)
    scenes = load_dataset(resolve_split(data, "train", config))
    logger.info(f"Loaded {len(scenes)} training scenes")
    trainer = Trainer(config, vocab.as_tensor(), out_dir)
    result = trainer.train(scenes)
    print(f"Trained {result.steps} steps; best epoch {result.best_epoch} (loss {result.best_loss:.5f})")
    for name, path in result.files.items():
        print(f"  {name}: {path}")
    return result


def _predict_all(config: RunConfig, model: RoutedFusionDetector, scenes: List[SceneSample]):
    vocab = _vocabulary(config).as_tensor()
    predictions, ground_truth, categories, weights = {}, {}, {}, []
    for i, scene in enumerate(scenes):
        prepared = model.prepare(scene, scene_id=i, with_targets=False)
        dets, w = model.predict(prepared, vocab)
        predictions[i] = dets
        ground_truth[i] = prepared.gts
        categories[i] = WEATHER_CATEGORIES[scene.weather]
        weights.append(w)
    return predictions, ground_truth, categories, weights


def cmd_eval(config: RunConfig, data: PathLike, ckpt: PathLike, out_dir: PathLike) -> Tuple[EvalReport, List[Dict]]:
    """Per-category AP table plus the routing report over the test split"""
    model = _trained_model(config, ckpt)
    scenes = load_dataset(resolve_split(data, "test", config))
    predictions, ground_truth, categories, weights = _predict_all(config, model, scenes)
    report = evaluate_detections(predictions, ground_truth, categories, config.eval.iou_thresholds,
                                 config.eval.ap_points, WEATHER_CATEGORIES)

    out = Path(out_dir)
    rows = routing_rows(list(range(len(scenes))), [categories[i] for i in range(len(scenes))], weights)
    report.write_csv(out / "eval_report.csv")
    write_routing_report(rows, out / "routing_report.csv")
    write_run_config(config, out)

    print(report.format_table())
    print(f"\nEval report: {out / 'eval_report.csv'}")
    print(f"Routing report: {out / 'routing_report.csv'}")
    return report, rows


def cmd_inspect(config: RunConfig, data: PathLike, ckpt: PathLike, out_dir: PathLike) -> pd.DataFrame:
    """Routing weights per test scene and their per-category means"""
    model = _trained_model(config, ckpt)
    scenes = load_dataset(resolve_split(data, "test", config))
    _, _, categories, weights = _predict_all(config, model, scenes)
    rows = routing_rows(list(range(len(scenes))), [categories[i] for i in range(len(scenes))], weights)
    path = write_routing_report(rows, Path(out_dir) / "routing_report.csv")
    write_run_config(config, out_dir)
    means = category_means(rows)
    print(means.to_string(float_format=lambda v: f"{v:.4f}"))
    print(f"\nRouting report: {path}")
    return means


def gradcheck_scenes(config: RunConfig, vocab: WeatherVocabulary, seed: int) -> List[SceneSample]:
    """A clear-weather and a heavy-snow scene with one car each"""
    profiles = build_profiles(config.sim)
    roi = config.grid.roi()
    image_shape = (config.model.image_height, config.model.image_width)
    return [generate_scene(scene_seed(seed, "test", i), roi, profiles[name], 1, vocab, config.sim, image_shape)
            for i, name in enumerate(("normal", "heavysnow"))]


def cmd_gradcheck(config: RunConfig, seed: Optional[int] = None, entries_per_group: int = 3,
                  tolerance: float = 1e-3) -> GradcheckReport:
    seed = config.seed if seed is None else seed
    vocab = _vocabulary(config)
    model = RoutedFusionDetector(config)
    batch = [model.prepare(s, scene_id=i) for i, s in enumerate(gradcheck_scenes(config, vocab, seed))]
    report = gradcheck_model(model, batch, vocab.as_tensor(), entries_per_group=entries_per_group,
                             tolerance=tolerance)
    print(report.format())
    for failure in report.failures:
        logger.error(f"gradcheck group '{failure.group}' failed: max rel err {failure.max_rel_error:.3e} "
                     f"at {failure.worst_entry}")
    return report
