"""
Synthetic weather-labelled scene generator.

Cars are placed without overlap, LiDAR and radar returns are sampled on the box faces
that face the sensor, and both point sets are degraded according to the weather profile.
Every random draw comes from a per-purpose generator spawned from the scene seed, so a
seed fully determines the scene.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ingestion.vocabulary import WeatherVocabulary
from ingestion.weather_profiles import WeatherProfile
from modules.config import SimConfig
from modules.geometry import Box3D, bev_intersection_area, wrap_angle
from modules.voxel_grid import RoiSpec

logger = logging.getLogger(__name__)

CAR_SIZE = (2.1, 4.2, 2.0)  # w, l, h
PLACEMENT_GAP = 0.3
MIN_SENSOR_DISTANCE = 3.0


class PlacementError(RuntimeError):
    """Raised when not even a single car fits in the ROI"""


@dataclass
class SceneSample:
    lidar: np.ndarray
    radar: np.ndarray
    image: np.ndarray
    prompt: np.ndarray
    weather: int
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))

    def gt_boxes(self) -> List[Box3D]:
        return [Box3D.from_array(row) for row in self.boxes]

    def same_as(self, other: "SceneSample") -> bool:
        """Bit-exact equality of every field"""
        return (self.weather == other.weather
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("lidar", "radar", "image", "prompt", "boxes")))


@dataclass(frozen=True)
class SurfaceSamples:
    points: np.ndarray
    car_ids: np.ndarray


def _spawn(seed: int, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def place_cars(rng: np.random.Generator, roi: RoiSpec, n_cars: int, sim: SimConfig) -> Optional[List[Box3D]]:
    """
    Place ``n_cars`` jittered car boxes without BEV overlap

    Args:
        rng: Placement generator
        roi: Region the box centres (and footprints) must stay inside
        n_cars: Number of cars requested
        sim: Simulator settings (size jitter, retry budget, ground height)

    Returns:
        The placed boxes, or None when some car could not be placed within the retry budget
    """
    boxes: List[Box3D] = []
    base_w, base_l, base_h = CAR_SIZE
    jitter = sim.size_jitter
    for _ in range(n_cars):
        placed = None
        for _ in range(sim.placement_retries):
            w, l, h = (base * (1.0 + rng.uniform(-jitter, jitter)) for base in (base_w, base_l, base_h))
            theta = (0.0 if rng.random() < 0.7 else math.pi / 2) + rng.normal(0.0, 0.1)
            radius = 0.5 * math.hypot(w, l)
            x_lo = max(roi.x_range[0] + radius, MIN_SENSOR_DISTANCE)
            x_hi = roi.x_range[1] - radius
            y_lo, y_hi = roi.y_range[0] + radius, roi.y_range[1] - radius
            if x_hi <= x_lo or y_hi <= y_lo:
                continue
            candidate = Box3D(rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi), sim.ground_z + 0.5 * h,
                              w, l, h, wrap_angle(theta))
            padded = Box3D(candidate.x, candidate.y, candidate.z, w + PLACEMENT_GAP, l + PLACEMENT_GAP, h,
                           candidate.theta)
            if all(bev_intersection_area(padded, other) == 0.0 for other in boxes):
                placed = candidate
                break
        if placed is None:
            return None
        boxes.append(placed)
    return boxes


def _box_faces(box: Box3D):
    """(centre, outward normal, axis1 * extent1, axis2 * extent2) per face"""
    c, s = math.cos(box.theta), math.sin(box.theta)
    u = np.array([c, s, 0.0])
    v = np.array([-s, c, 0.0])
    z = np.array([0.0, 0.0, 1.0])
    centre = np.array([box.x, box.y, box.z])
    return [
        (centre + u * box.l / 2, u, v * box.w, z * box.h),
        (centre - u * box.l / 2, -u, v * box.w, z * box.h),
        (centre + v * box.w / 2, v, u * box.l, z * box.h),
        (centre - v * box.w / 2, -v, u * box.l, z * box.h),
        (centre + z * box.h / 2, z, u * box.l, v * box.w),
    ]


def sample_car_surfaces(rng: np.random.Generator, boxes: List[Box3D], density: float, sim: SimConfig) -> SurfaceSamples:
    """
    Uniform samples on sensor-facing faces; density falls off with squared range

    Args:
        rng: Sampling generator
        boxes: Car boxes
        density: Returns per square metre at or inside the falloff range
        sim: Simulator settings (sensor height, falloff range)

    Returns:
        (N, 3) surface points and the car index of each point
    """
    sensor = np.array([0.0, 0.0, sim.sensor_height])
    chunks, ids = [], []
    for car, box in enumerate(boxes):
        for centre, normal, a, b in _box_faces(box):
            if np.dot(normal, sensor - centre) <= 0.0:
                continue
            area = float(np.linalg.norm(a) * np.linalg.norm(b))
            rng_xy = max(float(np.hypot(centre[0], centre[1])), 1e-6)
            falloff = min(1.0, (sim.range_falloff / rng_xy) ** 2)
            count = int(rng.poisson(density * area * falloff))
            if count == 0:
                continue
            coeffs = rng.uniform(-0.5, 0.5, size=(count, 2))
            chunks.append(centre + coeffs[:, :1] * a + coeffs[:, 1:] * b)
            ids.append(np.full(count, car, dtype=np.int64))
    if not chunks:
        return SurfaceSamples(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    return SurfaceSamples(np.concatenate(chunks), np.concatenate(ids))


def degrade_lidar(rng: np.random.Generator, points: np.ndarray, severity: float, sim: SimConfig) -> np.ndarray:
    """Drop returns with probability coeff * s_L and jitter the survivors"""
    keep = rng.random(points.shape[0]) < 1.0 - sim.lidar_keep_coeff * severity
    kept = points[keep].copy()
    sigma = sim.lidar_noise_base + sim.lidar_noise_coeff * severity
    kept[:, :3] += rng.normal(0.0, sigma, size=(kept.shape[0], 3))
    return kept


def degrade_radar(rng: np.random.Generator, points: np.ndarray, severity: float, sim: SimConfig) -> np.ndarray:
    keep = rng.random(points.shape[0]) < 1.0 - sim.radar_keep_coeff * severity
    kept = points[keep].copy()
    kept[:, :3] += rng.normal(0.0, sim.radar_noise, size=(kept.shape[0], 3))
    return kept


def _ground_points(rng: np.random.Generator, roi: RoiSpec, count: int, sim: SimConfig) -> np.ndarray:
    xy = np.column_stack([rng.uniform(*roi.x_range, size=count), rng.uniform(*roi.y_range, size=count)])
    z = sim.ground_z + rng.normal(0.0, 0.02, size=count)
    return np.column_stack([xy, z])


def simulate_lidar(rng: np.random.Generator, roi: RoiSpec, boxes: List[Box3D], profile: WeatherProfile,
                   sim: SimConfig) -> np.ndarray:
    surface = sample_car_surfaces(rng, boxes, sim.lidar_density, sim).points
    ground = _ground_points(rng, roi, sim.ground_points, sim)
    raw = np.vstack([
        np.column_stack([surface, rng.uniform(0.3, 1.0, size=surface.shape[0])]),
        np.column_stack([ground, rng.uniform(0.0, 0.2, size=ground.shape[0])]),
    ])
    points = degrade_lidar(rng, raw, profile.lidar_severity, sim)

    clutter = int(rng.poisson(sim.backscatter_per_severity * profile.lidar_severity)) if profile.adverse else 0
    if clutter:
        ranges = rng.uniform(1.0, 8.0, size=clutter)
        azimuth = rng.uniform(-0.6, 0.6, size=clutter)
        scatter = np.column_stack([
            ranges * np.cos(azimuth),
            ranges * np.sin(azimuth),
            sim.sensor_height + rng.uniform(-1.0, 1.0, size=clutter),
            rng.uniform(0.0, 0.1, size=clutter),
        ])
        points = np.vstack([points, scatter])
    return points


def simulate_radar(rng: np.random.Generator, roi: RoiSpec, boxes: List[Box3D], profile: WeatherProfile,
                   sim: SimConfig) -> np.ndarray:
    speeds = rng.uniform(-sim.max_speed, sim.max_speed, size=len(boxes))
    surface = sample_car_surfaces(rng, boxes, sim.lidar_density * sim.radar_density_ratio, sim)
    pts = surface.points
    sensor = np.array([0.0, 0.0, sim.sensor_height])
    if pts.shape[0]:
        headings = np.array([[math.cos(b.theta), math.sin(b.theta), 0.0] for b in boxes])
        velocity = headings[surface.car_ids] * speeds[surface.car_ids, None]
        rays = pts - sensor
        rays /= np.maximum(np.linalg.norm(rays, axis=1, keepdims=True), 1e-9)
        doppler = np.einsum("nd,nd->n", velocity, rays) + rng.normal(0.0, sim.doppler_noise, size=pts.shape[0])
    else:
        doppler = np.zeros(0)
    clutter = sim.radar_clutter_points
    clutter_pts = np.column_stack([
        rng.uniform(*roi.x_range, size=clutter),
        rng.uniform(*roi.y_range, size=clutter),
        rng.uniform(sim.ground_z, sim.ground_z + 2.0, size=clutter),
        rng.normal(0.0, sim.doppler_noise, size=clutter),
    ])
    raw = np.vstack([np.column_stack([pts, doppler]), clutter_pts])
    return degrade_radar(rng, raw, profile.radar_severity, sim)


def render_pseudo_image(rng: np.random.Generator, profile: WeatherProfile, height: int, width: int) -> np.ndarray:
    """3 x H x W image in [0, 1] with category brightness, contrast and texture"""
    texture = rng.normal(size=(height, width))
    # 3x3 box blur with wrap-around
    texture = sum(np.roll(np.roll(texture, dy, axis=0), dx, axis=1)
                  for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    ramp = 0.5 - (np.arange(height)[:, None] + 0.5) / height
    image = np.empty((3, height, width))
    for ch in range(3):
        image[ch] = profile.brightness[ch] + profile.contrast * (ramp + texture)
    image += rng.normal(0.0, profile.noise, size=image.shape)
    if profile.streaks > 0.0:
        columns = rng.random(width) < profile.streaks
        image[:, :, columns] -= 0.15
    if profile.speckle > 0.0:
        flakes = rng.random((height, width)) < 0.3 * profile.speckle
        image[:, flakes] = 1.0
    return np.clip(image, 0.0, 1.0)


def synthesize_prompt(rng: np.random.Generator, vocab: WeatherVocabulary, weather: int, noise: float) -> np.ndarray:
    p = vocab.row(weather) + rng.normal(0.0, noise, size=vocab.dim)
    return p / np.linalg.norm(p)


def generate_scene(seed: int, roi: RoiSpec, profile: WeatherProfile, n_cars: int, vocab: WeatherVocabulary,
                   sim: SimConfig, image_shape: Tuple[int, int] = (16, 16)) -> SceneSample:
    """
    Generate one scene as a pure function of its inputs

    Args:
        seed: Scene seed
        roi: Region of interest; all GT centres fall inside it
        profile: Weather profile (category and severities)
        n_cars: Requested car count (1..6); reduced when placement fails
        vocab: Weather vocabulary used for the prompt embedding
        sim: Simulator settings
        image_shape: Pseudo-image (height, width)

    Returns:
        SceneSample
    """
    place_rng, lidar_rng, radar_rng, image_rng, prompt_rng = _spawn(seed, 5)
    boxes = None
    count = n_cars
    while count >= 1:
        boxes = place_cars(place_rng, roi, count, sim)
        if boxes is not None:
            break
        logger.debug(f"Scene {seed}: could not place {count} cars, retrying with {count - 1}")
        count -= 1
    if not boxes:
        raise PlacementError(f"Scene {seed}: no car fits in ROI {roi}")

    return SceneSample(
        lidar=simulate_lidar(lidar_rng, roi, boxes, profile, sim),
        radar=simulate_radar(radar_rng, roi, boxes, profile, sim),
        image=render_pseudo_image(image_rng, profile, *image_shape),
        prompt=synthesize_prompt(prompt_rng, vocab, profile.index, sim.prompt_noise),
        weather=profile.index,
        boxes=np.array([b.to_array() for b in boxes]),
    )
