"""
Per-category sensor degradation severities and pseudo-image statistics
"""

from dataclasses import dataclass
from typing import Dict, Tuple, Union

from modules.config import WEATHER_CATEGORIES, SimConfig


@dataclass(frozen=True)
class WeatherProfile:
    index: int
    name: str
    lidar_severity: float
    radar_severity: float
    # pseudo-image statistics
    brightness: Tuple[float, float, float]
    contrast: float
    noise: float
    streaks: float
    speckle: float

    @property
    def adverse(self) -> bool:
        return self.index != 0


# brightness (r, g, b), contrast, noise, streaks, speckle
_IMAGE_STATS: Dict[str, Tuple[Tuple[float, float, float], float, float, float, float]] = {
    "normal": ((0.55, 0.60, 0.70), 0.30, 0.03, 0.0, 0.0),
    "overcast": ((0.50, 0.52, 0.55), 0.22, 0.04, 0.0, 0.0),
    "fog": ((0.75, 0.75, 0.75), 0.06, 0.03, 0.0, 0.0),
    "rain": ((0.35, 0.38, 0.42), 0.20, 0.06, 0.35, 0.0),
    "sleet": ((0.55, 0.57, 0.60), 0.12, 0.08, 0.25, 0.15),
    "lightsnow": ((0.70, 0.72, 0.76), 0.15, 0.06, 0.0, 0.10),
    "heavysnow": ((0.85, 0.86, 0.88), 0.08, 0.08, 0.0, 0.30),
}


def build_profiles(sim: SimConfig) -> Dict[str, WeatherProfile]:
    """Profiles for every category with severities taken from the sim config"""
    profiles = {}
    for i, name in enumerate(WEATHER_CATEGORIES):
        brightness, contrast, noise, streaks, speckle = _IMAGE_STATS[name]
        profiles[name] = WeatherProfile(
            index=i,
            name=name,
            lidar_severity=float(sim.lidar_severity[i]),
            radar_severity=float(sim.radar_severity[i]),
            brightness=brightness,
            contrast=contrast,
            noise=noise,
            streaks=streaks,
            speckle=speckle,
        )
    return profiles


def profile_for(category: Union[int, str], sim: SimConfig) -> WeatherProfile:
    name = WEATHER_CATEGORIES[category] if isinstance(category, int) else category
    return build_profiles(sim)[name]
