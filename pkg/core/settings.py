"""Run configuration persisted as JSON or flat key=value text.

Provides load_settings(), save_settings(), parse_value() and RunConfig with
builders for the typed parameter objects of each module.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from core.errors import ParameterError

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS: Dict[str, Any] = {
    "seed": 0,
    # synthetic scenes
    "width": 64,
    "height": 64,
    "shifts": "0,0;5,0;0,5;5,5",
    "spacing": 20,
    "bar_width": 2,
    "fence_angle": 0.0,
    "fence_intensity": 230.0,
    "fence_offset": 10,
    "noise_sigma": 1.0,
    "negatives_per_joint": 3,
    # max-margin classifier
    "svm_kind": "linear",
    "svm_c": 10.0,
    "svm_gamma": 1.0 / 1296.0,
    "cv_folds": 5,
    "c_grid": "",
    "gamma_grid": "",
    # convolutional network
    "cnn_batch_size": 50,
    "cnn_epochs": 100,
    "cnn_learning_rate": 1.0,
    "cnn_flip": True,
    "cnn_center_crop": 0,
    # detection
    "hog_smooth_sigma": 0.0,
    "hog_equalize": False,
    "stride": 2,
    "scale_ratio": 1.2,
    "min_scale": 1.0,
    "max_scale": 1.0,
    "score_threshold": 0.0,
    "dominance_radius_factor": 0.5,
    "link_tolerance": 0.25,
    "render_bar_width": 0,
    "match_radius": 5.0,
    # registration
    "register_mode": "global",
    "max_shift": 16,
    "corner_count": 200,
    "min_distance": 5,
    "patch_size": 11,
    "search_radius": 8,
    "ransac_threshold": 2.0,
    "ransac_iterations": 500,
    # fusion
    "lambda": 10.0,
    "labels": 256,
    "iterations": 40,
    "schedule": "checkerboard",
    "keep_reference": False,
    "reference": 0,
}


def _at_least(low: float) -> Callable[[Any], bool]:
    return lambda v: v >= low


def _above(low: float) -> Callable[[Any], bool]:
    return lambda v: v > low


def _one_of(*choices: str) -> Callable[[Any], bool]:
    return lambda v: v in choices


def _any(_: Any) -> bool:
    return True


def _shift_list(text: str) -> bool:
    try:
        return len(parse_shifts(text)) >= 1
    except ValueError:
        return False


def _float_list(text: str) -> bool:
    try:
        return all(v > 0 for v in parse_floats(text))
    except ValueError:
        return False


# key -> (type, check, description of the accepted range)
SCHEMA: Dict[str, Tuple[type, Callable[[Any], bool], str]] = {
    "seed": (int, _at_least(0), ">= 0"),
    "width": (int, _at_least(11), ">= 11"),
    "height": (int, _at_least(11), ">= 11"),
    "shifts": (str, _shift_list, "'dx,dy;dx,dy;...' with at least one pair"),
    "spacing": (int, _at_least(2), ">= 2"),
    "bar_width": (int, _at_least(1), ">= 1"),
    "fence_angle": (float, lambda v: 0.0 <= v < 90.0, "in [0, 90)"),
    "fence_intensity": (float, lambda v: 0.0 <= v <= 255.0, "in [0, 255]"),
    "fence_offset": (int, _at_least(0), ">= 0"),
    "noise_sigma": (float, _at_least(0.0), ">= 0"),
    "negatives_per_joint": (int, _at_least(1), ">= 1"),
    "svm_kind": (str, _one_of("linear", "rbf"), "linear or rbf"),
    "svm_c": (float, _above(0.0), "> 0"),
    "svm_gamma": (float, _above(0.0), "> 0"),
    "cv_folds": (int, _at_least(2), ">= 2"),
    "c_grid": (str, lambda v: v == "" or _float_list(v), "comma-separated positive reals"),
    "gamma_grid": (str, lambda v: v == "" or _float_list(v), "comma-separated positive reals"),
    "cnn_batch_size": (int, _at_least(1), ">= 1"),
    "cnn_epochs": (int, _at_least(1), ">= 1"),
    "cnn_learning_rate": (float, _above(0.0), "> 0"),
    "cnn_flip": (bool, _any, "true or false"),
    "cnn_center_crop": (int, _at_least(0), ">= 0 (0 disables)"),
    "hog_smooth_sigma": (float, _at_least(0.0), ">= 0 (0 disables)"),
    "hog_equalize": (bool, _any, "true or false"),
    "stride": (int, _at_least(1), ">= 1"),
    "scale_ratio": (float, _above(1.0), "> 1"),
    "min_scale": (float, _at_least(1.0), ">= 1"),
    "max_scale": (float, _at_least(1.0), ">= 1"),
    "score_threshold": (float, _any, "any real"),
    "dominance_radius_factor": (float, _above(0.0), "> 0"),
    "link_tolerance": (float, lambda v: 0.0 < v < 1.0, "in (0, 1)"),
    "render_bar_width": (int, _at_least(0), ">= 0 (0 derives it from the texel width)"),
    "match_radius": (float, _above(0.0), "> 0"),
    "register_mode": (str, _one_of("global", "affine"), "global or affine"),
    "max_shift": (int, _at_least(0), ">= 0"),
    "corner_count": (int, _at_least(1), ">= 1"),
    "min_distance": (int, _at_least(1), ">= 1"),
    "patch_size": (int, lambda v: v >= 5 and v % 2 == 1, "odd and >= 5"),
    "search_radius": (int, _at_least(1), ">= 1"),
    "ransac_threshold": (float, _above(0.0), "> 0"),
    "ransac_iterations": (int, _at_least(1), ">= 1"),
    "lambda": (float, _at_least(0.0), ">= 0"),
    "labels": (int, _at_least(2), ">= 2"),
    "iterations": (int, _at_least(1), ">= 1"),
    "schedule": (str, _one_of("synchronous", "checkerboard"), "synchronous or checkerboard"),
    "keep_reference": (bool, _any, "true or false"),
    "reference": (int, _at_least(0), ">= 0"),
}


def parse_shifts(text: str) -> List[Tuple[int, int]]:
    """'0,0;5,0' -> [(0, 0), (5, 0)]."""
    shifts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        dx, dy = chunk.split(",")
        shifts.append((int(dx), int(dy)))
    return shifts


def format_shifts(shifts) -> str:
    return ";".join(f"{int(dx)},{int(dy)}" for dx, dy in shifts)


def parse_floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def get_settings_path() -> Path:
    """Get the path to the default settings file.

    If frozen (exe), use the executable directory.
    Otherwise, use the current working directory.
    """
    if getattr(sys, "frozen", False):
        base_path = Path(sys.executable).parent
    else:
        base_path = Path(".")
    return base_path / "settings.json"


SETTINGS_PATH = get_settings_path()


def parse_value(key: str, raw: Any) -> Any:
    """Coerce `raw` (text or JSON value) to the schema type of `key` and range-check it."""
    if key not in SCHEMA:
        raise ParameterError(f"unknown setting {key!r}")
    kind, check, allowed = SCHEMA[key]
    try:
        if kind is bool:
            if isinstance(raw, bool):
                value = raw
            elif str(raw).strip().lower() in ("1", "true", "yes", "on"):
                value = True
            elif str(raw).strip().lower() in ("0", "false", "no", "off"):
                value = False
            else:
                raise ValueError(raw)
        elif kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            value = int(str(raw).strip()) if isinstance(raw, str) else int(raw)
        elif kind is float:
            value = float(raw)
        else:
            value = str(raw).strip()
    except (TypeError, ValueError):
        raise ParameterError(f"setting {key!r}: cannot read {raw!r} as {kind.__name__}") from None
    if not check(value):
        raise ParameterError(f"setting {key!r}: {value!r} is out of range, expected {allowed}")
    return value


def _read_key_values(text: str, path: Path) -> Dict[str, str]:
    data: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        data[key.strip()] = value.strip()
    return data


def load_settings(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Read settings from `path` (JSON or key=value) and merge them onto the defaults.

    Without a path the default settings file is used when present.
    """
    settings = dict(DEFAULT_SETTINGS)
    if path is None:
        if not SETTINGS_PATH.exists():
            return settings
        path = SETTINGS_PATH
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ParameterError(f"{path}: expected a JSON object")
    else:
        data = _read_key_values(text, path)
    for key, raw in data.items():
        settings[key] = parse_value(key, raw)
    logger.debug("loaded %d settings from %s", len(data), path)
    return settings


def save_settings(settings: Mapping[str, Any], path: Optional[Union[str, Path]] = None) -> None:
    path = Path(path) if path is not None else SETTINGS_PATH
    values = {key: settings[key] for key in DEFAULT_SETTINGS if key in settings}
    if path.suffix.lower() == ".json":
        with path.open("w", encoding="utf-8") as fh:
            json.dump(values, fh, indent=2, ensure_ascii=False)
            fh.write("\n")
        return
    lines = []
    for key, value in values.items():
        text = ("true" if value else "false") if isinstance(value, bool) else str(value)
        lines.append(f"{key}={text}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class RunConfig:
    """Validated, immutable view of one merged settings dictionary."""

    values: Mapping[str, Any]

    def __post_init__(self) -> None:
        merged = dict(DEFAULT_SETTINGS)
        for key, raw in self.values.items():
            merged[key] = parse_value(key, raw)
        if merged["max_scale"] < merged["min_scale"]:
            raise ParameterError(
                f"max_scale {merged['max_scale']} is below min_scale {merged['min_scale']}"
            )
        object.__setattr__(self, "values", merged)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "RunConfig":
        return cls(load_settings(path))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig(merged)

    @property
    def shifts(self) -> List[Tuple[int, int]]:
        return parse_shifts(self["shifts"])

    def c_grid(self) -> List[float]:
        return parse_floats(self["c_grid"]) or [self["svm_c"]]

    def gamma_grid(self) -> List[float]:
        return parse_floats(self["gamma_grid"]) or [self["svm_gamma"]]

    # ------------------------------------------------------------------
    # Builders
    # ------------------------------------------------------------------

    def hog_params(self):
        from core.hog import HogParams

        return HogParams(smooth_sigma=self["hog_smooth_sigma"] or None, equalize=self["hog_equalize"])

    def detector_config(self):
        from core.lattice import DetectorConfig

        return DetectorConfig(
            stride=self["stride"],
            scale_ratio=self["scale_ratio"],
            min_scale=self["min_scale"],
            max_scale=self["max_scale"],
            score_threshold=self["score_threshold"],
            dominance_radius_factor=self["dominance_radius_factor"],
            link_tolerance=self["link_tolerance"],
            bar_width=self["render_bar_width"] or None,
        )

    def energy_params(self):
        from core.fusion import EnergyParams

        return EnergyParams(
            lam=self["lambda"],
            labels=self["labels"],
            iterations=self["iterations"],
            schedule=self["schedule"],
            keep_reference=self["keep_reference"],
        )

    def train_config(self):
        from core.cnn import TrainConfig

        return TrainConfig(
            batch_size=self["cnn_batch_size"],
            epochs=self["cnn_epochs"],
            learning_rate=self["cnn_learning_rate"],
            seed=self["seed"],
        )

    def augment_policy(self):
        from core.cnn import AugmentPolicy

        return AugmentPolicy(flip_y=self["cnn_flip"], center_crop=self["cnn_center_crop"] or None)

    def fence_spec(self):
        from core.evalsynth import FenceSpec

        return FenceSpec(
            spacing=self["spacing"],
            bar_width=self["bar_width"],
            angle=self["fence_angle"],
            intensity=self["fence_intensity"],
            offset=self["fence_offset"],
        )

    def registration_params(self):
        from core.motion import RegistrationParams

        return RegistrationParams(
            mode=self["register_mode"],
            max_shift=self["max_shift"],
            corner_count=self["corner_count"],
            min_distance=self["min_distance"],
            patch_size=self["patch_size"],
            search_radius=self["search_radius"],
            ransac_threshold=self["ransac_threshold"],
            ransac_iterations=self["ransac_iterations"],
            seed=self["seed"],
        )
