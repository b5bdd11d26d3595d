"""
Validation module - Error types, input validation and data quality checks
Every contract violation in the pipeline raises a ValidationError subclass
"""

import os
from typing import Iterable, List, Optional, Sequence, Tuple

import config
from logger_config import get_logger

logger = get_logger("Validation")


class ValidationError(Exception):
    """Custom exception for validation failures"""
    pass


class SchemaError(ValidationError):
    """Input table lacks required columns"""

    def __init__(self, missing: Sequence[str], source: str = "input"):
        self.missing = list(missing)
        super().__init__(f"{source} is missing required columns: {', '.join(self.missing)}")


class DuplicateVehicleError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class AlignmentError(ValidationError):
    """Feature names of an input disagree with the names a model was fitted on"""

    def __init__(self, expected: Sequence[str], got: Sequence[str]):
        self.expected = list(expected)
        self.got = list(got)
        missing = [n for n in self.expected if n not in self.got]
        extra = [n for n in self.got if n not in self.expected]
        if missing or extra:
            detail = f"missing {missing}, unexpected {extra}"
        else:
            detail = "same names in a different order"
        super().__init__(f"Feature alignment error: {detail}")


class DivergenceError(ValidationError):
    def __init__(self, losses):
        self.losses = dict(losses)
        listing = ", ".join(f"lr={lr:g}: {loss}" for lr, loss in self.losses.items())
        super().__init__(f"Every learning rate diverged ({listing})")


class IdenticalModelsError(ValidationError):
    def __init__(self):
        super().__init__("models identical on this set")


class StageInputError(ValidationError):
    """A stage input file is missing; names the stage that produces it"""

    def __init__(self, path: str, stage: str):
        self.path = path
        self.stage = stage
        super().__init__(f"Missing input {path}; run the '{stage}' stage first")


class NonFiniteInputError(ValidationError):
    pass


class CoordinateValidator:
    """Validates geographic coordinates"""

    @staticmethod
    def validate_lat(lat: float) -> bool:
        """Check if latitude is valid"""
        if not isinstance(lat, (int, float)):
            raise ValidationError(f"Latitude must be numeric, got {type(lat)}")
        if not (config.LAT_MIN <= lat <= config.LAT_MAX):
            raise ValidationError(f"Latitude {lat} outside [{config.LAT_MIN}, {config.LAT_MAX}]")
        return True

    @staticmethod
    def validate_lon(lon: float) -> bool:
        """Check if longitude is valid"""
        if not isinstance(lon, (int, float)):
            raise ValidationError(f"Longitude must be numeric, got {type(lon)}")
        if not (config.LON_MIN <= lon <= config.LON_MAX):
            raise ValidationError(f"Longitude {lon} outside [{config.LON_MIN}, {config.LON_MAX}]")
        return True

    @staticmethod
    def validate_coordinates(lat: float, lon: float) -> Tuple[bool, Optional[str]]:
        """Validate lat/lon pair, return (is_valid, error_message)"""
        try:
            CoordinateValidator.validate_lat(lat)
            CoordinateValidator.validate_lon(lon)
            return True, None
        except ValidationError as e:
            error_msg = str(e)
            logger.debug(f"Invalid coordinates: {error_msg}")
            return False, error_msg


class SampleValidator:
    """Field-range checks for one telemetry record"""

    @staticmethod
    def validate_sample(sample) -> Tuple[bool, Optional[str]]:
        if sample.timestamp_ms < 0:
            return False, f"negative timestamp {sample.timestamp_ms}"
        if sample.speed is not None and sample.speed < 0:
            return False, f"negative speed {sample.speed}"
        return CoordinateValidator.validate_coordinates(sample.lat, sample.lon)


class RunConfigValidator:
    """Checks a resolved RunConfig before any stage runs"""

    @staticmethod
    def validate_run_config(cfg) -> Tuple[bool, List[str]]:
        """
        Validate all tunables at once

        Returns:
            (is_all_valid, list_of_errors)
        """
        errors = []
        for name in ("afr", "rho_air", "fuel_density"):
            if not getattr(cfg, name) > 0:
                errors.append(f"{name} must be positive, got {getattr(cfg, name)}")
        if not 0.0 < cfg.train_frac < 1.0:
            errors.append(f"train_frac must lie in (0, 1), got {cfg.train_frac}")
        if not 0.0 < cfg.grid_train_frac < 1.0:
            errors.append(f"grid_train_frac must lie in (0, 1), got {cfg.grid_train_frac}")
        if not 0.0 < cfg.coverage_level < 1.0:
            errors.append(f"coverage_level must lie in (0, 1), got {cfg.coverage_level}")
        if not 0.0 <= cfg.fcr_min_coverage <= 1.0:
            errors.append(f"fcr_min_coverage must lie in [0, 1], got {cfg.fcr_min_coverage}")
        for name in ("members", "epochs", "batch", "clusters", "kmeans_max_iter", "grid_epochs"):
            if getattr(cfg, name) < 1:
                errors.append(f"{name} must be at least 1, got {getattr(cfg, name)}")
        if cfg.seed < 0:
            errors.append(f"seed must be non-negative, got {cfg.seed}")
        if not cfg.lr > 0:
            errors.append(f"lr must be positive, got {cfg.lr}")
        if cfg.adv_eps < 0:
            errors.append(f"adv_eps must be non-negative, got {cfg.adv_eps}")
        if not cfg.hidden_widths or any(w < 1 for w in cfg.hidden_widths):
            errors.append(f"hidden_widths must be positive integers, got {cfg.hidden_widths}")
        if not cfg.lr_grid or any(not lr > 0 for lr in cfg.lr_grid):
            errors.append(f"lr_grid must hold positive values, got {cfg.lr_grid}")
        if cfg.vehicle_type is not None and cfg.vehicle_type.upper() not in ("ICE", "HEV", "PHEV", "EV"):
            errors.append(f"vehicle_type '{cfg.vehicle_type}' invalid. Must be one of ICE, HEV, PHEV, EV")
        if cfg.energy is not None and cfg.energy.lower() not in ("fuel", "battery"):
            errors.append(f"energy '{cfg.energy}' invalid. Must be fuel or battery")
        for error in errors:
            logger.warning(error)
        return len(errors) == 0, errors


def require_columns(columns: Iterable[str], required: Iterable[str], source: str = "input") -> None:
    present = set(columns)
    missing = [c for c in required if c not in present]
    if missing:
        logger.error(f"{source}: missing columns {missing}")
        raise SchemaError(missing, source)


def require_file(path: str, stage: str) -> str:
    if not os.path.exists(path):
        logger.error(f"Missing stage input {path} (produced by '{stage}')")
        raise StageInputError(path, stage)
    return path


def check_feature_alignment(expected: Sequence[str], got: Sequence[str]) -> None:
    if list(expected) != list(got):
        error = AlignmentError(expected, got)
        logger.error(str(error))
        raise error

