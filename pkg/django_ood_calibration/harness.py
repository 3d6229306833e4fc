"""
experiment configuration and the staged pipeline from phantom data to report tables

Every stage writes manifests/<stage>.json holding a fingerprint of the config
sections it reads and of the manifests it depends on; a stage whose manifest
matches is skipped.
"""

__all__ = [
    "SplitConfig",
    "SegmenterConfig",
    "CorruptionSuite",
    "MetricsConfig",
    "AblationConfig",
    "ExperimentConfig",
    "Stage",
    "STAGES",
    "STAGE_ORDER",
    "COMPONENT_VARIANTS",
    "ExperimentRun",
    "load_config",
    "apply_overrides",
    "ingest_cases",
    "run_stage",
    "run_pipeline",
    "report",
]

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Final, Iterable, Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from ._core import (
    derive_seed,
    list_cases,
    normalize_intensity,
    package_version,
    read_case,
    read_tensor,
    softmax,
    stable_digest,
    write_case,
    write_tensor,
)
from .aleatoric import cached_estimate
from .augment import AugmentationPolicy
from .calibnet import (
    AleaCalibrator,
    CalibNetConfig,
    CalibrationInputs,
    GlobalTemperatureCalibrator,
    NetworkCalibrator,
    UncalibratedCalibrator,
    fit_global_ts,
    fit_lts,
    load_calibrator,
    save_calibrator,
    train_calibrator,
)
from .corruption import CorruptionSpec, corrupt_dataset
from .metrics import (
    BinningConfig,
    CalibrationReport,
    CalibrationStats,
    accumulate,
    argmax_agreement,
    dilated_roi,
    entropy_map,
)
from .misc import (
    CalibratorKind,
    ConfigError,
    CorruptionKind,
    DatasetSplit,
    EmptyRegion,
    ImageSlice,
    LabelMap,
    MissingArtifacts,
    PolicyError,
    ProbabilityMap,
    Severity,
    ShapeResidual,
    StageFailed,
    ValidationError,
)
from .phantom import PhantomConfig, generate_dataset, make_splits, rotate_folds
from .segnet import (
    SegModelConfig,
    UNet,
    forward,
    load_checkpoint,
    save_checkpoint,
    train_segmenter,
)
from .shapeprior import (
    ShapePriorConfig,
    build_shape_prior,
    cached_shape_residual,
    train_shape_prior,
)

logger = logging.getLogger(__name__)

CLEAN: Final = "clean"

# name -> (use_susceptibility, use_shape), in the order of the ablation table
COMPONENT_VARIANTS: Final = {
    "lts": (False, False),
    "proposed-susceptibility": (True, False),
    "proposed-shape": (False, True),
    "proposed": (True, True),
}


@dataclass(frozen=True)
class SplitConfig:
    num_cases: int = 100
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    fold_rotation: bool = False
    n_folds: int = 3

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.num_cases < 3 or self.n_folds < 1:
            raise ValidationError("num_cases >= 3 and n_folds >= 1 required")


@dataclass(frozen=True)
class SegmenterConfig:
    depth: int = 3
    base_channels: int = 16
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 8
    min_steps: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1 or self.min_steps < 1:
            raise ValidationError("epochs, batch_size and min_steps >= 1 and lr > 0 required")

    def network(self, class_count: int, seed: int) -> SegModelConfig:
        return SegModelConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            class_count=class_count,
            seed=seed,
        )


@dataclass(frozen=True)
class CorruptionSuite:
    kinds: tuple = ("bias_field", "motion", "ghosting", "spike")
    severities: tuple = ("moderate",)
    seed: int = 0

    def __post_init__(self):
        kinds = tuple(CorruptionKind(k) for k in self.kinds)
        if CorruptionKind.IDENTITY in kinds:
            raise ValidationError("the clean suite is always evaluated, do not list identity")
        object.__setattr__(self, "kinds", tuple(k.value for k in kinds))
        object.__setattr__(
            self, "severities", tuple(Severity(s).value for s in self.severities)
        )
        if len(set(self.kinds)) != len(self.kinds) or not self.severities:
            raise ValidationError("corruption kinds must be unique, severities non-empty")

    @property
    def specs(self) -> list:
        return [
            CorruptionSpec(kind, severity, seed=self.seed)
            for kind in self.kinds
            for severity in self.severities
        ]


@dataclass(frozen=True)
class MetricsConfig:
    num_bins: int = 15
    roi_kernel: int = 10

    def __post_init__(self):
        if self.num_bins < 1 or self.roi_kernel < 1:
            raise ValidationError("num_bins and roi_kernel must be positive")


@dataclass(frozen=True)
class AblationConfig:
    components: bool = True
    n_aug_grid: tuple = (1, 2, 4, 6, 8, 16)

    def __post_init__(self):
        object.__setattr__(self, "n_aug_grid", tuple(int(n) for n in self.n_aug_grid))
        if any(n < 1 for n in self.n_aug_grid):
            raise ValidationError("n_aug values must be positive")


_SECTIONS: Final = {
    "phantom": PhantomConfig,
    "split": SplitConfig,
    "augmentation": AugmentationPolicy,
    "segmenter": SegmenterConfig,
    "shape_prior": ShapePriorConfig,
    "calibrator": CalibNetConfig,
    "corruption": CorruptionSuite,
    "metrics": MetricsConfig,
    "ablation": AblationConfig,
}


def _section_dict(value) -> dict:
    if hasattr(value, "to_dict"):
        return value.to_dict()
    return asdict(value)


def _build_section(name: str, data) -> object:
    cls = _SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be an object", key=name)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}", key=f"{name}.{unknown[0]}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values)
    except (ValidationError, PolicyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=name) from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything a run depends on besides the code version.

    The seed list drives model training; data, splits and corruptions have
    their own seeds in their sections.
    """

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    shape_prior: ShapePriorConfig = field(default_factory=ShapePriorConfig)
    calibrator: CalibNetConfig = field(default_factory=CalibNetConfig)
    corruption: CorruptionSuite = field(default_factory=CorruptionSuite)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    calibrators: tuple = tuple(k.value for k in CalibratorKind)
    seeds: tuple = (0, 1, 2)
    figure_examples: int = 1
    # external slices in the tensor layout instead of phantom cases
    data_dir: Optional[str] = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        try:
            kinds = tuple(CalibratorKind.parse(k) for k in self.calibrators)
        except ValueError as exc:
            raise ConfigError(str(exc), key="calibrators") from exc
        if not kinds or len(set(kinds)) != len(kinds):
            raise ConfigError("calibrators must be unique and non-empty", key="calibrators")
        object.__setattr__(self, "calibrators", tuple(k.value for k in kinds))
        seeds = tuple(self.seeds)
        if not seeds or len(set(seeds)) != len(seeds) or not all(
            isinstance(s, int) and s >= 0 for s in seeds
        ):
            raise ConfigError("seeds must be unique non-negative integers", key="seeds")
        object.__setattr__(self, "seeds", seeds)
        if self.figure_examples < 0:
            raise ConfigError("figure_examples must be >= 0", key="figure_examples")
        classes = self.phantom.class_count
        for name in ("shape_prior", "calibrator"):
            if getattr(self, name).class_count != classes:
                raise ConfigError(
                    f"class_count must equal phantom.class_count ({classes})",
                    key=f"{name}.class_count",
                )
        divisor = 2 ** (max(self.segmenter.depth, self.shape_prior.depth) - 1)
        if self.phantom.image_size % divisor:
            raise ConfigError(
                f"image_size must be divisible by {divisor}", key="phantom.image_size"
            )

    @classmethod
    def smoke(cls) -> "ExperimentConfig":
        """32 x 32 images, 8 cases, 20 epochs per network"""
        return cls(
            phantom=PhantomConfig(image_size=32),
            split=SplitConfig(num_cases=8),
            segmenter=SegmenterConfig(epochs=20),
            shape_prior=ShapePriorConfig(epochs=20),
            calibrator=CalibNetConfig(epochs=20),
            output_dir="runs/smoke",
        )

    def to_dict(self) -> dict:
        data = {name: _section_dict(getattr(self, name)) for name in _SECTIONS}
        data.update(
            calibrators=list(self.calibrators),
            seeds=list(self.seeds),
            figure_examples=self.figure_examples,
            data_dir=self.data_dir,
            output_dir=self.output_dir,
        )
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be an object", key="")
        known = set(_SECTIONS) | {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}", key=unknown[0])
        kwargs = {
            name: _build_section(name, value)
            for name, value in data.items()
            if name in _SECTIONS
        }
        for name in ("calibrators", "seeds"):
            if name in data:
                kwargs[name] = tuple(data[name])
        for name in ("figure_examples", "data_dir", "output_dir"):
            if name in data:
                kwargs[name] = data[name]
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}", key="") from exc
        return cls.from_dict(data)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """apply "dotted.key=value" strings to a config dict; values parse as JSON if they can"""
    data = json.loads(json.dumps(data))
    for override in overrides:
        key, sep, raw = override.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {override!r} is not key=value", key=key)
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(target.get(part), dict):
                raise ConfigError(f"unknown key {key}", key=key)
            target = target[part]
        if parts[-1] not in target:
            raise ConfigError(f"unknown key {key}", key=key)
        target[parts[-1]] = _parse_value(raw)
    return data


def load_config(
    path=None, overrides: Sequence[str] = (), smoke: bool = False, run_dir=None
) -> ExperimentConfig:
    """
    config file, else <run_dir>/config.json, else the defaults (or the smoke
    preset); overrides are applied last
    """
    if path is not None:
        config = ExperimentConfig.load(path)
    elif run_dir is not None and (Path(run_dir) / "config.json").exists():
        config = ExperimentConfig.load(Path(run_dir) / "config.json")
    elif smoke:
        config = ExperimentConfig.smoke()
    else:
        config = ExperimentConfig()
    if overrides:
        config = ExperimentConfig.from_dict(apply_overrides(config.to_dict(), overrides))
    if run_dir is not None:
        config = replace(config, output_dir=str(run_dir))
    return config


def ingest_cases(source, dest, class_count: int) -> list:
    """
    copy externally prepared cases in the tensor layout, validating every
    slice and min-max normalising its intensities to [0, 1]
    """
    source = Path(source)
    if not source.is_dir():
        raise MissingArtifacts("no external data", missing=[source])
    case_ids = list_cases(source)
    if not case_ids:
        raise MissingArtifacts("no cases in external data", missing=[source / "<case>/image"])
    for case_id in case_ids:
        pairs = []
        for image, label in read_case(source, case_id):
            if label.num_classes != class_count:
                raise ValidationError(
                    f"{case_id}: {label.num_classes} label classes, expected {class_count}"
                )
            pairs.append((image.replace(normalize_intensity(image.data)), label))
        write_case(dest, pairs)
    logger.info("ingested %d cases from %s", len(case_ids), source)
    return case_ids


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable
    requires: tuple = ()
    # config sections that enter the stage fingerprint
    sections: tuple = ()


class ExperimentRun:
    """
    paths and artifact access of one run directory

    ``only`` narrows the calibrate stage to some of the configured
    calibrators without touching the stored config; the other stages keep
    using all of them.
    """

    def __init__(self, config: ExperimentConfig, root=None, only: Sequence[str] = ()):
        self.config = config
        self.root = Path(root if root is not None else config.output_dir)
        try:
            self.only = tuple(dict.fromkeys(CalibratorKind.parse(k).value for k in only))
        except ValueError as exc:
            raise ConfigError(str(exc), key="calibrators") from exc
        for name in self.only:
            if name not in config.calibrators:
                raise ConfigError(f"calibrator {name} is not configured", key="calibrators")

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def cache_dir(self) -> Path:
        return self.root / "cache"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def metrics_path(self) -> Path:
        return self.root / "evaluation" / "metrics.json"

    def manifest_path(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"

    def model_dir(self, seed: int, name: str) -> Path:
        return self.root / "models" / f"seed-{seed}" / name

    def calibrator_dir(self, seed: int, name: str) -> Path:
        return self.model_dir(seed, "calibrators") / name

    def results_path(self, seed: int, name: str, suite: str) -> Path:
        return self.root / "results" / f"seed-{seed}" / name / f"{suite}.json"

    def example_dir(self, seed: int, name: str, suite: str, x: ImageSlice) -> Path:
        return (
            self.root
            / "examples"
            / f"seed-{seed}"
            / suite
            / f"{x.case_id}-{x.slice_index:03d}"
            / name
        )

    def read_manifest(self, stage: str) -> Optional[dict]:
        path = self.manifest_path(stage)
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def fingerprint(self, stage: str) -> str:
        definition = STAGES[stage]
        upstream = []
        for dep in definition.requires:
            manifest = self.read_manifest(dep)
            if manifest is None:
                raise MissingArtifacts(
                    f"{stage} needs the {dep} stage", missing=[self.manifest_path(dep)]
                )
            upstream.append(manifest["fingerprint"])
        config = self.config.to_dict()
        sections = {name: config[name] for name in definition.sections}
        if stage == "calibrate" and self.only:
            sections["only"] = list(self.only)
        return stable_digest(stage, sections, upstream, package_version())

    def relative(self, paths: Iterable) -> list:
        return sorted({Path(p).relative_to(self.root).as_posix() for p in paths})

    # data

    def split(self) -> DatasetSplit:
        path = self.data_dir / "manifest.json"
        if not path.exists():
            raise MissingArtifacts("no dataset", missing=[path])
        return DatasetSplit.from_dict(json.loads(path.read_text())["split"])

    def split_for(self, seed: int) -> DatasetSplit:
        split = self.split()
        if not self.config.split.fold_rotation:
            return split
        folds = rotate_folds(split, self.config.split.n_folds)
        return folds[self.config.seeds.index(seed) % len(folds)]

    def pairs(self, case_ids: Sequence[str], image_part: str = "image") -> list:
        pairs = []
        for case_id in case_ids:
            pairs.extend(read_case(self.data_dir, case_id, image_part=image_part))
        return pairs

    def suites(self) -> list:
        """[(suite tag, corruption name)], the clean suite first"""
        return [(CLEAN, CLEAN)] + [
            (spec.tag, spec.kind.value) for spec in self.config.corruption.specs
        ]

    def suite_groups(self) -> dict:
        """corruption name -> suite tags pooled under it (severities)"""
        groups = {}
        for tag, kind in self.suites():
            groups.setdefault(kind, []).append(tag)
        return groups

    # models

    def segmenter(self, seed: int):
        return load_checkpoint(self.model_dir(seed, "segmenter"), UNet, SegModelConfig)

    def shape_prior(self, seed: int):
        return load_checkpoint(
            self.model_dir(seed, "shape_prior"), build_shape_prior, ShapePriorConfig
        )

    def calibrator_names(self) -> list:
        names = list(self.config.calibrators)
        if self.config.ablation.components:
            names.extend(n for n in COMPONENT_VARIANTS if n not in names)
        return names

    def calibrators(self, seed: int, names: Optional[Sequence[str]] = None) -> dict:
        return {
            name: load_calibrator(self.calibrator_dir(seed, name))
            for name in (self.calibrator_names() if names is None else names)
        }

    def calibrate_names(self) -> list:
        """the calibrators the calibrate stage applies"""
        return list(self.only) if self.only else self.calibrator_names()

    @property
    def n_aug_grid(self) -> tuple:
        if "proposed" not in self.calibrator_names():
            return ()
        return self.config.ablation.n_aug_grid


def _gen_data(run: ExperimentRun) -> list:
    config = run.config
    if config.data_dir:
        case_ids = ingest_cases(config.data_dir, run.data_dir, config.phantom.class_count)
        split = make_splits(case_ids, config.split.ratios, config.split.seed)
        manifest = {
            "cases": case_ids,
            "split": split.to_dict(),
            "source": str(config.data_dir),
        }
        (run.data_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True)
        )
    else:
        generate_dataset(
            run.data_dir,
            config.phantom,
            config.split.num_cases,
            config.split.ratios,
            config.split.seed,
        )
    return [run.data_dir]


def _train_seg(run: ExperimentRun) -> list:
    config = run.config
    outputs = []
    for seed in config.seeds:
        split = run.split_for(seed)
        model = train_segmenter(
            run.pairs(split.train),
            run.pairs(split.validation),
            config.augmentation,
            epochs=config.segmenter.epochs,
            lr=config.segmenter.lr,
            config=config.segmenter.network(config.phantom.class_count, seed),
            batch_size=config.segmenter.batch_size,
            min_steps=config.segmenter.min_steps,
        )
        outputs.append(save_checkpoint(run.model_dir(seed, "segmenter"), model, seed=seed))
    return outputs


def _train_shape(run: ExperimentRun) -> list:
    config = run.config
    outputs = []
    for seed in config.seeds:
        split = run.split_for(seed)
        model = train_shape_prior(
            run.segmenter(seed),
            run.pairs(split.validation),
            replace(config.shape_prior, seed=seed),
            policy=config.augmentation,
        )
        outputs.append(save_checkpoint(run.model_dir(seed, "shape_prior"), model, seed=seed))
    return outputs


def _train_one_calibrator(run, name, seed, segmenter, shape_prior, val_pairs):
    config = run.config
    if name == CalibratorKind.UNCALIBRATED.value:
        return UncalibratedCalibrator()
    if name == CalibratorKind.ALEA.value:
        return AleaCalibrator()
    if name == CalibratorKind.GLOBAL_TS.value:
        return GlobalTemperatureCalibrator(fit_global_ts(segmenter, val_pairs))
    use_susceptibility, use_shape = COMPONENT_VARIANTS[name]
    calib_config = replace(
        config.calibrator,
        seed=seed,
        use_susceptibility=use_susceptibility,
        use_shape=use_shape,
    )
    if name == CalibratorKind.LTS.value:
        model = fit_lts(segmenter, val_pairs, calib_config, config.augmentation)
    else:
        model = train_calibrator(
            segmenter, shape_prior, val_pairs, calib_config, config.augmentation
        )
    return NetworkCalibrator(model)


def _train_calib(run: ExperimentRun) -> list:
    outputs = []
    for seed in run.config.seeds:
        segmenter = run.segmenter(seed)
        shape_prior = run.shape_prior(seed)
        val_pairs = run.pairs(run.split_for(seed).validation)
        for name in run.calibrator_names():
            calibrator = _train_one_calibrator(
                run, name, seed, segmenter, shape_prior, val_pairs
            )
            outputs.append(save_calibrator(run.calibrator_dir(seed, name), calibrator, seed))
            logger.info("trained calibrator %s for seed %d", name, seed)
    return outputs


def _corrupt(run: ExperimentRun) -> list:
    test_ids = sorted({case for seed in run.config.seeds for case in run.split_for(seed).test})
    written = corrupt_dataset(run.data_dir, run.config.corruption.specs, case_ids=test_ids)
    return written or [run.data_dir / "manifest.json"]


def _calibration_inputs(run, segmenter, shape_prior, x, n_aug, seed, fingerprints):
    logits = forward(segmenter, x)
    estimate, alea = cached_estimate(
        segmenter,
        x,
        run.config.augmentation.photometric_only(),
        n_aug,
        derive_seed(seed, "test-alea"),
        store_dir=run.cache_dir,
        fingerprint=fingerprints[0],
    )
    _prior, residual = cached_shape_residual(
        shape_prior,
        logits,
        (x.case_id, x.slice_index),
        store_dir=run.cache_dir,
        fingerprint=fingerprints[1],
    )
    return CalibrationInputs(logits, x, estimate, ShapeResidual(residual), alea)


def _slice_record(x: ImageSlice, stats: CalibrationStats, agreement: float) -> dict:
    record = {
        "case": x.case_id,
        "slice": x.slice_index,
        "roi_pixels": stats.roi_pixels,
        "dice": stats.dice.tolist(),
        "argmax_agreement": agreement,
    }
    try:
        record.update(ece=stats.ece, sce=stats.sce, mce=stats.mce)
    except EmptyRegion:
        record.update(ece=None, sce=None, mce=None)
    return record


def _save_example(path: Path, x, y, p, temperature) -> list:
    written = [
        write_tensor(path / "image", x.data),
        write_tensor(path / "label", y.data),
        write_tensor(path / "probability", p.data),
    ]
    if temperature is not None:
        written.append(write_tensor(path / "temperature", temperature.data))
    return written


def _write_results(path: Path, stats: CalibrationStats, slices: list, **meta) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"pooled": stats.to_dict(), "slices": slices, **meta}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _calibrate(run: ExperimentRun) -> list:
    config = run.config
    binning = BinningConfig(config.metrics.num_bins)
    classes = config.phantom.class_count
    photometric = config.augmentation.photometric_only()
    # stays empty when every array comes from the django cache
    run.cache_dir.mkdir(parents=True, exist_ok=True)
    outputs = [run.cache_dir]
    for seed in config.seeds:
        segmenter = run.segmenter(seed)
        shape_prior = run.shape_prior(seed)
        fingerprints = (segmenter.fingerprint, shape_prior.fingerprint)
        calibrators = run.calibrators(seed, run.calibrate_names())
        n_aug_grid = run.n_aug_grid if "proposed" in calibrators else ()
        test_ids = run.split_for(seed).test
        for tag, _kind in run.suites():
            image_part = "image" if tag == CLEAN else "image." + tag
            pairs = run.pairs(test_ids, image_part)
            pooled = {name: CalibrationStats(binning.num_bins, classes) for name in calibrators}
            per_slice = {name: [] for name in calibrators}
            agreement = {name: 1.0 for name in calibrators}
            n_aug_pooled = {n: CalibrationStats(binning.num_bins, classes) for n in n_aug_grid}
            for index, (x, y) in enumerate(pairs):
                inputs = _calibration_inputs(
                    run, segmenter, shape_prior, x, config.calibrator.n_aug, seed, fingerprints
                )
                roi = dilated_roi(y, config.metrics.roi_kernel)
                reference = softmax(inputs.logits)
                for name, calibrator in calibrators.items():
                    temperature, p = calibrator(inputs)
                    stats = accumulate(p, y, roi, binning)
                    pooled[name] = pooled[name] + stats
                    share = argmax_agreement(reference, p)
                    agreement[name] = min(agreement[name], share)
                    per_slice[name].append(_slice_record(x, stats, share))
                    if index < config.figure_examples:
                        outputs.extend(
                            _save_example(
                                run.example_dir(seed, name, tag, x), x, y, p, temperature
                            )
                        )
                for n_aug in n_aug_grid:
                    estimate, _alea = cached_estimate(
                        segmenter,
                        x,
                        photometric,
                        n_aug,
                        derive_seed(seed, "test-alea"),
                        store_dir=run.cache_dir,
                        fingerprint=fingerprints[0],
                    )
                    _temperature, p = calibrators["proposed"](
                        replace(inputs, susceptibility=estimate)
                    )
                    n_aug_pooled[n_aug].update(p, y, roi, binning)
            for name in calibrators:
                outputs.append(
                    _write_results(
                        run.results_path(seed, name, tag),
                        pooled[name],
                        per_slice[name],
                        calibrator=name,
                        suite=tag,
                        seed=seed,
                        argmax_agreement=agreement[name],
                    )
                )
            for n_aug, stats in n_aug_pooled.items():
                outputs.append(
                    _write_results(
                        run.results_path(seed, f"n_aug-{n_aug}", tag),
                        stats,
                        [],
                        calibrator="proposed",
                        suite=tag,
                        seed=seed,
                        n_aug=n_aug,
                    )
                )
            logger.info("calibrated %d %s slices for seed %d", len(pairs), tag, seed)
    return outputs


def _load_pooled(run: ExperimentRun, seed: int, name: str, tags: Sequence[str]):
    stats, agreement = None, 1.0
    for tag in tags:
        path = run.results_path(seed, name, tag)
        if not path.exists():
            raise MissingArtifacts("calibration results missing", missing=[path])
        data = json.loads(path.read_text())
        part = CalibrationStats.from_dict(data["pooled"])
        stats = part if stats is None else stats + part
        agreement = min(agreement, data.get("argmax_agreement", 1.0))
    return stats, agreement


def _row(report_: CalibrationReport, **fields_) -> dict:
    return {
        **fields_,
        "ece": report_.ece,
        "sce": report_.sce,
        "mce": report_.mce,
        "dice": list(report_.dice),
        "mean_dice": report_.mean_foreground_dice,
        "roi_pixels": report_.roi_pixels,
    }


def _evaluate(run: ExperimentRun) -> list:
    rows, n_aug_rows = [], []
    groups = run.suite_groups()
    for seed in run.config.seeds:
        for name in run.calibrator_names():
            for corruption, tags in groups.items():
                stats, agreement = _load_pooled(run, seed, name, tags)
                rows.append(
                    _row(
                        CalibrationReport.from_stats(stats),
                        seed=seed,
                        calibrator=name,
                        corruption=corruption,
                        suites=tags,
                        argmax_agreement=agreement,
                    )
                )
        for n_aug in run.n_aug_grid:
            for corruption, tags in groups.items():
                stats, _agreement = _load_pooled(run, seed, f"n_aug-{n_aug}", tags)
                n_aug_rows.append(
                    _row(
                        CalibrationReport.from_stats(stats),
                        seed=seed,
                        n_aug=n_aug,
                        corruption=corruption,
                    )
                )
    run.metrics_path.parent.mkdir(parents=True, exist_ok=True)
    run.metrics_path.write_text(
        json.dumps({"rows": rows, "n_aug": n_aug_rows}, indent=2, sort_keys=True)
    )
    csv_path = run.metrics_path.with_suffix(".csv")
    _write_csv(
        csv_path,
        ["seed", "calibrator", "corruption", "ece", "sce", "mce", "mean_dice", "roi_pixels"],
        [
            [
                row["seed"],
                row["calibrator"],
                row["corruption"],
                _fmt(row["ece"]),
                _fmt(row["sce"]),
                _fmt(row["mce"]),
                _fmt(row["mean_dice"]),
                row["roi_pixels"],
            ]
            for row in rows
        ],
    )
    return [run.metrics_path, csv_path]


def _fmt(value: float) -> str:
    return "%.6f" % value


def _write_csv(path: Path, header: list, rows: list) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _mean_std(values: Sequence[float]) -> list:
    values = np.asarray(values, dtype=np.float64)
    return [_fmt(values.mean()), _fmt(values.std())]


def _corrupted_mean(rows: list, metric: str, **match) -> list:
    """per seed: mean of metric over the corrupted suites"""
    by_seed = {}
    for row in rows:
        if row["corruption"] == CLEAN:
            continue
        if all(row.get(k) == v for k, v in match.items()):
            by_seed.setdefault(row["seed"], []).append(row[metric])
    return [float(np.mean(by_seed[seed])) for seed in sorted(by_seed)]


def _reliability_rows(run: ExperimentRun) -> list:
    rows = []
    for name in run.config.calibrators:
        for corruption, tags in run.suite_groups().items():
            stats = None
            for seed in run.config.seeds:
                part, _agreement = _load_pooled(run, seed, name, tags)
                stats = part if stats is None else stats + part
            for record in stats.reliability():
                rows.append(
                    [
                        name,
                        corruption,
                        _fmt(record.lower),
                        _fmt(record.upper),
                        record.count,
                        _fmt(record.confidence),
                        _fmt(record.accuracy),
                    ]
                )
    return rows


def _load_example(path: Path):
    image = ImageSlice(read_tensor(path / "image"))
    label = LabelMap(read_tensor(path / "label"))
    prob = read_tensor(path / "probability").astype(np.float64)
    prob = ProbabilityMap(prob / prob.sum(axis=0, keepdims=True))
    temperature = None
    if (path / "temperature").exists():
        temperature = read_tensor(path / "temperature")[0]
    return image, label, prob, temperature


def _reliability_panel(ax, records: Sequence, binning):
    """accuracy bars with the confidence-accuracy gap stacked on top of them"""
    centers = (binning.edges[:-1] + binning.edges[1:]) / 2
    width = 1.0 / binning.num_bins
    accuracy = np.array([r.accuracy for r in records])
    confidence = np.array([r.confidence for r in records])
    populated = np.array([r.count > 0 for r in records])
    ax.bar(centers, accuracy, width=width, edgecolor="black", label="outputs")
    ax.bar(
        centers[populated],
        (confidence - accuracy)[populated],
        bottom=accuracy[populated],
        width=width,
        color="red",
        alpha=0.3,
        edgecolor="red",
        hatch="//",
        label="gap",
    )
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left")


def _render_example(example_dir: Path, names: Sequence[str], binning, kernel: int, dest: Path):
    """one row per calibrator: entropy map, reliability diagram, confidence histogram, error map"""
    figure = Figure(figsize=(12, 3 * len(names)))
    FigureCanvasAgg(figure)
    axes = figure.subplots(len(names), 4, squeeze=False)
    centers = (binning.edges[:-1] + binning.edges[1:]) / 2
    width = 1.0 / binning.num_bins
    for row, name in zip(axes, names):
        _image, label, prob, _temperature = _load_example(example_dir / name)
        roi = dilated_roi(label, kernel)
        stats = accumulate(prob, label, roi, binning)
        row[0].imshow(entropy_map(prob), cmap="magma")
        row[0].set_title(f"{name}: entropy")
        records = stats.reliability()
        _reliability_panel(row[1], records, binning)
        title = "reliability"
        if stats.roi_pixels:
            title = f"reliability (ECE {stats.ece:.3f})"
        row[1].set_title(title)
        row[2].bar(centers, stats.counts, width=width, edgecolor="black")
        row[2].set_title("confidence histogram")
        row[3].imshow(prob.prediction != label.indices, cmap="gray")
        row[3].set_title("errors")
        for ax in (row[0], row[3]):
            ax.set_axis_off()
    figure.tight_layout()
    dest.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(dest, dpi=80)
    return dest


def _figures(run: ExperimentRun) -> list:
    config = run.config
    seed = config.seeds[0]
    root = run.root / "examples" / f"seed-{seed}"
    written = []
    if not config.figure_examples or not root.is_dir():
        return written
    binning = BinningConfig(config.metrics.num_bins)
    for suite_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for example_dir in sorted(p for p in suite_dir.iterdir() if p.is_dir()):
            dest = run.report_dir / "figures" / f"{suite_dir.name}-{example_dir.name}.png"
            written.append(
                _render_example(
                    example_dir, config.calibrators, binning, config.metrics.roi_kernel, dest
                )
            )
    return written


def _report(run: ExperimentRun) -> list:
    if not run.metrics_path.exists():
        raise MissingArtifacts("evaluation results missing", missing=[run.metrics_path])
    data = json.loads(run.metrics_path.read_text())
    rows, n_aug_rows = data["rows"], data["n_aug"]
    present = {row["calibrator"] for row in rows}
    missing = [
        run.results_path(run.config.seeds[0], name, CLEAN)
        for name in run.calibrator_names()
        if name not in present
    ]
    if missing:
        raise MissingArtifacts("calibrators without evaluation", missing=missing)
    written = []
    table = []
    for name in run.config.calibrators:
        for corruption in run.suite_groups():
            selected = [
                r for r in rows if r["calibrator"] == name and r["corruption"] == corruption
            ]
            table.append(
                [name, corruption]
                + _mean_std([r["ece"] for r in selected])
                + _mean_std([r["sce"] for r in selected])
                + _mean_std([r["mean_dice"] for r in selected])
                + [len(selected), int(CalibratorKind(name).preserves_argmax)]
            )
    written.append(
        _write_csv(
            run.report_dir / "table1.csv",
            [
                "calibrator",
                "corruption",
                "ece_mean",
                "ece_std",
                "sce_mean",
                "sce_std",
                "dice_mean",
                "dice_std",
                "seeds",
                "preserves_argmax",
            ],
            table,
        )
    )
    if run.config.ablation.components:
        ablation = []
        for name, (use_susceptibility, use_shape) in COMPONENT_VARIANTS.items():
            ablation.append(
                [name, int(use_susceptibility), int(use_shape)]
                + _mean_std(_corrupted_mean(rows, "ece", calibrator=name))
                + _mean_std(_corrupted_mean(rows, "sce", calibrator=name))
            )
        written.append(
            _write_csv(
                run.report_dir / "ablation_components.csv",
                [
                    "calibrator",
                    "use_susceptibility",
                    "use_shape",
                    "ece_mean",
                    "ece_std",
                    "sce_mean",
                    "sce_std",
                ],
                ablation,
            )
        )
    if run.n_aug_grid:
        written.append(
            _write_csv(
                run.report_dir / "ablation_n_aug.csv",
                ["n_aug", "ece_mean", "ece_std", "sce_mean", "sce_std"],
                [
                    [n_aug]
                    + _mean_std(_corrupted_mean(n_aug_rows, "ece", n_aug=n_aug))
                    + _mean_std(_corrupted_mean(n_aug_rows, "sce", n_aug=n_aug))
                    for n_aug in run.n_aug_grid
                ],
            )
        )
    written.append(
        _write_csv(
            run.report_dir / "reliability.csv",
            ["calibrator", "corruption", "lower", "upper", "count", "confidence", "accuracy"],
            _reliability_rows(run),
        )
    )
    written.extend(_figures(run))
    return written


STAGES: Final = {
    stage.name: stage
    for stage in (
        Stage("gen_data", _gen_data, (), ("phantom", "split", "data_dir")),
        Stage("train_seg", _train_seg, ("gen_data",), ("augmentation", "segmenter", "seeds")),
        Stage("train_shape", _train_shape, ("train_seg",), ("shape_prior",)),
        Stage(
            "train_calib",
            _train_calib,
            ("train_shape",),
            ("calibrator", "calibrators", "ablation"),
        ),
        Stage("corrupt", _corrupt, ("gen_data",), ("corruption", "seeds")),
        Stage(
            "calibrate",
            _calibrate,
            ("train_calib", "corrupt"),
            ("metrics", "figure_examples", "calibrators", "ablation"),
        ),
        Stage("evaluate", _evaluate, ("calibrate",), ()),
        Stage("report", _report, ("evaluate",), ()),
    )
}
STAGE_ORDER: Final = tuple(STAGES)


def _write_run_manifest(run: ExperimentRun):
    stages = {
        name: run.manifest_path(name).relative_to(run.root).as_posix()
        for name in STAGE_ORDER
        if run.manifest_path(name).exists()
    }
    payload = {"config": "config.json", "stages": stages, "version": package_version()}
    (run.root / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _up_to_date(run: ExperimentRun, stage: str, fingerprint: str) -> bool:
    manifest = run.read_manifest(stage)
    if manifest is None or manifest.get("fingerprint") != fingerprint:
        return False
    return all((run.root / p).exists() for p in manifest.get("outputs", ()))


def run_stage(run: ExperimentRun, stage: str, force: bool = False) -> bool:
    """
    Run one stage unless its manifest is current.

    Returns whether the stage executed. Failures are re-raised as StageFailed;
    outputs written before the failure stay on disk.
    """
    if stage not in STAGES:
        raise StageFailed(f"unknown stage, choose from {', '.join(STAGE_ORDER)}", stage=stage)
    try:
        fingerprint = run.fingerprint(stage)
    except MissingArtifacts as exc:
        raise StageFailed(str(exc), stage=stage) from exc
    if not force and _up_to_date(run, stage, fingerprint):
        logger.info("stage %s is up to date", stage)
        return False
    logger.info("stage %s started", stage)
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.dump(run.root / "config.json")
    try:
        outputs = STAGES[stage].run(run)
    except StageFailed:
        raise
    except Exception as exc:
        logger.error("stage %s failed: %s", stage, exc)
        raise StageFailed(f"{type(exc).__name__}: {exc}", stage=stage) from exc
    manifest = {
        "stage": stage,
        "fingerprint": fingerprint,
        "requires": list(STAGES[stage].requires),
        "outputs": run.relative(outputs),
        "version": package_version(),
    }
    path = run.manifest_path(stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _write_run_manifest(run)
    logger.info("stage %s finished with %d outputs", stage, len(manifest["outputs"]))
    return True


def run_pipeline(
    config: ExperimentConfig, run_dir=None, stages: Optional[Sequence[str]] = None, force=False
) -> Path:
    """run the stages in pipeline order; returns the run directory"""
    run = ExperimentRun(config, run_dir)
    for stage in stages or STAGE_ORDER:
        run_stage(run, stage, force=force)
    return run.root


def report(run_dir) -> list:
    """(re)write the report of a finished run from its stored results"""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise MissingArtifacts("not a run directory", missing=[config_path])
    run = ExperimentRun(ExperimentConfig.load(config_path), run_dir)
    return _report(run)
