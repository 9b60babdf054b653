"""
Experiment configuration: JSON with line comments, validated into frozen
dataclasses, hashed for provenance, with environment overrides.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Tuple

from ablation import ABLATION_KINDS
from clustering import ALGORITHMS
from head_analysis import Thresholds
from hessian import RankConfig, TraceConfig
from llc import SgldConfig
from train import OptimizerConfig
from transformer import ModelConfig

logger = logging.getLogger(__name__)

SOURCE_KINDS = ("synthetic", "code_like", "corpus", "model_generator", "model_refined",
                "nested_dyck", "unnested_dyck")
PHASE_METRICS = {
    "llc": ("llc",),
    "hessian": ("hessian_trace", "fim_trace", "max_eig", "hessian_rank_fixed", "hessian_rank_adaptive"),
    "ablate": ("ablation_zero", "ablation_mean", "ablation_resample", "icl", "icl_ablated"),
}
ENV_PREFIX = "WORKBENCH_"
# Fields that change where or how fast a run goes, not what it computes.
RUNTIME_FIELDS = ("output", "workers", "log_level", "log_dir")


class ConfigError(ValueError):
    """A configuration problem, located by a dotted field path."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass(frozen=True)
class TrainingSection:
    steps: int = 10000
    batch_size: int = 16
    checkpoints_per_decade: int = 20
    source: str = "train"
    tokenizer: Optional[str] = None


@dataclass(frozen=True)
class SourceSection:
    """
    One named data distribution.

    kind: synthetic | code_like | corpus | model_generator | model_refined |
    nested_dyck | unnested_dyck. ``pattern_spec`` is an optional PatternSpec
    JSON path for the synthetic kinds; ``reference`` names an entry of
    ``references`` for model_generator and model_refined; ``source`` is the
    data a model-refined KL is averaged over.
    """
    kind: str = "synthetic"
    seed: int = 0
    pattern_spec: Optional[str] = None
    path: Optional[str] = None
    reference: Optional[str] = None
    source: Optional[str] = None
    temperature: float = 1.0


@dataclass(frozen=True)
class ReferenceSection:
    n_layers: int = 1
    steps: int = 1000
    source: str = "train"


@dataclass(frozen=True)
class GridSection:
    targets: Tuple[str, ...] = ("all", "heads")
    sources: Tuple[str, ...] = ("train",)
    hessian_metrics: Tuple[str, ...] = ("hessian_trace",)
    checkpoint_stride: int = 1


@dataclass(frozen=True)
class AblationSection:
    kinds: Tuple[str, ...] = ("zero", "mean", "resample")
    eval_sequences: int = 64
    stats_size: int = 64
    pool_sequences: int = 64
    top_k: int = 100
    source: str = "train"
    roll_offset: int = 1


@dataclass(frozen=True)
class ClassifySection:
    previous_token: float = 0.5
    current_token: float = 0.5
    induction: float = 0.3
    natural_sequences: int = 32
    repeated_sequences: int = 32

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.previous_token, self.current_token, self.induction)


@dataclass(frozen=True)
class IclSection:
    early: int = 8
    late: int = 56
    sequences: int = 64


@dataclass(frozen=True)
class ClusterRequest:
    algorithm: str = "kmeans"
    k: int = 3
    metric: str = "llc"
    sources: Tuple[str, ...] = ("train",)
    normalize: bool = False
    window: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: Mapping[str, SourceSection] = field(default_factory=lambda: {"train": SourceSection()})
    references: Mapping[str, ReferenceSection] = field(default_factory=dict)
    sgld: SgldConfig = field(default_factory=SgldConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    rank: RankConfig = field(default_factory=RankConfig)
    grid: GridSection = field(default_factory=GridSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    classify: ClassifySection = field(default_factory=ClassifySection)
    icl: IclSection = field(default_factory=IclSection)
    clustering: Tuple[ClusterRequest, ...] = ()
    seeds: Tuple[int, ...] = (0,)
    output: str = "runs"
    workers: int = 1
    log_level: str = "INFO"
    log_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self)


SECTION_TYPES = {
    "model": ModelConfig,
    "training": TrainingSection,
    "optimizer": OptimizerConfig,
    "sgld": SgldConfig,
    "trace": TraceConfig,
    "rank": RankConfig,
    "grid": GridSection,
    "ablation": AblationSection,
    "classify": ClassifySection,
    "icl": IclSection,
}


def strip_comments(text: str) -> str:
    """Drop lines whose first non-blank characters are ``//`` or ``#``."""
    kept = []
    for line in text.splitlines():
        stripped = line.lstrip()
        if stripped.startswith("//") or stripped.startswith("#"):
            kept.append("")
        else:
            kept.append(line)
    return "\n".join(kept)


def _build(cls, data, path: str):
    """Instantiate a dataclass section, turning lists into tuples and errors into ConfigErrors."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown field")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def parse_config(data: Mapping, base_dir: str = ".") -> ExperimentConfig:
    """
    Validate a config document. Relative file paths resolve against ``base_dir``.

    Raises:
        ConfigError: naming the dotted path of the first invalid field.
    """
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown field")

    kwargs = {}
    for name, cls in SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)

    sources = {}
    for name, section in (data.get("data") or {"train": {}}).items():
        built = _build(SourceSection, section, f"data.{name}")
        if built.path is not None and not os.path.isabs(built.path):
            built = replace(built, path=os.path.join(base_dir, built.path))
        if built.pattern_spec is not None and not os.path.isabs(built.pattern_spec):
            built = replace(built, pattern_spec=os.path.join(base_dir, built.pattern_spec))
        sources[name] = built
    kwargs["data"] = sources
    kwargs["references"] = {name: _build(ReferenceSection, section, f"references.{name}")
                            for name, section in (data.get("references") or {}).items()}
    kwargs["clustering"] = tuple(_build(ClusterRequest, section, f"clustering[{i}]")
                                 for i, section in enumerate(data.get("clustering") or []))
    for key in ("name", "output", "workers", "log_level", "log_dir"):
        if key in data:
            kwargs[key] = data[key]
    if "seeds" in data:
        kwargs["seeds"] = tuple(data["seeds"])
    config = ExperimentConfig(**kwargs)
    training = config.training
    if training.tokenizer is not None and not os.path.isabs(training.tokenizer):
        config = replace(config, training=replace(training, tokenizer=os.path.join(base_dir, training.tokenizer)))
    validate(config)
    return config


def validate(config: ExperimentConfig):
    """Cross-field checks: every referenced name resolves and every path exists."""
    if not config.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if config.workers < 1:
        raise ConfigError("workers", f"must be positive, got {config.workers}")
    if config.training.steps < 0:
        raise ConfigError("training.steps", f"must be nonnegative, got {config.training.steps}")
    if config.training.batch_size < 1:
        raise ConfigError("training.batch_size", f"must be positive, got {config.training.batch_size}")
    if config.training.source not in config.data:
        raise ConfigError("training.source", f"unknown data source '{config.training.source}'")
    for name, source in config.data.items():
        where = f"data.{name}"
        if source.kind not in SOURCE_KINDS:
            raise ConfigError(f"{where}.kind", f"must be one of {SOURCE_KINDS}, got '{source.kind}'")
        if source.kind == "corpus":
            if source.path is None:
                raise ConfigError(f"{where}.path", "a corpus source needs a path")
            if not os.path.exists(source.path):
                raise ConfigError(f"{where}.path", f"file not found: {source.path}")
            if not source.path.endswith(".bin") and config.training.tokenizer is None:
                raise ConfigError("training.tokenizer", f"text corpus {source.path} needs a tokenizer")
        if source.pattern_spec is not None and not os.path.exists(source.pattern_spec):
            raise ConfigError(f"{where}.pattern_spec", f"file not found: {source.pattern_spec}")
        if source.kind in ("model_generator", "model_refined"):
            if source.reference not in config.references:
                raise ConfigError(f"{where}.reference", f"unknown reference '{source.reference}'")
        if source.kind == "model_refined":
            if source.source not in config.data or config.data[source.source].kind == "model_refined":
                raise ConfigError(f"{where}.source", f"must name a data source, got '{source.source}'")
    for name, ref in config.references.items():
        if ref.n_layers not in (0, 1):
            raise ConfigError(f"references.{name}.n_layers", f"must be 0 or 1, got {ref.n_layers}")
        if ref.source not in config.data or config.data[ref.source].kind in ("model_generator", "model_refined"):
            raise ConfigError(f"references.{name}.source", f"must name a data source, got '{ref.source}'")
    if config.training.tokenizer is not None and not os.path.exists(config.training.tokenizer):
        raise ConfigError("training.tokenizer", f"file not found: {config.training.tokenizer}")
    for i, source in enumerate(config.grid.sources):
        if source not in config.data:
            raise ConfigError(f"grid.sources[{i}]", f"unknown data source '{source}'")
    for i, target in enumerate(config.grid.targets):
        if target not in ("all", "heads") and not target.startswith("head_"):
            raise ConfigError(f"grid.targets[{i}]", f"must be 'all', 'heads' or a head_<layer>_<head> id, got '{target}'")
    for i, metric in enumerate(config.grid.hessian_metrics):
        if metric not in PHASE_METRICS["hessian"]:
            raise ConfigError(f"grid.hessian_metrics[{i}]", f"must be one of {PHASE_METRICS['hessian']}")
    for i, kind in enumerate(config.ablation.kinds):
        if kind not in ABLATION_KINDS or kind == "none":
            raise ConfigError(f"ablation.kinds[{i}]", f"must be zero, mean or resample, got '{kind}'")
    if not 0 < config.ablation.roll_offset < config.ablation.eval_sequences:
        raise ConfigError("ablation.roll_offset", f"must be in [1, eval_sequences), got {config.ablation.roll_offset}")
    if config.ablation.source not in config.data or config.data[config.ablation.source].kind == "model_refined":
        raise ConfigError("ablation.source", f"must name a data source, got '{config.ablation.source}'")
    if not 1 <= config.icl.early <= config.icl.late < config.model.context_length:
        raise ConfigError("icl", f"need 1 <= early <= late < context_length, got early={config.icl.early}, "
                                 f"late={config.icl.late}")
    for i, request in enumerate(config.clustering):
        if request.algorithm not in ALGORITHMS:
            raise ConfigError(f"clustering[{i}].algorithm", f"must be one of {ALGORITHMS}")
        if request.k < 1:
            raise ConfigError(f"clustering[{i}].k", f"must be positive, got {request.k}")
        for source in request.sources:
            if source not in config.data:
                raise ConfigError(f"clustering[{i}].sources", f"unknown data source '{source}'")


def load_config(path: str) -> ExperimentConfig:
    """Read, strip comments, parse and validate a config file."""
    if not os.path.exists(path):
        raise ConfigError("--config", f"file not found: {path}")
    with open(path) as f:
        text = strip_comments(f.read())
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON at line {e.lineno}: {e.msg}") from None
    config = parse_config(data, base_dir=os.path.dirname(os.path.abspath(path)))
    logger.info(f"Loaded config '{config.name}' from {path} (hash {config_hash(config)[:12]})")
    return config


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON of everything that affects results."""
    document = {k: v for k, v in config.to_dict().items() if k not in RUNTIME_FIELDS}
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(config: ExperimentConfig, out: Optional[str] = None, workers: Optional[int] = None,
                    log_level: Optional[str] = None, log_dir: Optional[str] = None,
                    seed: Optional[int] = None, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """
    Command-line values win over ``WORKBENCH_*`` environment variables, which
    win over the config file.
    """
    environ = os.environ if environ is None else environ
    updates: Dict[str, object] = {}
    env_workers = environ.get(f"{ENV_PREFIX}WORKERS")
    if workers is not None:
        updates["workers"] = workers
    elif env_workers:
        try:
            updates["workers"] = int(env_workers)
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}WORKERS", f"must be an integer, got '{env_workers}'") from None
    for name, flag in (("output", out), ("log_level", log_level), ("log_dir", log_dir)):
        env_name = f"{ENV_PREFIX}{'OUT' if name == 'output' else name.upper()}"
        if flag is not None:
            updates[name] = flag
        elif environ.get(env_name):
            updates[name] = environ[env_name]
    if seed is not None:
        updates["seeds"] = (seed,)
    config = replace(config, **updates)
    if config.workers < 1:
        raise ConfigError("workers", f"must be positive, got {config.workers}")
    return config


def grid_targets(config: ExperimentConfig, model: ModelConfig) -> List[str]:
    """Expand 'heads' to every head id of the model."""
    targets = []
    for target in config.grid.targets:
        if target == "heads":
            targets.extend(f"head_{layer}_{head}" for layer, head in model.heads)
        else:
            targets.append(target)
    return list(dict.fromkeys(targets))
