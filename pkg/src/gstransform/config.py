"""Pipeline configuration: one TOML file, one seed."""
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .embed import EmbedderConfig
from .errors import ConfigError
from .evaluation import TASKS
from .llm import LlmProviderConfig
from .taxonomy import Instruction, TaxonomyOptions
from .transform import TrainConfig


@dataclass
class EvalConfig:
    task: str = "clustering"
    aspects: list = field(default_factory=list)
    n_samples: int = 50000

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown eval task {self.task!r}; expected one of {TASKS}")


@dataclass
class TrainSection(TrainConfig):
    method: str = "gst"
    eigen_solver: str = "jacobi"

    def __post_init__(self):
        super().__post_init__()
        if self.method not in ("gst", "fda"):
            raise ConfigError(f"unknown train method {self.method!r}")

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class PipelineConfig:
    corpus_path: str
    store_path: str
    output_dir: str
    instruction: Instruction
    seed: int = 0
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    llm: LlmProviderConfig = field(default_factory=LlmProviderConfig)
    taxonomy: TaxonomyOptions = field(default_factory=TaxonomyOptions)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed):
        """Propagate the single run seed into every stage."""
        self.seed = int(seed)
        self.taxonomy.seed = self.seed
        self.train.seed = self.seed

    def to_dict(self):
        return _drop_none(asdict(self))

    def dumps(self):
        return tomli_w.dumps(self.to_dict())

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        sections = {
            "instruction": Instruction,
            "embedder": EmbedderConfig,
            "llm": LlmProviderConfig,
            "taxonomy": TaxonomyOptions,
            "train": TrainSection,
            "eval": EvalConfig,
        }
        try:
            kwargs = {}
            for name, typ in sections.items():
                if name in d:
                    body = d.pop(name)
                    if not isinstance(body, dict):
                        raise ConfigError(f"[{name}] must be a table")
                    known = {f.name for f in fields(typ)}
                    extra = set(body) - known
                    if extra:
                        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
                    kwargs[name] = typ(**body)
            if "instruction" not in kwargs:
                raise ConfigError("config needs an [instruction] table")
            top = {f.name for f in fields(cls)} - set(sections)
            extra = set(d) - top
            if extra:
                raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
            missing = {"corpus_path", "store_path", "output_dir"} - set(d)
            if missing:
                raise ConfigError(f"config lacks {sorted(missing)}")
            cfg = cls(**d, **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if base_dir is not None:
            cfg.resolve_paths(base_dir)
        return cfg

    def resolve_paths(self, base_dir):
        base = Path(base_dir)
        for name in ("corpus_path", "store_path", "output_dir"):
            p = Path(getattr(self, name))
            if not p.is_absolute():
                setattr(self, name, str(base / p))
        if self.llm.fixture_path and not Path(self.llm.fixture_path).is_absolute():
            self.llm.fixture_path = str(base / self.llm.fixture_path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = tomli.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj
