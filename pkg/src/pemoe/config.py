"""Pipeline configuration: strict `key = value` files.

Unknown keys are rejected so typos fail loudly instead of silently falling
back to defaults. Everything randomized downstream derives from the single
`seed` value here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import PLATFORMS, Platform, SyntheticSpec
from .train import ConfigError, TrainConfig

_REFINERS_HELP = "identity, template-stub, or command:<cmdline>"


@dataclass
class PipelineConfig:
    """Resolved settings for the gen/sanitize/train/eval pipeline.

    The corpus comes either from `corpus_path` or from the synthetic
    generator (the default); setting both explicitly is an error. For a
    loaded corpus the embedding dims come from its header and the d_t/d_v
    values here apply only to generation.
    """

    corpus_path: str | None = None
    locations_per_platform: int = 30
    queries_per_location: int = 48
    noise_sigma: float = 0.05
    platform_rotation: float = 1.0
    d_t: int = 48
    d_v: int = 40
    d_e: int = 128
    h_g: int = 32
    h_e: int = 96
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    temperature: float = 0.05
    triplet_margin: float = 0.2
    negatives_per_query: int = 4
    val_fraction: float = 0.2
    sanitize_platforms: tuple[Platform, ...] = (Platform.SATELLITE,)
    keyword_file: str | None = None
    refiner: str = "identity"
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1
    mine_within_platform: bool = False
    provided_keys: frozenset = field(default_factory=frozenset, repr=False, compare=False)

    def validate(self) -> "PipelineConfig":
        if "corpus_path" in self.provided_keys and "locations_per_platform" in self.provided_keys:
            raise ConfigError("config sets both corpus_path and locations_per_platform; choose one corpus source")
        if self.corpus_path is not None and not Path(self.corpus_path).exists():
            raise ConfigError(f"corpus_path does not exist: {self.corpus_path}")
        if self.keyword_file is not None and not Path(self.keyword_file).exists():
            raise ConfigError(f"keyword_file does not exist: {self.keyword_file}")
        for name in ("d_e", "h_g", "h_e"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")
        if self.refiner not in ("identity", "template-stub") and not self.refiner.startswith("command:"):
            raise ConfigError(f"refiner must be one of {_REFINERS_HELP}, got {self.refiner!r}")
        self.train_config()
        if self.corpus_path is None:
            self.synthetic_spec().validate()
        return self

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            locations_per_platform=self.locations_per_platform,
            d_t=self.d_t,
            d_v=self.d_v,
            noise_sigma=self.noise_sigma,
            queries_per_location=self.queries_per_location,
            platform_rotation=self.platform_rotation,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            temperature=self.temperature,
            triplet_margin=self.triplet_margin,
            negatives_per_query=self.negatives_per_query,
            seed=self.seed,
        ).validate()


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key/value pairs from `key = value` lines; `#` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


_INT_KEYS = {
    "locations_per_platform",
    "queries_per_location",
    "d_t",
    "d_v",
    "d_e",
    "h_g",
    "h_e",
    "stage1_epochs",
    "stage2_epochs",
    "batch_size",
    "negatives_per_query",
    "seed",
    "workers",
}
_FLOAT_KEYS = {
    "noise_sigma",
    "platform_rotation",
    "learning_rate",
    "weight_decay",
    "temperature",
    "triplet_margin",
    "val_fraction",
}
_BOOL_KEYS = {"mine_within_platform"}
_STR_KEYS = {"corpus_path", "keyword_file", "refiner", "output_dir"}
_PLATFORM_LIST_KEYS = {"sanitize_platforms"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS | _PLATFORM_LIST_KEYS

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _convert(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        kind = "an integer" if key in _INT_KEYS else "a number"
        raise ConfigError(f"config key {key!r} needs {kind}, got {value!r}") from None
    if key in _BOOL_KEYS:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"config key {key!r} needs a boolean, got {value!r}")
    if key in _PLATFORM_LIST_KEYS:
        tags = [t.strip() for t in value.split(",") if t.strip()]
        if not tags:
            return ()
        parsed = tuple(Platform.parse(t) for t in tags)
        if len(set(parsed)) != len(parsed):
            raise ConfigError(f"config key {key!r} repeats a platform: {value!r}")
        return parsed
    return value


def config_from_mapping(raw: dict[str, str]) -> PipelineConfig:
    values = {}
    for key, value in raw.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, value)
    cfg = PipelineConfig(**values, provided_keys=frozenset(values))
    return cfg.validate()


def load_pipeline_config(path: str | Path | None) -> PipelineConfig:
    """Load and validate a config file; None gives the defaults."""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    return config_from_mapping(parse_config_text(path.read_text(encoding="utf-8")))


def default_config_text() -> str:
    """A fully commented config file matching the built-in defaults."""
    cfg = PipelineConfig()
    lines = ["# pemoe pipeline configuration (defaults shown)"]
    for f in fields(cfg):
        if f.name in ("provided_keys", "corpus_path", "keyword_file"):
            continue
        value = getattr(cfg, f.name)
        if f.name == "sanitize_platforms":
            value = ",".join(p.value for p in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    lines.append("# corpus_path = path/to/corpus.txt   (overrides the synthetic generator)")
    lines.append("# keyword_file = path/to/keywords.txt")
    return "\n".join(lines) + "\n"
