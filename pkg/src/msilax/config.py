"""Run configuration: a sectioned INI file whose keys map 1:1 onto dataclass fields.

Resolution order: built-in defaults < config file < ``--set section.key=value``
overrides < dedicated command-line flags. Section seeds left unset inherit
``[run] seed``.
"""
import configparser
import io
from dataclasses import dataclass, field, fields, asdict

from msilax.datagen import DatasetSpec
from msilax.errors import ConfigError
from msilax.explainers import LaxConfig
from msilax.metrics import MetricConfig
from msilax.models import TrainConfig


@dataclass
class DataSection:
    seed: int = None
    count: int = 1000
    image_size: int = 32
    num_classes: int = 10
    noise_amplitude: float = 0.3
    distractor_min: int = 1
    distractor_max: int = 3
    digit_scale_min: float = 9.0
    digit_scale_max: float = 14.0


@dataclass
class TrainSection:
    seed: int = None
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 0.0


@dataclass
class LaxSection:
    seed: int = None
    lambda_entropy: float = 5.0
    temperature: float = 0.5
    epsilon: float = 1e-8
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64


@dataclass
class MetricsSection:
    alpha_min: float = 0.5
    alpha_step: float = 0.02
    score_mode: str = "accuracy"
    baseline_fill: float = 0.0
    percent_step: float = 0.02


@dataclass
class ExplainSection:
    seed: int = None
    occlusion_patch: int = 8
    occlusion_stride: int = 4
    occlusion_baseline: float = 0.0
    rise_n_masks: int = 500
    rise_grid: int = 4
    rise_keep_prob: float = 0.5


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "."


SECTIONS = {
    "data": DataSection, "train": TrainSection, "lax": LaxSection,
    "metrics": MetricsSection, "explain": ExplainSection, "run": RunSection,
}


def _coerce(cls, key, raw):
    f = {x.name: x for x in fields(cls)}[key]
    default = f.default
    typ = type(default) if default is not None else int
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if typ is bool:
            return str(raw).lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{cls.__name__[:-7].lower()}.{key}: cannot read {raw!r} as {typ.__name__}") from None


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    lax: LaxSection = field(default_factory=LaxSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    run: RunSection = field(default_factory=RunSection)

    # -- building
    def set(self, section, key, value):
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        if key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(getattr(self, section), key, _coerce(cls, key, value))

    def update_from_ini(self, text, source="<config>"):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from None
        for section in cp.sections():
            for key, value in cp.items(section):
                self.set(section, key, value)
        return self

    def apply_overrides(self, items):
        for item in items or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            self.set(section, key, value)
        return self

    @classmethod
    def load(cls, path=None, overrides=None):
        cfg = cls()
        if path:
            try:
                with open(path) as f:
                    text = f.read()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
            cfg.update_from_ini(text, str(path))
        return cfg.apply_overrides(overrides)

    def resolved(self):
        """Copy with every unset seed filled from ``[run] seed``."""
        out = RunConfig(**{name: type(getattr(self, name))(**asdict(getattr(self, name))) for name in SECTIONS})
        for name in SECTIONS:
            sec = getattr(out, name)
            if getattr(sec, "seed", 0) is None:
                sec.seed = out.run.seed
        return out

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        r = self.resolved()
        for name in SECTIONS:
            cp[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(getattr(r, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self):
        r = self.resolved()
        return {name: asdict(getattr(r, name)) for name in SECTIONS}

    # -- views
    def dataset_spec(self):
        d = self.resolved().data
        return DatasetSpec(seed=d.seed, count=d.count, image_size=d.image_size, num_classes=d.num_classes,
                           noise_amplitude=d.noise_amplitude,
                           distractor_count_range=(d.distractor_min, d.distractor_max),
                           digit_scale_range=(d.digit_scale_min, d.digit_scale_max))

    def train_config(self):
        t = self.resolved().train
        return TrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, seed=t.seed,
                           weight_decay=t.weight_decay)

    def lax_config(self):
        return LaxConfig(**asdict(self.resolved().lax))

    def metric_config(self):
        return MetricConfig(**asdict(self.metrics)).validate()

    def explain_options(self):
        e = self.resolved().explain
        return {
            "seed": e.seed,
            "occlusion": {"patch": e.occlusion_patch, "stride": e.occlusion_stride, "baseline": e.occlusion_baseline},
            "rise": {"n_masks": e.rise_n_masks, "grid": e.rise_grid, "keep_prob": e.rise_keep_prob},
        }
