"""Run configuration: a strict JSON document with data, model, augment, train and output sections."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import augment, data, models
from .augment import AugmentConfig
from .losses import LossWeights
from .nn import NetworkSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


IDX_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


@dataclass
class IdxDomain:
    train_images: str
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    class_count: int | None = None
    prepare: list = field(default_factory=list)

    def __post_init__(self):
        for step in self.prepare:
            data.parse_step(step)


@dataclass
class DataConfig:
    """Either ``synthetic`` or both of ``source`` and ``target``.

    Relative IDX paths resolve against the config file's directory.
    """

    synthetic: dict | None = None
    source: IdxDomain | None = None
    target: IdxDomain | None = None

    def __post_init__(self):
        if isinstance(self.source, dict):
            self.source = _strict(IdxDomain, self.source, "data.source")
        if isinstance(self.target, dict):
            self.target = _strict(IdxDomain, self.target, "data.target")
        has_idx = self.source is not None or self.target is not None
        if (self.synthetic is None) == (not has_idx):
            raise ConfigError("data: give either 'synthetic' or both 'source' and 'target'")
        if has_idx and (self.source is None or self.target is None):
            raise ConfigError("data: IDX input needs both 'source' and 'target'")
        if self.synthetic is not None:
            self.synthetic = synthetic_to_dict(synthetic_from_dict(self.synthetic))


def synthetic_from_dict(d: dict) -> data.SyntheticSpec:
    d = dict(d)
    shift = d.pop("shift", None)
    if shift is not None:
        shift = _strict(data.Shift, shift, "data.synthetic.shift")
        if shift.class_weights is not None:
            shift = replace(shift, class_weights=tuple(float(v) for v in shift.class_weights))
        d["shift"] = shift
    return _strict(data.SyntheticSpec, d, "data.synthetic")


def synthetic_to_dict(spec: data.SyntheticSpec) -> dict:
    d = asdict(spec)
    cw = d["shift"]["class_weights"]
    d["shift"]["class_weights"] = None if cw is None else list(cw)
    return d


@dataclass
class ModelConfig:
    architecture: str = "conv_small"
    width_multiplier: float | None = None
    bn_momentum: float = 0.01

    def __post_init__(self):
        if self.architecture not in models.PRESETS:
            raise ConfigError(f"model.architecture must be one of {models.PRESETS}")
        if self.width_multiplier is None:
            self.width_multiplier = {"conv_small": 0.25}.get(self.architecture, 1.0)
        if self.width_multiplier <= 0:
            raise ConfigError("model.width_multiplier must be > 0")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError("model.bn_momentum must lie in (0, 1)")


@dataclass
class AugmentSection:
    preset: str = "tf"
    hflip: bool = False
    source: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in augment.AUGMENT_PRESETS:
            raise ConfigError(f"augment.preset must be one of {augment.AUGMENT_PRESETS}")
        self.resolve()

    def resolve(self) -> tuple[AugmentConfig, AugmentConfig]:
        src, tgt = augment.preset(self.preset, self.hflip)
        out = []
        for name, base, over in (("source", src, self.source), ("target", tgt, self.target)):
            merged = {**asdict(base), **over}
            out.append(_strict(AugmentConfig, merged, f"augment.{name}"))
        return out[0], out[1]


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = sorted(set(d) - {"data", "model", "augment", "train", "output"})
        if unknown:
            raise ConfigError(f"config: unknown sections {unknown}")
        if "data" not in d:
            raise ConfigError("config: missing 'data' section")
        train = dict(d.get("train", {}))
        if "weights" in train:
            train["weights"] = _strict(LossWeights, train["weights"], "train.weights")
        return cls(
            data=_strict(DataConfig, d["data"], "data"),
            model=_strict(ModelConfig, d.get("model", {}), "model"),
            augment=_strict(AugmentSection, d.get("augment", {}), "augment"),
            train=_strict(TrainConfig, train, "train"),
            output=_strict(OutputConfig, d.get("output", {}), "output"),
            base_dir=Path(base_dir),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        """Fully expanded form; feeding it back gives an identical run."""
        src, tgt = self.augment.resolve()
        d = {
            "data": self._data_dict(),
            "model": asdict(self.model),
            "augment": {
                "preset": self.augment.preset,
                "hflip": self.augment.hflip,
                "source": _jsonable(asdict(src)),
                "target": _jsonable(asdict(tgt)),
            },
            "train": self.train.to_dict(),
            "output": asdict(self.output),
        }
        return d

    def _data_dict(self) -> dict:
        if self.data.synthetic is not None:
            return {"synthetic": self.data.synthetic}
        out = {}
        for role in ("source", "target"):
            dom = asdict(getattr(self.data, role))
            for k in IDX_KEYS:
                if dom[k] is not None:
                    dom[k] = str((self.base_dir / dom[k]).resolve())
            out[role] = dom
        return out


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# builders


def _load_idx_domain(dom: IdxDomain, role: str, base: Path) -> dict[str, data.DomainDataset]:
    out = {}
    steps = [data.parse_step(s) for s in dom.prepare]
    for split in ("train", "test"):
        images = getattr(dom, f"{split}_images")
        if images is None:
            continue
        labels = getattr(dom, f"{split}_labels")
        ds = data.load_idx(
            base / images,
            None if labels is None else base / labels,
            class_count=dom.class_count,
            name=f"{role}-{split}",
            standardize_images=False,
        )
        out[split] = data.prepare(ds, steps)
    return out


def build_domains(cfg: RunConfig) -> tuple[data.Domain, data.Domain]:
    """Source and target domains, standardised with source training statistics."""
    if cfg.data.synthetic is not None:
        return data.gen_synthetic(synthetic_from_dict(cfg.data.synthetic))
    raw = {}
    for role in ("source", "target"):
        splits = _load_idx_domain(getattr(cfg.data, role), role, cfg.base_dir)
        raw[f"{role}_train"] = splits["train"]
        # without a held-out file the training split doubles as the test split
        raw[f"{role}_test"] = splits.get("test", splits["train"])
    shapes = {v.shape for v in raw.values()}
    if len(shapes) != 1:
        raise ConfigError(f"data: source and target image shapes differ after preparation: {sorted(shapes)}")
    classes = {v.class_count for v in raw.values()}
    if len(classes) != 1:
        raise ConfigError(f"data: class counts differ between splits: {sorted(classes)}")
    return data.standardize_pair(raw)


def build_spec(cfg: RunConfig, input_shape, classes: int) -> NetworkSpec:
    m = cfg.model
    return models.build(m.architecture, input_shape, classes, m.width_multiplier, m.bn_momentum)

