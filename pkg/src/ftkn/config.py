"""Run configuration: nested sections, JSON/TOML loading, presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .nn.layers import ConfigError

try:
    import tomllib
except ImportError:  # 3.10
    import tomli as tomllib


@dataclass
class ModelCfg:
    dim: int = 256
    heads: int = 8


@dataclass
class ScalingCfg:
    scorer: str = "adaptive"
    beta1: float = 0.5
    eta: float = 0.2
    temperature: float = 1.0
    ssp_layers: int = 2


@dataclass
class FusionCfg:
    frames: int = 16          # trajectory length T
    groups: int = 4           # group count G
    strategy: str = "equal_stride"
    beta2: float = 0.5
    k_out: int = 0            # 0 means "use sampling.k"
    schedule: list = field(default=None)  # explicit [ratio, groups] stage pairs


@dataclass
class SamplingCfg:
    k: int = 48
    oversample: int = 4       # current-frame budget = oversample * k
    gamma: float = 1.0        # joint sweep factor on k and the budget


@dataclass
class BankCfg:
    t_max: int = 32
    spill_dir: str = ""


@dataclass
class SceneCfg:
    count: int = 200
    frames: int = 10
    objects: int = 3
    clutter_density: float = 0.15  # background points per square meter
    area: float = 40.0             # square half-extent, meters
    point_min: int = 5
    point_max: int = 500
    dt: float = 0.1
    speed_max: float = 6.0
    wobble: float = 0.05           # per-frame Gaussian velocity perturbation


@dataclass
class RpnCfg:
    sigma_xyz: float = 0.25
    sigma_size: float = 0.08
    sigma_yaw: float = 0.08
    recall: float = 0.95
    fp_rate: float = 0.2


@dataclass
class TrainCfg:
    epochs: int = 6
    batch: int = 5
    lr: float = 3e-4
    alpha: float = 2.0
    focal_after: int = 3    # epochs trained on full clouds before focal phase
    refresh_after: int = 5  # re-materialize focal points after this epoch
    epa_threshold: int = 28
    epa_window: int = 2
    positive_iou: float = 0.55
    holdout: int = 50
    item_frames: int = 1     # trailing frames per scene that contribute items
    pos_per_batch: int = 0   # stratified batches with this many positives when > 0


_SECTIONS = {
    "model": ModelCfg,
    "scaling": ScalingCfg,
    "fusion": FusionCfg,
    "sampling": SamplingCfg,
    "bank": BankCfg,
    "scene": SceneCfg,
    "rpn": RpnCfg,
    "train": TrainCfg,
}

# accepted spellings for fields whose short names appear in reports
_ALIASES = {
    "fusion": {"t": "frames", "g": "groups"},
    "scaling": {"beta2": None},  # routed to fusion.beta2
}


@dataclass
class PipelineConfig:
    model: ModelCfg = field(default_factory=ModelCfg)
    scaling: ScalingCfg = field(default_factory=ScalingCfg)
    fusion: FusionCfg = field(default_factory=FusionCfg)
    sampling: SamplingCfg = field(default_factory=SamplingCfg)
    bank: BankCfg = field(default_factory=BankCfg)
    scene: SceneCfg = field(default_factory=SceneCfg)
    rpn: RpnCfg = field(default_factory=RpnCfg)
    train: TrainCfg = field(default_factory=TrainCfg)

    def focal_k(self):
        """Per-frame focal budget K after the gamma sweep factor."""
        return max(1, round(self.sampling.k * self.sampling.gamma))

    def sample_budget(self):
        """Current-frame oversampling budget (the 4K of the default shape)."""
        return self.sampling.oversample * self.focal_k()

    def fusion_k_out(self):
        return self.fusion.k_out or self.focal_k()

    def apply(self, updates):
        """Deep-merge a {section: {key: value}} dict into this config."""
        for section, values in updates.items():
            if section not in _SECTIONS:
                raise ConfigError("unknown config section %r" % (section,))
            if not isinstance(values, dict):
                raise ConfigError("section %r must be a table" % (section,))
            for key, value in values.items():
                name = key.lower()
                alias = _ALIASES.get(section, {})
                if name in alias:
                    mapped = alias[name]
                    if mapped is None:
                        self.fusion.beta2 = float(value)
                        continue
                    name = mapped
                target = getattr(self, section)
                if not hasattr(target, name):
                    raise ConfigError(
                        "unknown key %r in section %r" % (key, section))
                setattr(target, name, value)
        return self

    def flat(self):
        """Sorted `section.key -> value` view for report snapshots."""
        out = {}
        for section in _SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                out["%s.%s" % (section, f.name)] = getattr(
                    getattr(self, section), f.name)
        return dict(sorted(out.items()))

    def clone(self):
        cfg = PipelineConfig()
        for section in _SECTIONS:
            setattr(cfg, section, dataclasses.replace(getattr(self, section)))
        return cfg


def desk_config():
    """Small shapes tuned so full staged training runs in minutes.

    Scenes are kept compact (near objects, dense clusters) and the mock
    RPN noise is large enough that refinement has real headroom; the
    training knobs are rescaled for the short desk schedule (a few
    hundred steps instead of a full epoch-scale run).
    """
    cfg = PipelineConfig()
    cfg.model = ModelCfg(dim=64, heads=4)
    cfg.fusion = FusionCfg(frames=8, groups=4, k_out=0)
    cfg.sampling = SamplingCfg(k=16, oversample=4)
    cfg.scene = SceneCfg(count=200, frames=10, area=24.0)
    cfg.rpn = RpnCfg(sigma_xyz=0.4)
    cfg.train = TrainCfg(batch=24, lr=3e-3, alpha=200.0, epa_threshold=9,
                         item_frames=4, pos_per_batch=16)
    return cfg


def paper_shape_config():
    """Published shape constants; used for schedule and bench checks."""
    return PipelineConfig()


def load_config(path, base=None):
    """Read a JSON or TOML config file over `base` (default paper shape)."""
    cfg = (base or PipelineConfig()).clone()
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8")
    if str(path).endswith(".toml"):
        data = tomllib.loads(text)
    elif str(path).endswith(".json"):
        data = json.loads(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = tomllib.loads(text)
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in ("desk", "paper"):
            raise ConfigError("unknown preset %r" % (preset,))
        cfg = desk_config() if preset == "desk" else paper_shape_config()
    return cfg.apply(data)
