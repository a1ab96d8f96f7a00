"""Configuration dataclasses and INI loading.

Desk-scale defaults live here. The [paper_reference] section of a config
file records the published full-scale constants verbatim; it is never fed
into the desk model, only validated and reported.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field

from .errors import ValidationError

# Published full-scale constants, kept for reporting and config validation.
PAPER_REFERENCE = {
    "lora_rank": 128,
    "learning_rate": 5e-6,
    "region_weight": 10.0,
    "attention_weight": 0.01,
    "stage1_steps": 70000,
    "stage2_steps": 150000,
    "stage3_steps": 10000,
    "resampler_depth": 3,
    "resampler_width": 3072,
    "bench_human_subjects": 20,
    "bench_object_subjects": 74,
    "bench_animal_subjects": 45,
    "bench_prompts": 300,
}


@dataclass
class ModelConfig:
    dim: int = 120
    heads: int = 4
    double_blocks: int = 4
    single_blocks: int = 4
    cond_dim: int = 120
    clip_dim: int = 64
    text_dim: int = 64
    text_depth: int = 2
    resampler_width: int = 128
    resampler_depth: int = 3
    resampler_heads: int = 4
    lora_rank: int = 4
    rope_base: float = 10000.0
    time_scale: float = 1000.0
    ffn_mult: int = 4
    offsets_to_embeddings: bool = False

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def n_blocks(self):
        return self.double_blocks + self.single_blocks

    def validate(self):
        for name in ("dim", "heads", "double_blocks", "single_blocks", "cond_dim",
                     "clip_dim", "text_dim", "text_depth", "resampler_width",
                     "resampler_depth", "resampler_heads", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"model.{name} must be positive")
        if self.lora_rank < 0:
            raise ValidationError("model.lora_rank must be >= 0")
        if self.dim % self.heads:
            raise ValidationError(f"model.dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 6:
            raise ValidationError(
                f"head_dim {self.dim // self.heads} not divisible by 6 "
                "(three rotary axes need paired dims)")
        if self.clip_dim % 2:
            raise ValidationError("model.clip_dim must be even for the time embedding")
        if self.resampler_width % self.resampler_heads:
            raise ValidationError("model.resampler_width not divisible by resampler_heads")
        return self


@dataclass
class TrainConfig:
    seed: int = 7
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch: int = 4
    log_every: int = 50
    sample_steps: int = 16
    lr_schedule: str = "constant"  # or "cosine", decaying to lr_floor per stage
    lr_floor: float = 0.0

    def validate(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValidationError("train.lr and train.eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("train.beta1/beta2 must be in [0, 1)")
        if self.batch < 1 or self.sample_steps < 1:
            raise ValidationError("train.batch and train.sample_steps must be >= 1")
        if self.log_every < 1:
            raise ValidationError("train.log_every must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown train.lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ValidationError("train.lr_floor is a fraction of train.lr in [0, 1]")
        return self


@dataclass
class StageSettings:
    """One training stage: step budget, loss weights, and the data mix.

    What trains and whether references are injected is a property of the
    stage index, not of these knobs: stage 0 pretrains the dense backbone
    and text encoder with flow loss only; stage 1 trains adapter and
    encoders; stages 2 and 3 add low-rank backbone adapters and reference
    injection; stage 3 brings in cross-image pairs.
    """
    steps: int = 0
    region_weight: float = 10.0
    attention_weight: float = 0.01
    mix_single: float = 1.0
    mix_multi: float = 0.0
    mix_concat: float = 0.0
    mix_cross: float = 0.0

    def validate(self, name="stage"):
        if self.steps < 0:
            raise ValidationError(f"{name}.steps must be >= 0")
        if self.region_weight < 0 or self.attention_weight < 0:
            raise ValidationError(f"{name} loss weights must be >= 0")
        mix = (self.mix_single, self.mix_multi, self.mix_concat, self.mix_cross)
        if any(m < 0 for m in mix):
            raise ValidationError(f"{name} mix fractions must be >= 0")
        if sum(mix) <= 0:
            raise ValidationError(f"{name} data mix sums to zero")
        return self

    def mix(self) -> dict:
        return {"single": self.mix_single, "multi": self.mix_multi,
                "concat": self.mix_concat, "cross": self.mix_cross}


@dataclass
class DataConfig:
    seed: int = 11
    n_single: int = 6000
    n_multi: int = 6000
    n_concat: int = 5000
    n_cross: int = 3000
    generic_prob: float = 0.35
    drop_size_prob: float = 0.25
    holdout: float = 0.2

    def validate(self):
        for name in ("n_single", "n_multi", "n_concat", "n_cross"):
            if getattr(self, name) < 0:
                raise ValidationError(f"data.{name} must be >= 0")
        for name in ("generic_prob", "drop_size_prob", "holdout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"data.{name} must be in [0, 1]")
        return self


@dataclass
class BenchConfig:
    seed: int = 23
    n_single: int = 12
    n_dual: int = 8
    n_triple: int = 6
    sample_steps: int = 16

    def validate(self):
        for name in ("n_single", "n_dual", "n_triple"):
            if getattr(self, name) < 1:
                raise ValidationError(f"bench.{name} must be >= 1")
        if self.sample_steps < 1:
            raise ValidationError("bench.sample_steps must be >= 1")
        return self


def _default_stages():
    # Step budgets sized for a desk run: the full schedule plus an ablated
    # rerun of stages 1-3 finishes inside two hours on one CPU core.
    return [
        StageSettings(steps=4000, region_weight=0.0, attention_weight=0.0,
                      mix_single=0.5, mix_multi=0.5),
        StageSettings(steps=1500, mix_single=0.6, mix_concat=0.4),
        StageSettings(steps=2500, mix_single=0.25, mix_multi=0.25, mix_concat=0.5),
        StageSettings(steps=500, mix_single=0.2, mix_multi=0.2,
                      mix_concat=0.3, mix_cross=0.3),
    ]


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stages: list = field(default_factory=_default_stages)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paper_reference: dict = field(default_factory=lambda: dict(PAPER_REFERENCE))

    def validate(self):
        self.model.validate()
        self.train.validate()
        if len(self.stages) != 4:
            raise ValidationError("expected stage0 through stage3 settings")
        for i, st in enumerate(self.stages):
            st.validate(f"stage{i}")
        if self.stages[0].mix_cross > 0 or self.stages[1].mix_cross > 0 \
                or self.stages[2].mix_cross > 0:
            raise ValidationError("cross-image pairs belong to stage3 only")
        self.data.validate()
        self.bench.validate()
        for key, want in PAPER_REFERENCE.items():
            if key not in self.paper_reference:
                raise ValidationError(f"paper_reference missing key {key!r}")
            if type(want)(self.paper_reference[key]) != want:
                raise ValidationError(
                    f"paper_reference.{key} = {self.paper_reference[key]!r}, expected {want!r}")
        return self


def _fill(section, obj):
    out = {}
    for key, default in asdict(obj).items():
        if key not in section:
            out[key] = default
            continue
        raw = section[key]
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                out[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                out[key] = int(raw)
            else:
                out[key] = float(raw)
        except ValueError:
            raise ValidationError(f"bad value for {key}: {raw!r}") from None
    unknown = set(section) - set(asdict(obj))
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return out


def load_config(path: str) -> Config:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ValidationError(f"config file not found: {path}")
    known = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "bench": BenchConfig}
    cfg = Config()
    for sect in cp.sections():
        if sect == "paper_reference":
            pr = dict(PAPER_REFERENCE)
            for key, raw in cp[sect].items():
                if key not in pr:
                    raise ValidationError(f"unknown paper_reference key {key!r}")
                pr[key] = type(pr[key])(float(raw)) if not isinstance(pr[key], int) else int(raw)
            cfg.paper_reference = pr
        elif sect in known:
            setattr(cfg, sect, known[sect](**_fill(cp[sect], known[sect]())))
        elif sect.startswith("stage") and sect[5:] in ("0", "1", "2", "3"):
            idx = int(sect[5:])
            cfg.stages[idx] = StageSettings(**_fill(cp[sect], cfg.stages[idx]))
        else:
            raise ValidationError(f"unknown config section [{sect}]")
    return cfg.validate()


def write_default(path: str):
    cp = configparser.ConfigParser()
    cfg = Config()
    for sect in ("model", "train", "data", "bench"):
        cp[sect] = {k: str(v) for k, v in asdict(getattr(cfg, sect)).items()}
    for i, st in enumerate(cfg.stages):
        cp[f"stage{i}"] = {k: str(v) for k, v in asdict(st).items()}
    cp["paper_reference"] = {k: str(v) for k, v in PAPER_REFERENCE.items()}
    with open(path, "w") as fh:
        cp.write(fh)
