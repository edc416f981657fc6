"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping

from ..attention import AttentionSource
from ..losses import AwmPlacement, LossWeights
from ..synthdata import SceneSpec, StyleTransform


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AwadaConfig:
    # data
    image_size: int = 64
    n_source: int = 200
    n_target: int = 200
    n_val: int = 50
    data_seed: int = 1
    style: str = "fog"
    fog_beta: float = 1.5
    fog_airlight: float = 0.85
    # GAN training
    patch_size: int = 32
    batch_size: int = 2
    epochs: int = 20
    max_steps: int = 0
    gan_seed: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    gan_form: str = "least_squares"
    instance_norm: bool = False
    fresh_init: bool = True
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 10.0
    a4: float = 1.0
    awm_disc: bool = True
    awm_gen: bool = True
    awm_cyc: bool = False
    awm_sem: bool = False
    awm_normalize: bool = False
    sem_bidirectional: bool = False
    # attention
    attn_source: str = "detector"
    attn_threshold: float = 0.5
    attn_fn: str = "hard"
    inflate_factor: float = 1.2
    random_p: float = 0.3
    random_seed: int = 7
    # auxiliary networks
    seg_seed: int = 11
    seg_steps: int = 300
    det_seed: int = 0
    det_steps: int = 400
    det_batch: int = 4
    det_lr: float = 1e-2
    # evaluation grid
    eval_gan_seeds: str = "0,1,2"
    eval_det_seeds: str = "0,1,2"

    def __post_init__(self):
        if self.patch_size > self.image_size:
            raise ConfigError(f"patch_size {self.patch_size} exceeds image_size {self.image_size}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.gan_form not in ("log", "least_squares"):
            raise ConfigError(f"unknown gan_form {self.gan_form!r}")
        if self.style not in ("fog", "colorshift"):
            raise ConfigError(f"unknown style {self.style!r}")
        self.attention_source()
        self.loss_weights()

    # ------------------------------------------------------------ views
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.a1, self.a2, self.a3, self.a4)

    def placement(self) -> AwmPlacement:
        return AwmPlacement(self.awm_disc, self.awm_gen, self.awm_cyc, self.awm_sem)

    def attention_source(self) -> AttentionSource:
        return AttentionSource(kind=self.attn_source, threshold=self.attn_threshold, factor=self.inflate_factor,
                               p=self.random_p, seed=self.random_seed, fn=self.attn_fn)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(size=self.image_size)

    def style_transform(self) -> StyleTransform:
        if self.style == "fog":
            return StyleTransform("fog", beta=self.fog_beta, airlight=self.fog_airlight)
        return StyleTransform("colorshift", matrix=((0.2, 0.7, 0.1), (0.6, 0.2, 0.2), (0.1, 0.3, 0.6)),
                              bias=(0.05, 0.0, 0.1))

    def total_steps(self) -> int:
        if self.max_steps > 0:
            return self.max_steps
        per_epoch = -(-self.n_source // self.batch_size)
        return self.epochs * per_epoch

    def seed_list(self, key: str) -> List[int]:
        raw = getattr(self, key)
        return [int(s) for s in str(raw).split(",") if s.strip()]

    def replace(self, **changes) -> "AwadaConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def training_hash(self) -> str:
        """Hash of the fields that shape GAN training (used to guard checkpoint resumption)."""
        keys = ("image_size", "n_source", "n_target", "data_seed", "style", "fog_beta", "fog_airlight",
                "patch_size", "batch_size", "gan_seed", "lr", "beta1", "beta2", "gan_form", "instance_norm",
                "a1", "a2", "a3", "a4", "awm_disc", "awm_gen", "awm_cyc", "awm_sem", "awm_normalize",
                "sem_bidirectional", "seg_seed", "seg_steps")
        d = self.as_dict()
        return hashlib.sha256(json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(AwadaConfig)}


def coerce(key: str, value: str) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    text = value.strip()
    try:
        if kind in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for {key} ({kind})") from exc
    return text


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path=None, overrides: Mapping[str, Any] = ()) -> AwadaConfig:
    """Defaults, then the config file, then explicit overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, value in dict(overrides).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
    return AwadaConfig(**values)


def dump_config(cfg: AwadaConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.as_dict().items())
