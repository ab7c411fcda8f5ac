"""Run configuration: flat key-value files with sections, canonicalization,
and a stable fingerprint.

The fingerprint is a sha256 over the canonical serialization of every
section except [paths], so relocating corpora or output directories never
invalidates a checkpoint. Environment variables MELFM_PATH_<KEY> override
entries of [paths] only.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from melfm.encoder import EncoderConfig
from melfm.quantizer import MODE_NEAREST_NORMALIZED, MODE_NORM_DIFFERENCE


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


ENV_PREFIX = "MELFM_PATH_"


@dataclass
class FeatureConfig:
    n_fft: int = 2048
    mel_bands: int = 128
    fmin: float = 0.0
    fmax: float = 12000.0


@dataclass
class QuantizerConfig:
    codebook_size: int = 8192
    code_dim: int = 16
    mode: str = MODE_NEAREST_NORMALIZED
    seed: int = 101


@dataclass
class MaskingConfig:
    span_ms: float = 400.0
    prob: float = 0.6
    noise_std: float = 0.1


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    warmup_steps: int = 300
    steps: int = 2000
    batch_size: int = 4
    checkpoint_every: int = 500
    log_every: int = 50


@dataclass
class RunConfig:
    seed: int = 7
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        try:
            self.encoder.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.encoder.input_dim != self.features.mel_bands:
            raise ConfigError(
                f"encoder input_dim {self.encoder.input_dim} must equal mel_bands {self.features.mel_bands}"
            )
        if self.quantizer.mode not in (MODE_NEAREST_NORMALIZED, MODE_NORM_DIFFERENCE):
            raise ConfigError(f"unknown quantizer mode {self.quantizer.mode!r}")
        if self.quantizer.codebook_size < 1 or self.quantizer.code_dim < 1:
            raise ConfigError("codebook_size and code_dim must be >= 1")
        if not (0.0 <= self.masking.prob <= 1.0):
            raise ConfigError(f"masking prob must be in [0, 1], got {self.masking.prob}")
        if self.masking.span_ms <= 0:
            raise ConfigError("span_ms must be positive")
        if self.optimizer.lr <= 0 or self.optimizer.steps < 0 or self.optimizer.batch_size < 1:
            raise ConfigError("optimizer fields out of range")
        if self.optimizer.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.features.n_fft <= 0 or self.features.n_fft & (self.features.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.features.n_fft}")
        return self


_INT_FIELDS = {
    ("run", "seed"),
    ("encoder", "d_model"),
    ("encoder", "layers"),
    ("encoder", "heads"),
    ("encoder", "ffn_mult"),
    ("encoder", "conv_kernel"),
    ("features", "token_rate"),
    ("features", "input_seconds"),
    ("features", "n_fft"),
    ("features", "mel_bands"),
    ("quantizer", "codebook_size"),
    ("quantizer", "code_dim"),
    ("quantizer", "seed"),
    ("optimizer", "warmup_steps"),
    ("optimizer", "steps"),
    ("optimizer", "batch_size"),
    ("optimizer", "checkpoint_every"),
    ("optimizer", "log_every"),
}
_FLOAT_FIELDS = {
    ("features", "fmin"),
    ("features", "fmax"),
    ("masking", "span_ms"),
    ("masking", "prob"),
    ("masking", "noise_std"),
    ("optimizer", "lr"),
}
_STR_FIELDS = {("encoder", "kind"), ("quantizer", "mode")}


def _coerce(section: str, key: str, raw: str):
    if (section, key) in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from e
    if (section, key) in _FLOAT_FIELDS:
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from e
    if (section, key) in _STR_FIELDS or section == "paths":
        return raw.strip()
    raise ConfigError(f"unknown configuration key [{section}] {key}")


def parse_config(text: str, apply_env: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e

    values: dict[tuple[str, str], object] = {}
    for section in parser.sections():
        for key in parser[section]:
            values[(section, key)] = _coerce(section, key, parser[section][key])

    def take(section, key, default):
        return values.pop((section, key), default)

    enc_kwargs = dict(
        kind=take("encoder", "kind", "conformer"),
        d_model=take("encoder", "d_model", 128),
        layers=take("encoder", "layers", 4),
        heads=take("encoder", "heads", 4),
        ffn_mult=take("encoder", "ffn_mult", 4),
        conv_kernel=take("encoder", "conv_kernel", 31),
        token_rate=take("features", "token_rate", 25),
        max_input_seconds=take("features", "input_seconds", 5),
    )
    features = FeatureConfig(
        n_fft=take("features", "n_fft", 2048),
        mel_bands=take("features", "mel_bands", 128),
        fmin=take("features", "fmin", 0.0),
        fmax=take("features", "fmax", 12000.0),
    )
    enc_kwargs["input_dim"] = features.mel_bands
    try:
        encoder = EncoderConfig(**enc_kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    cfg = RunConfig(
        seed=take("run", "seed", 7),
        encoder=encoder,
        features=features,
        quantizer=QuantizerConfig(
            codebook_size=take("quantizer", "codebook_size", 8192),
            code_dim=take("quantizer", "code_dim", 16),
            mode=take("quantizer", "mode", MODE_NEAREST_NORMALIZED),
            seed=take("quantizer", "seed", 101),
        ),
        masking=MaskingConfig(
            span_ms=take("masking", "span_ms", 400.0),
            prob=take("masking", "prob", 0.6),
            noise_std=take("masking", "noise_std", 0.1),
        ),
        optimizer=OptimizerConfig(
            lr=take("optimizer", "lr", 1e-4),
            warmup_steps=take("optimizer", "warmup_steps", 300),
            steps=take("optimizer", "steps", 2000),
            batch_size=take("optimizer", "batch_size", 4),
            checkpoint_every=take("optimizer", "checkpoint_every", 500),
            log_every=take("optimizer", "log_every", 50),
        ),
        paths={key: str(v) for (sec, key), v in values.items() if sec == "paths"},
    )
    leftovers = [(s, k) for (s, k) in values if s != "paths"]
    if leftovers:
        raise ConfigError(f"unknown configuration keys: {leftovers}")
    if apply_env:
        for name, value in os.environ.items():
            if name.startswith(ENV_PREFIX):
                cfg.paths[name[len(ENV_PREFIX) :].lower()] = value
    return cfg.validate()


def load_config(path: str | Path, apply_env: bool = True) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), apply_env=apply_env)


def serialize_config(cfg: RunConfig, include_paths: bool = True) -> str:
    """Canonical form: fixed section/key order, normalized value formatting."""
    out = io.StringIO()

    def emit(section: str, items: list[tuple[str, object]]):
        out.write(f"[{section}]\n")
        for key, value in items:
            if isinstance(value, float):
                value = repr(value)
            out.write(f"{key} = {value}\n")
        out.write("\n")

    e, f, q, m, o = cfg.encoder, cfg.features, cfg.quantizer, cfg.masking, cfg.optimizer
    emit("run", [("seed", cfg.seed)])
    emit(
        "encoder",
        [
            ("kind", e.kind),
            ("d_model", e.d_model),
            ("layers", e.layers),
            ("heads", e.heads),
            ("ffn_mult", e.ffn_mult),
            ("conv_kernel", e.conv_kernel),
        ],
    )
    emit(
        "features",
        [
            ("token_rate", e.token_rate),
            ("input_seconds", e.max_input_seconds),
            ("n_fft", f.n_fft),
            ("mel_bands", f.mel_bands),
            ("fmin", f.fmin),
            ("fmax", f.fmax),
        ],
    )
    emit(
        "quantizer",
        [
            ("codebook_size", q.codebook_size),
            ("code_dim", q.code_dim),
            ("mode", q.mode),
            ("seed", q.seed),
        ],
    )
    emit("masking", [("span_ms", m.span_ms), ("prob", m.prob), ("noise_std", m.noise_std)])
    emit(
        "optimizer",
        [
            ("lr", o.lr),
            ("warmup_steps", o.warmup_steps),
            ("steps", o.steps),
            ("batch_size", o.batch_size),
            ("checkpoint_every", o.checkpoint_every),
            ("log_every", o.log_every),
        ],
    )
    if include_paths and cfg.paths:
        emit("paths", sorted(cfg.paths.items()))
    return out.getvalue()


def fingerprint(cfg: RunConfig) -> str:
    canon = serialize_config(cfg, include_paths=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "encoder": asdict(cfg.encoder),
        "features": asdict(cfg.features),
        "quantizer": asdict(cfg.quantizer),
        "masking": asdict(cfg.masking),
        "optimizer": asdict(cfg.optimizer),
        "paths": dict(cfg.paths),
    }


def config_from_dict(d: dict) -> RunConfig:
    return RunConfig(
        seed=int(d["seed"]),
        encoder=EncoderConfig(**d["encoder"]),
        features=FeatureConfig(**d["features"]),
        quantizer=QuantizerConfig(**d["quantizer"]),
        masking=MaskingConfig(**d["masking"]),
        optimizer=OptimizerConfig(**d["optimizer"]),
        paths=dict(d.get("paths", {})),
    ).validate()
