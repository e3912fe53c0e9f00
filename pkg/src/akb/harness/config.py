"""Strict JSON experiment configuration.

Every block is a dataclass; unknown keys anywhere are a hard error that
names the offending key path.  Relative paths resolve against the config
file's directory.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..entropy import DEFAULT_RATES, check_rate_set

SCHEMES = ("akb_jscc", "akb_jscc_no_ckb", "fixed_rate_jscc", "jpeg_ldpc")
LEARNED = ("akb_jscc", "akb_jscc_no_ckb", "fixed_rate_jscc")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str | None = None
    crop: int = 64
    manifest: str | None = None
    split_counts: list[int] | None = None
    fractions: list[float] | None = None
    test_limit: int | None = None


@dataclass
class CodecBlock:
    checkpoint: str | None = None
    token_dim: int = 64
    reduction: int = 16
    width: int = 48
    jscc_width: int = 96
    n_blocks: int = 2
    backbone: str = "conv"
    lambda_rd: float = 2e-5
    train_snr_db: float = 10.0
    n_steps: int = 20000
    batch_size: int = 16
    learning_rate: float = 1e-3
    eta_spread: float = 2.0
    auto_eta: bool = True
    uniform_rate_prob: float = 0.25

    def __post_init__(self):
        if self.backbone not in ("conv", "window_attention"):
            raise ConfigError(f"codec.backbone: unknown backbone {self.backbone!r}")
        if self.lambda_rd < 0:
            raise ConfigError("codec.lambda_rd must be >= 0")


@dataclass
class EntropyBlock:
    rate_set: list[int] = field(default_factory=lambda: list(DEFAULT_RATES))
    eta: float = 0.5

    def __post_init__(self):
        try:
            check_rate_set(self.rate_set)
        except ValueError as exc:
            raise ConfigError(f"entropy.rate_set: {exc}") from None
        if not self.eta > 0:
            raise ConfigError("entropy.eta must be positive")


@dataclass
class AgentBlock:
    checkpoint: str | None = None
    n_episodes: int = 2000
    snr_choices: list[float] = field(default_factory=lambda: [10.0])
    action_mode: str = "global"
    channels: int = 16
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 32
    learning_rate: float = 3e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    steps_per_update: int = 64
    psnr_floor_db: float = 20.0
    psnr_span_db: float = 20.0
    cbr_scale: float = 0.06
    reward_baseline: str = "none"

    def __post_init__(self):
        if self.action_mode not in ("global", "region4x4"):
            raise ConfigError(f"agent.action_mode: unknown mode {self.action_mode!r}")
        if self.reward_baseline not in ("none", "neutral"):
            raise ConfigError(f"agent.reward_baseline: unknown value {self.reward_baseline!r}")

    def estimator_params(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("checkpoint")
        d["snr_choices"] = tuple(d["snr_choices"])
        return d


@dataclass
class KBBlock:
    path: str | None = None
    kb_dim: int = 512
    kb_provider: str = "stub"
    kb_provider_url: str | None = None
    kb_fallback: str | None = "stub"
    prompt: str = "Describe this image briefly."

    def __post_init__(self):
        if self.kb_provider not in ("stub", "http"):
            raise ConfigError(f"kb.kb_provider: unknown provider {self.kb_provider!r}")
        if self.kb_provider == "http" and not self.kb_provider_url:
            raise ConfigError("kb.kb_provider_url is required for the http provider")
        if self.kb_fallback not in (None, "stub"):
            raise ConfigError("kb.kb_fallback must be 'stub' or null")


@dataclass
class BaselineBlock:
    quality: int = 75
    ldpc_fixture: str | None = None
    max_iters: int = 50
    send_header: bool = False

    def __post_init__(self):
        if not 1 <= self.quality <= 100:
            raise ConfigError("baseline.quality must be in 1..100")


@dataclass
class SweepBlock:
    cbr_targets: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.03, 0.04, 0.05])
    snr_db: float = 10.0
    tolerance: float = 0.05
    max_probes: int = 12
    eta_bounds: list[float] = field(default_factory=lambda: [1e-3, 16.0])
    quality_bounds: list[int] = field(default_factory=lambda: [1, 100])


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schemes: list[str] = field(default_factory=lambda: list(SCHEMES))
    codec: CodecBlock = field(default_factory=CodecBlock)
    entropy: EntropyBlock = field(default_factory=EntropyBlock)
    agent: AgentBlock = field(default_factory=AgentBlock)
    kb: KBBlock = field(default_factory=KBBlock)
    baseline: BaselineBlock = field(default_factory=BaselineBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    snr_db: list[float] = field(default_factory=lambda: [float(s) for s in range(0, 15, 2)])
    seed: int = 0
    output_dir: str = "akb_out"

    def __post_init__(self):
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"schemes: unknown scheme(s) {bad}; expected a subset of {list(SCHEMES)}")
        if not self.snr_db:
            raise ConfigError("snr_db must list at least one SNR")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, f"{path}.{k}" if path else k)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p).expanduser()
    return str(q if q.is_absolute() else (base / q))


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    base = Path(base_dir)
    cfg.dataset.path = _resolve(base, cfg.dataset.path)
    cfg.dataset.manifest = _resolve(base, cfg.dataset.manifest)
    cfg.codec.checkpoint = _resolve(base, cfg.codec.checkpoint)
    cfg.agent.checkpoint = _resolve(base, cfg.agent.checkpoint)
    cfg.kb.path = _resolve(base, cfg.kb.path)
    cfg.baseline.ldpc_fixture = _resolve(base, cfg.baseline.ldpc_fixture)
    cfg.output_dir = _resolve(base, cfg.output_dir)
    for label, p in (("dataset.path", cfg.dataset.path), ("baseline.ldpc_fixture", cfg.baseline.ldpc_fixture)):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{label}: file not found: {p}")
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data, p.parent)
