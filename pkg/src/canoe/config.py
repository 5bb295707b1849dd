"""Run configuration: one JSON file describing paths, hyperparameters, backends and seeds.

Relative paths resolve against the config file's directory. Seeds have no
defaults; a config without all of them is rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .grpo import TOY_LEARNING_RATE, GrpoConfig
from .synthesizer import MixRecipe, SynthesisConfig

REQUIRED_SEEDS = ("synthesis", "rollout", "training", "evaluation")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    triples: str = "triples.tsv"
    dataset: str = "out/dataset.jsonl"
    rollouts: str = "out/rollouts.jsonl"
    rewards: str = "out/rewards.jsonl"
    train_dir: str = "out/train"
    eval_tasks: str = "eval_tasks.jsonl"
    eval_records: str = "out/eval_records.jsonl"
    reports: str = "out/report"


@dataclass
class ClientSettings:
    backend: str = "mock"
    base_url: str | None = None
    model: str = "policy"
    max_in_flight: int = 8
    timeout: float = 60.0
    max_retries: int = 3
    mock_seed: int = 0
    format_error_rate: float = 0.25
    rollout_temperature: float = 0.9
    eval_temperature: float = 0.7
    max_prompt_tokens: int = 1024
    max_tokens: int = 1024

    def __post_init__(self):
        if self.backend not in ("mock", "openai"):
            raise ConfigError(f"unknown backend {self.backend!r} (expected 'mock' or 'openai')")


@dataclass
class RolloutSettings:
    limit: int | None = 50
    workers: int = 1


@dataclass
class RewardSettings:
    # re-ask the proxy question under a plain QA system prompt instead of the tagged one
    proxy_plain_prompt: bool = False


@dataclass
class ToySettings:
    env: str = "bandit"
    steps: int = 500
    learning_rate: float = TOY_LEARNING_RATE
    inner_epochs: int = 2
    n_states: int = 8
    grad_check_every: int = 10
    beta: float | None = None

    def __post_init__(self):
        if self.env not in ("bandit", "dataset"):
            raise ConfigError(f"unknown toy env {self.env!r} (expected 'bandit' or 'dataset')")


def _build(cls, data: Mapping[str, Any] | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


@dataclass
class RunConfig:
    seeds: dict[str, int]
    paths: Paths = field(default_factory=Paths)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    recipe: MixRecipe = field(default_factory=MixRecipe)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    client: ClientSettings = field(default_factory=ClientSettings)
    rollout: RolloutSettings = field(default_factory=RolloutSettings)
    rewards: RewardSettings = field(default_factory=RewardSettings)
    toy: ToySettings = field(default_factory=ToySettings)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def __post_init__(self):
        missing = [k for k in REQUIRED_SEEDS if k not in self.seeds]
        if missing:
            raise ConfigError(f"seeds must be explicit; missing: {', '.join(missing)}")
        for k, v in self.seeds.items():
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"seed {k!r} must be an integer")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        data = dict(data)
        known = {"seeds", "paths", "grpo", "recipe", "synthesis", "client", "rollout", "rewards", "toy"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        if "seeds" not in data:
            raise ConfigError("config needs a [seeds] section with explicit seeds")
        synth = dict(data.get("synthesis") or {})
        if "distractor_counts" in synth:
            synth["distractor_counts"] = tuple(synth["distractor_counts"])
        return cls(
            seeds=dict(data["seeds"]),
            paths=_build(Paths, data.get("paths"), "paths"),
            grpo=_build(GrpoConfig, data.get("grpo"), "grpo"),
            recipe=_build(MixRecipe, data.get("recipe"), "recipe"),
            synthesis=_build(SynthesisConfig, synth, "synthesis"),
            client=_build(ClientSettings, data.get("client"), "client"),
            rollout=_build(RolloutSettings, data.get("rollout"), "rollout"),
            rewards=_build(RewardSettings, data.get("rewards"), "rewards"),
            toy=_build(ToySettings, data.get("toy"), "toy"),
            base_dir=Path(base_dir).resolve(),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "seeds": dict(sorted(self.seeds.items())),
            "paths": asdict(self.paths),
            "grpo": asdict(self.grpo),
            "recipe": asdict(self.recipe),
            "synthesis": asdict(self.synthesis),
            "client": asdict(self.client),
            "rollout": asdict(self.rollout),
            "rewards": asdict(self.rewards),
            "toy": asdict(self.toy),
        }
        out["synthesis"]["distractor_counts"] = list(self.synthesis.distractor_counts)
        return out

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p
