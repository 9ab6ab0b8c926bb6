"""Flat key-value config files with an `include` directive.

One namespace covers the simulator constants, PPO hyperparameters, network
architecture, and extraction settings; unknown keys are rejected with the
full offending list.  See configs/defaults.cfg for the documented defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .neural import GridSpec
from .ppo import PpoConfig
from .simnet import SimParams
from .symbolic import AffineSearch, DistillConfig

_SIM_KEYS = {f.name for f in dataclasses.fields(SimParams)}
_PPO_KEYS = {f.name for f in dataclasses.fields(PpoConfig)}
_GRID_KEYS = {"grid_lo": "lo", "grid_hi": "hi", "grid_intervals": "intervals",
              "spline_order": "spline_order"}
_NET_KEYS = {"mlp_hidden", "init_log_std", "spline_init_std", "w_base_init",
             "w_spline_init"}
_EXTRACT_KEYS = {
    "importance_threshold", "state_source", "extract_episodes",
    "distill_samples", "population", "generations", "tournament", "max_depth",
    "complexity_penalty", "finetune_steps", "finetune_eval_episodes",
    "affine_a_min", "affine_a_max", "affine_a_steps",
    "affine_b_min", "affine_b_max", "affine_b_steps",
}

KNOWN_KEYS = (_SIM_KEYS | _PPO_KEYS | set(_GRID_KEYS) | _NET_KEYS
              | _EXTRACT_KEYS)

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Read `key = value` lines; `include FILE` pulls in defaults first."""
    return _parse(Path(path), seen=set())


def _parse(path: Path, seen: set) -> dict[str, str]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"config include cycle at {path}")
    seen.add(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include"):
            target = line[len("include"):].strip()
            if not target:
                raise ConfigError(f"{path}:{lineno}: include needs a path")
            out.update(_parse(path.parent / target, seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class Settings:
    """Typed access to a parsed config mapping, with dataclass defaults."""

    def __init__(self, raw: dict[str, str] | None = None):
        self.raw = dict(raw or {})
        unknown = sorted(set(self.raw) - KNOWN_KEYS)
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))

    @classmethod
    def load(cls, path: str | Path | None) -> "Settings":
        if path is None:
            return cls({})
        return cls(parse_kv_file(path))

    # -- typed getters ------------------------------------------------------

    def _get(self, key: str, default):
        if key not in self.raw:
            return default
        text = self.raw[key]
        try:
            if isinstance(default, bool):
                word = text.lower()
                if word not in _BOOL_WORDS:
                    raise ValueError(text)
                return _BOOL_WORDS[word]
            if isinstance(default, int):
                return int(float(text)) if "e" in text.lower() else int(text)
            if isinstance(default, float):
                return float(text)
            return text
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc

    # -- section builders ---------------------------------------------------

    def sim_params(self) -> SimParams:
        defaults = SimParams()
        kwargs = {
            f.name: self._get(f.name, getattr(defaults, f.name))
            for f in dataclasses.fields(SimParams)
        }
        params = SimParams(**kwargs)
        params.validate()
        return params

    def ppo_config(self, **overrides) -> PpoConfig:
        defaults = PpoConfig()
        kwargs = {
            f.name: self._get(f.name, getattr(defaults, f.name))
            for f in dataclasses.fields(PpoConfig)
        }
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        config = PpoConfig(**kwargs)
        config.validate()
        return config

    def grid_spec(self) -> GridSpec:
        defaults = GridSpec()
        kwargs = {
            attr: self._get(key, getattr(defaults, attr))
            for key, attr in _GRID_KEYS.items()
        }
        return GridSpec(**kwargs)

    def mlp_hidden(self) -> tuple[int, ...]:
        text = self.raw.get("mlp_hidden", "64,64")
        try:
            sizes = tuple(int(part) for part in text.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"bad mlp_hidden: {text!r}") from exc
        if not sizes or any(s < 1 for s in sizes):
            raise ConfigError(f"bad mlp_hidden: {text!r}")
        return sizes

    def init_log_std(self) -> float:
        return self._get("init_log_std", 0.0)

    def spline_init_std(self) -> float:
        return self._get("spline_init_std", 0.1)

    def w_base_init(self) -> float:
        return self._get("w_base_init", 1.0)

    def w_spline_init(self) -> float:
        return self._get("w_spline_init", 1.0)

    def affine_search(self) -> AffineSearch:
        defaults = AffineSearch()
        return AffineSearch(
            a_min=self._get("affine_a_min", defaults.a_min),
            a_max=self._get("affine_a_max", defaults.a_max),
            a_steps=self._get("affine_a_steps", defaults.a_steps),
            b_min=self._get("affine_b_min", defaults.b_min),
            b_max=self._get("affine_b_max", defaults.b_max),
            b_steps=self._get("affine_b_steps", defaults.b_steps),
        )

    def distill_config(self, seed: int) -> DistillConfig:
        config = DistillConfig(
            dataset_size=self._get("distill_samples", 2000),
            population=self._get("population", 500),
            generations=self._get("generations", 60),
            tournament=self._get("tournament", 5),
            max_depth=self._get("max_depth", 6),
            penalty=self._get("complexity_penalty", 1e-3),
            seed=seed,
        )
        config.validate()
        return config

    def importance_threshold(self) -> float:
        return self._get("importance_threshold", 0.05)

    def state_source(self) -> str:
        source = self._get("state_source", "visited")
        if source not in ("visited", "grid"):
            raise ConfigError(f"state_source must be 'visited' or 'grid', "
                              f"got {source!r}")
        return source

    def extract_episodes(self) -> int:
        return self._get("extract_episodes", 20)

    def finetune_steps(self) -> int:
        return self._get("finetune_steps", 20_000)

    def finetune_eval_episodes(self) -> int:
        return self._get("finetune_eval_episodes", 20)
