"""Desk-scale scenario and model presets shared by the CLI, scripts and tests."""

from __future__ import annotations

from .forecaster.model import ModelConfig
from .gridcore import GridSpec
from .synthgen import FAMILIES, ScenarioConfig, generate_scenario, scenario_trajectory

# 128 cells at 0.25 m: a 32 m square that the 64-side micro model sees at 0.5 m
MICRO_GRID = GridSpec(128, 0.25)


def micro_scenario_config(family: str = "straight", lane_side: str = "right", **kw) -> ScenarioConfig:
    """Matched ego and target speeds so the target stays on a 32 m grid for 4 s."""
    base = dict(
        family=family,
        lane_side=lane_side,
        duration_range_s=(3.5, 4.0),
        speed_range_mps=(8.5, 9.5),
        ego_speed_range_mps=(8.5, 9.5),
        gap_range_m=(8.0, 14.0),
        turn_radius_range_m=(15.0, 25.0),
        grid=MICRO_GRID,
    )
    base.update(kw)
    return ScenarioConfig(**base)


def micro_scenarios(n: int, seed: int = 0, lane_side: str = "right", families=FAMILIES, **kw):
    """``n`` scenarios cycling through ``families``; scenario k uses seed ``seed + k``."""
    return [generate_scenario(micro_scenario_config(families[k % len(families)], lane_side, **kw), seed + k) for k in range(n)]


def micro_trajectories(n: int, seed: int = 0, lane_side: str = "right", families=FAMILIES, **kw):
    return [scenario_trajectory(s) for s in micro_scenarios(n, seed, lane_side, families, **kw)]


def micro_model_config(variant: str = "infer-skip", **kw) -> ModelConfig:
    return ModelConfig.micro(variant, 64, **kw)
