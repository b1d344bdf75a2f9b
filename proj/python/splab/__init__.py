"""Python access to the splab diffusion lab."""

from ._core import (
    ConfigError,
    ContractError,
    DimensionError,
    Experiment,
    Model,
    NoiseSchedule,
    NumericalError,
    canonical_config,
    cfg_combine,
    cfg_rescale,
    compute_metrics,
    config_hash,
    ddim_step,
    energy_distance,
    forward_diffuse,
    generate_dataset,
    load_model,
    mmd_rbf,
    mse_midpoint,
    posterior_optimal_v,
    timestep_grid,
    v_target,
    v_to_eps,
    v_to_x0,
)

__all__ = [name for name in dir() if not name.startswith("_")]
