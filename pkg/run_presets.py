#!/usr/bin/env python3
"""
Experiment Preset Manager
Named experiment configurations for the common comparisons and sweeps
"""
from typing import Dict, List

# Fixed cost durations keep virtual-time presets byte-reproducible
_FIXED_COSTS = {"epoch_duration": 0.5, "grad_step_duration": 0.05}

_PENDULUM = {"env": "pendulum", "max_trajectories": 200, "seeds": "0, 1, 2, 3"}

EXPERIMENT_PRESETS = {
    "pendulum_sync": {
        "name": "Pendulum Synchronous",
        "description": "Sequential collect / fit / improve baseline on pendulum swing-up",
        "sections": {
            "run": {**_PENDULUM, "mode": "sync"},
            "ablation": {"n": 2, "g": 40},
            "cost": _FIXED_COSTS,
        },
    },

    "pendulum_async": {
        "name": "Pendulum Asynchronous (virtual time)",
        "description": "Three concurrent workers under the deterministic scheduler",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual"},
            "cost": _FIXED_COSTS,
        },
    },

    "pendulum_compare": {
        "name": "Pendulum Async vs Sync",
        "description": "Asynchronous and synchronous runs on shared seeds, with the comparison table",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual", "compare_mode": "sync"},
            "ablation": {"n": 2, "g": 40},
            "cost": _FIXED_COSTS,
        },
    },

    "pendulum_model_free": {
        "name": "Pendulum Model-Free PPO",
        "description": "PPO on real rollouts only, for the sample-complexity reference",
        "sections": {
            "run": {**_PENDULUM, "mode": "model_free"},
            "ablation": {"n": 4, "g": 10},
            "cost": _FIXED_COSTS,
        },
    },

    "pointmass_realtime": {
        "name": "Point Mass Real-Time",
        "description": "Paced collection at dt = 0.01 s; run time should track collection time",
        "sections": {
            "run": {"env": "point_mass", "mode": "async_realtime", "max_trajectories": 10, "seeds": "0"},
            "env": {"dt": 0.01, "horizon": 200},
            "eval": {"every": 5, "episodes": 2},
        },
    },

    "ema_sweep_off": {
        "name": "Early Stopping Off",
        "description": "Model trained without early stopping (capped epochs per iteration)",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual"},
            "ensemble": {"early_stopping": "false"},
            "cost": _FIXED_COSTS,
        },
    },

    "ema_sweep_06": {
        "name": "Early Stopping beta 0.6",
        "description": "EMA early stopping with beta_ema = 0.6",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual"},
            "ensemble": {"beta_ema": 0.6},
            "cost": _FIXED_COSTS,
        },
    },

    "ema_sweep_09": {
        "name": "Early Stopping beta 0.9",
        "description": "EMA early stopping with beta_ema = 0.9",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual"},
            "ensemble": {"beta_ema": 0.9},
            "cost": _FIXED_COSTS,
        },
    },

    "speed_sweep_05": {
        "name": "Half Sampling Speed",
        "description": "Data collection at half the nominal speed",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual", "speed_multiplier": 0.5},
            "cost": _FIXED_COSTS,
        },
    },

    "speed_sweep_1": {
        "name": "Nominal Sampling Speed",
        "description": "Data collection at the nominal speed",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual", "speed_multiplier": 1.0},
            "cost": _FIXED_COSTS,
        },
    },

    "speed_sweep_2": {
        "name": "Double Sampling Speed",
        "description": "Data collection at twice the nominal speed",
        "sections": {
            "run": {**_PENDULUM, "mode": "async_virtual", "speed_multiplier": 2.0},
            "cost": _FIXED_COSTS,
        },
    },

    "partial_model_policy": {
        "name": "Partial Async: Model / Policy",
        "description": "Collect N rollouts, then alternate E model epochs with G policy steps",
        "sections": {
            "run": {"env": "point_mass", "mode": "partial_model_policy", "max_trajectories": 60,
                    "seeds": "0, 1", "max_epochs_per_iteration": 30},
            "ablation": {"n": 2, "e": 5, "g": 10},
            "cost": _FIXED_COSTS,
        },
    },

    "partial_policy_data": {
        "name": "Partial Async: Policy / Data",
        "description": "Fit the model, then N times take G policy steps and collect one rollout",
        "sections": {
            "run": {"env": "point_mass", "mode": "partial_policy_data", "max_trajectories": 60,
                    "seeds": "0, 1", "max_epochs_per_iteration": 30},
            "ablation": {"n": 2, "g": 20},
            "cost": _FIXED_COSTS,
        },
    },

    "reacher_async": {
        "name": "Reacher Asynchronous",
        "description": "Two-link reacher with the Lorentzian distance reward",
        "sections": {
            "run": {"env": "reacher", "mode": "async_virtual", "max_trajectories": 150, "seeds": "0, 1"},
            "cost": _FIXED_COSTS,
        },
    },
}


def get_preset_config(preset_name: str) -> str:
    """Render a preset as experiment config text"""
    if preset_name not in EXPERIMENT_PRESETS:
        raise ValueError(
            f"Preset '{preset_name}' not found. Available: {list(EXPERIMENT_PRESETS.keys())}")

    lines = []
    for section, values in EXPERIMENT_PRESETS[preset_name]["sections"].items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def list_presets() -> List[Dict[str, str]]:
    """List all available presets"""
    return [
        {"preset": key, "name": preset["name"], "description": preset["description"]}
        for key, preset in EXPERIMENT_PRESETS.items()
    ]


def main():
    print("Available experiment presets:")
    print("=" * 50)
    for entry in list_presets():
        print(f"\n{entry['preset']}")
        print(f"   Name: {entry['name']}")
        print(f"   Description: {entry['description']}")


if __name__ == "__main__":
    main()
