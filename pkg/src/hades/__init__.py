"""Diffusion-model-driven evolutionary optimization (HADES / CHARLES-D).

A population is evolved by training a small denoising diffusion model on a
fitness-weighted buffer of past genomes and sampling the next generation from
it, optionally steered toward target traits via classifier-free guidance.
"""

from .baselines import CmaConfig, SimpleGaConfig, run_cmaes, run_simplega
from .conditioning import (CompositeScheme, ConditionSchedule, ConditionScheme,
                           FitnessScheme, NoveltyScheme,
                           PhenotypeCartpoleScheme, QuadrantScheme)
from .diffusion import (DenoiserNet, GuidanceConfig, NoiseSchedule,
                        SamplerConfig, ddim_sample, dm_train, load_denoiser,
                        partial_denoise, save_denoiser, schedule_cosine)
from .evolution import (DatasetBuffer, EvoConfig, Individual, RunHistory,
                        RunRecord, run_evolution)
from .harness import (aggregate, load_config, load_recipe, normalize_config,
                      recipe_names, run_experiment)
from .tasks import (DoublePeakParams, DoublePeakTask, RastriginParams,
                    RastriginTask)
from .cartpole import CartPoleParams, CartPoleTask, agent_spec

__version__ = "0.1.0"
