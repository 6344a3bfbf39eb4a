"""Command-line front end: run experiments, aggregate results, sample models.

Exit codes: 0 on success, 1 for configuration errors, 2 for runtime errors.
"""

import argparse
import csv
import json
import sys

import numpy as np

from . import diffusion, harness
from .errors import ConfigError, UsageError


def _cmd_run(args):
    config = harness.load_config(args.config)
    results = harness.run_experiment(config, out_dir=args.out,
                                     replicates=args.replicates,
                                     base_seed=args.seed,
                                     workers=args.workers)
    print(f"wrote {len(results['replicates'])} replicate(s) to "
          f"{results['out_dir']}")
    for rep, trace in results["failures"]:
        print(f"replicate {rep} failed:\n{trace}", file=sys.stderr)
    return 2 if results["failures"] else 0


def _cmd_aggregate(args):
    doc = harness.aggregate(args.run_dir)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _cmd_sample(args):
    model, schedule, sigma_init = diffusion.load_denoiser(args.snapshot)
    condition = None
    if args.condition is not None:
        condition = np.array([float(v) for v in args.condition.split(",")])
    sampler = diffusion.SamplerConfig(sigma_init=sigma_init)
    guidance = diffusion.GuidanceConfig(guidance_weight=args.guidance_weight)
    rng = np.random.default_rng(args.seed)
    samples = diffusion.ddim_sample(model, schedule, sampler, args.n, rng,
                                    condition=condition, guidance=guidance)
    writer = csv.writer(sys.stdout)
    writer.writerow([f"g{i}" for i in range(samples.shape[1])])
    for row in samples:
        writer.writerow([repr(float(v)) for v in row])
    return 0


def _cmd_list_recipes(args):
    for name in harness.recipe_names():
        config = harness.load_recipe(name)
        print(f"{name}: {config['description'].strip()}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hades",
        description="Diffusion-model-driven evolutionary optimization runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a config file or shipped recipe")
    p_run.add_argument("config", help="path to a YAML/JSON config, or a recipe name")
    p_run.add_argument("--replicates", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--workers", type=int, default=1,
                       help="run replicates concurrently")
    p_run.set_defaults(fn=_cmd_run)

    p_agg = sub.add_parser("aggregate", help="summarize a run directory")
    p_agg.add_argument("run_dir")
    p_agg.set_defaults(fn=_cmd_aggregate)

    p_sample = sub.add_parser("sample",
                              help="sample genomes from a model snapshot")
    p_sample.add_argument("snapshot")
    p_sample.add_argument("--condition", default=None,
                          help="comma-separated target condition vector")
    p_sample.add_argument("-n", type=int, default=16)
    p_sample.add_argument("--guidance-weight", type=float, default=0.0)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.set_defaults(fn=_cmd_sample)

    p_list = sub.add_parser("list-recipes", help="list shipped recipes")
    p_list.set_defaults(fn=_cmd_list_recipes)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception:
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
