"""Build the frozen sensor-network library and long-run reference mean used by the acceptance suite.

Usage: python scripts/sensor_reference.py [out_dir]
"""

import json
import sys
import time
from pathlib import Path

import numpy as np

from whmc.metrics import library_occupancy, reference_mean_longrun
from whmc.modesearch import laplace_weights, optimizer_library
from whmc.samplers import SamplerConfig
from whmc.targets import generate_sensor_data

SEED = 24
STEP, N_LEAPFROG = 0.012, 25
N_STARTS, MIN_WEIGHT = 100, 1e-3
N_ITER, N_CHAINS, CHAIN_SEED = 100_000, 8, 2024


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target, truth = generate_sensor_data(SEED)
    rng = np.random.default_rng(0)
    starts = rng.uniform(0.0, 1.0, (N_STARTS, target.dim))
    lib = optimizer_library(target, starts, max_iter=2000, min_weight=MIN_WEIGHT)
    lib.save(out / "sensor_library.json")
    print("modes", len(lib), laplace_weights(target, lib).round(4), flush=True)
    config = SamplerConfig(step_size=STEP, n_leapfrog=N_LEAPFROG, variant="whmc_aug")
    t0 = time.time()
    mean, info = reference_mean_longrun(target, lib, CHAIN_SEED, n_iter=N_ITER, n_chains=N_CHAINS, config=config,
                                        return_samples=True)
    samples = info.pop("samples")
    info.update(
        mean=mean.tolist(),
        target_seed=SEED,
        library_starts={"n": N_STARTS, "box": [0.0, 1.0], "rng_seed": 0, "min_weight": MIN_WEIGHT},
        occupancy=library_occupancy(samples, lib).tolist(),
        elapsed_seconds=time.time() - t0,
        truth=truth.ravel().tolist(),
    )
    (out / "sensor_reference.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    print(json.dumps({k: info[k] for k in ("occupancy", "elapsed_seconds")}))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
