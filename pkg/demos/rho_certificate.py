"""Evaluate the penalty bound at the first planning step of a builtin scenario."""
import sys

from admm_nnmpc import admm, sim

cfg = sim.builtin_config(sys.argv[1] if len(sys.argv) > 1 else "two_lane")
cert = admm.rho_certificate(sim.initial_problem(cfg), cfg.admm)
for k, v in cert.as_dict().items():
    print(f"{k:>12}: {v}")
