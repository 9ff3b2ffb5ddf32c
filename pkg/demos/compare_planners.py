"""Run both planners on the builtin scenarios and print the metric table."""
import sys

from admm_nnmpc import cli, sim

scenarios = sys.argv[1:] or list(sim.BUILTIN_CONFIGS)
for name in scenarios:
    cfg = sim.builtin_config(name)
    rows = [sim.run(cfg, p).log.summary() for p in ("admm", "baseline")]
    print(f"\n{name}")
    print(cli.format_table(rows))
