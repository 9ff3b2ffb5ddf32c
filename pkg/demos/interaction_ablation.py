"""Two-lane ADMM runs with the interactive and the constant-velocity predictor."""
import numpy as np

from admm_nnmpc import sim

base = sim.builtin_config("two_lane")
for label, cfg in (("interactive", base),
                   ("constant velocity", base.with_predictor({"kind": "constant_velocity"}))):
    res = sim.run(cfg, "admm")
    s = res.log.summary()
    print(f"{label:>18}: {s['outcome']:<8} t_merge={s['t_merge']} d_min={s['d_min']:.2f}")
    if label == "interactive":
        xs = np.array([r.vehicles[:, 0] for r in res.log.records])
        v = np.diff(xs, axis=0) / cfg.model.dt
        print(f"{'':>18}  slowest target-lane vehicle speed {v.min():.2f} m/s "
              f"(initial {cfg.vehicles[0].v:.1f})")
