"""Run the three bundled oracles on the surge transient and print a table.

Usage: python demos/transient_comparison.py [steps]
"""

import os
import sys

import numpy as np

from lbmpc import cli, config, runtime


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
    rows = []
    for name in ("linear", "dnn", "l2nw"):
        path = os.path.join(cli.SCENARIO_DIR, name + ".ini")
        scenario = config.load_scenario(path)
        import dataclasses
        scenario = dataclasses.replace(
            scenario, run=dataclasses.replace(scenario.run, steps=steps))
        trace = runtime.run_closed_loop(scenario)
        rep = runtime.metrics(trace, np.diag(scenario.controller.q_diag),
                              np.array([[scenario.controller.r]]),
                              band=scenario.run.band)
        rows.append((name, rep))

    print("%-8s %10s %10s %8s %8s %10s" % (
        "oracle", "os_flow", "os_press", "settle", "rise", "med_ms"))
    for name, rep in rows:
        print("%-8s %10.4f %10.4f %8d %8d %10.3f" % (
            name, rep.overshoot_z, rep.overshoot_y, rep.settling_steps,
            rep.rise_steps, 1e3 * rep.solver_median))


if __name__ == "__main__":
    main()
