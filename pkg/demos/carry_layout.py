"""A person and the robot carry a table to a target layout, then the robot pushes chairs.

Compares placement accuracy and task duration with and without the
anticipatory carrying controller.
"""
import sys

from anticipate.experiment import run

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
print("seed  cond  trans err (m)  angle err (deg)  duration (s)")
for seed in seeds:
    for anticipation in (True, False):
        r = run("carry_layout", seed, anticipation)
        print(f"{seed:>4}  {'on' if anticipation else 'off':<4}  {r.mean_translation_error:>13.3f}  "
              f"{r.mean_angular_error_deg:>15.2f}  {r.duration:>12.1f}")
