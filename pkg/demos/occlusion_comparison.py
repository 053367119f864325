"""Robot crosses a corridor junction while a hidden person walks toward it.

With anticipation on, the robot plans around the person's predicted path as
reported by the ceiling sensors. With it off, the robot only reacts once its
own lidar sees the person.
"""
import sys

from anticipate.experiment import run

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
print("seed  min dist on  min dist off  deviation lead (s)")
for seed in seeds:
    on = run("occlusion_crossing", seed, True)
    off = run("occlusion_crossing", seed, False)
    lead = on.first_seen_time - on.deviation_time if on.deviation_time is not None else float("nan")
    print(f"{seed:>4}  {on.min_safety:>11.3f}  {off.min_safety:>12.3f}  {lead:>18.2f}")
