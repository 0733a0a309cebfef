"""Why several planner workers pay off.

Each worker spends T seconds planning and then H steps of t seconds under
policy control.  One worker delivers H / (T + tH) frames per second.  With
enough workers the policy is never idle and the rate approaches 1 / t.
"""

# %%
import math

from spire.scheduler import ThroughputParams, measure_throughput, predict_throughput

t, H = 0.01, 50
for T in (0.5, 2.0):
    pred = predict_throughput(ThroughputParams(T, t, H))
    n = pred["workers_needed_blocking"]
    window = 4 * (T + t * H)
    single = measure_throughput(1, T, t, H, seconds=window)["fps"]
    multi = measure_throughput(n, T, t, H, seconds=window)["fps"]
    print(f"k={pred['k']:g}: single {single:.1f} fps (law {pred['single_fps_upper_bound']:.1f}), "
          f"{n} workers {multi:.1f} fps (ceiling {1 / t:.0f}), speedup {multi / single:.2f} vs {pred['speedup']:g}")

# %%
# A worker is busy while the policy steps it, so ceil(k) workers fall short.
T = 2.0
k = T / (t * H)
print("ceil(k) workers:", measure_throughput(math.ceil(k), T, t, H, seconds=10.0)["fps"], "fps")
