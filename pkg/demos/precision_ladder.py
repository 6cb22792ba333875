"""Precision ladder: how software averaging trades rate for precision.

A constant 180 W bench load goes through the simulated sensing hardware
(hall-effect sensor, 12-bit ADC at 800 kS/s, hardware average of 16) and the
calibrated 50 kS/s power stream is averaged down to 25 kS/s, 1 kS/s and 1 S/s.
White noise falls as 1/sqrt(M); the rate controller uses exactly that law to
pick the fastest rate meeting a precision target.

    python demos/precision_ladder.py
"""

import numpy as np

from digmon.calib import calibrate
from digmon.chain import SensingChain
from digmon.metrology import AveragingPolicy, estimate_noise, predicted_sigma, select_rate
from digmon.scenario import dummy_load

FS = 50_000
SECONDS = 40

model = calibrate(seed=1)
chain = SensingChain(dummy_load(180.0), seed=2)

# acquire in 10 s pieces so memory stays small
p_parts, first = [], None
for _ in range(SECONDS // 10):
    s = chain.samples(10 * FS, model)
    first = first or s
    p_parts.append(s.power)
p = np.concatenate(p_parts)

sigma_top = p[:10 * FS].std(ddof=1)
print(f"{'rate':>10} {'M':>7} {'sigma [W]':>11} {'sqrt(M) law':>12} {'CV':>9}")
for rate in (50_000, 25_000, 1_000, 1):
    m = FS // rate
    y = p[: p.size // m * m].reshape(-1, m).mean(axis=1)
    sig = y.std(ddof=1)
    print(f"{rate:>8} Hz {m:>7} {sig:>11.5f} {predicted_sigma(sigma_top, FS, rate):>12.5f} {sig / y.mean():>8.4%}")

# the controller reasons from the per-channel noise of one second of samples
est = estimate_noise(first.current[:FS], first.voltage[:FS], FS)
print(f"\nchannel noise: sigma_I {est.sigma_i:.4f} A, sigma_V {est.sigma_v:.5f} V -> sigma_P {est.sigma_p:.3f} W")
for target in (2.0, 0.5, 0.05, 0.005):
    sel = select_rate(est, AveragingPolicy(sigma_target=target))
    flag = "  (target not reachable)" if sel.precision_unmet else ""
    print(f"target {target:>6} W -> {sel.rate:>8g} Hz, predicted sigma {sel.predicted_sigma:.4f} W{flag}")
