"""Spectral signatures of workloads seen through the power sensor.

Each 40 ms window of the 50 kS/s power stream becomes a 2048-bin PSD.  Peaks
standing out of the noise floor, harmonic combs and the duty cycle of periodic
routines are read from it, and a nearest-centroid model separates workloads.

    python demos/spectral_signatures.py
"""

from collections import Counter

import numpy as np

from digmon.chain import simulate_power
from digmon.scenario import get_scenario
from digmon.spectral import CORPUS_CLASSES
from digmon.spectral.centroid import classify_many, train_centroids
from digmon.spectral.peaks import detect_peaks, estimate_duty, extract_signature, harmonic_amplitudes
from digmon.spectral.psd import WINDOW_SECONDS, psd_windows


def windows(name, n, seed, n_average=1):
    p = simulate_power(get_scenario(name), n * n_average * WINDOW_SECONDS, seed=seed)
    return psd_windows(p, n_average=n_average)


print("main peaks per window (mode over 20 windows)")
for name in ("idle", "mem_bound", "cpu_bound", "qe_like"):
    counts = Counter(len(detect_peaks(w)) for w in windows(name, 20, 1))
    top = windows(name, 1, 2)[0]
    freqs = ", ".join(f"{pk.frequency:.0f}" for pk in detect_peaks(top))
    print(f"  {name:<10} {counts.most_common(1)[0][0]:>3}   [{freqs}] Hz")

# the kernel's 1 kHz tick is a pulse train: a comb of harmonics up to ~11 kHz
sig = extract_signature(windows("static_tick", 1, 3)[0])
for c in sig.combs:
    print(f"\nstatic tick comb: f0 = {c.f0:.1f} Hz, {c.n_harmonics} harmonics {list(c.harmonics)}")

# duty cycle from harmonic magnitudes, |sin(pi k d)|/k
for name in ("duty50_100hz", "duty20_100hz"):
    (w,) = windows(name, 1, 4, n_average=10)
    a = harmonic_amplitudes(w, 100.0)
    db = 20 * np.log10(a / a[0])
    print(f"\n{name}: duty estimate {estimate_duty(a):.3f}")
    print("  harmonic level re fundamental [dB]: " + " ".join(f"{x:6.1f}" for x in db))

# nearest-centroid classification over the corpus
train = {c: windows(c, 30, 10 + i) for i, c in enumerate(CORPUS_CLASSES)}
model = train_centroids(train)
print("\nheld-out accuracy per class (50 windows each)")
for i, c in enumerate(CORPUS_CLASSES):
    got = classify_many(windows(c, 50, 100 + i), model)
    print(f"  {c:<18} {np.mean([g == c for g in got]):6.1%}")
