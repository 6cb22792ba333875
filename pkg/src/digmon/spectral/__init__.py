"""Spectral analytics on 40 ms power windows."""

from .centroid import CentroidModel, classify, classify_many, train_centroids
from .peaks import (Comb, Peak, Signature, detect_comb, detect_peaks, estimate_duty,
                    extract_signature, harmonic_amplitudes)
from .psd import N_BINS, NFFT, Psd, compute_psd, psd_windows
from .record import RECORD_SIZE, deserialize_record, serialize_record, serialize_spectrogram

CORPUS_CLASSES = (
    "idle",
    "mem_bound",
    "cpu_bound",
    "qe_like",
    "static_tick",
    "scan_phase_a",
    "scan_phase_b",
    "short_routine_9k",
)
