"""
From a waveform to 440-dim network inputs
=========================================

A two-tone test signal goes through framing, the mel filterbank, the log,
context stacking and normalization. Run with ``python3 demos/01_log_mel_features.py``.
"""

# %%
# A one-second 16 kHz signal: a 440 Hz tone plus a quieter 3 kHz tone.
import numpy as np

from hieracoustic.features import (
    FramingConfig,
    MelFeatureSequence,
    PcmSignal,
    build_mel_filterbank,
    compute_norm_stats,
    extract_log_mel,
    normalize,
    stack_context,
)

sr = 16000
t = np.arange(sr) / sr
x = 0.5 * np.sin(2 * np.pi * 440 * t) + 0.05 * np.sin(2 * np.pi * 3000 * t)
signal = PcmSignal(x, sr)

# %%
# 40 ms Hamming frames with a 20 ms hop and a 1024-point FFT give
# 49 frames per second.
cfg = FramingConfig()
fb = build_mel_filterbank(cfg)
print("filters:", fb.filters.shape, "first centres (Hz):", np.round(fb.center_freqs_hz[:4], 1))

feats = extract_log_mel(signal, cfg, fb)
print("log-mel frames:", feats.frames.shape)

# %%
# The loudest band sits near 440 Hz. The weaker tone shows up as a local
# peak in the band closest to 3 kHz.
mean_energy = feats.frames.mean(axis=0)
print("strongest band centred at %.0f Hz" % fb.center_freqs_hz[np.argmax(mean_energy)])
k = int(np.argmin(np.abs(fb.center_freqs_hz - 3000)))
print("around 3 kHz:", np.round(mean_energy[k - 2 : k + 3], 1))

# %%
# Eleven neighbouring frames are concatenated, repeating the edge frame at
# the boundaries, then each dimension is standardized.
ctx = stack_context(MelFeatureSequence(feats.frames, "demo"))
print("stacked:", ctx.vectors.shape)

stats = compute_norm_stats(ctx.vectors)
z = normalize(ctx.vectors, stats)
print("after normalization: mean %.2e, std %.3f" % (z.mean(), z.std()))
