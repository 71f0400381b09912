# %% [markdown]
# # From a waveform to MFCC frames
#
# One second of 16 kHz audio is cut into 40 ms windows. The hop is 20 ms or
# 40 ms depending on the model, and each window becomes a handful of cepstral
# coefficients.

# %%
import numpy as np

from tinykws.features import FeatureParams, extract_mfcc, frame_count, mel_filterbank

rng = np.random.default_rng(0)
t = np.arange(16000) / 16000
clip = 0.3 * np.sin(2 * np.pi * 440 * t) * np.hanning(16000) + 0.01 * rng.standard_normal(16000)

# %%
for stride in (20, 40):
    print(f"stride {stride} ms -> {frame_count(1000, 40, stride)} frames")

# %% [markdown]
# The default configuration keeps 40 coefficients at a 20 ms hop, giving 49 x 40 = 1960 features.
# Most of the shipped models use 10 coefficients instead.

# %%
full = extract_mfcc(clip)
small = extract_mfcc(clip, FeatureParams(num_mfcc=10, frame_stride_ms=40))
print(full.shape, full.size, small.shape)

# %%
fb = mel_filterbank(40, 1024, 16000, 20.0, 8000.0)
print("filters:", fb.shape, "peak per filter:", fb.max(axis=1)[:4].round(3))
print("first frame, first 5 coefficients:", full[0, :5].round(2))
