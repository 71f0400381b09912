# %% [markdown]
# # 8-bit weights and activations
#
# A small GRU gets random weights, is quantized against a calibration set and
# then run through the integer path. The float model serves as the reference.

# %%
import numpy as np

from tinykws import quant
from tinykws.kernels import init_weights
from tinykws.model import parse_model_dsl
from tinykws.quant import q_dequantize, quantize_model_progressive

print("N=7 covers", q_dequantize(np.array([-128, 127]), 7), "in steps of", q_dequantize(1, 7))
print("N=-2 covers", q_dequantize(np.array([-128, 127]), -2), "in steps of", q_dequantize(1, -2))

# %%
model = parse_model_dsl("GRU(16)", "GRU", (8, 10))
weights = init_weights(model, seed=4)
rng = np.random.default_rng(1004)
calibration = rng.uniform(-1, 1, (50, 8, 10))
result = quantize_model_progressive(model, weights, calibration)
print(result.table())

# %%
xs = rng.uniform(-1, 1, (1000, 8, 10))
f = quant.float_outputs(model, weights, xs).argmax(axis=1)
q = quant.quant_outputs(model, result.qweights, result.act_formats, xs).argmax(axis=1)
print(f"argmax agreement on 1000 inputs: {np.mean(f == q):.3f}")

# %% [markdown]
# ## Streaming
#
# The detector slides a one second window over longer audio in 100 ms hops and
# averages the recent posteriors.

# %%
from tinykws.model import builtin_model
from tinykws.runtime import Detector

gru = builtin_model("gru_s")
det = Detector(gru, init_weights(gru, 0))
audio = 0.1 * np.random.default_rng(2).standard_normal(3 * 16000)
for d in list(det.stream(audio))[:5]:
    print(d.start_ms, d.label, round(d.probability, 3))
