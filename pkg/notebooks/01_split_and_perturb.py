# %% [markdown]
# Split inference with a perturbed feature map
#
# A classifier is cut after its first convolution block.  The client runs
# that block, clips the feature map to a bound B in the infinity norm and
# adds Laplace noise of scale 2B/epsilon before anything leaves the device.
# The cloud runs the rest.

# %%
import numpy as np

from splitdp import (PrivacyParams, TrainConfig, build_model, clip, estimate_bound, evaluate,
                     forward_local, forward_remote, noisy_finetune, perturb, synthetic_dataset,
                     train_baseline)
from splitdp.splitnet import ArchitectureSpec

train, test = synthetic_dataset(1500, 400, seed=0)
spec = ArchitectureSpec.from_widths((8, 8, 16, 16, 32, 32))  # narrow, for a laptop CPU
model = build_model(spec, case=1, seed=0).freeze_local()
print("feature map shape:", model.feature_shape)

# %% [markdown]
# The client weights stay frozen; only the cloud part is trained.

# %%
baseline = train_baseline(model, train, TrainConfig(learning_rate=2e-3, batch_size=64, epochs=4))
print("clean accuracy: %.1f%%" % evaluate(baseline, test, runs=1).accuracy)

# %% [markdown]
# B is the median infinity norm of the feature maps of 100 training images.

# %%
bound = estimate_bound(baseline, train.images[:100]).bound
fm = forward_local(baseline, test.images[0])
print("B = %.4f, this map's inf-norm %.4f, after clipping %.4f"
      % (bound, np.abs(fm).max(), np.abs(clip(fm, bound)).max()))

for eps in (1.0, 100.0):
    noisy = perturb(fm, PrivacyParams(eps, bound), seed=1)
    print("eps=%-6g noise std %.4f, predicted class %d (label %d)"
          % (eps, np.std(noisy - clip(fm, bound)), forward_remote(baseline, noisy).argmax(),
             test.labels[0]))

# %% [markdown]
# The cloud part can adapt to the noise: fine-tune on plain and perturbed maps.

# %%
for eps in (10.0, 100.0):
    p = PrivacyParams(eps, bound)
    before = evaluate(baseline, test, p, runs=3).accuracy
    tuned = noisy_finetune(baseline, train, TrainConfig(learning_rate=1e-3, batch_size=64,
                                                        epochs=2, noisy=True, noise_params=p))
    print("eps=%-5g accuracy %.1f%% before fine-tuning, %.1f%% after"
          % (eps, before, evaluate(tuned, test, p, runs=3).accuracy))
