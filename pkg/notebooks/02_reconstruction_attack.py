# %% [markdown]
# Reconstructing the input from what the cloud receives
#
# The cloud knows the client weights.  Starting from a random image it runs
# gradient descent on ||f(x) - target||^2 + lambda * TV(x), where target is
# the feature map it was sent.  More noise makes the target less
# informative, and the reconstruction degrades.

# %%
import numpy as np

from splitdp import (AttackConfig, PrivacyParams, attack_batch, build_model, estimate_bound,
                     export_grid, synthetic_dataset)
from splitdp.splitnet import ArchitectureSpec

train, test = synthetic_dataset(200, 50, seed=1)
model = build_model(ArchitectureSpec.from_widths((8, 8, 16, 16, 32, 32)), case=1,
                    seed=0).freeze_local()
bound = estimate_bound(model, train.images[:100]).bound
images = test.images[:6].astype(np.float64)

# %% [markdown]
# Pixels are on the 0-255 scale and the network divides by 255 internally,
# so useful step sizes are in the hundreds to thousands.

# %%
cfg = AttackConfig(max_iters=400, step_size=1000.0, tv_weight=0.0, seed=3)
columns, labels = [], []
for eps in (1.0, 10.0, 100.0, 1000.0, None):
    privacy = None if eps is None else PrivacyParams(eps, bound)
    out = attack_batch(model, images, privacy, cfg)
    columns.append(np.stack([o.reconstructed for o in out]))
    labels.append("clean" if eps is None else f"{eps:g}")
    print("eps=%-6s mean SSIM %.3f  mean MSE %8.1f  mean PSNR %5.2f dB" % (
        labels[-1], np.mean([o.metrics.ssim for o in out]),
        np.mean([o.metrics.mse for o in out]), np.mean([o.metrics.psnr for o in out])))

# %% [markdown]
# Originals in the first column, then one column per budget.

# %%
path = export_grid(images, np.stack(columns, axis=1), labels, "attack_grid.png", zoom=3)
print("wrote", path)
